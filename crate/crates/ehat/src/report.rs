//! Aligned result tables and jsonl metric records.

use ehat_core::metrics::{MetricRow, MetricTable};
use ehat_core::train::LogRecord;
use serde_json::{json, Value};

pub const METEOR_NOTE: &str =
    "M (METEOR) is not computed; Avg is the mean of the 8 reported metrics (B@1, B@4, R, C per language). Scores x100.";

fn cells(row: &MetricRow) -> Vec<String> {
    let v = row.values();
    vec![
        format!("{:.1}", 100.0 * v[0]),
        format!("{:.1}", 100.0 * v[1]),
        "-".to_string(),
        format!("{:.1}", 100.0 * v[2]),
        format!("{:.1}", 100.0 * v[3]),
    ]
}

/// A result table: a label column, optional extra columns, then both
/// languages' metrics and the average.
pub struct Table {
    pub label: String,
    pub extra: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(label: &str, extra: &[&str]) -> Self {
        Table {
            label: label.to_string(),
            extra: extra.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: &str, extra: &[String], t: &MetricTable) {
        assert_eq!(extra.len(), self.extra.len(), "extra column count");
        let mut r = vec![label.to_string()];
        r.extend(extra.iter().cloned());
        r.extend(cells(&t.lang_a));
        r.extend(cells(&t.lang_b));
        r.push(format!("{:.1}", 100.0 * t.average()));
        self.rows.push(r);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut head = vec![self.label.clone()];
        head.extend(self.extra.iter().cloned());
        for lang in ["A", "B"] {
            for m in ["B@1", "B@4", "M", "R", "C"] {
                head.push(format!("{lang}:{m}"));
            }
        }
        head.push("Avg".to_string());
        let mut width: Vec<usize> = head.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |r: &[String]| -> String {
            let mut s = String::new();
            for (i, (c, w)) in r.iter().zip(&width).enumerate() {
                if i == 0 {
                    s.push_str(&format!("{c:<w$}"));
                } else {
                    s.push_str(&format!("  {c:>w$}"));
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&head);
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out.push_str(METEOR_NOTE);
        out.push('\n');
        out
    }
}

pub fn row_json(r: &MetricRow) -> Value {
    json!({"bleu1": r.bleu1, "bleu4": r.bleu4, "rouge_l": r.rouge_l, "cider_d": r.cider_d})
}

pub fn table_json(t: &MetricTable) -> Value {
    json!({"images": t.images, "a": row_json(&t.lang_a), "b": row_json(&t.lang_b), "avg": t.average()})
}

pub fn record_json(r: &LogRecord) -> Value {
    json!({
        "step": r.step,
        "epoch": r.epoch,
        "stage": r.stage.name(),
        "lr": r.lr,
        "loss_a": r.loss_a,
        "loss_b": r.loss_b,
        "mean_reward": r.mean_reward,
        "val": r.val.as_ref().map(table_json),
    })
}
