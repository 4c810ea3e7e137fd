//! Plain-text `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ehat_core::decoder::DecoderConfig;
use ehat_core::train::{Stage, TrainConfig};
use sha2::{Digest, Sha256};

/// Settings of the synthetic corpus generator and of the split.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub scenes: usize,
    pub feature_table_seed: u64,
    pub feature_noise: f64,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub min_freq_a: usize,
    pub min_freq_b: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 42,
            scenes: 1000,
            feature_table_seed: 7,
            feature_noise: 0.1,
            split: [0.9, 0.05, 0.05],
            split_seed: 0,
            min_freq_a: 1,
            min_freq_b: 1,
        }
    }
}

const CORPUS_KEYS: [&str; 10] = [
    "corpus_seed",
    "scenes",
    "feature_table_seed",
    "feature_noise",
    "split_train",
    "split_val",
    "split_test",
    "split_seed",
    "min_freq_a",
    "min_freq_b",
];

const RUN_KEYS: [&str; 5] = ["model_seed", "corpus_dir", "checkpoint", "eval_split", "decode_limit"];

/// Everything a command reads: model, training, corpus and run paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub model_seed: u64,
    pub corpus_dir: String,
    pub checkpoint: String,
    /// `train`, `val` or `test`.
    pub eval_split: String,
    /// Images to decode; 0 means all.
    pub decode_limit: usize,
}

impl Default for RunConfig {
    /// Toy scale. Vocabulary sizes of 0 are filled in from the corpus.
    fn default() -> Self {
        let mut decoder = DecoderConfig::tiny(32, 2, 0, 0);
        decoder.m_max = 20;
        let train = TrainConfig {
            epochs: 50,
            max_steps: 2000,
            warmup_steps: 50,
            peak_lr: 0.05,
            post_warmup_lr: 0.05,
            rl_lr: 0.002,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        RunConfig {
            decoder,
            train,
            corpus: CorpusConfig::default(),
            model_seed: 1,
            corpus_dir: String::new(),
            checkpoint: String::new(),
            eval_split: "test".to_string(),
            decode_limit: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().ok().with_context(|| format!("bad value `{v}` for `{key}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let c = &mut self.corpus;
        match key {
            "corpus_seed" => c.seed = num(key, v)?,
            "scenes" => c.scenes = num(key, v)?,
            "feature_table_seed" => c.feature_table_seed = num(key, v)?,
            "feature_noise" => c.feature_noise = num(key, v)?,
            "split_train" => c.split[0] = num(key, v)?,
            "split_val" => c.split[1] = num(key, v)?,
            "split_test" => c.split[2] = num(key, v)?,
            "split_seed" => c.split_seed = num(key, v)?,
            "min_freq_a" => c.min_freq_a = num(key, v)?,
            "min_freq_b" => c.min_freq_b = num(key, v)?,
            "model_seed" => self.model_seed = num(key, v)?,
            "corpus_dir" => self.corpus_dir = v.to_string(),
            "checkpoint" => self.checkpoint = v.to_string(),
            "eval_split" => {
                if !matches!(v, "train" | "val" | "test") {
                    bail!("eval_split must be train, val or test, got `{v}`");
                }
                self.eval_split = v.to_string();
            }
            "decode_limit" => self.decode_limit = num(key, v)?,
            k if DecoderConfig::KEYS.contains(&k) => self.decoder.set(k, v)?,
            k if TrainConfig::KEYS.contains(&k) => self.train.set(k, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not of the form key=value");
        };
        self.set(k.trim(), v)
    }

    /// Defaults updated by every line of `text`. Repeated keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key = value, got `{line}`", n + 1);
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                bail!("line {}: `{k}` given twice", n + 1);
            }
            cfg.set(k, v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let c = &self.corpus;
        let corpus = [
            c.seed.to_string(),
            c.scenes.to_string(),
            c.feature_table_seed.to_string(),
            format!("{:?}", c.feature_noise),
            format!("{:?}", c.split[0]),
            format!("{:?}", c.split[1]),
            format!("{:?}", c.split[2]),
            c.split_seed.to_string(),
            c.min_freq_a.to_string(),
            c.min_freq_b.to_string(),
        ];
        let run = [
            self.model_seed.to_string(),
            self.corpus_dir.clone(),
            self.checkpoint.clone(),
            self.eval_split.clone(),
            self.decode_limit.to_string(),
        ];
        let mut out: Vec<(String, String)> = Vec::new();
        out.extend(self.decoder.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.extend(self.train.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.extend(CORPUS_KEYS.iter().zip(corpus).map(|(k, v)| (k.to_string(), v)));
        out.extend(RUN_KEYS.iter().zip(run).map(|(k, v)| (k.to_string(), v)));
        out
    }

    /// Every key, one per line; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    /// Short digest of the model and training settings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if RUN_KEYS.contains(&k.as_str()) && k != "model_seed" {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage(&self) -> Stage {
        self.train.stage
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("lambda", "0.5").unwrap();
        c.set("corpus_dir", "/tmp/x").unwrap();
        c.set("split_val", "0.1").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        assert!(RunConfig::parse("lamda = 0.3").is_err());
        assert!(RunConfig::parse("lambda = 0.3\nlambda = 0.5").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("# comment\n\nlambda = 0.1 # trailing").is_ok());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.corpus_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.decoder.hca = false;
        assert_ne!(a.hash(), b.hash());
    }
}
