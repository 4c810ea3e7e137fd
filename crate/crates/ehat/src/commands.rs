//! One function per subcommand. Each returns what it printed so tests can
//! inspect results without parsing stdout.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ehat_core::decoder::{count_parameters, greedy_decode, DecodeOptions, Model, ParamCounts};
use ehat_core::ehat::HarnVariant;
use ehat_core::gradcheck::{check_block, Block, BlockDims, GradCheckReport};
use ehat_core::graph::BackwardFault;
use ehat_core::metrics::MetricTable;
use ehat_core::train::{evaluate, train, Stage, TrainOutcome};
use ehat_core::ParameterStore;

use crate::config::RunConfig;
use crate::corpus_io::{write_corpus, Corpus};
use crate::format::{write_file, TensorFile};
use crate::report::{record_json, table_json, Table};

/// Largest relative error a block may show in `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub struct Checkpoint {
    pub stage: Stage,
    pub step: usize,
    pub config: RunConfig,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        let header = format!(
            "@stage {}\n@step {}\n{}",
            self.stage.name(),
            self.step,
            self.config.to_text()
        );
        TensorFile::from_store(header, &self.store).write(path, overwrite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            bail!("checkpoint {} does not exist", path.display());
        }
        let tf = TensorFile::read(path)?;
        let (mut stage, mut step) = (None, None);
        let mut body = String::new();
        for line in tf.header.lines() {
            if let Some(v) = line.strip_prefix("@stage ") {
                stage = Some(Stage::parse(v)?);
            } else if let Some(v) = line.strip_prefix("@step ") {
                step = Some(v.parse().context("bad @step")?);
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let (Some(stage), Some(step)) = (stage, step) else {
            bail!("{} is not a model checkpoint (no @stage/@step header)", path.display());
        };
        let config = RunConfig::parse(&body).with_context(|| format!("config in {}", path.display()))?;
        Ok(Checkpoint {
            stage,
            step,
            config,
            store: tf.into_store()?,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::from_store(self.config.decoder.clone(), self.store.clone())?)
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    ensure!(
        !cfg.corpus_dir.is_empty(),
        "no corpus given (set corpus_dir or pass --corpus)"
    );
    Corpus::load(Path::new(&cfg.corpus_dir))
}

/// Vocabulary sizes of 0 are taken from the corpus; anything else must agree.
fn fit_to_corpus(cfg: &mut RunConfig, corpus: &Corpus) -> Result<()> {
    let d = &mut cfg.decoder;
    for (slot, have, lang) in [
        (&mut d.vocab_a, corpus.vocab.a.len(), "A"),
        (&mut d.vocab_b, corpus.vocab.b.len(), "B"),
    ] {
        if *slot == 0 {
            *slot = have;
        } else if *slot != have {
            bail!(
                "vocab_{} = {} but the corpus vocabulary has {have} entries",
                lang.to_lowercase(),
                *slot
            );
        }
    }
    ensure!(
        corpus.feature_width() == d.d_model,
        "corpus features are {} wide but d_model is {}",
        corpus.feature_width(),
        d.d_model
    );
    Ok(())
}

pub fn cmd_gen_corpus(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    let n = write_corpus(cfg, out, force)?;
    Ok(format!("wrote {n} scenes to {}\n", out.display()))
}

pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub best: PathBuf,
    pub last: PathBuf,
    pub config: RunConfig,
}

/// Train `model` and write config, metric log and checkpoints into `run`.
fn run_stage(mut cfg: RunConfig, mut model: Model, corpus: &Corpus, run: &Path, force: bool) -> Result<TrainSummary> {
    let stage = cfg.train.stage;
    cfg.decoder = model.config.clone();
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    write_file(
        &run.join(format!("{}_config.txt", stage.name())),
        cfg.to_text().as_bytes(),
        force,
    )?;
    let log_path = run.join(format!("{}_metrics.jsonl", stage.name()));
    write_file(&log_path, b"", force)?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let train_set = corpus.split("train");
    let val_set = corpus.split("val");
    let mut io_error = None;
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &corpus.vocab,
        &cfg.train,
        &mut |rec| match writeln!(log, "{}", record_json(rec)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                io_error = Some(e);
                ControlFlow::Break(())
            }
        },
    )?;
    if let Some(e) = io_error {
        return Err(e).context("writing the metric log");
    }
    let last = run.join(format!("{}_last.ckpt", stage.name()));
    let best = run.join(format!("{}_best.ckpt", stage.name()));
    let ck = |store: ParameterStore, step| Checkpoint {
        stage,
        step,
        config: cfg.clone(),
        store,
    };
    ck(model.store.clone(), outcome.steps).save(&last, force)?;
    match &outcome.best {
        Some(b) => ck(b.store.clone(), b.step).save(&best, force)?,
        None => ck(model.store.clone(), outcome.steps).save(&best, force)?,
    }
    Ok(TrainSummary {
        outcome,
        best,
        last,
        config: cfg,
    })
}

/// The CE stage starts from fresh parameters; the RL stage from a CE
/// checkpoint given by `checkpoint` or found at `<run>/ce_best.ckpt`.
pub fn cmd_train(cfg: &RunConfig, run: &Path, force: bool) -> Result<(String, TrainSummary)> {
    let mut cfg = cfg.clone();
    let corpus = load_corpus(&cfg)?;
    let model = match cfg.train.stage {
        Stage::Ce => {
            fit_to_corpus(&mut cfg, &corpus)?;
            Model::new(cfg.decoder.clone(), cfg.model_seed)?
        }
        Stage::Rl => {
            let init = if cfg.checkpoint.is_empty() {
                run.join("ce_best.ckpt")
            } else {
                PathBuf::from(&cfg.checkpoint)
            };
            if !init.exists() {
                bail!(
                    "the RL stage starts from a cross-entropy checkpoint; none at {} (train the CE stage first)",
                    init.display()
                );
            }
            let ck = Checkpoint::load(&init)?;
            ensure!(
                ck.stage == Stage::Ce,
                "{} is an {} checkpoint, not a CE one",
                init.display(),
                ck.stage.name()
            );
            cfg.decoder = ck.config.decoder.clone();
            fit_to_corpus(&mut cfg, &corpus)?;
            cfg.checkpoint = init.display().to_string();
            ck.model()?
        }
    };
    let s = run_stage(cfg, model, &corpus, run, force)?;
    let mut msg = format!("{} stage: {} steps\n", s.config.train.stage.name(), s.outcome.steps);
    if let Some(b) = &s.outcome.best {
        writeln!(msg, "best validation CIDEr-D {:.4} at step {}", b.cider, b.step)?;
    }
    writeln!(msg, "checkpoint {}", s.best.display())?;
    Ok((msg, s))
}

fn eval_inputs(cfg: &RunConfig) -> Result<(RunConfig, Model, Corpus)> {
    ensure!(
        !cfg.checkpoint.is_empty(),
        "no checkpoint given (set checkpoint or pass --checkpoint)"
    );
    let ck = Checkpoint::load(Path::new(&cfg.checkpoint))?;
    let mut cfg = cfg.clone();
    cfg.decoder = ck.config.decoder.clone();
    let corpus = load_corpus(&cfg)?;
    fit_to_corpus(&mut cfg, &corpus)?;
    Ok((cfg, ck.model()?, corpus))
}

/// Greedy captions on `eval_split` scored into a metric table.
pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<(String, MetricTable)> {
    let (cfg, model, corpus) = eval_inputs(cfg)?;
    let set = corpus.split(&cfg.eval_split);
    ensure!(!set.is_empty(), "split `{}` is empty", cfg.eval_split);
    let t = evaluate(&model, &set, &corpus.vocab)?;
    let mut table = Table::new("checkpoint", &["split"]);
    let name = Path::new(&cfg.checkpoint)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    table.push(&name, std::slice::from_ref(&cfg.eval_split), &t);
    let text = table.render();
    if let Some(dir) = out {
        write_file(&dir.join("config.txt"), cfg.to_text().as_bytes(), force)?;
        write_file(&dir.join("table.txt"), text.as_bytes(), force)?;
        write_file(
            &dir.join("metrics.json"),
            format!("{}\n", table_json(&t)).as_bytes(),
            force,
        )?;
    }
    Ok((text, t))
}

fn write_matrix(s: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    writeln!(s, "matrix {name} {rows} {cols}").expect("string write");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(s, "{}", line.join(" ")).expect("string write");
    }
}

/// Greedy captions as jsonl, with ω and HCA scores per step when `attention` is given.
pub fn cmd_decode(cfg: &RunConfig, out: &Path, attention: Option<&Path>, force: bool) -> Result<String> {
    let (cfg, model, corpus) = eval_inputs(cfg)?;
    let mut set = corpus.split(&cfg.eval_split);
    if cfg.decode_limit > 0 {
        set.truncate(cfg.decode_limit);
    }
    let opts = DecodeOptions {
        record_attention: attention.is_some(),
        ..DecodeOptions::default()
    };
    let mut lines = String::new();
    let mut att = String::new();
    for ex in &set {
        let d = greedy_decode(&model, &ex.features, &opts)?;
        let rec = serde_json::json!({
            "index": ex.id,
            "a": corpus.vocab.a.decode(&d.caption_a).join(" "),
            "b": corpus.vocab.b.decode(&d.caption_b).join(" "),
        });
        writeln!(lines, "{rec}")?;
        for s in &d.attention {
            let p = format!("image{}.step{}.block{}", ex.id, s.step, s.block);
            write_matrix(&mut att, &format!("{p}.omega_a"), 1, s.omega_a.len(), &s.omega_a);
            write_matrix(&mut att, &format!("{p}.omega_b"), 1, s.omega_b.len(), &s.omega_b);
            write_matrix(&mut att, &format!("{p}.hca_a"), 1, s.scores_a.len(), &s.scores_a);
            write_matrix(&mut att, &format!("{p}.hca_b"), 1, s.scores_b.len(), &s.scores_b);
        }
    }
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes(), force)?;
    write_file(&out.join("captions.jsonl"), lines.as_bytes(), force)?;
    if let Some(p) = attention {
        write_file(p, att.as_bytes(), force)?;
    }
    Ok(lines)
}

pub fn parse_fault(s: &str) -> Result<BackwardFault> {
    match s {
        "softmax" => Ok(BackwardFault::Softmax),
        "sigmoid" => Ok(BackwardFault::Sigmoid),
        "matmul" => Ok(BackwardFault::MatMul),
        _ => bail!("unknown backward fault `{s}` (softmax, sigmoid, matmul)"),
    }
}

/// Report text, whether every block passed, and the per-block reports.
pub type GradcheckOutcome = (String, bool, Vec<(Block, GradCheckReport)>);

/// Every block checked at the default dimensions.
pub fn cmd_gradcheck(seed: u64, fault: Option<BackwardFault>) -> Result<GradcheckOutcome> {
    let dims = BlockDims::default();
    let mut text = format!("d={} M={} N={} seed={seed}\n", dims.d, dims.m, dims.n);
    let mut ok = true;
    let mut reports = Vec::new();
    for b in Block::ALL {
        let r = check_block(b, dims, seed, fault)?;
        let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        writeln!(
            text,
            "{:<16} max rel err {:.3e}  checked {:>5}  skipped {:>3}  {}",
            b.name(),
            r.max_rel_error,
            r.checked,
            r.skipped,
            if pass { "ok" } else { "FAIL" }
        )?;
        reports.push((b, r));
    }
    Ok((text, ok, reports))
}

pub struct ExperimentRow {
    pub name: String,
    pub hash: String,
    pub config: RunConfig,
    pub params: ParamCounts,
    pub table: MetricTable,
}

/// CE training from fresh parameters, then the best checkpoint scored on `eval_split`.
fn experiment(name: &str, cfg: RunConfig, corpus: &Corpus, dir: &Path, force: bool) -> Result<ExperimentRow> {
    let mut cfg = cfg;
    cfg.train.stage = Stage::Ce;
    fit_to_corpus(&mut cfg, corpus)?;
    let model = Model::new(cfg.decoder.clone(), cfg.model_seed)?;
    let s = run_stage(cfg, model, corpus, dir, force)?;
    let best = Checkpoint::load(&s.best)?.model()?;
    let set = corpus.split(&s.config.eval_split);
    ensure!(!set.is_empty(), "split `{}` is empty", s.config.eval_split);
    let table = evaluate(&best, &set, &corpus.vocab)?;
    write_file(
        &dir.join("metrics.json"),
        format!("{}\n", table_json(&table)).as_bytes(),
        force,
    )?;
    Ok(ExperimentRow {
        name: name.to_string(),
        hash: s.config.hash(),
        params: count_parameters(&best),
        config: s.config,
        table,
    })
}

fn run_experiments(
    cfg: &RunConfig,
    run: &Path,
    force: bool,
    configs: Vec<(String, RunConfig)>,
) -> Result<Vec<ExperimentRow>> {
    let corpus = load_corpus(cfg)?;
    configs
        .into_iter()
        .map(|(name, c)| experiment(&name, c, &corpus, &run.join(&name), force))
        .collect()
}

fn hashed_table(label: &str, rows: &[ExperimentRow]) -> Table {
    let mut t = Table::new(label, &["config"]);
    for r in rows {
        t.push(&r.name, std::slice::from_ref(&r.hash), &r.table);
    }
    t
}

fn finish(run: &Path, force: bool, t: Table, rows: Vec<ExperimentRow>) -> Result<(String, Vec<ExperimentRow>)> {
    let text = t.render();
    write_file(&run.join("table.txt"), text.as_bytes(), force)?;
    Ok((text, rows))
}

/// Rows: MHCA off, HARN similarity off, HCA off, then the full model.
pub fn cmd_ablate(cfg: &RunConfig, run: &Path, force: bool) -> Result<(String, Vec<ExperimentRow>)> {
    let mut configs = Vec::new();
    for name in ["no-MHCA", "no-HARN", "no-HCA", "full"] {
        let mut c = cfg.clone();
        match name {
            "no-MHCA" => c.decoder.mhca = false,
            "no-HARN" => c.decoder.harn = false,
            "no-HCA" => c.decoder.hca = false,
            _ => {}
        }
        configs.push((name.to_string(), c));
    }
    let rows = run_experiments(cfg, run, force, configs)?;
    finish(run, force, hashed_table("ablation", &rows), rows)
}

pub const LAMBDAS: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

pub fn cmd_sweep_lambda(cfg: &RunConfig, run: &Path, force: bool) -> Result<(String, Vec<ExperimentRow>)> {
    let configs = LAMBDAS
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.decoder.lambda = l;
            (format!("lambda-{l}"), c)
        })
        .collect();
    let rows = run_experiments(cfg, run, force, configs)?;
    finish(run, force, hashed_table("lambda", &rows), rows)
}

/// The three HARN variants under one seed, with their parameter counts.
pub fn cmd_variants(cfg: &RunConfig, run: &Path, force: bool) -> Result<(String, Vec<ExperimentRow>)> {
    let configs = [HarnVariant::Prototype, HarnVariant::V1, HarnVariant::V2]
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.decoder.harn_variant = v;
            c.decoder.harn_tie_visual = false;
            (v.name().to_string(), c)
        })
        .collect();
    let rows = run_experiments(cfg, run, force, configs)?;
    let mut t = Table::new("variant", &["config", "ehat params", "total params"]);
    for r in &rows {
        t.push(
            &r.name,
            &[r.hash.clone(), r.params.ehat.to_string(), r.params.total.to_string()],
            &r.table,
        );
    }
    finish(run, force, t, rows)
}
