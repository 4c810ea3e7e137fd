//! Cross-entropy and self-critical training of a [`Model`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use crate::corpus::Sample;
use crate::decoder::{
    forward_teacher_forced, greedy_decode, sample_decode, DecodeOptions, DecodeOutput, Model, TeacherPair, VocabPair,
    PAD,
};
use crate::graph::{Graph, Mode, Var};
use crate::metrics::{cider_d, corpus_eval, CaptionPair, CiderCorpusStats, MetricTable, ReferenceSet};
use crate::params::ParameterStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ce,
    Rl,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ce => "ce",
            Stage::Rl => "rl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Stage::Ce),
            "rl" => Ok(Stage::Rl),
            _ => Err(Error::config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Stop after this many updates; 0 means no limit.
    pub max_steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Rate after warmup.
    pub post_warmup_lr: f64,
    pub rl_lr: f64,
    pub rl_decay: f64,
    pub rl_decay_every: usize,
    pub rl_lr_floor: f64,
    pub sample_count: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 disables validation.
    pub eval_interval: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Ce,
            epochs: 10,
            max_steps: 0,
            batch_size: 10,
            warmup_steps: 20_000,
            peak_lr: 1e-4,
            post_warmup_lr: 1e-4,
            rl_lr: 1e-5,
            rl_decay: 0.1,
            rl_decay_every: 5,
            rl_lr_floor: 1e-7,
            sample_count: 5,
            seed: 0,
            eval_interval: 3000,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn parse_num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "stage",
        "epochs",
        "max_steps",
        "batch_size",
        "warmup_steps",
        "peak_lr",
        "post_warmup_lr",
        "rl_lr",
        "rl_decay",
        "rl_decay_every",
        "rl_lr_floor",
        "sample_count",
        "seed",
        "eval_interval",
        "optimizer",
        "momentum",
        "clip_norm",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::config("warmup_steps must be >= 1"));
        }
        if self.sample_count < 2 {
            return Err(Error::config(format!(
                "sample_count must be >= 2 for the leave-one-out baseline, got {}",
                self.sample_count
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.rl_decay_every < 1 {
            return Err(Error::config("rl_decay_every must be >= 1"));
        }
        for (k, v) in [
            ("peak_lr", self.peak_lr),
            ("post_warmup_lr", self.post_warmup_lr),
            ("rl_lr", self.rl_lr),
            ("rl_lr_floor", self.rl_lr_floor),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} must be a finite value >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return Err(Error::config("momentum and Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => self.stage = Stage::parse(v.trim())?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "peak_lr" => self.peak_lr = parse_num(key, v)?,
            "post_warmup_lr" => self.post_warmup_lr = parse_num(key, v)?,
            "rl_lr" => self.rl_lr = parse_num(key, v)?,
            "rl_decay" => self.rl_decay = parse_num(key, v)?,
            "rl_decay_every" => self.rl_decay_every = parse_num(key, v)?,
            "rl_lr_floor" => self.rl_lr_floor = parse_num(key, v)?,
            "sample_count" => self.sample_count = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v.trim())?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage", self.stage.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("peak_lr", format!("{:?}", self.peak_lr)),
            ("post_warmup_lr", format!("{:?}", self.post_warmup_lr)),
            ("rl_lr", format!("{:?}", self.rl_lr)),
            ("rl_decay", format!("{:?}", self.rl_decay)),
            ("rl_decay_every", self.rl_decay_every.to_string()),
            ("rl_lr_floor", format!("{:?}", self.rl_lr_floor)),
            ("sample_count", self.sample_count.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("momentum", format!("{:?}", self.momentum)),
            ("clip_norm", format!("{:?}", self.clip_norm)),
            ("adam_beta1", format!("{:?}", self.adam_beta1)),
            ("adam_beta2", format!("{:?}", self.adam_beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
        ]
    }
}

/// Learning rate for update `step` (1-based) in `epoch` (0-based).
pub fn lr_schedule(step: usize, epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.stage {
        Stage::Ce => {
            if step < cfg.warmup_steps {
                cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
            } else {
                cfg.post_warmup_lr
            }
        }
        Stage::Rl => {
            let k = (epoch / cfg.rl_decay_every) as f64;
            (cfg.rl_lr * math::pow(cfg.rl_decay, k)).max(cfg.rl_lr_floor)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CeLoss {
    pub total: Var,
    pub lang_a: Var,
    pub lang_b: Var,
}

fn language_nll(g: &mut Graph, logits: Var, targets: &[usize], lang: &str) -> Result<Var> {
    let (m, v) = g.shape(logits);
    if targets.len() != m {
        return Err(Error::dim("ce_loss targets", &[targets.len()], &[m, v]));
    }
    let n = targets.iter().filter(|&&t| t != PAD).count();
    if n == 0 {
        return Err(Error::contract(format!("language {lang} target is all padding")));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::data(format!("target id {bad} outside vocabulary of {v}")));
    }
    let lsm = g.log_softmax_rows(logits)?;
    let w = -1.0 / n as f64;
    let picks = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| (i, t, w))
        .collect();
    g.pick_sum(lsm, picks)
}

/// Mean negative log-likelihood over non-PAD targets, per language, and
/// their sum.
pub fn ce_loss(
    g: &mut Graph,
    logits_a: Var,
    logits_b: Var,
    targets_a: &[usize],
    targets_b: &[usize],
) -> Result<CeLoss> {
    let lang_a = language_nll(g, logits_a, targets_a, "A")?;
    let lang_b = language_nll(g, logits_b, targets_b, "B")?;
    Ok(CeLoss {
        total: g.add(lang_a, lang_b)?,
        lang_a,
        lang_b,
    })
}

/// `b_i`: mean of the other rewards.
pub fn leave_one_out_baselines(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::config("leave-one-out baseline needs at least two samples"));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| (total - r) / (k - 1) as f64).collect())
}

/// Momentum SGD or Adam over every tensor of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParameterStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![0.0; store.value(id).len()])
                .collect::<Vec<_>>()
        };
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            first: zeros(),
            second: if cfg.optimizer == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            t: 0,
        }
    }

    /// Apply the accumulated gradients; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) {
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let grad = match store.grad(id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; store.value(id).len()],
            };
            let value = store.value_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    let vel = &mut self.first[slot];
                    for i in 0..value.len() {
                        vel[i] = self.momentum * vel[i] + grad[i];
                        value[i] -= lr * vel[i];
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                    let c1 = 1.0 - math::pow(self.beta1, self.t as f64);
                    let c2 = 1.0 - math::pow(self.beta2, self.t as f64);
                    for i in 0..value.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        value[i] -= lr * mh / (math::sqrt(vh) + self.eps);
                    }
                }
            }
        }
    }
}

/// Rescale gradients to global norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}

/// One captioned image prepared for training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub features: Tensor,
    pub words_a: Vec<usize>,
    pub words_b: Vec<usize>,
    pub refs: ReferenceSet,
}

impl Example {
    /// Encode a generated sample; its two captions are the sole references.
    pub fn from_sample(sample: &Sample, vocab: &VocabPair) -> Self {
        Example {
            id: sample.index as usize,
            features: sample.features.clone(),
            words_a: vocab.a.encode(&sample.caption_a),
            words_b: vocab.b.encode(&sample.caption_b),
            refs: ReferenceSet {
                a: vec![sample.caption_a.clone()],
                b: vec![sample.caption_b.clone()],
            },
        }
    }

    pub fn teacher(&self) -> TeacherPair {
        TeacherPair::new(&self.words_a, &self.words_b)
    }
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::Contract(msg) if msg.starts_with("non-finite") => Error::Divergence { step, detail: msg },
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeStepStats {
    pub loss: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub grad_norm: f64,
}

/// One CE update over `batch`, with the loss averaged over examples.
pub fn ce_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &[&Example],
    lr: f64,
    cfg: &TrainConfig,
    step: usize,
    rng: &RngStream,
) -> Result<CeStepStats> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let (mut la, mut lb) = (0.0, 0.0);
    for (i, ex) in batch.iter().enumerate() {
        let tp = ex.teacher();
        let mut g = Graph::new();
        let fwd = forward_teacher_forced(
            &mut g,
            model,
            &ex.features,
            &tp.inputs_a,
            &tp.inputs_b,
            Mode::Train,
            &rng.substream(i as u64),
        )
        .map_err(|e| divergence(step, e))?;
        let loss = ce_loss(&mut g, fwd.logits_a, fwd.logits_b, &tp.targets_a, &tp.targets_b)
            .map_err(|e| divergence(step, e))?;
        la += g.value(loss.lang_a).item() * scale;
        lb += g.value(loss.lang_b).item() * scale;
        let scaled = g.scale(loss.total, scale)?;
        g.backward_into(scaled, &mut model.store)?;
    }
    if !(la + lb).is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss is {}", la + lb),
        });
    }
    let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: "gradient norm is not finite".to_string(),
        });
    }
    opt.step(&mut model.store, lr);
    model.store.zero_grad();
    Ok(CeStepStats {
        loss: la + lb,
        loss_a: la,
        loss_b: lb,
        grad_norm,
    })
}

/// Fraction of non-PAD positions whose argmax equals the target, per language.
pub fn teacher_forced_accuracy(model: &Model, examples: &[Example]) -> Result<(f64, f64)> {
    let mut hits = [0usize; 2];
    let mut total = [0usize; 2];
    let fixed = RngStream::new(0);
    for ex in examples {
        let tp = ex.teacher();
        let mut g = Graph::new();
        let fwd = forward_teacher_forced(
            &mut g,
            model,
            &ex.features,
            &tp.inputs_a,
            &tp.inputs_b,
            Mode::Eval,
            &fixed,
        )?;
        for (lang, logits, targets) in [(0, fwd.logits_a, &tp.targets_a), (1, fwd.logits_b, &tp.targets_b)] {
            let t = g.value(logits);
            for (r, &want) in targets.iter().enumerate() {
                if want == PAD {
                    continue;
                }
                let row = t.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                total[lang] += 1;
                hits[lang] += (best == want) as usize;
            }
        }
    }
    let frac = |h: usize, t: usize| if t == 0 { 0.0 } else { h as f64 / t as f64 };
    Ok((frac(hits[0], total[0]), frac(hits[1], total[1])))
}

/// One sampled caption pair with its rewards and baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstSample {
    pub decode: DecodeOutput,
    pub reward_a: f64,
    pub reward_b: f64,
    pub baseline_a: f64,
    pub baseline_b: f64,
}

impl ScstSample {
    pub fn advantage_a(&self) -> f64 {
        self.reward_a - self.baseline_a
    }

    pub fn advantage_b(&self) -> f64 {
        self.reward_b - self.baseline_b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScstDiagnostics {
    /// Mean over samples of the two languages' average reward.
    pub mean_reward: f64,
    pub mean_reward_a: f64,
    pub mean_reward_b: f64,
    pub mean_abs_advantage: f64,
    /// Per image, the advantage sums of language A and B.
    pub advantage_sums: Vec<[f64; 2]>,
    pub grad_norm: f64,
    pub samples: Vec<Vec<ScstSample>>,
}

/// CIDEr-D document statistics over the references of `examples`.
pub struct RewardStats {
    pub lang_a: CiderCorpusStats,
    pub lang_b: CiderCorpusStats,
}

impl RewardStats {
    pub fn build(examples: &[Example]) -> Self {
        let a: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.refs.a.clone()).collect();
        let b: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.refs.b.clone()).collect();
        RewardStats {
            lang_a: CiderCorpusStats::build(&a),
            lang_b: CiderCorpusStats::build(&b),
        }
    }
}

/// Sample `K` caption pairs per image, reward each language with CIDEr-D,
/// and descend on `−Σ (r − b) log p` with the leave-one-out baseline `b`.
pub fn scst_step(
    model: &mut Model,
    opt: &mut Optimizer,
    images: &[&Example],
    vocab: &VocabPair,
    stats: &RewardStats,
    lr: f64,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut RngStream,
) -> Result<ScstDiagnostics> {
    let k = cfg.sample_count;
    if k < 2 {
        return Err(Error::config(format!("sample_count must be >= 2, got {k}")));
    }
    if images.is_empty() {
        return Err(Error::contract("empty SCST batch"));
    }
    let opts = DecodeOptions::default();
    let mut all = Vec::with_capacity(images.len());
    let mut sums = Vec::with_capacity(images.len());
    let (mut ra_sum, mut rb_sum, mut abs_adv) = (0.0, 0.0, 0.0);
    for ex in images {
        let mut decodes = Vec::with_capacity(k);
        let mut ra = Vec::with_capacity(k);
        let mut rb = Vec::with_capacity(k);
        for _ in 0..k {
            let d = sample_decode(model, &ex.features, &opts, rng).map_err(|e| divergence(step, e))?;
            ra.push(cider_d(&vocab.a.decode(&d.caption_a), &ex.refs.a, &stats.lang_a));
            rb.push(cider_d(&vocab.b.decode(&d.caption_b), &ex.refs.b, &stats.lang_b));
            decodes.push(d);
        }
        let ba = leave_one_out_baselines(&ra)?;
        let bb = leave_one_out_baselines(&rb)?;
        let samples: Vec<ScstSample> = decodes
            .into_iter()
            .enumerate()
            .map(|(i, decode)| ScstSample {
                decode,
                reward_a: ra[i],
                reward_b: rb[i],
                baseline_a: ba[i],
                baseline_b: bb[i],
            })
            .collect();
        let sa: f64 = samples.iter().map(|s| s.advantage_a()).sum();
        let sb: f64 = samples.iter().map(|s| s.advantage_b()).sum();
        sums.push([sa, sb]);
        for s in &samples {
            ra_sum += s.reward_a;
            rb_sum += s.reward_b;
            abs_adv += s.advantage_a().abs() + s.advantage_b().abs();
        }
        all.push(samples);
    }

    model.store.zero_grad();
    let weight = 1.0 / (k * images.len()) as f64;
    let fixed = RngStream::new(0);
    for (ex, samples) in images.iter().zip(&all) {
        for s in samples {
            let (adv_a, adv_b) = (s.advantage_a(), s.advantage_b());
            if adv_a == 0.0 && adv_b == 0.0 {
                continue;
            }
            let tp = TeacherPair::from_decode(&s.decode);
            let mut g = Graph::new();
            let fwd = forward_teacher_forced(
                &mut g,
                model,
                &ex.features,
                &tp.inputs_a,
                &tp.inputs_b,
                Mode::Eval,
                &fixed,
            )
            .map_err(|e| divergence(step, e))?;
            let mut terms = Vec::new();
            for (logits, targets, adv) in [
                (fwd.logits_a, &tp.targets_a, adv_a),
                (fwd.logits_b, &tp.targets_b, adv_b),
            ] {
                if adv == 0.0 {
                    continue;
                }
                let lsm = g.log_softmax_rows(logits)?;
                let picks: Vec<_> = targets
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t != PAD)
                    .map(|(i, &t)| (i, t, -adv * weight))
                    .collect();
                if !picks.is_empty() {
                    terms.push(g.pick_sum(lsm, picks)?);
                }
            }
            let loss = match terms.as_slice() {
                [] => continue,
                [one] => *one,
                [a, b, ..] => g.add(*a, *b)?,
            };
            g.backward_into(loss, &mut model.store)?;
        }
    }
    let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: "gradient norm is not finite".to_string(),
        });
    }
    opt.step(&mut model.store, lr);
    model.store.zero_grad();
    let n = (k * images.len()) as f64;
    Ok(ScstDiagnostics {
        mean_reward: (ra_sum + rb_sum) / (2.0 * n),
        mean_reward_a: ra_sum / n,
        mean_reward_b: rb_sum / n,
        mean_abs_advantage: abs_adv / (2.0 * n),
        advantage_sums: sums,
        grad_norm,
        samples: all,
    })
}

/// Greedy captions for `examples` scored against their references.
pub fn evaluate(model: &Model, examples: &[Example], vocab: &VocabPair) -> Result<MetricTable> {
    let (cands, refs) = greedy_captions(model, examples, vocab)?;
    corpus_eval(&cands, &refs)
}

pub type Captions = (BTreeMap<usize, CaptionPair>, BTreeMap<usize, ReferenceSet>);

pub fn greedy_captions(model: &Model, examples: &[Example], vocab: &VocabPair) -> Result<Captions> {
    let mut cands = BTreeMap::new();
    let mut refs = BTreeMap::new();
    let opts = DecodeOptions::default();
    for ex in examples {
        let d = greedy_decode(model, &ex.features, &opts)?;
        cands.insert(
            ex.id,
            CaptionPair {
                a: vocab.a.decode(&d.caption_a),
                b: vocab.b.decode(&d.caption_b),
            },
        );
        refs.insert(ex.id, ex.refs.clone());
    }
    Ok((cands, refs))
}

/// One metric-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub mean_reward: Option<f64>,
    pub val: Option<MetricTable>,
}

impl LogRecord {
    /// Mean CIDEr-D of the two languages on validation.
    pub fn val_cider(&self) -> Option<f64> {
        self.val.as_ref().map(|t| (t.lang_a.cider_d + t.lang_b.cider_d) / 2.0)
    }
}

pub struct Best {
    pub step: usize,
    pub cider: f64,
    pub store: ParameterStore,
}

pub struct TrainOutcome {
    pub steps: usize,
    pub best: Option<Best>,
    pub records: Vec<LogRecord>,
}

/// Run the configured stage. `observe` sees every record and may stop the
/// run early.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &VocabPair,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&LogRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let base = RngStream::new(cfg.seed);
    let mut opt = Optimizer::new(cfg, &model.store);
    let stats = if cfg.stage == Stage::Rl {
        Some(RewardStats::build(train_set))
    } else {
        None
    };
    let mut sampler = base.substream_named("scst");
    let mut step = 0;
    let mut best: Option<Best> = None;
    let mut records = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        base.substream_named("order")
            .substream(epoch as u64)
            .shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = lr_schedule(step, epoch, cfg);
            let mut rec = LogRecord {
                step,
                epoch,
                stage: cfg.stage,
                lr,
                loss_a: 0.0,
                loss_b: 0.0,
                mean_reward: None,
                val: None,
            };
            match &stats {
                None => {
                    let s = ce_step(model, &mut opt, &batch, lr, cfg, step, &base.substream(step as u64))?;
                    rec.loss_a = s.loss_a;
                    rec.loss_b = s.loss_b;
                }
                Some(stats) => {
                    let d = scst_step(model, &mut opt, &batch, vocab, stats, lr, cfg, step, &mut sampler)?;
                    rec.loss_a = -d.mean_reward_a;
                    rec.loss_b = -d.mean_reward_b;
                    rec.mean_reward = Some(d.mean_reward);
                }
            }
            if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 && !val_set.is_empty() {
                rec.val = Some(evaluate(model, val_set, vocab)?);
                let c = rec.val_cider().expect("validation table");
                if best.as_ref().is_none_or(|b| c > b.cider) {
                    best = Some(Best {
                        step,
                        cider: c,
                        store: model.store.clone(),
                    });
                }
            }
            let flow = observe(&rec);
            records.push(rec);
            if flow.is_break() {
                break 'epochs;
            }
        }
    }
    Ok(TrainOutcome {
        steps: step,
        best,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loo_example() {
        let b = leave_one_out_baselines(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(b[2], 3.0);
        assert!(leave_one_out_baselines(&[1.0]).is_err());
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert!((lr_schedule(10_000, 0, &cfg) - 5e-5).abs() < 1e-18);
        let rl = TrainConfig {
            stage: Stage::Rl,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(1, 0, &rl), 1e-5);
        assert!((lr_schedule(1, 12, &rl) - 1e-7).abs() < 1e-20);
        assert!((lr_schedule(1, 14, &rl) - 1e-7).abs() < 1e-20);
    }
}
