//! Central-difference gradient checking against the tape's backward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use alloc::vec;

use crate::attention::MaskSpec;
use crate::decoder::{forward_teacher_forced, DecoderConfig, Model, TeacherPair};
use crate::ehat::{
    causal_ehat, harn, hca, mhca, CausalInputs, EhatSwitches, HarnParams, HarnSpec, HarnVariant, MhcaMasks, MhcaParams,
};
use crate::graph::{BackwardFault, Graph, Mode, Var};
use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::ce_loss;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Use the fourth-order stencil `(−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h`
    /// instead of `(f(h) − f(−h)) / 2h`.
    pub five_point: bool,
    /// Skip entries whose estimate at `eps` and `eps / 2` disagree.
    pub kink_screen: bool,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
    /// Restrict the check to parameters whose path starts with one of these.
    pub prefixes: Vec<String>,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            five_point: false,
            kink_screen: false,
            max_entries: None,
            prefixes: Vec::new(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries left out because the finite-difference estimate itself was
    /// unstable (a ReLU kink inside the stencil).
    pub skipped: usize,
}

const KINK_TOLERANCE: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval_loss<F>(store: &ParameterStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::contract("gradient check needs a scalar loss"));
    }
    Ok(g.value(loss).item())
}

fn loss_at<F>(store: &mut ParameterStore, id: ParamId, i: usize, x: f64, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let orig = store.value(id).data()[i];
    store.value_mut(id).data_mut()[i] = x;
    let loss = eval_loss(store, build);
    store.value_mut(id).data_mut()[i] = orig;
    loss
}

fn central_difference<F>(
    store: &mut ParameterStore,
    id: ParamId,
    i: usize,
    h: f64,
    five_point: bool,
    build: &mut F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let x = store.value(id).data()[i];
    let p1 = loss_at(store, id, i, x + h, build)?;
    let m1 = loss_at(store, id, i, x - h, build)?;
    if !five_point {
        return Ok((p1 - m1) / (2.0 * h));
    }
    let p2 = loss_at(store, id, i, x + 2.0 * h, build)?;
    let m2 = loss_at(store, id, i, x - 2.0 * h, build)?;
    Ok((m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * h))
}

/// Compare the backward pass of `build` with central differences of step
/// `opts.eps` over every (selected) parameter entry in `store`.
pub fn grad_check<F>(store: &mut ParameterStore, opts: &GradCheckOptions, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let base = eval_loss(store, &mut build)?;
    let again = eval_loss(store, &mut build)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(format!(
            "graph builder is not deterministic ({base} vs {again})"
        )));
    }

    let mut g = match opts.fault {
        Some(f) => Graph::new().with_fault(f),
        None => Graph::new(),
    };
    let loss = build(&mut g, store)?;
    g.backward_into(loss, store)?;

    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| opts.prefixes.is_empty() || opts.prefixes.iter().any(|p| store.path(id).starts_with(p.as_str())))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        let analytic: Vec<f64> = match store.grad(id) {
            Some(t) => t.data().to_vec(),
            None => alloc::vec![0.0; n],
        };
        let stride = match opts.max_entries {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let numeric = central_difference(store, id, i, opts.eps, opts.five_point, &mut build)?;
            if opts.kink_screen {
                let half = central_difference(store, id, i, opts.eps / 2.0, opts.five_point, &mut build)?;
                if relative_error(numeric, half) > KINK_TOLERANCE {
                    report.skipped += 1;
                    continue;
                }
            }
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((String::from(store.path(id)), i));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

// ---- block suite ------------------------------------------------------------

/// Units the gradient checker knows how to exercise on random inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Mhca,
    HarnPrototype,
    HarnV1,
    HarnV2,
    Hca,
    CausalEhat,
    FullModel,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::Mhca,
        Block::HarnPrototype,
        Block::HarnV1,
        Block::HarnV2,
        Block::Hca,
        Block::CausalEhat,
        Block::FullModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Mhca => "mhca",
            Block::HarnPrototype => "harn-prototype",
            Block::HarnV1 => "harn-v1",
            Block::HarnV2 => "harn-v2",
            Block::Hca => "hca",
            Block::CausalEhat => "ehat-causal",
            Block::FullModel => "full-model",
        }
    }
}

/// Sizes for [`check_block`]: feature width, caption length, region count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

impl Default for BlockDims {
    fn default() -> Self {
        BlockDims { d: 8, m: 6, n: 5 }
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::matrix(rows, cols, data).expect("length matches shape")
}

/// `sum(x ⊙ r)` for a fixed random `r`, so every output entry matters with
/// its own weight.
fn probe(g: &mut Graph, x: Var, rng: &mut RngStream) -> Result<Var> {
    let (r, c) = g.shape(x);
    let w = random_tensor(r, c, rng).into_data();
    let y = g.mul_const(x, w)?;
    g.sum(y)
}

fn insert_input(
    store: &mut ParameterStore,
    path: &str,
    rows: usize,
    cols: usize,
    rng: &mut RngStream,
) -> Result<ParamId> {
    store.insert(path, random_tensor(rows, cols, rng))
}

/// Gradient-check one block on random inputs. Inputs are stored as
/// parameters so their gradients are checked as well. Dropout runs in train
/// mode with a fixed stream, so the masks are identical across evaluations.
pub fn check_block(block: Block, dims: BlockDims, seed: u64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let BlockDims { d, m, n } = dims;
    if d == 0 || m == 0 || n == 0 {
        return Err(Error::config("block dimensions must be positive"));
    }
    let base = RngStream::new(seed);
    let mut data = base.substream(1);
    let mut store = ParameterStore::new();
    let opts = GradCheckOptions {
        fault,
        eps: 1e-3,
        five_point: true,
        kink_screen: true,
        ..GradCheckOptions::default()
    };
    let probe_seed = base.substream(2);
    let drop_seed = base.substream(3);
    match block {
        Block::Mhca => {
            let o = insert_input(&mut store, "input.regions", n, d, &mut data)?;
            let a = insert_input(&mut store, "input.lang_a", m, d, &mut data)?;
            let b = insert_input(&mut store, "input.lang_b", m, d, &mut data)?;
            let region_mask = MaskSpec::full(n, n);
            // trailing padding row, when there is room for one
            let mut valid = vec![true; m];
            valid[m - 1] = m == 1;
            let causal = MaskSpec::causal_padding(&valid);
            grad_check(&mut store, &opts, |g, s| {
                let (o, a, b) = (g.param(s, o)?, g.param(s, a)?, g.param(s, b)?);
                let masks = MhcaMasks {
                    regions: &region_mask,
                    lang_a: &causal,
                    lang_b: &causal,
                };
                let out = mhca(g, o, a, b, &masks, &MhcaParams::new(0.1)?, Mode::Train, &drop_seed)?;
                let mut pr = probe_seed.clone();
                let x = probe(g, out.regions, &mut pr)?;
                let y = probe(g, out.lang_a, &mut pr)?;
                let z = probe(g, out.lang_b, &mut pr)?;
                let xy = g.add(x, y)?;
                g.add(xy, z)
            })
        }
        Block::HarnPrototype | Block::HarnV1 | Block::HarnV2 => {
            let variant = match block {
                Block::HarnPrototype => HarnVariant::Prototype,
                Block::HarnV1 => HarnVariant::V1,
                _ => HarnVariant::V2,
            };
            let spec = HarnSpec {
                variant,
                ..HarnSpec::default()
            };
            let p = HarnParams::init(&mut store, "harn", d, &spec, &base.substream(4))?;
            let o = insert_input(&mut store, "input.o_hat", d, d, &mut data)?;
            let e = insert_input(&mut store, "input.e_hat", d, d, &mut data)?;
            let c = insert_input(&mut store, "input.c_hat", d, d, &mut data)?;
            grad_check(&mut store, &opts, |g, s| {
                let (o, e, c) = (g.param(s, o)?, g.param(s, e)?, g.param(s, c)?);
                let out = harn(g, s, &p, o, e, c)?;
                let mut pr = probe_seed.clone();
                let x = probe(g, out.lang_a, &mut pr)?;
                let y = probe(g, out.lang_b, &mut pr)?;
                g.add(x, y)
            })
        }
        Block::Hca => {
            let e = insert_input(&mut store, "input.e", m, d, &mut data)?;
            let et = insert_input(&mut store, "input.e_tilde", d, d, &mut data)?;
            grad_check(&mut store, &opts, |g, s| {
                let (e, et) = (g.param(s, e)?, g.param(s, et)?);
                let out = hca(g, e, et, 0.3)?;
                probe(g, out, &mut probe_seed.clone())
            })
        }
        Block::CausalEhat => {
            let p = HarnParams::init(&mut store, "harn", d, &HarnSpec::default(), &base.substream(4))?;
            let stream = insert_input(&mut store, "input.stream", 2 * m, d, &mut data)?;
            let normed = insert_input(&mut store, "input.normed", 2 * m, d, &mut data)?;
            let regions = insert_input(&mut store, "input.regions", n, d, &mut data)?;
            let region_valid = vec![true; n];
            let valid = vec![true; m];
            // a strong gate keeps the HARN gradients well above finite-difference noise
            let sw = EhatSwitches {
                lambda: 1.0,
                ..EhatSwitches::default()
            };
            grad_check(&mut store, &opts, |g, s| {
                let inp = CausalInputs {
                    stream: g.param(s, stream)?,
                    normed: g.param(s, normed)?,
                    regions: g.param(s, regions)?,
                    region_valid: &region_valid,
                    valid_a: &valid,
                    valid_b: &valid,
                };
                let (out, _) = causal_ehat(g, s, &p, &sw, &inp, Mode::Train, &drop_seed)?;
                probe(g, out, &mut probe_seed.clone())
            })
        }
        Block::FullModel => {
            let mut cfg = DecoderConfig::tiny(d, 1, 9, 10);
            cfg.m_max = m;
            cfg.heads = if d % 2 == 0 { 2 } else { 1 };
            let mut model = Model::new(cfg, seed)?;
            let regions = random_tensor(n, d, &mut data);
            let words = |v: usize, rng: &mut RngStream| -> Vec<usize> {
                (0..m.saturating_sub(1).max(1)).map(|_| 4 + rng.below(v - 4)).collect()
            };
            let wa = words(9, &mut data);
            let mut wb = words(10, &mut data);
            wb.truncate(wb.len().div_ceil(2));
            let tp = TeacherPair::new(&wa, &wb);
            let config = model.config.clone();
            grad_check(&mut model.store, &opts, |g, s| {
                let model = Model::from_store(config.clone(), s.clone())?;
                let f =
                    forward_teacher_forced(g, &model, &regions, &tp.inputs_a, &tp.inputs_b, Mode::Train, &drop_seed)?;
                Ok(ce_loss(g, f.logits_a, f.logits_b, &tp.targets_a, &tp.targets_b)?.total)
            })
        }
    }
}
