//! Embedded heterogeneous attention: cross-modal projection (MHCA), the
//! heterogeneous alignment-refined network (HARN) in its three variants, and
//! heterogeneous cross attention (HCA).
//!
//! The free functions operate on whole matrices. [`causal_ehat`] is the form
//! used inside the decoder: it evaluates the same algebra once per target
//! position over that position's prefix only, so no language row ever sees a
//! later token through the `d × d` aggregates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::MaskSpec;
use crate::graph::{dropout_mask, Graph, Mode, Var};
use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhcaParams {
    pub dropout: f64,
}

impl Default for MhcaParams {
    fn default() -> Self {
        MhcaParams { dropout: 0.1 }
    }
}

impl MhcaParams {
    pub fn new(dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("MHCA dropout {dropout} outside [0, 1)")));
        }
        Ok(MhcaParams { dropout })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HcaParams {
    pub lambda: f64,
}

impl Default for HcaParams {
    fn default() -> Self {
        HcaParams { lambda: 0.3 }
    }
}

impl HcaParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(HcaParams { lambda })
    }
}

fn row_mask(valid: &[bool], d: usize) -> Option<Vec<f64>> {
    if valid.iter().all(|&v| v) {
        return None;
    }
    Some(
        valid
            .iter()
            .flat_map(|&v| core::iter::repeat_n(if v { 1.0 } else { 0.0 }, d))
            .collect(),
    )
}

/// Self-attend `x` under `mask`, then aggregate the attended rows into a
/// `d × d` matrix: `drop(Xmᵀ Xm / √d)` with `Xm = drop(softmax(X Xᵀ/√d)) X`.
/// Rows the mask flags as padding are left out of the aggregate.
pub fn mhca_project(g: &mut Graph, x: Var, mask: &MaskSpec, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
    let (r, d) = g.shape(x);
    if r == 0 {
        return Err(Error::contract("MHCA needs at least one row"));
    }
    if mask.rows() != r || mask.cols() != r {
        return Err(Error::dim("mhca mask", &[mask.rows(), mask.cols()], &[r, r]));
    }
    mask.check_rows()?;
    let xm = attended_rows(g, x, mask, rate, mode, rng)?;
    let gram = g.matmul_tn(xm, xm)?;
    let gram = g.scale(gram, 1.0 / math::sqrt(d as f64))?;
    g.dropout(gram, rate, mode, rng)
}

fn attended_rows(g: &mut Graph, x: Var, mask: &MaskSpec, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
    let d = g.shape(x).1;
    let scores = g.matmul_nt(x, x)?;
    let scores = g.scale(scores, 1.0 / math::sqrt(d as f64))?;
    let scores = g.add_const(scores, &mask.bias())?;
    let att = g.softmax_rows(scores)?;
    let att = g.dropout(att, rate, mode, rng)?;
    let xm = g.matmul(att, x)?;
    match row_mask(mask.row_valid(), d) {
        Some(m) => g.mul_const(xm, m),
        None => Ok(xm),
    }
}

/// Unattended aggregate `XᵀX / √d` over valid rows (the MHCA ablation).
pub fn plain_project(g: &mut Graph, x: Var, row_valid: &[bool]) -> Result<Var> {
    let d = g.shape(x).1;
    let x = match row_mask(row_valid, d) {
        Some(m) => g.mul_const(x, m)?,
        None => x,
    };
    let gram = g.matmul_tn(x, x)?;
    g.scale(gram, 1.0 / math::sqrt(d as f64))
}

pub struct MhcaMasks<'a> {
    pub regions: &'a MaskSpec,
    pub lang_a: &'a MaskSpec,
    pub lang_b: &'a MaskSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct MhcaOutput {
    pub regions: Var,
    pub lang_a: Var,
    pub lang_b: Var,
}

/// Three independent projections with independent dropout streams.
pub fn mhca(
    g: &mut Graph,
    regions: Var,
    lang_a: Var,
    lang_b: Var,
    masks: &MhcaMasks<'_>,
    params: &MhcaParams,
    mode: Mode,
    rng: &RngStream,
) -> Result<MhcaOutput> {
    let d = g.shape(regions).1;
    if g.shape(lang_a).1 != d || g.shape(lang_b).1 != d {
        return Err(Error::dim(
            "mhca inputs",
            g.value(lang_a).shape(),
            g.value(regions).shape(),
        ));
    }
    let r = params.dropout;
    Ok(MhcaOutput {
        regions: mhca_project(g, regions, masks.regions, r, mode, &mut rng.substream(0))?,
        lang_a: mhca_project(g, lang_a, masks.lang_a, r, mode, &mut rng.substream(1))?,
        lang_b: mhca_project(g, lang_b, masks.lang_b, r, mode, &mut rng.substream(2))?,
    })
}

// ---- HARN -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarnVariant {
    Prototype,
    V1,
    V2,
}

impl HarnVariant {
    pub fn name(self) -> &'static str {
        match self {
            HarnVariant::Prototype => "prototype",
            HarnVariant::V1 => "v1",
            HarnVariant::V2 => "v2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(HarnVariant::Prototype),
            "v1" => Ok(HarnVariant::V1),
            "v2" => Ok(HarnVariant::V2),
            _ => Err(Error::config(format!("unknown HARN variant `{s}`"))),
        }
    }
}

/// How the ω-scaled matrix enters the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarnReading {
    /// `[X̂, ω⊙X̂] · H` with `H: 2d × d`.
    Concat,
    /// `(ω⊙X̂) · H` with `H: d × d`.
    ScaleOnly,
}

impl HarnReading {
    pub fn name(self) -> &'static str {
        match self {
            HarnReading::Concat => "concat",
            HarnReading::ScaleOnly => "scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(HarnReading::Concat),
            "scale" => Ok(HarnReading::ScaleOnly),
            _ => Err(Error::config(format!("unknown HARN reading `{s}`"))),
        }
    }
}

/// Visual anchor pathway: input MLP, its inner attention projection and the
/// row scoring vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPath {
    pub mlp_w: ParamId,
    pub mlp_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub score: ParamId,
}

/// Similarity MLP over `[X̂, Ôⱼ]` and its scoring vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPath {
    pub gamma_w: ParamId,
    pub gamma_b: ParamId,
    pub score: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguagePath {
    pub similarity: Option<SimilarityPath>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarnSpec {
    pub variant: HarnVariant,
    pub reading: HarnReading,
    /// `false` drops the similarity weight (ω ≡ 1) and all parameters that
    /// only feed it.
    pub similarity: bool,
    /// Prototype only: both languages share one visual pathway.
    pub tie_visual: bool,
    /// Start the output projections at zero.
    pub zero_output: bool,
}

impl Default for HarnSpec {
    fn default() -> Self {
        HarnSpec {
            variant: HarnVariant::Prototype,
            reading: HarnReading::Concat,
            similarity: true,
            tie_visual: false,
            zero_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnParams {
    pub variant: HarnVariant,
    pub reading: HarnReading,
    /// One entry per distinct visual pathway; `[a, b]` or `[shared]`.
    pub visual: Vec<VisualPath>,
    pub lang_a: LanguagePath,
    pub lang_b: LanguagePath,
}

fn zeros_or_linear(
    store: &mut ParameterStore,
    path: &str,
    rows: usize,
    cols: usize,
    zero: bool,
    rng: &RngStream,
) -> Result<ParamId> {
    if zero {
        store.insert(path, Tensor::zeros(rows, cols))
    } else {
        store.insert_linear_keyed(path, rows, cols, rng)
    }
}

impl HarnParams {
    pub fn init(store: &mut ParameterStore, prefix: &str, d: usize, spec: &HarnSpec, rng: &RngStream) -> Result<Self> {
        if spec.tie_visual && spec.variant != HarnVariant::Prototype {
            return Err(Error::config("visual tying only applies to the prototype"));
        }
        let mut visual = Vec::new();
        if spec.similarity {
            let paths = match (spec.variant, spec.tie_visual) {
                (HarnVariant::V1, _) | (_, true) => 1,
                _ => 2,
            };
            for j in 0..paths {
                let p = format!("{prefix}.visual{j}");
                visual.push(VisualPath {
                    mlp_w: store.insert_linear_keyed(&format!("{p}.mlp_w"), d, d, rng)?,
                    mlp_b: store.insert(format!("{p}.mlp_b"), Tensor::zeros(1, d))?,
                    proj_w: store.insert_linear_keyed(&format!("{p}.proj_w"), d, d, rng)?,
                    proj_b: store.insert(format!("{p}.proj_b"), Tensor::zeros(1, d))?,
                    score: store.insert_linear_keyed(&format!("{p}.score"), d, 1, rng)?,
                });
            }
        }
        let out_rows = match spec.reading {
            HarnReading::Concat => 2 * d,
            HarnReading::ScaleOnly => d,
        };
        let mut lang = |name: &str| -> Result<LanguagePath> {
            let p = format!("{prefix}.{name}");
            let similarity = if spec.similarity {
                Some(SimilarityPath {
                    gamma_w: store.insert_linear_keyed(&format!("{p}.gamma_w"), 2 * d, d, rng)?,
                    gamma_b: store.insert(format!("{p}.gamma_b"), Tensor::zeros(1, d))?,
                    score: store.insert_linear_keyed(&format!("{p}.score"), d, 1, rng)?,
                })
            } else {
                None
            };
            Ok(LanguagePath {
                similarity,
                out_w: zeros_or_linear(store, &format!("{p}.out_w"), out_rows, d, spec.zero_output, rng)?,
                out_b: store.insert(format!("{p}.out_b"), Tensor::zeros(1, d))?,
            })
        };
        let lang_a = lang("lang_a")?;
        let lang_b = lang("lang_b")?;
        Ok(HarnParams {
            variant: spec.variant,
            reading: spec.reading,
            visual,
            lang_a,
            lang_b,
        })
    }

    pub fn similarity(&self) -> bool {
        self.lang_a.similarity.is_some()
    }

    /// Visual pathway anchoring language A and language B.
    fn anchors(&self) -> Option<(&VisualPath, &VisualPath)> {
        match self.visual.len() {
            0 => None,
            1 => Some((&self.visual[0], &self.visual[0])),
            _ => Some((&self.visual[0], &self.visual[1])),
        }
    }

    /// Every parameter id this block owns, without duplicates.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for v in &self.visual {
            ids.extend([v.mlp_w, v.mlp_b, v.proj_w, v.proj_b, v.score]);
        }
        for l in [&self.lang_a, &self.lang_b] {
            if let Some(s) = &l.similarity {
                ids.extend([s.gamma_w, s.gamma_b, s.score]);
            }
            ids.extend([l.out_w, l.out_b]);
        }
        ids
    }

    pub fn count(&self, store: &ParameterStore) -> usize {
        self.ids().iter().map(|&id| store.value(id).len()).sum()
    }
}

/// `Ô · W + b` for one visual pathway.
pub fn visual_input(g: &mut Graph, store: &ParameterStore, vis: &VisualPath, o_hat: Var) -> Result<Var> {
    let w = g.param(store, vis.mlp_w)?;
    let b = g.param(store, vis.mlp_b)?;
    let y = g.matmul(o_hat, w)?;
    g.add(y, b)
}

/// `softmax_rows(Ôⱼ P + p) · Ôⱼ`
pub fn gamma_o(g: &mut Graph, store: &ParameterStore, vis: &VisualPath, o_j: Var) -> Result<Var> {
    let (r, c) = g.shape(o_j);
    if r != c {
        return Err(Error::dim("gamma_o", &[r, c], &[c, c]));
    }
    let w = g.param(store, vis.proj_w)?;
    let b = g.param(store, vis.proj_b)?;
    let p = g.matmul(o_j, w)?;
    let p = g.add(p, b)?;
    let att = g.softmax_rows(p)?;
    g.matmul(att, o_j)
}

/// Per-row weight `σ(a − b)` as a `d × 1` column, where
/// `a = Γ([X̂, Ôⱼ]) · w` and `b = gamma_o(Ôⱼ) · wⱼ`.
pub fn hetero_weight(
    g: &mut Graph,
    store: &ParameterStore,
    sim: &SimilarityPath,
    vis: &VisualPath,
    x_hat: Var,
    o_j: Var,
) -> Result<Var> {
    let gw = g.param(store, sim.gamma_w)?;
    let gb = g.param(store, sim.gamma_b)?;
    let ws = g.param(store, sim.score)?;
    let joined = g.concat_cols(&[x_hat, o_j])?;
    let h = g.matmul(joined, gw)?;
    let h = g.add(h, gb)?;
    let a = g.matmul(h, ws)?;
    let go = gamma_o(g, store, vis, o_j)?;
    let wo = g.param(store, vis.score)?;
    let b = g.matmul(go, wo)?;
    let diff = g.sub(a, b)?;
    g.sigmoid(diff)
}

/// ω for both languages, each a `d × 1` column with entries in `(0, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct HeterogeneousWeights {
    pub lang_a: Var,
    pub lang_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HarnOutput {
    pub lang_a: Var,
    pub lang_b: Var,
    pub weights: HeterogeneousWeights,
}

/// Scale row `i` of `x` by `w[i]` (`w` is `rows × 1`).
fn scale_rows(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let d = g.shape(x).1;
    let ones = g.constant(Tensor::filled(1, d, 1.0))?;
    let spread = g.matmul(w, ones)?;
    g.mul(spread, x)
}

fn check_variant(p: &HarnParams, want: HarnVariant) -> Result<()> {
    if p.variant != want {
        return Err(Error::contract(format!(
            "HARN parameters are for `{}`, called as `{}`",
            p.variant.name(),
            want.name()
        )));
    }
    Ok(())
}

fn output_projection(
    g: &mut Graph,
    store: &ParameterStore,
    reading: HarnReading,
    lang: &LanguagePath,
    first: Var,
    scaled: Var,
) -> Result<Var> {
    let w = g.param(store, lang.out_w)?;
    let b = g.param(store, lang.out_b)?;
    let input = match reading {
        HarnReading::Concat => g.concat_cols(&[first, scaled])?,
        HarnReading::ScaleOnly => scaled,
    };
    let y = g.matmul(input, w)?;
    g.add(y, b)
}

/// Dispatch on `p.variant`.
pub fn harn(
    g: &mut Graph,
    store: &ParameterStore,
    p: &HarnParams,
    o_hat: Var,
    e_hat: Var,
    c_hat: Var,
) -> Result<HarnOutput> {
    for v in [o_hat, e_hat, c_hat] {
        let (r, c) = g.shape(v);
        if r != c || c != g.shape(e_hat).1 {
            return Err(Error::dim("harn inputs", &[r, c], g.value(e_hat).shape()));
        }
    }
    let d = g.shape(e_hat).1;
    let (w_a, w_b) = match p.anchors() {
        Some((va, vb)) => {
            let sa = p.lang_a.similarity.as_ref().expect("similarity path");
            let sb = p.lang_b.similarity.as_ref().expect("similarity path");
            let oa = visual_input(g, store, va, o_hat)?;
            let ob = if va == vb {
                oa
            } else {
                visual_input(g, store, vb, o_hat)?
            };
            (
                hetero_weight(g, store, sa, va, e_hat, oa)?,
                hetero_weight(g, store, sb, vb, c_hat, ob)?,
            )
        }
        None => {
            let ones = g.constant(Tensor::filled(d, 1, 1.0))?;
            (ones, ones)
        }
    };
    let se = scale_rows(g, w_a, e_hat)?;
    let sc = scale_rows(g, w_b, c_hat)?;
    let (ea, eb, ca, cb) = match p.variant {
        HarnVariant::Prototype | HarnVariant::V1 => (e_hat, se, c_hat, sc),
        HarnVariant::V2 => (se, c_hat, sc, e_hat),
    };
    let (lang_a, lang_b) = match p.reading {
        HarnReading::Concat => (
            output_projection(g, store, p.reading, &p.lang_a, ea, eb)?,
            output_projection(g, store, p.reading, &p.lang_b, ca, cb)?,
        ),
        HarnReading::ScaleOnly => (
            output_projection(g, store, p.reading, &p.lang_a, e_hat, se)?,
            output_projection(g, store, p.reading, &p.lang_b, c_hat, sc)?,
        ),
    };
    Ok(HarnOutput {
        lang_a,
        lang_b,
        weights: HeterogeneousWeights {
            lang_a: w_a,
            lang_b: w_b,
        },
    })
}

pub fn harn_prototype(
    g: &mut Graph,
    store: &ParameterStore,
    p: &HarnParams,
    o_hat: Var,
    e_hat: Var,
    c_hat: Var,
) -> Result<HarnOutput> {
    check_variant(p, HarnVariant::Prototype)?;
    harn(g, store, p, o_hat, e_hat, c_hat)
}

pub fn harn_variant1(
    g: &mut Graph,
    store: &ParameterStore,
    p: &HarnParams,
    o_hat: Var,
    e_hat: Var,
    c_hat: Var,
) -> Result<HarnOutput> {
    check_variant(p, HarnVariant::V1)?;
    harn(g, store, p, o_hat, e_hat, c_hat)
}

pub fn harn_variant2(
    g: &mut Graph,
    store: &ParameterStore,
    p: &HarnParams,
    o_hat: Var,
    e_hat: Var,
    c_hat: Var,
) -> Result<HarnOutput> {
    check_variant(p, HarnVariant::V2)?;
    harn(g, store, p, o_hat, e_hat, c_hat)
}

// ---- HCA --------------------------------------------------------------------

/// `(1 + λ S) ⊙ E` with `S = softmax_rows(E Ẽ / √d)`. Returns the output and `S`.
pub fn hca_with_scores(g: &mut Graph, e: Var, e_tilde: Var, lambda: f64) -> Result<(Var, Var)> {
    let d = g.shape(e).1;
    if g.shape(e_tilde) != (d, d) {
        return Err(Error::dim("hca", g.value(e).shape(), g.value(e_tilde).shape()));
    }
    let s = g.matmul(e, e_tilde)?;
    let s = g.scale(s, 1.0 / math::sqrt(d as f64))?;
    let s = g.softmax_rows(s)?;
    let gate = g.scale(s, lambda)?;
    let gate = g.add_scalar(gate, 1.0)?;
    Ok((g.mul(gate, e)?, s))
}

pub fn hca(g: &mut Graph, e: Var, e_tilde: Var, lambda: f64) -> Result<Var> {
    Ok(hca_with_scores(g, e, e_tilde, lambda)?.0)
}

// ---- causal per-prefix route ---------------------------------------------------

/// Block switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EhatSwitches {
    /// `false` replaces the attended projection by `XᵀX/√d`.
    pub mhca: bool,
    /// `false` replaces the gate by an additive `X Ẽ / √d` branch.
    pub hca: bool,
    pub lambda: f64,
    pub dropout: f64,
}

impl Default for EhatSwitches {
    fn default() -> Self {
        EhatSwitches {
            mhca: true,
            hca: true,
            lambda: 0.3,
            dropout: 0.1,
        }
    }
}

/// Per-position ω columns and HCA score rows, for export.
#[derive(Clone, Debug, Default)]
pub struct EhatTrace {
    pub omega_a: Vec<Var>,
    pub omega_b: Vec<Var>,
    pub scores_a: Vec<Var>,
    pub scores_b: Vec<Var>,
}

/// Inputs to [`causal_ehat`]. `normed` is the layer-normalized `[E; C]`
/// block that feeds the attention; `stream` is the residual stream the HCA
/// gate multiplies. Both are `2M × d`.
pub struct CausalInputs<'a> {
    pub stream: Var,
    pub normed: Var,
    pub regions: Var,
    pub region_valid: &'a [bool],
    pub valid_a: &'a [bool],
    pub valid_b: &'a [bool],
}

struct Prefixes {
    /// `Ê_t` for every position.
    hats: Vec<Var>,
}

fn language_prefixes(
    g: &mut Graph,
    xn: Var,
    valid: &[bool],
    sw: &EhatSwitches,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Prefixes> {
    let (m, d) = g.shape(xn);
    let xm = if sw.mhca {
        let mask = MaskSpec::causal_padding(valid);
        if !valid[0] {
            return Err(Error::contract("language block starts with padding"));
        }
        attended_rows(g, xn, &mask, sw.dropout, mode, rng)?
    } else {
        match row_mask(valid, d) {
            Some(mk) => g.mul_const(xn, mk)?,
            None => xn,
        }
    };
    let keep = if sw.mhca && mode == Mode::Train && sw.dropout > 0.0 {
        Some(dropout_mask(d * d, sw.dropout, rng))
    } else {
        None
    };
    let inv = 1.0 / math::sqrt(d as f64);
    let mut hats = Vec::with_capacity(m);
    let mut acc: Option<Var> = None;
    for t in 0..m {
        let row = g.slice_rows(xm, t, 1)?;
        let outer = g.matmul_tn(row, row)?;
        let sum = match acc {
            Some(prev) => g.add(prev, outer)?,
            None => outer,
        };
        acc = Some(sum);
        let hat = g.scale(sum, inv)?;
        let hat = match &keep {
            Some(k) => g.mul_const(hat, k.clone())?,
            None => hat,
        };
        hats.push(hat);
    }
    Ok(Prefixes { hats })
}

/// Position-independent pieces of one language's similarity score:
/// `a_t = Ê_t · k + c`, and the visual offset `b`.
struct ScoreTerms {
    k: Var,
    c: Var,
    b: Var,
}

fn score_terms(
    g: &mut Graph,
    store: &ParameterStore,
    sim: &SimilarityPath,
    vis: &VisualPath,
    o_j: Var,
) -> Result<ScoreTerms> {
    let d = g.shape(o_j).1;
    let gw = g.param(store, sim.gamma_w)?;
    let gb = g.param(store, sim.gamma_b)?;
    let ws = g.param(store, sim.score)?;
    let top = g.slice_rows(gw, 0, d)?;
    let bot = g.slice_rows(gw, d, d)?;
    let k = g.matmul(top, ws)?;
    let kb = g.matmul(bot, ws)?;
    let c = g.matmul(o_j, kb)?;
    let bias = g.matmul(gb, ws)?;
    let c = g.add(c, bias)?;
    let go = gamma_o(g, store, vis, o_j)?;
    let wo = g.param(store, vis.score)?;
    let b = g.matmul(go, wo)?;
    Ok(ScoreTerms { k, c, b })
}

/// One EHAT block inside the decoder. Position `t` of each language uses
/// `Ê_t`, `Ĉ_t` built from rows `0..=t` only, so the block keeps the
/// decoder's dual causality.
pub fn causal_ehat(
    g: &mut Graph,
    store: &ParameterStore,
    p: &HarnParams,
    sw: &EhatSwitches,
    inp: &CausalInputs<'_>,
    mode: Mode,
    rng: &RngStream,
) -> Result<(Var, EhatTrace)> {
    let m = inp.valid_a.len();
    let (rows, d) = g.shape(inp.normed);
    if rows != 2 * m || inp.valid_b.len() != m || g.shape(inp.stream) != (rows, d) {
        return Err(Error::dim("causal_ehat", &[rows, d], &[2 * m, d]));
    }
    let na = g.slice_rows(inp.normed, 0, m)?;
    let nb = g.slice_rows(inp.normed, m, m)?;
    let pa = language_prefixes(g, na, inp.valid_a, sw, mode, &mut rng.substream(1))?;
    let pb = language_prefixes(g, nb, inp.valid_b, sw, mode, &mut rng.substream(2))?;

    let terms = match p.anchors() {
        Some((va, vb)) => {
            let o_hat = if sw.mhca {
                let n = inp.region_valid.len();
                let mask = MaskSpec::padding(n, inp.region_valid);
                mhca_project(g, inp.regions, &mask, sw.dropout, mode, &mut rng.substream(0))?
            } else {
                plain_project(g, inp.regions, inp.region_valid)?
            };
            let oa = visual_input(g, store, va, o_hat)?;
            let ob = if va == vb {
                oa
            } else {
                visual_input(g, store, vb, o_hat)?
            };
            let sa = p.lang_a.similarity.as_ref().expect("similarity path");
            let sb = p.lang_b.similarity.as_ref().expect("similarity path");
            Some((score_terms(g, store, sa, va, oa)?, score_terms(g, store, sb, vb, ob)?))
        }
        None => None,
    };

    let mut trace = EhatTrace::default();
    let mut out_rows = Vec::with_capacity(2 * m);
    for lang in 0..2 {
        let (own, other, path) = if lang == 0 {
            (&pa, &pb, &p.lang_a)
        } else {
            (&pb, &pa, &p.lang_b)
        };
        let hw = g.param(store, path.out_w)?;
        let hb = g.param(store, path.out_b)?;
        let (h_top, h_bot) = match p.reading {
            HarnReading::Concat => (g.slice_rows(hw, 0, d)?, Some(g.slice_rows(hw, d, d)?)),
            HarnReading::ScaleOnly => (hw, None),
        };
        let st = terms.as_ref().map(|(a, b)| if lang == 0 { a } else { b });
        for t in 0..m {
            let r = lang * m + t;
            let q = g.slice_rows(inp.normed, r, 1)?;
            let hat = own.hats[t];
            let u = g.matmul(q, hat)?;
            let w = match st {
                Some(s) => {
                    let a = g.matmul(hat, s.k)?;
                    let a = g.add(a, s.c)?;
                    let diff = g.sub(a, s.b)?;
                    let omega = g.sigmoid(diff)?;
                    if lang == 0 {
                        trace.omega_a.push(omega);
                    } else {
                        trace.omega_b.push(omega);
                    }
                    let omega_row = g.transpose(omega)?;
                    let qw = g.mul(q, omega_row)?;
                    g.matmul(qw, hat)?
                }
                None => u,
            };
            // r_t = q_t · Ẽ_t without forming Ẽ_t
            let mut rt = match (p.variant, h_bot) {
                (HarnVariant::V2, Some(bot)) => {
                    let cross = g.matmul(q, other.hats[t])?;
                    let x = g.matmul(w, h_top)?;
                    let y = g.matmul(cross, bot)?;
                    g.add(x, y)?
                }
                (_, Some(bot)) => {
                    let x = g.matmul(u, h_top)?;
                    let y = g.matmul(w, bot)?;
                    g.add(x, y)?
                }
                (_, None) => g.matmul(w, h_top)?,
            };
            let qsum = g.sum(q)?;
            let bias = g.matmul(qsum, hb)?;
            rt = g.add(rt, bias)?;
            let rt = g.scale(rt, 1.0 / math::sqrt(d as f64))?;
            let xs = g.slice_rows(inp.stream, r, 1)?;
            let out = if sw.hca {
                let s = g.softmax_rows(rt)?;
                if lang == 0 {
                    trace.scores_a.push(s);
                } else {
                    trace.scores_b.push(s);
                }
                let gate = g.scale(s, sw.lambda)?;
                let gate = g.add_scalar(gate, 1.0)?;
                g.mul(xs, gate)?
            } else {
                g.add(xs, rt)?
            };
            out_rows.push(out);
        }
    }
    Ok((g.concat_rows(&out_rows)?, trace))
}

/// Human-readable list of the block's parameter paths.
pub fn describe(p: &HarnParams, store: &ParameterStore) -> Vec<String> {
    p.ids().iter().map(|&id| String::from(store.path(id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hca_example() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::eye(2)).unwrap();
        let et = g.constant(Tensor::zeros(2, 2)).unwrap();
        let out = hca(&mut g, e, et, 0.3).unwrap();
        let want = [1.15, 0.0, 0.0, 1.15];
        for (a, b) in g.value(out).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhca_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 4)).unwrap();
        let mask = MaskSpec::full(3, 3);
        let mut rng = RngStream::new(1);
        let y = mhca_project(&mut g, x, &mask, 0.1, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.shape(y), (4, 4));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variant_mismatch_is_contract_error() {
        let mut store = ParameterStore::new();
        let spec = HarnSpec {
            variant: HarnVariant::V1,
            ..HarnSpec::default()
        };
        let p = HarnParams::init(&mut store, "h", 2, &spec, &RngStream::new(0)).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(2, 2)).unwrap();
        let err = harn_prototype(&mut g, &store, &p, z, z, z).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
