//! Scaled dot-product attention, multi-head attention, masks and the
//! position-wise feed-forward sublayer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

/// Additive bias given to forbidden attention entries. Finite so that the
/// backward pass never meets `0 · ∞`.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Padding,
    Combined,
}

/// Allowed-attention pattern for a `rows × cols` score matrix.
///
/// `row_valid` marks query rows that carry real tokens; it is used by blocks
/// that aggregate over rows (MHCA) to drop padded queries.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    row_valid: Vec<bool>,
}

impl MaskSpec {
    /// Query `t` may attend to keys `0..=t`.
    pub fn causal(m: usize) -> Self {
        let allowed = (0..m * m).map(|i| i % m <= i / m).collect();
        MaskSpec {
            kind: MaskKind::Causal,
            rows: m,
            cols: m,
            allowed,
            row_valid: vec![true; m],
        }
    }

    /// Every query may attend to the keys flagged valid. For square masks the
    /// same flags mark valid query rows.
    pub fn padding(rows: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let allowed = (0..rows * cols).map(|i| key_valid[i % cols]).collect();
        let row_valid = if rows == cols {
            key_valid.to_vec()
        } else {
            vec![true; rows]
        };
        MaskSpec {
            kind: MaskKind::Padding,
            rows,
            cols,
            allowed,
            row_valid,
        }
    }

    /// Padding mask from a valid length: keys `>= valid_len` are forbidden.
    pub fn padding_len(rows: usize, cols: usize, valid_len: usize) -> Self {
        let flags: Vec<bool> = (0..cols).map(|j| j < valid_len).collect();
        let mut m = MaskSpec::padding(rows, &flags);
        if rows == cols {
            m.row_valid = flags;
        }
        m
    }

    /// No restriction.
    pub fn full(rows: usize, cols: usize) -> Self {
        MaskSpec::padding(rows, &vec![true; cols])
    }

    /// Elementwise AND of two allowed sets.
    pub fn combine(&self, other: &MaskSpec) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                "mask combine",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        Ok(MaskSpec {
            kind: MaskKind::Combined,
            rows: self.rows,
            cols: self.cols,
            allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect(),
            row_valid: self
                .row_valid
                .iter()
                .zip(&other.row_valid)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    /// Causal mask restricted to valid tokens; `valid[t]` is false for padding.
    pub fn causal_padding(valid: &[bool]) -> Self {
        let m = valid.len();
        MaskSpec::causal(m)
            .combine(&MaskSpec::padding(m, valid))
            .expect("square masks of equal size")
    }

    /// Mask for the spliced `[E; C]` block of `2M` rows: position `t` of either
    /// language may see positions `0..=t` of both languages, minus padding.
    pub fn block_causal(valid_a: &[bool], valid_b: &[bool]) -> Result<Self> {
        let m = valid_a.len();
        if valid_b.len() != m {
            return Err(Error::dim("block_causal", &[valid_a.len()], &[valid_b.len()]));
        }
        let n = 2 * m;
        let mut allowed = vec![false; n * n];
        for r in 0..n {
            let t = r % m;
            for k in 0..n {
                let s = k % m;
                let key_ok = if k < m { valid_a[s] } else { valid_b[s] };
                allowed[r * n + k] = s <= t && key_ok;
            }
        }
        let row_valid = valid_a.iter().chain(valid_b).copied().collect();
        Ok(MaskSpec {
            kind: MaskKind::Combined,
            rows: n,
            cols: n,
            allowed,
            row_valid,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn row_valid(&self) -> &[bool] {
        &self.row_valid
    }

    /// `0` where allowed, [`MASK_BIAS`] where forbidden.
    pub fn bias(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("mask shape")
    }

    /// Rejects masks with a query row that cannot see any key.
    pub fn check_rows(&self) -> Result<()> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.allowed(r, c)) {
                return Err(Error::contract(format!(
                    "attention row {r} is fully masked (no valid key)"
                )));
            }
        }
        Ok(())
    }

    fn expect_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::dim("mask", &[self.rows, self.cols], &[rows, cols]));
        }
        Ok(())
    }
}

/// Build a mask of the given kind over `m` positions with `valid_len` real
/// tokens (`Causal` ignores the length).
pub fn build_mask(kind: MaskKind, m: usize, valid_len: usize) -> MaskSpec {
    match kind {
        MaskKind::Causal => MaskSpec::causal(m),
        MaskKind::Padding => MaskSpec::padding_len(m, m, valid_len),
        MaskKind::Combined => MaskSpec::causal(m)
            .combine(&MaskSpec::padding_len(m, m, valid_len))
            .expect("square masks of equal size"),
    }
}

/// `softmax(Q Kᵀ / √d + bias) · V`, with optional dropout on the weights.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&MaskSpec>,
    dropout: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Var> {
    let (m, d) = g.shape(q);
    let (n, dk) = g.shape(k);
    if d != dk {
        return Err(Error::dim("attention q/k", g.value(q).shape(), g.value(k).shape()));
    }
    if g.shape(v).0 != n {
        return Err(Error::dim("attention k/v", g.value(k).shape(), g.value(v).shape()));
    }
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, 1.0 / math::sqrt(d as f64))?;
    if let Some(mask) = mask {
        mask.expect_shape(m, n)?;
        mask.check_rows()?;
        scores = g.add_const(scores, &mask.bias())?;
    }
    let weights = g.softmax_rows(scores)?;
    let weights = g.dropout(weights, dropout, mode, rng)?;
    g.matmul(weights, v)
}

/// Scaled dot-product attention.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&MaskSpec>) -> Result<Var> {
    let mut rng = RngStream::new(0);
    attend(g, q, k, v, mask, 0.0, Mode::Eval, &mut rng)
}

/// Projections of one multi-head attention block. Each of `wq`, `wk`, `wv`
/// is `d_model × (heads · d_head)`; head `h` uses columns
/// `h·d_head .. (h+1)·d_head`. `wo` is `(heads · d_head) × d_model`.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_head: usize,
}

impl MultiHeadParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_head = d_model / heads;
        Ok(MultiHeadParams {
            wq: store.insert_linear_keyed(&format!("{prefix}.wq"), d_model, d_model, rng)?,
            wk: store.insert_linear_keyed(&format!("{prefix}.wk"), d_model, d_model, rng)?,
            wv: store.insert_linear_keyed(&format!("{prefix}.wv"), d_model, d_model, rng)?,
            wo: store.insert_linear_keyed(&format!("{prefix}.wo"), d_model, d_model, rng)?,
            heads,
            d_head,
        })
    }
}

/// Multi-head attention: per-head attention on projected inputs, heads
/// concatenated and projected by `wo`.
pub fn multi_head(
    g: &mut Graph,
    store: &ParameterStore,
    p: &MultiHeadParams,
    q_in: Var,
    kv_in: Var,
    mask: Option<&MaskSpec>,
    dropout: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Var> {
    let wq = g.param(store, p.wq)?;
    let wk = g.param(store, p.wk)?;
    let wv = g.param(store, p.wv)?;
    let wo = g.param(store, p.wo)?;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * p.d_head, p.d_head)?,
                g.slice_cols(k, h * p.d_head, p.d_head)?,
                g.slice_cols(v, h * p.d_head, p.d_head)?,
            )
        };
        heads.push(attend(g, qh, kh, vh, mask, dropout, mode, rng)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(joined, wo)
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        Ok(FfnParams {
            w1: store.insert_linear_keyed(&format!("{prefix}.w1"), d_model, d_ff, rng)?,
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(1, d_ff))?,
            w2: store.insert_linear_keyed(&format!("{prefix}.w2"), d_ff, d_model, rng)?,
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(1, d_model))?,
        })
    }
}

/// `max(0, X W₁ + b₁) W₂ + b₂`
pub fn ffn(g: &mut Graph, store: &ParameterStore, p: &FfnParams, x: Var) -> Result<Var> {
    let w1 = g.param(store, p.w1)?;
    let b1 = g.param(store, p.b1)?;
    let w2 = g.param(store, p.w2)?;
    let b2 = g.param(store, p.b2)?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    g.add(y, b2)
}

/// Self-attention over the spliced `[E; C]` language block under the
/// block-causal mask.
pub fn self_attend_language(
    g: &mut Graph,
    store: &ParameterStore,
    p: &MultiHeadParams,
    l: Var,
    mask: &MaskSpec,
    dropout: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Var> {
    if !g.shape(l).0.is_multiple_of(2) {
        return Err(Error::contract("spliced language block must have 2M rows"));
    }
    multi_head(g, store, p, l, l, Some(mask), dropout, mode, rng)
}

/// Cross-attention from language rows to region features.
pub fn cross_attend(
    g: &mut Graph,
    store: &ParameterStore,
    p: &MultiHeadParams,
    l: Var,
    regions: Var,
    region_mask: Option<&MaskSpec>,
    dropout: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Var> {
    if let Some(mask) = region_mask {
        if !(0..mask.cols()).any(|c| mask.allowed(0, c)) {
            return Err(Error::contract("cross attention needs at least one valid region"));
        }
    }
    multi_head(g, store, p, l, regions, region_mask, dropout, mode, rng)
}
