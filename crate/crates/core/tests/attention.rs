mod common;

use common::random;
use ehat_core::attention::{
    build_mask, cross_attend, ffn, multi_head, scaled_dot_attention, self_attend_language, FfnParams, MaskKind,
    MaskSpec, MultiHeadParams,
};
use ehat_core::gradcheck::{grad_check, GradCheckOptions};
use ehat_core::{Error, Graph, Mode, ParameterStore, RngStream, Tensor};
use proptest::prelude::*;

fn identity_heads(d: usize) -> (ParameterStore, MultiHeadParams) {
    let mut store = ParameterStore::new();
    let p = MultiHeadParams::init(&mut store, "mh", d, 1, &RngStream::new(0)).unwrap();
    for id in [p.wq, p.wk, p.wv, p.wo] {
        *store.value_mut(id) = Tensor::eye(d);
    }
    (store, p)
}

#[test]
fn single_head_identity_equals_plain_attention() {
    let d = 4;
    let (store, p) = identity_heads(d);
    for trial in 0..50 {
        let q = random(3, d, 1.0, 2 * trial);
        let kv = random(5, d, 1.0, 2 * trial + 1);
        let mut g = Graph::new();
        let (qv, kvv) = (g.constant(q).unwrap(), g.constant(kv).unwrap());
        let a = multi_head(
            &mut g,
            &store,
            &p,
            qv,
            kvv,
            None,
            0.0,
            Mode::Eval,
            &mut RngStream::new(1),
        )
        .unwrap();
        let b = scaled_dot_attention(&mut g, qv, kvv, kvv, None).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn output_rows_in_convex_hull(seed in any::<u64>(), m in 1usize..5, n in 1usize..6) {
        let d = 3;
        let mut g = Graph::new();
        let q = g.constant(random(m, d, 2.0, seed)).unwrap();
        let k = g.constant(random(n, d, 2.0, seed ^ 1)).unwrap();
        let vt = random(n, d, 2.0, seed ^ 2);
        let v = g.constant(vt.clone()).unwrap();
        let y = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for c in 0..d {
            let lo = (0..n).map(|r| vt.get(r, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|r| vt.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            for r in 0..m {
                let x = g.value(y).get(r, c);
                prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
            }
        }
    }
}

#[test]
fn multi_head_shape_and_gradient() {
    let d = 8;
    let mut store = ParameterStore::new();
    let p = MultiHeadParams::init(&mut store, "mh", d, 2, &RngStream::new(3)).unwrap();
    let q = random(3, d, 1.0, 4);
    let kv = random(5, d, 1.0, 5);
    let mask = MaskSpec::padding_len(3, 5, 4);
    let w = random(3, d, 1.0, 6).into_data();
    let r = grad_check(&mut store, &GradCheckOptions::default(), |g, s| {
        let qv = g.constant(q.clone())?;
        let kvv = g.constant(kv.clone())?;
        let y = multi_head(g, s, &p, qv, kvv, Some(&mask), 0.0, Mode::Eval, &mut RngStream::new(0))?;
        assert_eq!(g.shape(y), (3, d));
        let y = g.mul_const(y, w.clone())?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn heads_must_divide_width() {
    let mut store = ParameterStore::new();
    assert!(matches!(
        MultiHeadParams::init(&mut store, "mh", 6, 4, &RngStream::new(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn ffn_examples_and_gradient() {
    let mut store = ParameterStore::new();
    let p = FfnParams::init(&mut store, "f", 2, 2, &RngStream::new(0)).unwrap();
    *store.value_mut(p.w1) = Tensor::eye(2);
    *store.value_mut(p.w2) = Tensor::eye(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[-1.0, 2.0]]).unwrap()).unwrap();
    let y = ffn(&mut g, &store, &p, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);

    *store.value_mut(p.b2) = Tensor::from_rows(&[&[0.25, -0.5]]).unwrap();
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::from_rows(&[&[-1.0, -3.0], &[-2.0, -0.1]]).unwrap())
        .unwrap();
    let y = ffn(&mut g, &store, &p, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -0.5, 0.25, -0.5]);

    let mut store = ParameterStore::new();
    let p = FfnParams::init(&mut store, "f", 4, 16, &RngStream::new(2)).unwrap();
    let x = random(3, 4, 1.0, 7);
    let opts = GradCheckOptions {
        kink_screen: true,
        ..GradCheckOptions::default()
    };
    let r = grad_check(&mut store, &opts, |g, s| {
        let xv = g.constant(x.clone())?;
        let y = ffn(g, s, &p, xv)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn spliced_outputs(store: &ParameterStore, p: &MultiHeadParams, l: &Tensor, mask: &MaskSpec) -> Tensor {
    let mut g = Graph::new();
    let lv = g.constant(l.clone()).unwrap();
    let y = self_attend_language(&mut g, store, p, lv, mask, 0.0, Mode::Eval, &mut RngStream::new(0)).unwrap();
    g.value(y).clone()
}

#[test]
fn block_causal_future_perturbation() {
    let (d, m) = (4, 5);
    let mut store = ParameterStore::new();
    let p = MultiHeadParams::init(&mut store, "mh", d, 2, &RngStream::new(1)).unwrap();
    let valid = vec![true; m];
    let mask = MaskSpec::block_causal(&valid, &valid).unwrap();
    let mut rng = RngStream::new(2);
    for trial in 0..100 {
        let l = random(2 * m, d, 1.0, 100 + trial);
        let base = spliced_outputs(&store, &p, &l, &mask);
        let t = rng.below(m - 1);
        let lang = trial as usize % 2;
        let mut l2 = l.clone();
        for pos in t + 1..m {
            for c in 0..d {
                l2.set(lang * m + pos, c, rng.normal());
            }
        }
        let out = spliced_outputs(&store, &p, &l2, &mask);
        for block in 0..2 {
            for pos in 0..=t {
                let r = block * m + pos;
                let same = base
                    .row(r)
                    .iter()
                    .zip(out.row(r))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "trial {trial}: row {r} changed");
            }
        }
    }
}

#[test]
fn single_position_sees_both_first_tokens() {
    let mask = MaskSpec::block_causal(&[true], &[true]).unwrap();
    assert!(mask.allowed(0, 0) && mask.allowed(0, 1) && mask.allowed(1, 0) && mask.allowed(1, 1));
    let mut store = ParameterStore::new();
    let p = MultiHeadParams::init(&mut store, "mh", 2, 1, &RngStream::new(1)).unwrap();
    let out = spliced_outputs(&store, &p, &random(2, 2, 1.0, 1), &mask);
    assert_eq!(out.shape(), &[2, 2]);
    let mut g = Graph::new();
    let odd = g.constant(Tensor::zeros(3, 2)).unwrap();
    let three = MaskSpec::full(3, 3);
    assert!(self_attend_language(&mut g, &store, &p, odd, &three, 0.0, Mode::Eval, &mut RngStream::new(0)).is_err());
}

#[test]
fn cross_attention_single_region_and_padding() {
    let d = 4;
    let mut store = ParameterStore::new();
    let p = MultiHeadParams::init(&mut store, "x", d, 2, &RngStream::new(5)).unwrap();
    let l = random(6, d, 1.0, 1);

    // one region: each row is that region's value projected through wv, wo
    let o = random(1, d, 1.0, 2);
    let mut g = Graph::new();
    let (lv, ov) = (g.constant(l.clone()).unwrap(), g.constant(o.clone()).unwrap());
    let y = cross_attend(
        &mut g,
        &store,
        &p,
        lv,
        ov,
        None,
        0.0,
        Mode::Eval,
        &mut RngStream::new(0),
    )
    .unwrap();
    let proj = o.matmul(store.value(p.wv)).unwrap().matmul(store.value(p.wo)).unwrap();
    for r in 0..6 {
        for c in 0..d {
            assert!((g.value(y).get(r, c) - proj.get(0, c)).abs() < 1e-12);
        }
    }

    // padded regions do not matter
    let o = random(5, d, 1.0, 3);
    let mut o2 = o.clone();
    for c in 0..d {
        o2.set(3, c, 1e3);
        o2.set(4, c, -7.0);
    }
    let mask = MaskSpec::padding_len(6, 5, 3);
    let run = |regions: &Tensor| {
        let mut g = Graph::new();
        let (lv, ov) = (g.constant(l.clone()).unwrap(), g.constant(regions.clone()).unwrap());
        let y = cross_attend(
            &mut g,
            &store,
            &p,
            lv,
            ov,
            Some(&mask),
            0.0,
            Mode::Eval,
            &mut RngStream::new(0),
        )
        .unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(&o), run(&o2));
    assert_eq!(a.shape(), &[6, d]);
    assert!(a.max_abs_diff(&b) < 1e-12);

    let none = MaskSpec::padding_len(6, 5, 0);
    let mut g = Graph::new();
    let (lv, ov) = (g.constant(l.clone()).unwrap(), g.constant(o).unwrap());
    assert!(cross_attend(
        &mut g,
        &store,
        &p,
        lv,
        ov,
        Some(&none),
        0.0,
        Mode::Eval,
        &mut RngStream::new(0)
    )
    .is_err());
}

#[test]
fn mask_builders() {
    let c = build_mask(MaskKind::Causal, 3, 3);
    for r in 0..3 {
        for k in 0..3 {
            assert_eq!(c.allowed(r, k), k <= r);
        }
    }
    let pad = build_mask(MaskKind::Padding, 4, 2);
    for r in 0..4 {
        assert!(pad.allowed(r, 0) && pad.allowed(r, 1) && !pad.allowed(r, 2) && !pad.allowed(r, 3));
    }
    let both = build_mask(MaskKind::Combined, 4, 2);
    for r in 0..4 {
        for k in 0..4 {
            assert_eq!(both.allowed(r, k), c_allowed(r, k) && pad.allowed(r, k));
        }
    }
    let bias = pad.bias();
    assert_eq!(bias.get(0, 3), ehat_core::attention::MASK_BIAS);
    assert_eq!(bias.get(0, 0), 0.0);
}

fn c_allowed(r: usize, k: usize) -> bool {
    k <= r
}

#[test]
fn fully_masked_row_is_contract_error() {
    let mut g = Graph::new();
    let q = g.constant(random(2, 2, 1.0, 1)).unwrap();
    let k = g.constant(random(3, 2, 1.0, 2)).unwrap();
    let mask = MaskSpec::padding_len(2, 3, 0);
    assert!(matches!(
        scaled_dot_attention(&mut g, q, k, k, Some(&mask)),
        Err(Error::Contract(_))
    ));
}
