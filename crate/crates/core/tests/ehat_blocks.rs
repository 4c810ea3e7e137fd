mod common;

use common::random;
use ehat_core::attention::MaskSpec;
use ehat_core::ehat::{
    causal_ehat, gamma_o, harn, harn_prototype, harn_variant1, harn_variant2, hca, hetero_weight, mhca, mhca_project,
    visual_input, CausalInputs, EhatSwitches, HarnParams, HarnReading, HarnSpec, HarnVariant, MhcaMasks, MhcaParams,
};
use ehat_core::gradcheck::{check_block, Block, BlockDims};
use ehat_core::{Graph, Mode, ParameterStore, RngStream, Tensor};
use proptest::prelude::*;

fn init(variant: HarnVariant, d: usize, tie: bool, seed: u64) -> (ParameterStore, HarnParams) {
    let mut store = ParameterStore::new();
    let spec = HarnSpec {
        variant,
        tie_visual: tie,
        ..HarnSpec::default()
    };
    let p = HarnParams::init(&mut store, "h", d, &spec, &RngStream::new(seed)).unwrap();
    (store, p)
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    let data = (0..rows * cols).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn sigmoid_of_ln3_is_three_quarters() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(3f64.ln())).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert!((g.value(y).item() - 0.75).abs() < 1e-15);
}

#[test]
fn equal_scores_give_half() {
    // zero inputs and zero biases: a = b = 0 for every row
    let (store, p) = init(HarnVariant::Prototype, 4, false, 1);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(4, 4)).unwrap();
    let out = harn(&mut g, &store, &p, z, z, z).unwrap();
    for w in [out.weights.lang_a, out.weights.lang_b] {
        assert!(g.value(w).data().iter().all(|&v| v == 0.5));
    }
    // bias-only outputs, and the biases start at zero
    assert!(g.value(out.lang_a).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn omega_strictly_inside_unit_interval(seed in any::<u64>(), scale in prop_oneof![Just(1.0), Just(10.0), Just(50.0)]) {
        let d = 4;
        let (store, p) = init(HarnVariant::Prototype, d, false, seed);
        let mut rng = RngStream::new(seed ^ 0x5eed);
        let mut g = Graph::new();
        let o = g.constant(uniform(d, d, -scale, scale, &mut rng)).unwrap();
        let e = g.constant(uniform(d, d, -scale, scale, &mut rng)).unwrap();
        let c = g.constant(uniform(d, d, -scale, scale, &mut rng)).unwrap();
        let out = harn(&mut g, &store, &p, o, e, c).unwrap();
        for w in [out.weights.lang_a, out.weights.lang_b] {
            prop_assert_eq!(g.shape(w), (d, 1));
            for &v in g.value(w).data() {
                prop_assert!(v > 0.0 && v < 1.0, "omega {v}");
            }
        }
    }
}

#[test]
fn omega_at_extreme_differences() {
    for x in [-50.0, 50.0, -700.0, 700.0] {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(x)).unwrap();
        let y = g.sigmoid(a).unwrap();
        let v = g.value(y).item();
        assert!(v > 0.0 && v < 1.0, "sigmoid({x}) = {v}");
    }
}

#[test]
fn mhca_zero_input_any_shape() {
    for (r, d) in [(1, 1), (3, 4), (7, 8), (2, 5)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(r, d)).unwrap();
        let y = mhca_project(
            &mut g,
            x,
            &MaskSpec::full(r, r),
            0.1,
            Mode::Train,
            &mut RngStream::new(r as u64),
        )
        .unwrap();
        assert_eq!(g.shape(y), (d, d));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mhca_output_shape_and_determinism() {
    let x = random(7, 8, 1.0, 3);
    let run = || {
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let y = mhca_project(
            &mut g,
            v,
            &MaskSpec::full(7, 7),
            0.1,
            Mode::Eval,
            &mut RngStream::new(0),
        )
        .unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.shape(), &[8, 8]);
    assert_eq!(a, b);
}

#[test]
fn mhca_swapping_languages_swaps_outputs() {
    let o = random(5, 4, 1.0, 1);
    let e = random(3, 4, 1.0, 2);
    let c = random(3, 4, 1.0, 3);
    let rm = MaskSpec::full(5, 5);
    let lm = MaskSpec::causal(3);
    let masks = MhcaMasks {
        regions: &rm,
        lang_a: &lm,
        lang_b: &lm,
    };
    let run = |first: &Tensor, second: &Tensor| {
        let mut g = Graph::new();
        let (ov, av, bv) = (
            g.constant(o.clone()).unwrap(),
            g.constant(first.clone()).unwrap(),
            g.constant(second.clone()).unwrap(),
        );
        let out = mhca(
            &mut g,
            ov,
            av,
            bv,
            &masks,
            &MhcaParams::default(),
            Mode::Eval,
            &RngStream::new(4),
        )
        .unwrap();
        (g.value(out.lang_a).clone(), g.value(out.lang_b).clone())
    };
    let (ea, cb) = run(&e, &c);
    let (ca, eb) = run(&c, &e);
    assert_eq!(ea, eb);
    assert_eq!(cb, ca);
}

#[test]
fn gamma_o_rows_and_zero() {
    let (mut store, p) = init(HarnVariant::V1, 3, false, 2);
    let vis = p.visual[0].clone();
    *store.value_mut(vis.proj_w) = Tensor::eye(3);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(3, 3)).unwrap();
    let y = gamma_o(&mut g, &store, &vis, z).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // one dominant column: every attention row picks that column's index, so
    // each output row copies row 0 of the input
    let mut o = Tensor::zeros(3, 3);
    for r in 0..3 {
        o.set(r, 0, 40.0 + r as f64);
    }
    o.set(0, 1, 1.0);
    let mut g = Graph::new();
    let ov = g.constant(o.clone()).unwrap();
    let y = gamma_o(&mut g, &store, &vis, ov).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            assert!((g.value(y).get(r, c) - o.get(0, c)).abs() < 1e-9);
        }
    }
}

#[test]
fn tied_prototype_equals_variant1() {
    let d = 5;
    let (sp, pp) = init(HarnVariant::Prototype, d, true, 7);
    let (s1, p1) = init(HarnVariant::V1, d, false, 7);
    assert_eq!(pp.visual.len(), 1);
    for trial in 0..100 {
        let o = random(d, d, 1.0, 3 * trial);
        let e = random(d, d, 1.0, 3 * trial + 1);
        let c = random(d, d, 1.0, 3 * trial + 2);
        let run = |store: &ParameterStore, p: &HarnParams, proto: bool| {
            let mut g = Graph::new();
            let (ov, ev, cv) = (
                g.constant(o.clone()).unwrap(),
                g.constant(e.clone()).unwrap(),
                g.constant(c.clone()).unwrap(),
            );
            let out = if proto {
                harn_prototype(&mut g, store, p, ov, ev, cv).unwrap()
            } else {
                harn_variant1(&mut g, store, p, ov, ev, cv).unwrap()
            };
            [out.lang_a, out.lang_b, out.weights.lang_a, out.weights.lang_b].map(|v| g.value(v).clone())
        };
        let a = run(&sp, &pp, true);
        let b = run(&s1, &p1, false);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_abs_diff(y), 0.0, "trial {trial}");
        }
    }
}

#[test]
fn variant1_has_fewer_parameters() {
    for d in [4, 8, 16] {
        let (sp, pp) = init(HarnVariant::Prototype, d, false, 1);
        let (s1, p1) = init(HarnVariant::V1, d, false, 1);
        let (s2, p2) = init(HarnVariant::V2, d, false, 1);
        let visual = 2 * d * d + 2 * d + d;
        assert_eq!(pp.count(&sp) - p1.count(&s1), visual);
        assert_eq!(p2.count(&s2), pp.count(&sp));
        assert_eq!(pp.count(&sp), sp.total_count());
    }
}

#[test]
fn variant_mismatch_rejected() {
    let (store, p) = init(HarnVariant::V2, 2, false, 1);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(2, 2)).unwrap();
    assert!(harn_variant1(&mut g, &store, &p, z, z, z).is_err());
    assert!(harn_variant2(&mut g, &store, &p, z, z, z).is_ok());
}

/// `[ω⊙E, C]·H + b` evaluated with plain loops.
fn concat_projection(scaled_first: &Tensor, second: &Tensor, h: &Tensor, b: &Tensor) -> Tensor {
    let d = scaled_first.rows();
    let mut out = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = b.get(0, j);
            for k in 0..d {
                acc += scaled_first.get(i, k) * h.get(k, j) + second.get(i, k) * h.get(d + k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn scale_rows(w: &Tensor, x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(i, j, w.get(i, 0) * x.get(i, j));
        }
    }
    out
}

#[test]
fn variant2_terms_on_shared_language_input() {
    // Ê = Ĉ, 2×2: v2 swaps the unscaled self block for the other language's
    let d = 2;
    let (mut store, p) = init(HarnVariant::V2, d, false, 9);
    for path in ["h.lang_a.out_b", "h.lang_b.out_b"] {
        *store.get_mut(path).unwrap() = random(1, d, 1.0, 17);
    }
    let o = random(d, d, 1.0, 11);
    let e = random(d, d, 1.0, 12);
    let mut g = Graph::new();
    let ov = g.constant(o).unwrap();
    let ev = g.constant(e.clone()).unwrap();
    let out = harn_variant2(&mut g, &store, &p, ov, ev, ev).unwrap();
    for (lang, w) in [("lang_a", out.weights.lang_a), ("lang_b", out.weights.lang_b)] {
        let h = store.get(&format!("h.{lang}.out_w")).unwrap();
        let b = store.get(&format!("h.{lang}.out_b")).unwrap();
        let want = concat_projection(&scale_rows(g.value(w), &e), &e, h, b);
        let got = if lang == "lang_a" { out.lang_a } else { out.lang_b };
        assert!(g.value(got).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn variant2_zero_other_language() {
    let d = 3;
    let (store, p) = init(HarnVariant::V2, d, false, 4);
    let mut g = Graph::new();
    let ov = g.constant(random(d, d, 1.0, 1)).unwrap();
    let e = random(d, d, 1.0, 2);
    let ev = g.constant(e.clone()).unwrap();
    let cv = g.constant(Tensor::zeros(d, d)).unwrap();
    let out = harn_variant2(&mut g, &store, &p, ov, ev, cv).unwrap();
    let h = store.get("h.lang_a.out_w").unwrap();
    let b = store.get("h.lang_a.out_b").unwrap();
    let want = concat_projection(&scale_rows(g.value(out.weights.lang_a), &e), &Tensor::zeros(d, d), h, b);
    assert!(g.value(out.lang_a).max_abs_diff(&want) < 1e-12);
}

#[test]
fn hca_lambda_zero_is_identity() {
    let mut rng = RngStream::new(5);
    for _ in 0..20 {
        let e = uniform(4, 6, -100.0, 100.0, &mut rng);
        let mut g = Graph::new();
        let ev = g.constant(e.clone()).unwrap();
        let et = g.constant(uniform(6, 6, -100.0, 100.0, &mut rng)).unwrap();
        let y = hca(&mut g, ev, et, 0.0).unwrap();
        let same = g
            .value(y)
            .data()
            .iter()
            .zip(e.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
}

#[test]
fn outputs_finite_on_large_inputs() {
    let d = 6;
    let mut rng = RngStream::new(21);
    for variant in [HarnVariant::Prototype, HarnVariant::V1, HarnVariant::V2] {
        let (store, p) = init(variant, d, false, 3);
        for _ in 0..20 {
            let mut g = Graph::new();
            let regions = g.constant(uniform(5, d, -100.0, 100.0, &mut rng)).unwrap();
            let ea = g.constant(uniform(4, d, -100.0, 100.0, &mut rng)).unwrap();
            let cb = g.constant(uniform(4, d, -100.0, 100.0, &mut rng)).unwrap();
            let rm = MaskSpec::full(5, 5);
            let lm = MaskSpec::causal(4);
            let masks = MhcaMasks {
                regions: &rm,
                lang_a: &lm,
                lang_b: &lm,
            };
            let m = mhca(
                &mut g,
                regions,
                ea,
                cb,
                &masks,
                &MhcaParams::default(),
                Mode::Train,
                &RngStream::new(1),
            )
            .unwrap();
            let out = harn(&mut g, &store, &p, m.regions, m.lang_a, m.lang_b).unwrap();
            let y = hca(&mut g, ea, out.lang_a, 0.3).unwrap();
            for v in [m.regions, m.lang_a, out.lang_a, out.lang_b, out.weights.lang_a, y] {
                assert!(g.value(v).is_finite());
            }
        }
    }
}

#[test]
fn visual_input_is_affine() {
    let (store, p) = init(HarnVariant::V1, 3, false, 2);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(3, 3)).unwrap();
    let y = visual_input(&mut g, &store, &p.visual[0], z).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn no_similarity_means_unit_weights() {
    let mut store = ParameterStore::new();
    let spec = HarnSpec {
        similarity: false,
        ..HarnSpec::default()
    };
    let p = HarnParams::init(&mut store, "h", 3, &spec, &RngStream::new(1)).unwrap();
    assert!(p.visual.is_empty());
    let mut g = Graph::new();
    let x = g.constant(random(3, 3, 1.0, 5)).unwrap();
    let out = harn(&mut g, &store, &p, x, x, x).unwrap();
    assert!(g.value(out.weights.lang_a).data().iter().all(|&v| v == 1.0));
}

#[test]
fn hetero_weight_matches_manual_difference() {
    let d = 3;
    let (store, p) = init(HarnVariant::V1, d, false, 8);
    let sim = p.lang_a.similarity.clone().unwrap();
    let vis = p.visual[0].clone();
    let x = random(d, d, 1.0, 1);
    let o = random(d, d, 1.0, 2);
    let mut g = Graph::new();
    let (xv, ov) = (g.constant(x.clone()).unwrap(), g.constant(o.clone()).unwrap());
    let w = hetero_weight(&mut g, &store, &sim, &vis, xv, ov).unwrap();
    let go = gamma_o(&mut g, &store, &vis, ov).unwrap();
    let gw = store.value(sim.gamma_w);
    let gb = store.value(sim.gamma_b);
    let ws = store.value(sim.score);
    let wo = store.value(vis.score);
    for i in 0..d {
        let mut a = 0.0;
        for j in 0..d {
            let mut h = gb.get(0, j);
            for k in 0..d {
                h += x.get(i, k) * gw.get(k, j) + o.get(i, k) * gw.get(d + k, j);
            }
            a += h * ws.get(j, 0);
        }
        let b: f64 = (0..d).map(|k| g.value(go).get(i, k) * wo.get(k, 0)).sum();
        let want = 1.0 / (1.0 + (b - a).exp());
        assert!((g.value(w).get(i, 0) - want).abs() < 1e-12);
    }
}

#[test]
fn block_gradients() {
    for b in [
        Block::Mhca,
        Block::HarnPrototype,
        Block::HarnV1,
        Block::HarnV2,
        Block::Hca,
        Block::CausalEhat,
    ] {
        let r = check_block(b, BlockDims::default(), 5, None).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}: {r:?}", b.name());
        assert_eq!(r.skipped, 0);
    }
}

fn prefix_matches_direct(variant: HarnVariant, reading: HarnReading) {
    let (d, m, n) = (6, 4, 5);
    let mut store = ParameterStore::new();
    let spec = HarnSpec {
        variant,
        reading,
        ..HarnSpec::default()
    };
    let p = HarnParams::init(&mut store, "h", d, &spec, &RngStream::new(3)).unwrap();
    for name in ["h.lang_a.out_b", "h.lang_b.out_b"] {
        *store.get_mut(name).unwrap() = random(1, d, 0.5, 8);
    }
    let normed = random(2 * m, d, 1.0, 4);
    let regions = random(n, d, 1.0, 5);
    let sw = EhatSwitches {
        lambda: 0.7,
        ..EhatSwitches::default()
    };
    let valid = vec![true; m];
    let region_valid = vec![true; n];

    let mut g = Graph::new();
    let nv = g.constant(normed.clone()).unwrap();
    let rv = g.constant(regions.clone()).unwrap();
    let inp = CausalInputs {
        stream: nv,
        normed: nv,
        regions: rv,
        region_valid: &region_valid,
        valid_a: &valid,
        valid_b: &valid,
    };
    let (out, _) = causal_ehat(&mut g, &store, &p, &sw, &inp, Mode::Eval, &RngStream::new(0)).unwrap();
    let got = g.value(out).clone();

    let rows = |t: &Tensor, start: usize, len: usize| {
        let data = (start..start + len).flat_map(|r| t.row(r).to_vec()).collect();
        Tensor::matrix(len, t.cols(), data).unwrap()
    };
    for t in 0..m {
        let mut g = Graph::new();
        let ea = g.constant(rows(&normed, 0, t + 1)).unwrap();
        let cb = g.constant(rows(&normed, m, t + 1)).unwrap();
        let ov = g.constant(regions.clone()).unwrap();
        let rm = MaskSpec::padding(n, &region_valid);
        let lm = MaskSpec::causal(t + 1);
        let masks = MhcaMasks {
            regions: &rm,
            lang_a: &lm,
            lang_b: &lm,
        };
        let mh = mhca(
            &mut g,
            ov,
            ea,
            cb,
            &masks,
            &MhcaParams::default(),
            Mode::Eval,
            &RngStream::new(0),
        )
        .unwrap();
        let h = harn(&mut g, &store, &p, mh.regions, mh.lang_a, mh.lang_b).unwrap();
        for (lang, tilde) in [(0, h.lang_a), (1, h.lang_b)] {
            let q = g.constant(rows(&normed, lang * m + t, 1)).unwrap();
            let y = hca(&mut g, q, tilde, sw.lambda).unwrap();
            let want = g.value(y);
            let have = rows(&got, lang * m + t, 1);
            assert!(
                have.max_abs_diff(want) < 1e-10,
                "{variant:?} {reading:?} lang {lang} t {t}: {}",
                have.max_abs_diff(want)
            );
        }
    }
}

#[test]
fn prefix_route_matches_whole_matrix_route() {
    for v in [HarnVariant::Prototype, HarnVariant::V1, HarnVariant::V2] {
        prefix_matches_direct(v, HarnReading::Concat);
    }
    prefix_matches_direct(HarnVariant::Prototype, HarnReading::ScaleOnly);
}

#[test]
fn causal_block_lambda_zero_is_identity() {
    let (d, m) = (4, 3);
    let (store, p) = init(HarnVariant::Prototype, d, false, 2);
    let stream = random(2 * m, d, 1.0, 1);
    let mut g = Graph::new();
    let sv = g.constant(stream.clone()).unwrap();
    let nv = g.constant(random(2 * m, d, 1.0, 2)).unwrap();
    let rv = g.constant(random(5, d, 1.0, 3)).unwrap();
    let valid = [true, true, false];
    let inp = CausalInputs {
        stream: sv,
        normed: nv,
        regions: rv,
        region_valid: &[true; 5],
        valid_a: &valid,
        valid_b: &valid,
    };
    let sw = EhatSwitches {
        lambda: 0.0,
        ..EhatSwitches::default()
    };
    let (out, trace) = causal_ehat(&mut g, &store, &p, &sw, &inp, Mode::Train, &RngStream::new(4)).unwrap();
    let same = g
        .value(out)
        .data()
        .iter()
        .zip(stream.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same);
    assert_eq!(trace.omega_a.len(), m);
    assert_eq!(trace.scores_b.len(), m);
}
