use alloc::format;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::rng::seeded_rng;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(rows, cols, data.to_vec()).unwrap()
}

/// Random parameters of the given shapes, and a loss that contracts the op
/// output with a fixed random tensor so every output cell matters.
fn grad_check(
    shapes: &[(usize, usize)],
    seed: u64,
    build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>,
) -> FdReport {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), Tensor::uniform(r, c, 1.0, &mut rng)).unwrap())
        .collect();
    let probe_seed = seed ^ 0x5eed;
    let run = |s: &ParamStore| -> Result<(f64, Gradients), TensorError> {
        let mut tape = Tape::new(s);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = build(&mut tape, &vars)?;
        let (r, c) = tape.shape(out);
        let probe = tape.leaf(Tensor::uniform(r, c, 1.0, &mut seeded_rng(probe_seed)))?;
        let prod = tape.mul(out, probe)?;
        let loss = tape.sum_all(prod)?;
        let mut g = Gradients::new(s);
        tape.backward(loss, &mut g)?;
        Ok((tape.value(loss).data()[0], g))
    };
    finite_difference_check(&mut store, 1e-5, 64, seed, run).unwrap()
}

fn assert_grad_ok(name: &str, report: FdReport) {
    assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    assert!(report.checked > 0);
}

#[test]
fn matmul_identity() {
    let a = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let i = tape.leaf(Tensor::identity(3)).unwrap();
    let av = tape.leaf(a.clone()).unwrap();
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
    assert!(matches!(tape.matmul(av, av), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn masked_softmax_examples() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.leaf(t(1, 3, &[1.0, 1.0, 1.0])).unwrap();
    let s = tape.masked_softmax(l, &[true; 3]).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let l = tape.leaf(t(1, 3, &[5.0, 2.0, 7.0])).unwrap();
    let s = tape.masked_softmax(l, &[true, false, true]).unwrap();
    let sigma = 5f64.exp() / (5f64.exp() + 7f64.exp());
    let out = tape.value(s).data();
    assert!((out[0] - sigma).abs() < 1e-15);
    assert_eq!(out[1], 0.0);
    assert!((out[2] - (1.0 - sigma)).abs() < 1e-15);
    assert!(matches!(tape.masked_softmax(l, &[false; 3]), Err(TensorError::EmptyRow { row: 0, .. })));
}

#[test]
fn weighted_softmax_zero_weight_and_fallback() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.leaf(t(2, 3, &[0.3, 0.3, 0.3, 1.0, 2.0, 3.0])).unwrap();
    let w = tape.leaf(t(2, 3, &[2.0, 0.0, 2.0, 0.0, 0.0, 0.0])).unwrap();
    let s = tape.weighted_softmax(l, w, &[true; 6]).unwrap();
    assert_eq!(tape.value(s).row(0), &[0.5, 0.0, 0.5]);
    assert_eq!(tape.value(s).row(1), &[1.0 / 3.0; 3]);
    let neg = tape.leaf(t(2, 3, &[-1.0; 6])).unwrap();
    assert!(tape.weighted_softmax(l, neg, &[true; 6]).is_err());
}

#[test]
fn non_finite_values_trip_an_error() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.leaf(t(1, 1, &[1e308])).unwrap();
    assert_eq!(tape.scale(a, 10.0), Err(TensorError::NonFinite { op: "affine" }));
    assert!(tape.leaf(t(1, 1, &[f64::NAN])).is_err());
}

#[test]
fn op_gradients() {
    assert_grad_ok("matmul", grad_check(&[(3, 4), (4, 2)], 1, |t, v| t.matmul(v[0], v[1])));
    assert_grad_ok("matmul_nt", grad_check(&[(3, 4), (5, 4)], 2, |t, v| t.matmul_nt(v[0], v[1])));
    assert_grad_ok("add_sub_mul", grad_check(&[(2, 3), (2, 3)], 3, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(v[0], v[1])?;
        t.mul(a, b)
    }));
    assert_grad_ok("add_row", grad_check(&[(4, 3), (1, 3)], 4, |t, v| t.add_row(v[0], v[1])));
    assert_grad_ok("affine", grad_check(&[(2, 2)], 5, |t, v| t.affine(v[0], -1.5, 0.25)));
    assert_grad_ok("concat", grad_check(&[(2, 3), (2, 1), (1, 4)], 6, |t, v| {
        let c = t.concat_cols(&[v[0], v[1]])?;
        t.concat_rows(&[c, v[2]])
    }));
    assert_grad_ok("slices", grad_check(&[(4, 5)], 7, |t, v| {
        let a = t.slice_cols(v[0], 1, 3)?;
        t.slice_rows(a, 1, 2)
    }));
    assert_grad_ok("repeat_mean", grad_check(&[(1, 3), (3, 3)], 8, |t, v| {
        let r = t.repeat_rows(v[0], 3)?;
        let p = t.mul(r, v[1])?;
        t.mean_rows(p)
    }));
    assert_grad_ok("gather", grad_check(&[(5, 3)], 9, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2])));
    assert_grad_ok("reshape", grad_check(&[(2, 6)], 10, |t, v| t.reshape(v[0], 4, 3)));
    assert_grad_ok("leaky_relu", grad_check(&[(3, 3)], 11, |t, v| t.leaky_relu(v[0], 0.2)));
    assert_grad_ok("sigmoid", grad_check(&[(3, 3)], 12, |t, v| t.sigmoid(v[0])));
    assert_grad_ok("tanh", grad_check(&[(3, 3)], 13, |t, v| t.tanh(v[0])));
    let mask = [true, false, true, true, true, false, false, true, true];
    assert_grad_ok("masked_softmax", grad_check(&[(3, 3)], 14, |t, v| t.masked_softmax(v[0], &mask)));
    assert_grad_ok("weighted_softmax", grad_check(&[(3, 3), (3, 3)], 15, |t, v| {
        let w = t.sigmoid(v[1])?;
        t.weighted_softmax(v[0], w, &mask)
    }));
    let sets = [0u32, 1, 2, 4, 6, 1, 0, 3, 2];
    assert_grad_ok("label_bias", grad_check(&[(1, 3)], 16, |t, v| t.label_bias(v[0], &sets, 3)));
    assert_grad_ok("label_mass", grad_check(&[(3, 3)], 17, |t, v| t.label_mass(v[0], &sets, 3)));
    assert_grad_ok("bce", grad_check(&[(1, 5)], 18, |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 0.5])));
}

#[test]
fn bce_closed_forms() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let z = tape.leaf(Tensor::zeros(1, 4)).unwrap();
    let l = tape.bce_with_logits(z, &[0.0; 4]).unwrap();
    assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    let sat = tape.leaf(t(1, 2, &[60.0, -60.0])).unwrap();
    let l = tape.bce_with_logits(sat, &[1.0, 0.0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-25);
}

#[test]
fn label_bias_sums_sets() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let c = tape.leaf(t(1, 3, &[0.5, 2.0, -1.0])).unwrap();
    let b = tape.label_bias(c, &[0, 2, 6, 1], 2).unwrap();
    assert_eq!(tape.value(b).data(), &[0.0, 2.0, 1.0, 0.5]);
    assert!(tape.label_bias(c, &[8, 0, 0, 0], 2).is_err());
}

fn gru_setup(spec: GruSpec, seed: u64) -> (ParamStore, GruParams) {
    let mut store = ParamStore::new();
    let gru = GruParams::register(&mut store, "gru", spec, &mut seeded_rng(seed)).unwrap();
    (store, gru)
}

#[test]
fn gru_zero_fixed_point() {
    let (mut store, gru) = gru_setup(GruSpec { input: 3, output: 4, bidirectional: false }, 0);
    for p in store.iter_mut() {
        p.value.fill(0.0);
    }
    let mut tape = Tape::new(&store);
    let x = tape.leaf(Tensor::zeros(1, 3)).unwrap();
    let h = gru.run(&mut tape, x).unwrap();
    assert_eq!(tape.value(h), &Tensor::zeros(1, 4));
    let empty = tape.leaf(Tensor::zeros(0, 3)).unwrap();
    assert!(gru.run(&mut tape, empty).is_err());
}

#[test]
fn gru_matches_scalar_reference() {
    // Hand-rolled recurrence on raw arrays as the oracle.
    let (store, gru) = gru_setup(GruSpec { input: 2, output: 3, bidirectional: false }, 5);
    let x = t(3, 2, &[0.5, -1.0, 0.25, 0.75, -0.3, 0.1]);
    let p = |n: &str| store.value(store.find(&format!("gru.fwd.{n}")).unwrap()).clone();
    let (w, uzr, un, b) = (p("w"), p("u_zr"), p("u_n"), p("b"));
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = [0.0f64; 3];
    for step in 0..3 {
        let xs = x.row(step);
        let lin = |row: usize| w.get(row, 0) * xs[0] + w.get(row, 1) * xs[1] + b.get(0, row);
        let rec = |m: &Tensor, row: usize, v: &[f64]| (0..3).map(|k| m.get(row, k) * v[k]).sum::<f64>();
        let z: Vec<f64> = (0..3).map(|i| sig(lin(i) + rec(&uzr, i, &h))).collect();
        let r: Vec<f64> = (0..3).map(|i| sig(lin(3 + i) + rec(&uzr, 3 + i, &h))).collect();
        let rh: Vec<f64> = (0..3).map(|i| r[i] * h[i]).collect();
        let n: Vec<f64> = (0..3).map(|i| (lin(6 + i) + rec(&un, i, &rh)).tanh()).collect();
        for i in 0..3 {
            h[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
        }
    }
    let mut tape = Tape::new(&store);
    let xv = tape.leaf(x).unwrap();
    let out = gru.run(&mut tape, xv).unwrap();
    for (a, e) in tape.value(out).data().iter().zip(&h) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn gru_gradients() {
    for bidirectional in [false, true] {
        let (mut store, gru) = gru_setup(GruSpec { input: 3, output: 4, bidirectional }, 9);
        let x = Tensor::uniform(3, 3, 1.0, &mut seeded_rng(3));
        let report = finite_difference_check(&mut store, 1e-5, 64, 1, |s| {
            let mut tape = Tape::new(s);
            let xv = tape.leaf(x.clone())?;
            let h = gru.run(&mut tape, xv)?;
            let probe = tape.leaf(t(1, 4, &[0.3, -0.7, 1.1, 0.4]))?;
            let p = tape.mul(h, probe)?;
            let loss = tape.sum_all(p)?;
            let mut g = Gradients::new(s);
            tape.backward(loss, &mut g)?;
            Ok::<_, TensorError>((tape.value(loss).data()[0], g))
        })
        .unwrap();
        assert_grad_ok("gru", report);
    }
}

#[test]
fn bidirectional_halves_are_directional_runs() {
    let (store, gru) = gru_setup(GruSpec { input: 2, output: 6, bidirectional: true }, 4);
    let x = Tensor::uniform(4, 2, 1.0, &mut seeded_rng(8));
    let mut tape = Tape::new(&store);
    let xv = tape.leaf(x.clone()).unwrap();
    let out = gru.run(&mut tape, xv).unwrap();
    let both = tape.value(out).clone();
    assert_eq!(both.cols(), 6);

    // Forward half: a unidirectional GRU sharing the forward weights.
    let mut fwd_store = ParamStore::new();
    let fwd = GruParams::register(&mut fwd_store, "gru", GruSpec { input: 2, output: 3, bidirectional: false }, &mut seeded_rng(0)).unwrap();
    for name in ["w", "u_zr", "u_n", "b"] {
        let src = store.value(store.find(&format!("gru.fwd.{name}")).unwrap()).clone();
        fwd_store.get_mut(fwd_store.find(&format!("gru.fwd.{name}")).unwrap()).value = src;
    }
    let mut tape = Tape::new(&fwd_store);
    let xv = tape.leaf(x.clone()).unwrap();
    let out = fwd.run(&mut tape, xv).unwrap();
    let f = tape.value(out).clone();
    assert_eq!(&both.data()[..3], f.data());

    // Backward half: the same weights over the reversed sequence.
    for name in ["w", "u_zr", "u_n", "b"] {
        let src = store.value(store.find(&format!("gru.bwd.{name}")).unwrap()).clone();
        fwd_store.get_mut(fwd_store.find(&format!("gru.fwd.{name}")).unwrap()).value = src;
    }
    let rev: Vec<f64> = (0..4).rev().flat_map(|r| x.row(r).to_vec()).collect();
    let mut tape = Tape::new(&fwd_store);
    let xv = tape.leaf(t(4, 2, &rev)).unwrap();
    let out = fwd.run(&mut tape, xv).unwrap();
    let b = tape.value(out).clone();
    assert_eq!(&both.data()[3..], b.data());
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(1, 2, &[1.0, -2.0])).unwrap();
    let b = store.add("b", t(1, 1, &[0.5])).unwrap();
    let mut state = AdamState::new(&store, AdamConfig::default());
    adam_step(&mut store, &mut state, 0.1);
    assert_eq!(store.value(a).data(), &[1.0, -2.0]);
    assert_eq!(store.value(b).data(), &[0.5]);

    let mut state = AdamState::new(&store, AdamConfig::default());
    store.get_mut(b).grad = t(1, 1, &[1.0]);
    adam_step(&mut store, &mut state, 0.1);
    let delta = store.value(b).data()[0] - 0.5;
    // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
    assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{delta}");
    assert_eq!(store.value(a).data(), &[1.0, -2.0]);
}

#[test]
fn schedule_values() {
    let s = LrSchedule::default();
    let expect = [(1, 0.0005), (2, 0.001), (3, 0.0015), (4, 0.002), (5, 0.002), (14, 0.002), (15, 0.001), (16, 0.0005)];
    for (epoch, lr) in expect {
        assert!((s.lr(epoch) - lr).abs() < 1e-15, "epoch {epoch}");
    }
}

#[test]
fn checker_on_quadratic_and_fault_injection() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(3.0)).unwrap();
    let quad = |s: &ParamStore, corrupt: bool| -> Result<(f64, Gradients), TensorError> {
        let mut tape = Tape::new(s);
        let v = tape.param(x);
        let sq = tape.mul(v, v)?;
        let mut g = Gradients::new(s);
        tape.backward(sq, &mut g)?;
        if corrupt {
            g.map_in_place(|d| d * 1.1 + 0.05);
        }
        Ok((tape.value(sq).data()[0], g))
    };
    let ok = finite_difference_check(&mut store, 1e-5, 64, 0, |s| quad(s, false)).unwrap();
    assert!(ok.max_rel_error < 1e-9, "{ok:?}");
    assert!((ok.analytic - 6.0).abs() < 1e-12);
    let bad = finite_difference_check(&mut store, 1e-5, 64, 0, |s| quad(s, true)).unwrap();
    assert!(bad.max_rel_error > 1e-2, "{bad:?}");
    assert!(bad.max_group_error > 1e-2, "{bad:?}");
}

#[test]
fn parameter_names_are_unique() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::zeros(1, 1)).unwrap();
    assert!(matches!(store.add("w", Tensor::zeros(1, 1)), Err(TensorError::DuplicateParameter(_))));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        logits in proptest::collection::vec(-30.0f64..30.0, 16),
        mask_bits in proptest::collection::vec(any::<bool>(), 16),
    ) {
        let mut mask = mask_bits.clone();
        for i in 0..4 {
            mask[i * 4 + i] = true;
        }
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let l = tape.leaf(Tensor::new(4, 4, logits).unwrap()).unwrap();
        let s = tape.masked_softmax(l, &mask).unwrap();
        let out = tape.value(s);
        for i in 0..4 {
            let row = out.row(i);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if !mask[i * 4 + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_kernels_agree_with_naive(
        a in proptest::collection::vec(-5.0f64..5.0, 6 * 7),
        b in proptest::collection::vec(-5.0f64..5.0, 7 * 5),
    ) {
        let ta = Tensor::new(6, 7, a).unwrap();
        let tb = Tensor::new(7, 5, b).unwrap();
        let fast = ta.matmul(&tb).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let naive: f64 = (0..7).map(|k| ta.get(i, k) * tb.get(k, j)).sum();
                prop_assert!((fast.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradients_accumulate_into_store() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(1, 2, &[1.0, 2.0])).unwrap();
    let mut g = Gradients::new(&store);
    g.add_into(w, &t(1, 2, &[0.5, -0.5]));
    store.accumulate(&g, 2.0);
    assert_eq!(store.get(w).grad.data(), &[1.0, -1.0]);
    store.zero_grad();
    assert_eq!(store.get(w).grad.data(), &[0.0, 0.0]);
}
