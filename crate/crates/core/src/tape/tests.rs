use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::central_difference;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar from one input through `f`, then checks every input coordinate
/// against central differences.
fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_tensor(&mut rng, shape);
    // random projection so the scalar depends on every output coordinate
    let probe_for = |tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng| {
        let w = rand_tensor(rng, tape.shape(y));
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p).unwrap()
    };
    let probe_seed: u64 = rng.random();

    let mut tape = Tape::<f64>::default();
    let x = tape.input(x0.clone());
    let y = f(&mut tape, x);
    let loss = probe_for(&mut tape, y, &mut ChaCha8Rng::seed_from_u64(probe_seed));
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.wrt(x).unwrap().clone();

    let mut values = x0.data().to_vec();
    for i in 0..values.len() {
        let numeric = central_difference(&mut values, i, 1e-5, |v| {
            let mut t = Tape::<f64>::default();
            let x = t.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap());
            let y = f(&mut t, x);
            let l = probe_for(&mut t, y, &mut ChaCha8Rng::seed_from_u64(probe_seed));
            t.value(l).item()
        });
        let a = analytic.data()[i];
        assert!(
            (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
            "coordinate {i}: analytic {a} numeric {numeric}"
        );
    }
}

#[test]
fn matmul_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let mut eye = Tensor::<f64>::zeros(vec![3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::default();
    let e = tape.constant(eye);
    let z = tape.constant(Tensor::zeros(vec![2, 3]));
    let bv = tape.constant(b.clone());
    let eb = tape.matmul(e, bv).unwrap();
    assert_eq!(tape.value(eb), &b);
    let zb = tape.matmul(z, bv).unwrap();
    assert!(tape.value(zb).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]).cast::<f32>();
    let b = rand_tensor(&mut rng, &[4, 2]).cast::<f32>();
    let mut expect = [0.0f64; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expect[i * 2 + j] += a.data()[i * 4 + k] as f64 * b.data()[k * 2 + j] as f64;
            }
        }
    }
    let mut tape = Tape::<f32>::default();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for (got, want) in tape.value(c).data().iter().zip(expect) {
        assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::<f32>::default();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::<f64>::default();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = tape.constant(Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-12 && (d[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_large_logits_stay_finite() {
    let mut tape = Tape::<f32>::default();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1000.0, 999.0, -1000.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let sum: f32 = tape.value(y).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_closed_forms() {
    let mut tape = Tape::<f64>::default();
    let g = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let x = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert_eq!(&d[..2], &[0.0, 0.0]);
    assert!((d[2] - 1.0).abs() < 1e-9 && (d[3] + 1.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::<f64>::default();
    let logits = tape.constant(Tensor::new(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap());
    let l = tape.cross_entropy_masked(logits, &[0, 2], &[true, true]).unwrap();
    assert!(tape.value(l).item() < 1e-15);

    let uniform = tape.constant(Tensor::zeros(vec![3, 5]));
    let l = tape.cross_entropy_masked(uniform, &[1, 4, 0], &[true, false, true]).unwrap();
    assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);

    assert!(matches!(
        tape.cross_entropy_masked(uniform, &[0, 0, 0], &[false; 3]),
        Err(Error::EmptyLoss)
    ));
}

#[test]
fn cross_entropy_matches_per_row_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = rand_tensor(&mut rng, &[4, 6]);
    let targets = [3, 0, 5, 2];
    let mask = [true, false, true, true];
    let mut expect = 0.0;
    for r in [0, 2, 3] {
        let row = z.row(r);
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        expect -= (row[targets[r]].exp() / denom).ln();
    }
    expect /= 3.0;
    let mut tape = Tape::<f64>::default();
    let zv = tape.constant(z);
    let l = tape.cross_entropy_masked(zv, &targets, &mask).unwrap();
    assert!((tape.value(l).item() - expect).abs() < 1e-12);
}

#[test]
fn masked_rows_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::default();
    let z = tape.input(rand_tensor(&mut rng, &[3, 4]));
    let l = tape.cross_entropy_masked(z, &[1, 2, 3], &[true, false, true]).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(z).unwrap().row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn linear_and_quadratic_gradients() {
    let x0 = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut tape = Tape::<f64>::default();
    let x = tape.input(x0.clone());
    let s = tape.sum(x).unwrap();
    assert!(tape.backward(s).unwrap().wrt(x).unwrap().data().iter().all(|&g| g == 1.0));

    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq).unwrap();
    let g = tape.backward(s2).unwrap();
    for (gi, xi) in g.wrt(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn disconnected_loss_is_a_graph_error() {
    let mut tape = Tape::<f64>::default();
    let c = tape.constant(Tensor::scalar(1.0));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Graph(_))));
    assert!(matches!(tape.backward(Var(99)), Err(Error::Graph(_))));
}

#[test]
fn non_finite_output_is_reported() {
    let mut tape = Tape::<f32>::default();
    let a = tape.constant(Tensor::new(vec![1, 1], vec![f32::MAX]).unwrap());
    assert!(matches!(tape.add(a, a), Err(Error::NonFinite { op: "add" })));
}

#[test]
fn finite_differences_softmax() {
    check_unary(&[3, 5], 10, |t, x| t.softmax_rows(x).unwrap());
}

#[test]
fn finite_differences_gelu() {
    check_unary(&[2, 6], 11, |t, x| t.gelu(x).unwrap());
}

#[test]
fn finite_differences_layer_norm() {
    check_unary(&[3, 6], 12, |t, x| {
        let g = t.constant(Tensor::new(vec![6], vec![0.5, 1.5, -1.0, 2.0, 1.0, 0.3]).unwrap());
        let b = t.constant(Tensor::new(vec![6], vec![0.1, 0.0, -0.2, 0.3, 0.0, 0.0]).unwrap());
        t.layer_norm(x, g, b, 1e-5).unwrap()
    });
}

#[test]
fn finite_differences_matmul_both_sides() {
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w2 = w.clone();
    check_unary(&[2, 4], 13, move |t, x| {
        let wv = t.constant(w.clone());
        t.matmul(x, wv).unwrap()
    });
    check_unary(&[4, 3], 14, move |t, x| {
        let a = t.constant(Tensor::new(vec![2, 4], vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.9, 0.1, 0.4]).unwrap());
        let y = t.matmul(a, x).unwrap();
        let bt = t.constant(w2.clone());
        // exercise the transposed-rhs path as well: y · w2ᵀ? shapes 2x3 · (4x3)ᵀ
        t.matmul_ext(y, bt, true).unwrap()
    });
}

#[test]
fn finite_differences_attention() {
    for offset in [0usize, 2] {
        let tk = 3 + offset;
        let mut rng = ChaCha8Rng::seed_from_u64(20 + offset as u64);
        let k = rand_tensor(&mut rng, &[tk, 4]);
        let v = rand_tensor(&mut rng, &[tk, 4]);
        let (k2, v2) = (k.clone(), v.clone());
        check_unary(&[3, 4], 15, move |t, q| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v.clone());
            t.causal_attention(q, kv, vv, 2, offset).unwrap()
        });
        let q = rand_tensor(&mut rng, &[3, 4]);
        let v3 = v2.clone();
        check_unary(&[tk, 4], 16, move |t, kx| {
            let qv = t.constant(q.clone());
            let vv = t.constant(v3.clone());
            t.causal_attention(qv, kx, vv, 2, offset).unwrap()
        });
        let q2 = rand_tensor(&mut rng, &[3, 4]);
        check_unary(&[tk, 4], 17, move |t, vx| {
            let qv = t.constant(q2.clone());
            let kv = t.constant(k2.clone());
            t.causal_attention(qv, kv, vx, 2, offset).unwrap()
        });
    }
}

#[test]
fn finite_differences_cross_entropy() {
    check_unary(&[3, 4], 18, |t, x| t.cross_entropy_masked(x, &[1, 0, 3], &[true, false, true]).unwrap());
}

#[test]
fn finite_differences_structural_ops() {
    check_unary(&[4, 3], 19, |t, x| {
        let a = t.slice_rows(x, 1, 2).unwrap();
        let b = t.gather(x, &[3, 0, 3]).unwrap();
        let c = t.concat_rows(&[a, b]).unwrap();
        let bias = t.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let d = t.add_bias(c, bias).unwrap();
        let e = t.scale(d, 1.7).unwrap();
        let f = t.mul(e, c).unwrap();
        t.add(f, c).unwrap()
    });
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let q = rand_tensor(&mut rng, &[4, 4]);
    let k = rand_tensor(&mut rng, &[4, 4]);
    let v = rand_tensor(&mut rng, &[4, 4]);
    let mut v2 = v.clone();
    v2.data_mut()[3 * 4..].iter_mut().for_each(|x| *x += 5.0);
    let mut tape = Tape::<f64>::default();
    let (qv, kv, vv, vv2) = (tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(v2));
    let a = tape.causal_attention(qv, kv, vv, 2, 0).unwrap();
    let b = tape.causal_attention(qv, kv, vv2, 2, 0).unwrap();
    assert_eq!(tape.value(a).data()[..12], tape.value(b).data()[..12]);
    assert_ne!(tape.value(a).data()[12..], tape.value(b).data()[12..]);
}

#[test]
fn gradients_accumulate_across_reused_param() {
    let mut store = ParameterStore::<f64>::new();
    let id = store.insert("w", Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap()).unwrap();
    let mut tape = Tape::new(&store);
    let w = tape.param(id);
    let w_again = tape.param(id);
    assert_eq!(w, w_again);
    let s = tape.add(w, w_again).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(id).unwrap().data(), &[2.0, 2.0]);
}
