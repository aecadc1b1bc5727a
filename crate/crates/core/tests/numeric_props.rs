use coconut::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-30.0f32..30.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..40).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut t = Tape::<f32>::default();
        let v = t.constant(x);
        let s = t.softmax_rows(v).unwrap();
        let out = t.value(s);
        for r in 0..out.rows() {
            let sum: f64 = out.row(r).iter().map(|&p| p as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row {} sums to {}", r, sum);
            prop_assert!(out.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(x in (1usize..5, 4usize..48).prop_flat_map(|(r, c)| matrix(r, c))) {
        let cols = x.cols();
        let spread_ok = (0..x.rows()).all(|r| {
            let row = x.row(r);
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / cols as f64 > 1e-2
        });
        prop_assume!(spread_ok);
        let mut t = Tape::<f32>::default();
        let v = t.constant(x);
        let g = t.constant(Tensor::new(vec![cols], vec![1.0; cols]).unwrap());
        let b = t.constant(Tensor::zeros(vec![cols]));
        let y = t.layer_norm(v, g, b, 1e-5).unwrap();
        let out = t.value(y);
        for r in 0..out.rows() {
            let row: Vec<f64> = out.row(r).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-5, "mean {}", mean);
            prop_assert!((var - 1.0).abs() <= 1e-3, "variance {}", var);
        }
    }

    #[test]
    fn forward_and_backward_are_bitwise_repeatable(
        a in matrix(3, 5),
        b in matrix(5, 4),
    ) {
        let run = || {
            let mut t = Tape::<f32>::default();
            let x = t.input(a.clone());
            let w = t.input(b.clone());
            let y = t.matmul(x, w).unwrap();
            let y = t.gelu(y).unwrap();
            let s = t.softmax_rows(y).unwrap();
            let l = t.sum(s).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(y).clone(), g.wrt(x).unwrap().clone(), g.wrt(w).unwrap().clone())
        };
        let (p, q) = (run(), run());
        prop_assert_eq!(bits(&p.0), bits(&q.0));
        prop_assert_eq!(bits(&p.1), bits(&q.1));
        prop_assert_eq!(bits(&p.2), bits(&q.2));
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}
