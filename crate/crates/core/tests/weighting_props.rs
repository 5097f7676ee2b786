use pada::autodiff::Tape;
use pada::weighting::{estimate_class_weights, normalize_weights, weight_for_sample, ClassWeights};
use pada::Matrix;
use proptest::prelude::*;

/// Rows of positive entries scaled to sum to one; some entries may be tiny.
fn prob_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..12, 2usize..8).prop_flat_map(|(n, c)| {
        prop::collection::vec(prop_oneof![4 => 1e-3f64..1.0, 1 => 0.0f64..1e-9], n * c).prop_map(
            move |raw| {
                let mut m = Matrix::new(n, c, raw).unwrap();
                for i in 0..n {
                    let row = m.row_mut(i);
                    if row.iter().all(|&v| v == 0.0) {
                        row[0] = 1.0;
                    }
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                m
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn estimate_is_a_distribution(p in prob_matrix()) {
        let w = estimate_class_weights(&p).unwrap();
        prop_assert!(!w.is_normalized());
        prop_assert!((w.gamma().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.gamma().iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn normalization_peaks_at_one_and_keeps_ratios(p in prob_matrix()) {
        let raw = estimate_class_weights(&p).unwrap();
        let n = normalize_weights(&raw).unwrap();
        let g = raw.gamma();
        let h = n.gamma();
        prop_assert_eq!(h.iter().copied().fold(f64::MIN, f64::max), 1.0);
        for j in 0..g.len() {
            for k in 0..g.len() {
                if g[k] > 1e-6 {
                    let want = g[j] / g[k];
                    prop_assert!((h[j] / h[k] - want).abs() <= 1e-12 * want.max(1.0));
                }
                if g[j] >= g[k] {
                    prop_assert!(h[j] >= h[k]);
                }
            }
        }
        prop_assert_eq!(normalize_weights(&n).unwrap(), n.clone());
        for (k, &v) in h.iter().enumerate() {
            prop_assert_eq!(weight_for_sample(&n, k).unwrap(), v);
        }
    }

    #[test]
    fn absent_classes_get_small_weight(p in prob_matrix(), eps_exp in 3i32..9) {
        let eps = 10f64.powi(-eps_exp);
        let c = p.cols();
        let mut q = p.clone();
        // Push class 0 under eps in every row.
        for i in 0..q.rows() {
            let row = q.row_mut(i);
            let moved = row[0] - row[0].min(eps * 0.5);
            row[0] -= moved;
            row[c - 1] += moved;
        }
        let raw = estimate_class_weights(&q).unwrap();
        let max = raw.gamma().iter().copied().fold(0.0, f64::max);
        let n = normalize_weights(&raw).unwrap();
        prop_assert!(n.gamma()[0] < eps / max);
    }

    #[test]
    fn softmax_rows_are_distributions(
        (n, c, logits) in (1usize..6, 1usize..7).prop_flat_map(|(n, c)| {
            (Just(n), Just(c), prop::collection::vec(-800.0f64..800.0, n * c))
        })
    ) {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(n, c, logits).unwrap()).unwrap();
        let s = t.softmax_rows(x).unwrap();
        let out = t.value(s);
        for i in 0..n {
            prop_assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(out.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn unnormalized_lookup_and_degenerate_vectors_fail() {
    let raw = ClassWeights::from_vec(vec![0.5, 0.5], false).unwrap();
    assert!(weight_for_sample(&raw, 0).is_err());
    assert!(normalize_weights(&ClassWeights::from_vec(vec![0.0; 3], false).unwrap()).is_err());
}
