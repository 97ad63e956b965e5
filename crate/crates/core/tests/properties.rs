use iosvd::curvature::LayerStats;
use iosvd::linalg::{svd, Matrix};
use iosvd::oracles::exhaustive_pool_scan;
use iosvd::rank_alloc::{
    allocate_from_scores, min_rank, storage_gain, stored_params, threshold_rank, LayerScores,
};
use iosvd::remap::{quantize_dequantize_row, select_rows, Factor, RowCandidate};
use iosvd::whiten::{truncate_and_unwhiten, whiten, whitened_error};
use proptest::collection::vec;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..7, 1usize..7).prop_flat_map(|(m, n)| matrix(m, n))
}

fn layer_scores() -> impl Strategy<Value = Vec<LayerScores>> {
    vec((1usize..9, 1usize..9), 1..4).prop_flat_map(|shapes| {
        let per_layer: Vec<_> = shapes
            .iter()
            .map(|&(m, n)| {
                vec(
                    prop_oneof![0.0f64..1.0, (0u8..4).prop_map(|k| k as f64 / 4.0)],
                    m.min(n),
                )
            })
            .collect();
        per_layer.prop_map(move |scores| {
            shapes
                .iter()
                .zip(scores)
                .enumerate()
                .map(|(l, (&(m, n), s))| LayerScores::new(2 * l, m, n, s).unwrap())
                .collect()
        })
    })
}

fn candidates() -> impl Strategy<Value = Vec<RowCandidate>> {
    vec((0.0f64..1.0, 1u64..30), 1..25).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (score, byte_saving))| RowCandidate {
                layer: i % 3,
                factor: if i % 2 == 0 { Factor::A } else { Factor::D },
                row_index: i,
                score,
                byte_saving,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn ledger_matches_closed_form_recount(layers in layer_scores(), pi in 0.01f64..0.99, eta in 0.0f64..0.99) {
        let plan = allocate_from_scores(&layers, pi, eta).unwrap();
        let from_history: u64 = plan.drop_history.iter().map(|d| d.storage_gain as u64).sum();
        let from_ranks: u64 = plan
            .layers
            .iter()
            .map(|lp| (lp.rows * lp.cols - stored_params(lp.rows, lp.cols, lp.final_rank)) as u64)
            .sum();
        prop_assert_eq!(plan.removed_params, from_history);
        prop_assert_eq!(plan.removed_params, from_ranks);
        prop_assert_eq!(plan.removed_params, plan.recount_removed());
        prop_assert_eq!(plan.budget_reached, plan.removed_params >= plan.target_removed);
    }

    #[test]
    fn greedy_sequence_matches_rescan(layers in layer_scores(), pi in 0.01f64..0.99, eta in 0.0f64..0.99) {
        let plan = allocate_from_scores(&layers, pi, eta).unwrap();
        let scan = exhaustive_pool_scan(&layers, plan.target_removed, eta).unwrap();
        prop_assert_eq!(scan.len(), plan.drop_history.len());
        for (s, d) in scan.iter().zip(&plan.drop_history) {
            prop_assert_eq!((s.layer, s.rank_before_drop, s.storage_gain), (d.layer, d.rank_before_drop, d.storage_gain as u64));
            prop_assert_eq!(s.score.to_bits(), d.score.to_bits());
        }
    }

    #[test]
    fn eligibility_is_monotone(layers in layer_scores(), pi in 0.01f64..0.99, eta in 0.0f64..0.99) {
        let plan = allocate_from_scores(&layers, pi, eta).unwrap();
        for lp in &plan.layers {
            let full = lp.rows.min(lp.cols);
            prop_assert!(lp.final_rank <= full);
            prop_assert!(lp.final_rank >= min_rank(lp.rows, lp.cols, eta).min(full));
            prop_assert_eq!(lp.dense_fallback, lp.final_rank > threshold_rank(lp.rows, lp.cols));
            let ranks: Vec<usize> = plan
                .drop_history
                .iter()
                .filter(|d| d.layer == lp.layer)
                .map(|d| d.rank_before_drop)
                .collect();
            let expected: Vec<usize> = (lp.final_rank + 1..=full).rev().collect();
            prop_assert_eq!(ranks, expected);
        }
    }

    #[test]
    fn storage_gains_telescope(m in 1usize..40, n in 1usize..40) {
        let full = m.min(n);
        let total: usize = (1..=full).map(|r| storage_gain(m, n, r)).sum();
        prop_assert_eq!(total, stored_params(m, n, full));
        prop_assert_eq!(stored_params(m, n, 0), 0);
    }

    #[test]
    fn singular_values_descend(w in sized_matrix()) {
        let s = svd(&w).unwrap();
        prop_assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        prop_assert!(s.singular_values.windows(2).all(|p| p[0] >= p[1]));
        let energy: f64 = s.singular_values.iter().map(|x| x * x).sum();
        let norm = w.frobenius_norm();
        prop_assert!((energy - norm * norm).abs() <= 1e-9 * (1.0 + norm * norm));
    }

    #[test]
    fn whitened_error_shrinks_with_rank(w in matrix(5, 4), x in matrix(12, 4), y in matrix(12, 5)) {
        let r = x.transpose().matmul(&x).unwrap().scale(1.0 / 12.0);
        let c = y.transpose().matmul(&y).unwrap().scale(1.0 / 12.0);
        let mut stats = LayerStats::from_matrices(0, r, c, 12).unwrap();
        stats.finalize_relative(1e-3, 1e-3).unwrap();
        let f = whiten(&w, &stats).unwrap();
        let mut last = f64::INFINITY;
        for rank in 1..=f.max_rank() {
            let err = whitened_error(&w, &truncate_and_unwhiten(&f, rank).unwrap().weight(), &stats).unwrap();
            prop_assert!(err <= last * (1.0 + 1e-9) + 1e-12);
            last = err;
        }
        prop_assert!(last <= 1e-9 * (1.0 + w.frobenius_norm().powi(2)));
    }

    #[test]
    fn quantization_error_is_half_a_step(row in vec(-50.0f64..50.0, 1..40)) {
        let (codes, scale, dq) = quantize_dequantize_row(&row).unwrap();
        let absmax = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(scale > 0.0);
        prop_assert!(absmax == 0.0 || scale >= absmax / 127.0);
        prop_assert!(codes.iter().all(|&c| c != i8::MIN));
        for (x, q) in row.iter().zip(&dq) {
            prop_assert!((x - q).abs() <= 0.5 * scale * (1.0 + 1e-12));
        }
    }

    #[test]
    fn selection_covers_budget_and_grows_with_it(cands in candidates(), frac_a in 0.0f64..1.0, frac_b in 0.0f64..1.0) {
        let total: u64 = cands.iter().map(|c| c.byte_saving).sum();
        let (lo, hi) = if frac_a <= frac_b { (frac_a, frac_b) } else { (frac_b, frac_a) };
        let small = (lo * total as f64).floor() as u64;
        let large = (hi * total as f64).floor() as u64;
        let pick_small = select_rows(&cands, small).unwrap();
        let pick_large = select_rows(&cands, large).unwrap();
        prop_assert!(pick_small.iter().map(|c| c.byte_saving).sum::<u64>() >= small);
        prop_assert!(pick_large.iter().map(|c| c.byte_saving).sum::<u64>() >= large);
        let a: BTreeSet<usize> = pick_small.iter().map(|c| c.row_index).collect();
        let b: BTreeSet<usize> = pick_large.iter().map(|c| c.row_index).collect();
        prop_assert!(a.is_subset(&b));
        // Dropping the last pick always leaves the budget uncovered.
        if let Some((_, head)) = pick_large.split_last() {
            prop_assert!(head.iter().map(|c| c.byte_saving).sum::<u64>() < large);
        }
        prop_assert!(select_rows(&cands, total + 1).is_err());
    }
}
