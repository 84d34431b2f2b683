//! Property tests for the numeric substrate and the clustering and pooling
//! invariants.

use proptest::prelude::*;

use cdira_core::autodiff::{kernels, Tape};
use cdira_core::cluster::{kmeans_objective, kmeans_with_trace, silhouette, EmbeddingMatrix};
use cdira_core::degrade::{degrade, DegradeKind, DegradeSpec};
use cdira_core::eval::metrics;
use cdira_core::model::{saliency, top_k_positions};
use cdira_core::tensor::Tensor;

fn map_strategy(
    max_c: usize,
    max_hw: usize,
) -> impl Strategy<Value = (usize, usize, usize, Vec<f32>)> {
    (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(c, h, w)| {
        proptest::collection::vec(-10.0f32..10.0, c * h * w)
            .prop_map(move |data| (c, h, w, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in proptest::collection::vec(-30.0f32..30.0, 1..12),
        shift in -50.0f32..50.0,
    ) {
        let p = kernels::softmax(&logits);
        let sum: f32 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = logits.iter().map(|&v| v + shift).collect();
        let q = kernels::softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_coverage_pooling_equals_gap_bitwise((c, h, w, data) in map_strategy(6, 6)) {
        let f = Tensor::from_vec(&[c, h, w], data).unwrap();
        let sal = saliency(&f);
        let sel = top_k_positions(&sal, h * w).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(f);
        let pooled = tape.mean_select(x, &sel.positions).unwrap();
        let gap = tape.gap(x).unwrap();
        let a: Vec<u32> = tape.value(pooled).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = tape.value(gap).data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn top_k_matches_brute_force_sort((c, h, w, data) in map_strategy(4, 8), k_frac in 0.01f64..1.0) {
        let f = Tensor::from_vec(&[c, h, w], data).unwrap();
        let sal = saliency(&f);
        let hw = h * w;
        let k = ((hw as f64 * k_frac).ceil() as usize).clamp(1, hw);
        let sel = top_k_positions(&sal, k).unwrap();

        // brute force: full stable sort by (-saliency, row-major)
        let mut order: Vec<usize> = (0..hw).collect();
        order.sort_by(|&a, &b| {
            sal.values[b].total_cmp(&sal.values[a]).then(a.cmp(&b))
        });
        let mut expect: Vec<(usize, usize)> = order[..k].iter().map(|&p| (p / w, p % w)).collect();
        expect.sort_unstable();
        prop_assert_eq!(sel.positions, expect);
    }

    #[test]
    fn silhouette_values_lie_in_unit_interval(
        data in proptest::collection::vec(-5.0f32..5.0, 12..60),
        k in 2usize..4,
    ) {
        let n = data.len() / 2;
        let z = EmbeddingMatrix::new(n, 2, data[..n * 2].to_vec()).unwrap();
        prop_assume!(n >= k * 2);
        let assignments: Vec<usize> = (0..n).map(|i| i % k).collect();
        let s = silhouette(&z, &assignments).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "s = {}", s);
    }

    #[test]
    fn kmeans_objective_is_non_increasing(
        data in proptest::collection::vec(-8.0f32..8.0, 24..80),
        k in 1usize..5,
        seed in 0u64..50,
    ) {
        let n = data.len() / 2;
        prop_assume!(k <= n);
        let z = EmbeddingMatrix::new(n, 2, data[..n * 2].to_vec()).unwrap();
        let (centers, assignments, trace) = kmeans_with_trace(&z, k, seed, 40, 1e-5).unwrap();
        for pair in trace.windows(2) {
            // slack for f32 rounding of the center means
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-6) + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
        let last = kmeans_objective(&z, &centers, &assignments);
        prop_assert!((last - trace.last().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_permutation_invariant(
        pairs in proptest::collection::vec((0usize..5, 0usize..5), 5..60),
        perm_seed in 0u64..1000,
    ) {
        let preds: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
        let labels: Vec<usize> = pairs.iter().map(|&(_, y)| y).collect();
        let base = metrics(&preds, &labels, 5).unwrap();

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut state = perm_seed.wrapping_add(0x9e3779b97f4a7c15);
        for i in (1..order.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let p2: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let permuted = metrics(&p2, &l2, 5).unwrap();
        prop_assert_eq!(base.accuracy, permuted.accuracy);
        prop_assert_eq!(base.macro_precision, permuted.macro_precision);
        prop_assert_eq!(base.macro_recall, permuted.macro_recall);
        prop_assert_eq!(base.macro_f1, permuted.macro_f1);
    }

    #[test]
    fn degrade_severity_zero_is_identity(
        data in proptest::collection::vec(0.0f32..=1.0, 3 * 8 * 8..=3 * 8 * 8),
        seed in 0u64..100,
    ) {
        let img = Tensor::from_vec(&[3, 8, 8], data).unwrap();
        for kind in DegradeKind::all() {
            let out = degrade(&img, &DegradeSpec { kind, severity: 0, seed }).unwrap();
            let identical = img
                .data()
                .iter()
                .zip(out.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(identical);
        }
    }

    #[test]
    fn saliency_is_nonnegative_and_zero_iff_zero_column((c, h, w, data) in map_strategy(5, 5)) {
        let f = Tensor::from_vec(&[c, h, w], data).unwrap();
        let sal = saliency(&f);
        for y in 0..h {
            for x in 0..w {
                let s = sal.at(y, x);
                prop_assert!(s >= 0.0);
                let col_zero = (0..c).all(|ci| f.at3(ci, y, x) == 0.0);
                prop_assert_eq!(s == 0.0, col_zero);
            }
        }
    }
}
