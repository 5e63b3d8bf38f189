//! Property tests for the kernel and sketch invariants.

use basis_core::diagnostics::{estimate_sts_mean, sketched_dw_moments, HashingMode};
use basis_core::layers::softmax_cross_entropy;
use basis_core::sketch::{apply_sketch, build_plan, invariant_scale, ScalingMode};
use basis_core::tensor::{signed_segment_sum, Matrix};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(-scale..scale, r * c)
            .prop_map(move |data| Matrix::new(r, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn bin_occupancy_is_balanced(batch in 1usize..96, rank in 1usize..96, seed in any::<u64>()) {
        let plan = build_plan(batch, rank, seed);
        let counts = plan.bin_counts();
        let lo = batch / plan.rank;
        let hi = lo + usize::from(batch % plan.rank != 0);
        for &c in &counts {
            prop_assert!(c == lo || c == hi, "count {c} outside {{{lo}, {hi}}}");
        }
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        prop_assert!(max - min <= 1);
    }

    #[test]
    fn plans_are_seed_deterministic(batch in 1usize..64, rank in 1usize..64, seed in any::<u64>()) {
        let a = build_plan(batch, rank, seed);
        let b = build_plan(batch, rank, seed);
        prop_assert_eq!(a.bins, b.bins);
        prop_assert_eq!(a.signs, b.signs);
    }

    #[test]
    fn sketch_equals_dense_projection(x in matrix(16, 8, 10.0), rank in 1usize..20, seed in any::<u64>()) {
        let plan = build_plan(x.rows(), rank, seed);
        let fast = apply_sketch(&x, &plan).unwrap();
        let dense = plan.to_matrix().matmul(&x).unwrap();
        prop_assert!(fast.max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn full_rank_sketch_is_isometric(x in matrix(16, 8, 10.0), seed in any::<u64>()) {
        let plan = build_plan(x.rows(), x.rows(), seed);
        let sk = apply_sketch(&x, &plan).unwrap();
        let (a, b) = (sk.frobenius_norm(), x.frobenius_norm());
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn full_rank_cross_products_recover(
        x in matrix(12, 6, 5.0),
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut gen = basis_core::rng::Rng::new(seed ^ 0x5EED);
        let y = Matrix::from_fn(x.rows(), cols, |_, _| gen.next_normal());
        let plan = build_plan(x.rows(), x.rows(), seed);
        let xs = apply_sketch(&x, &plan).unwrap();
        let ys = apply_sketch(&y, &plan).unwrap();
        let sketched = xs.transposed().matmul(&ys).unwrap();
        let exact = x.transposed().matmul(&y).unwrap();
        prop_assert!(sketched.rel_frobenius_diff(&exact) < 1e-9);
    }

    #[test]
    fn norm_ceiling_holds(
        x in matrix(12, 12, 100.0),
        rank in 1usize..16,
        eps_exp in -9.0f64..-2.0,
    ) {
        let epsilon = 10f64.powf(eps_exp);
        let plan = build_plan(x.rows(), rank, 7);
        let raw = apply_sketch(&x, &plan).unwrap();
        let st = invariant_scale(x.frobenius_norm(), raw, epsilon).unwrap();
        prop_assert!(st.values.frobenius_norm() <= st.source_norm);
    }

    #[test]
    fn identity_bins_are_exact(x in matrix(12, 8, 100.0)) {
        let bins: Vec<usize> = (0..x.rows()).collect();
        let signs = vec![1.0; x.rows()];
        let out = signed_segment_sum(&x, &bins, &signs, x.rows()).unwrap();
        prop_assert_eq!(out, x);
    }

    #[test]
    fn matmul_is_associative(
        a in matrix(6, 5, 10.0),
        bc in (1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        let (k, m) = bc;
        let mut gen = basis_core::rng::Rng::new(seed);
        let b = Matrix::from_fn(a.cols(), k, |_, _| gen.next_normal());
        let c = Matrix::from_fn(k, m, |_, _| gen.next_normal());
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.rel_frobenius_diff(&right) < 1e-10);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(
        logits in matrix(6, 9, 8.0),
        seed in any::<u64>(),
    ) {
        let mut gen = basis_core::rng::Rng::new(seed);
        let targets: Vec<usize> =
            (0..logits.rows()).map(|_| gen.next_below(logits.cols() as u64) as usize).collect();
        let (loss, dlogits) = softmax_cross_entropy(&logits, &targets).unwrap();
        prop_assert!(loss >= 0.0);
        for i in 0..dlogits.rows() {
            let s: f64 = dlogits.row(i).iter().sum();
            prop_assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn sts_diagonal_is_deterministic(batch in 2usize..12, rank in 1usize..12, seed in any::<u64>()) {
        let r = estimate_sts_mean(batch, rank, 3, seed).unwrap();
        prop_assert!(r.diagonal_always_one);
    }
}

#[test]
fn raw_estimator_trial_mean_tracks_exact_product() {
    // Deterministic mid-size check that the raw estimator's trial mean
    // approaches x'dy under both hashing schemes.
    let mut gen = basis_core::rng::Rng::new(99);
    let x = Matrix::random_normal(12, 5, 1.0, &mut gen);
    let dy = Matrix::random_normal(12, 4, 1.0, &mut gen);
    let exact = x.transposed().matmul(&dy).unwrap();
    for hashing in [HashingMode::Balanced, HashingMode::Uniform] {
        let (mean, var) =
            sketched_dw_moments(&x, &dy, 3, 40_000, 5, hashing, ScalingMode::Raw).unwrap();
        for i in 0..mean.rows() {
            for j in 0..mean.cols() {
                let bound = 4.0 * (var.get(i, j) / 40_000.0).sqrt();
                let err = (mean.get(i, j) - exact.get(i, j)).abs();
                assert!(err <= bound.max(1e-9), "{hashing:?} ({i},{j}): {err} > {bound}");
            }
        }
    }
}
