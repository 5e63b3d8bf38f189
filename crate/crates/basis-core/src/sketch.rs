//! Balanced count-sketch construction and invariant norm scaling.
//!
//! A [`SketchPlan`] realizes one draw of the random projection S in R^{R x B}:
//! a bin assignment `h` and a Rademacher sign vector `s`, with
//! `S[r, b] = s(b)` when `h(b) == r` and zero otherwise. Applying the plan to
//! a B x N matrix collapses it to R x N by signed segment sums. Bins come
//! from *balanced hashing* — a random permutation of `(0..B) mod R` — so every
//! bin holds floor(B/R) or ceil(B/R) rows; occupancy skew, the main source of
//! collision variance in plain count-sketch, is structurally impossible.
//!
//! [`invariant_scale`] then rescales the compressed values so their Frobenius
//! norm deterministically matches the source tensor's, trading a small bias
//! for a stable magnitude trajectory.

use crate::error::{Error, Result};
use crate::rng::{derive, Rng};
use crate::tensor::{signed_segment_sum, Matrix};

/// Stream tags separating bin and sign randomness inside one plan seed.
const BIN_STREAM: u64 = 0x42;
const SIGN_STREAM: u64 = 0x53;

/// One realization of the R x B projection.
#[derive(Debug, Clone)]
pub struct SketchPlan {
    /// Number of rows the plan was built for (flattened token count).
    pub batch_card: usize,
    /// Effective sketch rank, already clamped to `min(requested, batch_card)`.
    pub rank: usize,
    /// Bin index per row, each in `[0, rank)`.
    pub bins: Vec<usize>,
    /// Rademacher sign per row, each -1.0 or +1.0.
    pub signs: Vec<f64>,
    /// Seed the plan was derived from.
    pub seed: u64,
}

/// A compressed tensor together with its norm-restoring scalar.
#[derive(Debug, Clone)]
pub struct SketchedTensor {
    /// gamma * (S x): the scaled R x N sketch.
    pub values: Matrix,
    /// Invariant scalar `source_norm / (raw_norm + epsilon)`; 0 when the
    /// source was all-zero.
    pub gamma: f64,
    /// Frobenius norm of the uncompressed source.
    pub source_norm: f64,
    /// Stabilizer used in gamma's denominator.
    pub epsilon: f64,
}

/// How the sketch magnitude is handled.
///
/// `Raw` keeps the unscaled, unbiased estimator and exists for estimator
/// analysis in the diagnostics; training always uses `Invariant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    Invariant,
    Raw,
}

/// Balanced bin assignment: a uniformly random permutation of the sequence
/// `(0 % r, 1 % r, ..., (batch_card-1) % r)` with `r = min(rank, batch_card)`.
/// Every bin count lands in {floor(B/r), ceil(B/r)}.
pub fn balanced_assignment(batch_card: usize, rank: usize, seed: u64) -> Vec<usize> {
    let r = rank.min(batch_card).max(1);
    let mut bins: Vec<usize> = (0..batch_card).map(|b| b % r).collect();
    Rng::new(seed).shuffle(&mut bins);
    bins
}

/// I.i.d. Rademacher vector: each entry -1.0 or +1.0.
pub fn rademacher_signs(batch_card: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..batch_card).map(|_| rng.next_sign()).collect()
}

/// Build a plan for `batch_card` rows at the requested rank. The rank is
/// clamped to `batch_card`; bins and signs are drawn from independent streams
/// derived from `seed`.
pub fn build_plan(batch_card: usize, rank: usize, seed: u64) -> SketchPlan {
    debug_assert!(batch_card >= 1 && rank >= 1);
    let r_safe = rank.min(batch_card);
    SketchPlan {
        batch_card,
        rank: r_safe,
        bins: balanced_assignment(batch_card, r_safe, derive(seed, BIN_STREAM)),
        signs: rademacher_signs(batch_card, derive(seed, SIGN_STREAM)),
        seed,
    }
}

impl SketchPlan {
    /// Occupancy count per bin.
    pub fn bin_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.rank];
        for &b in &self.bins {
            counts[b] += 1;
        }
        counts
    }

    /// Materialize the plan as a dense R x B matrix. Diagnostics-grade; the
    /// hot path never forms S explicitly.
    pub fn to_matrix(&self) -> Matrix {
        let mut s = Matrix::zeros(self.rank, self.batch_card);
        for (b, (&bin, &sign)) in self.bins.iter().zip(&self.signs).enumerate() {
            s.set(bin, b, sign);
        }
        s
    }
}

/// Compress `x` (B x N) to R x N: row r of the output is the signed sum of
/// the rows hashed to bin r. Equals the matrix product `S * x` for the plan's
/// induced S.
pub fn apply_sketch(x: &Matrix, plan: &SketchPlan) -> Result<Matrix> {
    if x.rows() != plan.batch_card {
        return Err(Error::shape(
            "apply_sketch",
            x.shape(),
            (plan.batch_card, x.cols()),
        ));
    }
    signed_segment_sum(x, &plan.bins, &plan.signs, plan.rank)
}

/// Scale a raw sketch so its Frobenius norm matches the source tensor's:
/// `gamma = x_norm / (||raw|| + epsilon)`, `values = gamma * raw`. A zero
/// source maps to gamma 0 and zero values so zero inputs cannot manufacture
/// epsilon-scaled gradient noise.
pub fn invariant_scale(x_norm: f64, raw_sketch: Matrix, epsilon: f64) -> Result<SketchedTensor> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "invariant_scale",
            reason: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    if x_norm == 0.0 {
        let (r, n) = raw_sketch.shape();
        return Ok(SketchedTensor {
            values: Matrix::zeros(r, n),
            gamma: 0.0,
            source_norm: 0.0,
            epsilon,
        });
    }
    let raw_norm = raw_sketch.frobenius_norm();
    let gamma = x_norm / (raw_norm + epsilon);
    let mut values = raw_sketch;
    values.scale_in_place(gamma);
    Ok(SketchedTensor { values, gamma, source_norm: x_norm, epsilon })
}

/// Sketch and scale in one step (the forward-pass composition).
pub fn sketch_scaled(
    x: &Matrix,
    plan: &SketchPlan,
    epsilon: f64,
    scaling: ScalingMode,
) -> Result<SketchedTensor> {
    let raw = apply_sketch(x, plan)?;
    match scaling {
        ScalingMode::Invariant => invariant_scale(x.frobenius_norm(), raw, epsilon),
        ScalingMode::Raw => Ok(SketchedTensor {
            gamma: 1.0,
            source_norm: x.frobenius_norm(),
            epsilon,
            values: raw,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_assignment_even_split() {
        let bins = balanced_assignment(6, 3, 1);
        let mut counts = [0usize; 3];
        for b in bins {
            counts[b] += 1;
        }
        assert_eq!(counts, [2, 2, 2]);
    }

    #[test]
    fn balanced_assignment_uneven_split() {
        let bins = balanced_assignment(7, 3, 2);
        let mut counts = vec![0usize; 3];
        for b in bins {
            counts[b] += 1;
        }
        counts.sort_unstable();
        assert_eq!(counts, vec![2, 2, 3]);
    }

    #[test]
    fn balanced_assignment_injective_at_full_rank() {
        // B == R: exactly one row per bin.
        let bins = balanced_assignment(64, 64, 3);
        let mut counts = vec![0usize; 64];
        for b in bins {
            counts[b] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn rademacher_values_and_determinism() {
        let signs = rademacher_signs(1000, 4);
        assert!(signs.iter().all(|&s| s == 1.0 || s == -1.0));
        assert_eq!(signs, rademacher_signs(1000, 4));
    }

    #[test]
    fn rademacher_mean_clt_bound() {
        let n = 100_000;
        let signs = rademacher_signs(n, 5);
        let mean = signs.iter().sum::<f64>() / n as f64;
        // 3 / sqrt(n) three-sigma bound on the empirical mean.
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn build_plan_clamps_rank() {
        let plan = build_plan(64, 128, 6);
        assert_eq!(plan.rank, 64);
        assert_eq!(plan.bins.len(), 64);
    }

    #[test]
    fn build_plan_rank_one_uses_single_bin() {
        let plan = build_plan(10, 1, 7);
        assert!(plan.bins.iter().all(|&b| b == 0));
    }

    #[test]
    fn distinct_seeds_give_distinct_plans() {
        // 100 seed pairs; collisions of (permutation, signs) draws should
        // never show up.
        for pair in 0..100u64 {
            let a = build_plan(16, 4, derive(900, 2 * pair));
            let b = build_plan(16, 4, derive(900, 2 * pair + 1));
            assert!(a.bins != b.bins || a.signs != b.signs, "seed pair {pair} collided");
        }
    }

    #[test]
    fn apply_sketch_full_rank_is_signed_permutation() {
        let mut rng = Rng::new(8);
        let x = Matrix::random_normal(8, 5, 1.0, &mut rng);
        let plan = build_plan(8, 8, 9);
        let out = apply_sketch(&x, &plan).unwrap();
        // Each output row is +/- one input row; norm preserved exactly
        // (each row copies, no additions).
        for (b, (&bin, &sign)) in plan.bins.iter().zip(&plan.signs).enumerate() {
            let expect: Vec<f64> = x.row(b).iter().map(|v| v * sign).collect();
            assert_eq!(out.row(bin), &expect[..]);
        }
        assert!((out.frobenius_norm() - x.frobenius_norm()).abs() <= 1e-12 * x.frobenius_norm());
    }

    #[test]
    fn apply_sketch_zeros() {
        let x = Matrix::zeros(6, 3);
        let plan = build_plan(6, 2, 10);
        assert_eq!(apply_sketch(&x, &plan).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn apply_sketch_manual_example() {
        // bins [0,1,0,1], signs [+,+,-,-]: rows [r0 - r2; r1 - r3].
        let x = Matrix::from_rows(&[
            &[1.0, 2.0],
            &[3.0, 4.0],
            &[5.0, 6.0],
            &[7.0, 8.0],
        ])
        .unwrap();
        let plan = SketchPlan {
            batch_card: 4,
            rank: 2,
            bins: vec![0, 1, 0, 1],
            signs: vec![1.0, 1.0, -1.0, -1.0],
            seed: 0,
        };
        let out = apply_sketch(&x, &plan).unwrap();
        assert_eq!(
            out,
            Matrix::from_rows(&[&[-4.0, -4.0], &[-4.0, -4.0]]).unwrap()
        );
    }

    #[test]
    fn apply_sketch_rejects_row_mismatch() {
        let x = Matrix::zeros(5, 3);
        let plan = build_plan(6, 2, 11);
        assert!(apply_sketch(&x, &plan).is_err());
    }

    #[test]
    fn apply_sketch_matches_dense_projection() {
        // Segment-sum route vs. explicit S * x.
        let mut rng = Rng::new(12);
        let x = Matrix::random_normal(10, 4, 1.0, &mut rng);
        let plan = build_plan(10, 3, 13);
        let fast = apply_sketch(&x, &plan).unwrap();
        let dense = plan.to_matrix().matmul(&x).unwrap();
        assert!(fast.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn invariant_scale_isometry_case() {
        // Norm-preserving sketch with norm 5: gamma = 5 / (5 + 1e-8).
        let raw = Matrix::from_rows(&[&[3.0, 4.0]]).unwrap();
        let st = invariant_scale(5.0, raw, 1e-8).unwrap();
        assert!((st.gamma - 1.0).abs() < 1e-8);
        assert!(st.values.frobenius_norm() <= 5.0);
    }

    #[test]
    fn invariant_scale_annihilated_sketch() {
        // Sketch cancelled to zero but source norm 7: gamma = 7/eps, values 0.
        let st = invariant_scale(7.0, Matrix::zeros(2, 3), 1e-8).unwrap();
        assert_eq!(st.gamma, 7.0 / 1e-8);
        assert_eq!(st.values, Matrix::zeros(2, 3));
        assert!(st.values.frobenius_norm() <= 7.0);
    }

    #[test]
    fn invariant_scale_direct_formula() {
        // x_norm 10, raw norm 2: scaled norm = 10 * 2 / (2 + eps) ~= 10.
        let raw = Matrix::from_rows(&[&[2.0]]).unwrap();
        let st = invariant_scale(10.0, raw, 1e-8).unwrap();
        let got = st.values.frobenius_norm();
        let expect = 10.0 * 2.0 / (2.0 + 1e-8);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!(got <= 10.0);
    }

    #[test]
    fn invariant_scale_zero_source_convention() {
        let st = invariant_scale(0.0, Matrix::from_rows(&[&[1.0, 1.0]]).unwrap(), 1e-8).unwrap();
        assert_eq!(st.gamma, 0.0);
        assert_eq!(st.values, Matrix::zeros(1, 2));
    }

    #[test]
    fn invariant_scale_rejects_nonpositive_epsilon() {
        assert!(invariant_scale(1.0, Matrix::zeros(1, 1), 0.0).is_err());
        assert!(invariant_scale(1.0, Matrix::zeros(1, 1), -1e-9).is_err());
    }

    #[test]
    fn full_rank_sketch_recovers_cross_products() {
        // rank == batch_card: sketched x~' y~ equals x' y to rounding.
        let mut rng = Rng::new(14);
        let x = Matrix::random_normal(12, 5, 1.0, &mut rng);
        let y = Matrix::random_normal(12, 6, 1.0, &mut rng);
        let plan = build_plan(12, 12, 15);
        let xs = apply_sketch(&x, &plan).unwrap();
        let ys = apply_sketch(&y, &plan).unwrap();
        let sketched = xs.transposed().matmul(&ys).unwrap();
        let exact = x.transposed().matmul(&y).unwrap();
        assert!(sketched.rel_frobenius_diff(&exact) < 1e-9);
    }
}
