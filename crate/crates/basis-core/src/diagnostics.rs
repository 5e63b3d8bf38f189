//! Empirical verification of the estimator's claims: projector unbiasedness,
//! variance dominance of balanced hashing over uniform hashing, norm
//! invariance of the scaled sketch, finite-difference gradient checks, and
//! activation-memory accounting.
//!
//! Every routine is deterministic given its seed; Monte Carlo trials draw
//! from per-trial derived streams so results are independent of evaluation
//! order.

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{Execution, LayerMode, LmModel};
use crate::rng::{derive, derive2, Rng};
use crate::sketch::{balanced_assignment, build_plan, invariant_scale, ScalingMode};
use crate::tensor::{signed_segment_sum, Matrix};

const TRIAL_STREAM: u64 = 0x7214;
const SIGN_TRIAL_STREAM: u64 = 0x7215;
const BIN_TRIAL_STREAM: u64 = 0x7216;

/// Bin-assignment scheme under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashingMode {
    Balanced,
    Uniform,
}

/// Summary statistics of the sketched weight-gradient estimator over a set
/// of independent plans.
#[derive(Debug, Clone)]
pub struct EstimatorStats {
    /// Mean over entries of |trial-mean - exact|.
    pub mean_abs_bias: f64,
    /// Mean over entries of the per-entry variance across trials.
    pub per_entry_variance: f64,
    pub trials: usize,
    pub hashing: HashingMode,
    pub scaling: ScalingMode,
}

/// Result of the projector-mean Monte Carlo.
#[derive(Debug, Clone)]
pub struct StsReport {
    /// (1/T) sum of S'S over T independent plans.
    pub mean: Matrix,
    /// Whether every trial's S'S had an exactly-1.0 diagonal.
    pub diagonal_always_one: bool,
    /// Largest |entry| off the diagonal of the mean.
    pub max_offdiag_abs: f64,
    pub trials: usize,
}

/// Monte Carlo mean of S'S over `trials` independent plans, built via the
/// explicit dense S for each plan. The diagonal of S'S is deterministically
/// 1 in every trial (each column of S holds a single +-1); the off-diagonal
/// entries are sign-product coin flips that only fire on bin collisions and
/// average toward zero.
pub fn estimate_sts_mean(
    batch_card: usize,
    rank: usize,
    trials: usize,
    seed: u64,
) -> Result<StsReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument {
            op: "estimate_sts_mean",
            reason: "trials must be >= 1".into(),
        });
    }
    let mut sum = Matrix::zeros(batch_card, batch_card);
    let mut diagonal_always_one = true;
    for t in 0..trials {
        let plan = build_plan(batch_card, rank, derive2(seed, TRIAL_STREAM, t as u64));
        let s = plan.to_matrix();
        let p = s.transposed().matmul(&s)?;
        for i in 0..batch_card {
            if p.get(i, i) != 1.0 {
                diagonal_always_one = false;
            }
        }
        sum.add_in_place(&p)?;
    }
    let mean = sum.scaled(1.0 / trials as f64);
    let mut max_offdiag_abs = 0.0f64;
    for i in 0..batch_card {
        for j in 0..batch_card {
            if i != j {
                max_offdiag_abs = max_offdiag_abs.max(mean.get(i, j).abs());
            }
        }
    }
    Ok(StsReport { mean, diagonal_always_one, max_offdiag_abs, trials })
}

/// I.i.d. uniform bin assignment — the control arm whose occupancy skew
/// balanced hashing eliminates. Lives only in the diagnostics; the training
/// path never uses it.
fn uniform_assignment(batch_card: usize, rank: usize, seed: u64) -> Vec<usize> {
    let r = rank.min(batch_card).max(1);
    let mut rng = Rng::new(seed);
    (0..batch_card).map(|_| rng.next_below(r as u64) as usize).collect()
}

/// Per-entry mean and variance of the sketched product `x~' dy~` across
/// `trials` independent plans. Both hashing modes consume identical sign
/// streams, so any variance difference is attributable to bin occupancy
/// alone.
pub fn sketched_dw_moments(
    x: &Matrix,
    dy: &Matrix,
    rank: usize,
    trials: usize,
    seed: u64,
    hashing: HashingMode,
    scaling: ScalingMode,
) -> Result<(Matrix, Matrix)> {
    if x.rows() != dy.rows() {
        return Err(Error::shape("sketched_dw_moments", x.shape(), dy.shape()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument {
            op: "sketched_dw_moments",
            reason: "trials must be >= 1".into(),
        });
    }
    let b = x.rows();
    let r_safe = rank.min(b);
    let (n, m) = (x.cols(), dy.cols());
    let one_trial = |t: usize| -> Result<Matrix> {
        let bin_seed = derive2(seed, BIN_TRIAL_STREAM, t as u64);
        let sign_seed = derive2(seed, SIGN_TRIAL_STREAM, t as u64);
        let bins = match hashing {
            HashingMode::Balanced => balanced_assignment(b, r_safe, bin_seed),
            HashingMode::Uniform => uniform_assignment(b, r_safe, bin_seed),
        };
        let signs = crate::sketch::rademacher_signs(b, sign_seed);
        let x_sk = signed_segment_sum(x, &bins, &signs, r_safe)?;
        let dy_sk = signed_segment_sum(dy, &bins, &signs, r_safe)?;
        let (x_vals, dy_vals) = match scaling {
            ScalingMode::Raw => (x_sk, dy_sk),
            ScalingMode::Invariant => (
                invariant_scale(x.frobenius_norm(), x_sk, crate::model::DEFAULT_EPSILON)?.values,
                invariant_scale(dy.frobenius_norm(), dy_sk, crate::model::DEFAULT_EPSILON)?.values,
            ),
        };
        x_vals.transposed().matmul(&dy_vals)
    };
    // Two passes over the same derived trial streams: the naive
    // E[Z^2] - E[Z]^2 form loses ~16 digits when the estimator is (near)
    // deterministic and would report cancellation noise as variance.
    let mut sum = Matrix::zeros(n, m);
    for t in 0..trials {
        sum.add_in_place(&one_trial(t)?)?;
    }
    let t_count = trials as f64;
    let mean = sum.scaled(1.0 / t_count);
    let mut sq_dev = Matrix::zeros(n, m);
    for t in 0..trials {
        let dw = one_trial(t)?;
        for (acc, (&v, &mu)) in
            sq_dev.data_mut().iter_mut().zip(dw.data().iter().zip(mean.data()))
        {
            *acc += (v - mu) * (v - mu);
        }
    }
    let variance = sq_dev.scaled(1.0 / t_count);
    Ok((mean, variance))
}

/// Estimator statistics for the raw (unscaled) sketched product under
/// balanced and uniform hashing with shared sign streams.
pub fn compare_hashing_variance(
    x: &Matrix,
    dy: &Matrix,
    rank: usize,
    trials: usize,
    seed: u64,
) -> Result<(EstimatorStats, EstimatorStats)> {
    let exact = x.transposed().matmul(dy)?;
    let entries = (exact.rows() * exact.cols()) as f64;
    let stats = |hashing: HashingMode| -> Result<EstimatorStats> {
        let (mean, var) = sketched_dw_moments(x, dy, rank, trials, seed, hashing, ScalingMode::Raw)?;
        let mean_abs_bias = mean
            .data()
            .iter()
            .zip(exact.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / entries;
        let per_entry_variance = var.data().iter().sum::<f64>() / entries;
        Ok(EstimatorStats { mean_abs_bias, per_entry_variance, trials, hashing, scaling: ScalingMode::Raw })
    };
    Ok((stats(HashingMode::Balanced)?, stats(HashingMode::Uniform)?))
}

/// Norm bookkeeping of one sketch-and-scale round trip.
#[derive(Debug, Clone)]
pub struct NormInvarianceReport {
    pub source_norm: f64,
    pub raw_norm: f64,
    pub scaled_norm: f64,
    /// `1 - scaled/source`, 0 for a zero source; epsilon-small whenever the
    /// raw sketch retains any mass.
    pub relative_gap: f64,
    /// |scaled_norm - source*raw/(raw+eps)| — the identity the scaling
    /// enforces, up to floating rounding.
    pub algebra_residual: f64,
    pub rank: usize,
}

pub fn check_norm_invariance(
    x: &Matrix,
    rank: usize,
    seed: u64,
    epsilon: f64,
) -> Result<NormInvarianceReport> {
    let plan = build_plan(x.rows(), rank, seed);
    let raw = crate::sketch::apply_sketch(x, &plan)?;
    let raw_norm = raw.frobenius_norm();
    let source_norm = x.frobenius_norm();
    let scaled = invariant_scale(source_norm, raw, epsilon)?;
    let scaled_norm = scaled.values.frobenius_norm();
    let expected = if source_norm == 0.0 { 0.0 } else { source_norm * raw_norm / (raw_norm + epsilon) };
    let relative_gap = if source_norm == 0.0 { 0.0 } else { 1.0 - scaled_norm / source_norm };
    Ok(NormInvarianceReport {
        source_norm,
        raw_norm,
        scaled_norm,
        relative_gap,
        algebra_residual: (scaled_norm - expected).abs(),
        rank: plan.rank,
    })
}

/// Outcome of a finite-difference check for one parameter tensor.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub tensor: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Denominator floor for the per-coordinate relative error: coordinates with
/// both gradients below this magnitude are compared absolutely at
/// `tol * floor`, keeping near-zero gradients from inflating the ratio.
pub const FD_REL_FLOOR: f64 = 1e-2;

/// Central-difference gradient check. Analytic gradients come from
/// `exec`-mode backward with a fixed plan seed; the reference derivative
/// perturbs each sampled coordinate by +-h and re-evaluates the loss (the
/// forward pass is mode-independent). At least `coords_per_tensor`
/// coordinates are checked per tensor, or the whole tensor if smaller.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    model: &mut LmModel,
    inputs: &TokenBatch,
    targets: &TokenBatch,
    exec: &Execution,
    tolerance: f64,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<Vec<FdReport>> {
    let plan_seed = derive(seed, 1);
    let (_, grads) = model.loss_and_grads(inputs, targets, exec, plan_seed)?;
    let mut coord_rng = Rng::new(derive(seed, 2));
    let names: Vec<String> = grads.names().cloned().collect();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let grad = grads.get(&name).expect("listed above").to_vec();
        let len = grad.len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            // Sample without replacement via a partial shuffle.
            let mut all: Vec<usize> = (0..len).collect();
            for i in 0..coords_per_tensor {
                let j = i + coord_rng.next_below((len - i) as u64) as usize;
                all.swap(i, j);
            }
            all.truncate(coords_per_tensor);
            all
        };
        let mut max_rel_err = 0.0f64;
        for &idx in &coords {
            let original = {
                let p = model.param_mut(&name).expect("gradient names match params");
                let v = p[idx];
                p[idx] = v + h;
                v
            };
            let loss_plus = model.loss(inputs, targets)?;
            model.param_mut(&name).expect("present")[idx] = original - h;
            let loss_minus = model.loss(inputs, targets)?;
            model.param_mut(&name).expect("present")[idx] = original;
            let fd = (loss_plus - loss_minus) / (2.0 * h);
            let an = grad[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_REL_FLOOR);
            max_rel_err = max_rel_err.max(rel);
        }
        reports.push(FdReport {
            tensor: name,
            checked: coords.len(),
            max_rel_err,
            pass: max_rel_err < tolerance,
        });
    }
    Ok(reports)
}

/// Activation-memory accounting for one forward pass.
///
/// Counts the floats each dense layer persists for its weight gradient (the
/// full input in exact mode, the rank x N sketch in sketched mode). Plan bin
/// and sign vectors are integer bookkeeping and reported separately;
/// elementwise caches of non-dense layers are outside the account since both
/// modes persist them identically.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub mode: LayerMode,
    /// Flattened batch*seq row count the pass ran with.
    pub batch_rows: usize,
    /// Requested sketch rank (per-layer effective rank is min(rank, rows)).
    pub rank: usize,
    pub per_layer: Vec<(String, usize)>,
    pub total_activation_floats: usize,
    /// Closed-form total from the architecture: sum over dense layers of
    /// rows x N (exact) or min(rank, rows) x N (sketched).
    pub theoretical_floats: usize,
    pub plan_integers: usize,
    /// Multiply-accumulate count of the dw products: sum of rows_used*N*M.
    pub dw_product_flops: u64,
    /// Sketch construction cost in sketched mode: 2*rows*(N+M) per layer.
    pub sketch_flops: u64,
}

pub fn memory_audit(
    model: &LmModel,
    batch: &TokenBatch,
    exec: &Execution,
) -> Result<MemoryReport> {
    let (_, cache) = model.forward(batch, exec, derive(0xA0D17, 0))?;
    let rows = batch.batch * batch.seq;
    let mut per_layer = Vec::new();
    let mut total = 0usize;
    let mut plan_integers = 0usize;
    for (name, dense) in cache.dense_caches() {
        let floats = dense.activation_floats();
        total += floats;
        plan_integers += dense.plan_integers();
        per_layer.push((name, floats));
    }
    let mut theoretical = 0usize;
    let mut dw_flops = 0u64;
    let mut sketch_flops = 0u64;
    for (name, n, m) in model.dense_layer_dims() {
        let mode = exec.overrides.get(&name).copied().unwrap_or(exec.mode);
        let rows_used = match mode {
            LayerMode::Exact => rows,
            LayerMode::Basis => exec.rank.min(rows),
        };
        theoretical += rows_used * n;
        dw_flops += (rows_used * n * m) as u64;
        if mode == LayerMode::Basis {
            sketch_flops += (2 * rows * (n + m)) as u64;
        }
    }
    Ok(MemoryReport {
        mode: exec.mode,
        batch_rows: rows,
        rank: exec.rank,
        per_layer,
        total_activation_floats: total,
        theoretical_floats: theoretical,
        plan_integers,
        dw_product_flops: dw_flops,
        sketch_flops,
    })
}

impl MemoryReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            LayerMode::Exact => "exact".to_string(),
            LayerMode::Basis => format!("basis (rank {})", self.rank),
        };
        out.push_str(&format!("activation memory audit — mode {mode}, {} rows\n", self.batch_rows));
        for (name, floats) in &self.per_layer {
            out.push_str(&format!("  {name:<18} {floats:>10} floats\n"));
        }
        out.push_str(&format!(
            "  total {} floats (theoretical {}), plan integers {}\n",
            self.total_activation_floats, self.theoretical_floats, self.plan_integers
        ));
        out.push_str(&format!(
            "  dw-product flops {} | sketch flops {}\n",
            self.dw_product_flops, self.sketch_flops
        ));
        out
    }
}
