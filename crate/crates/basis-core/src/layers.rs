//! Manually differentiated layers.
//!
//! The dense layer comes in two modes that share one forward formula:
//!
//! * exact — caches the full B x N input and computes `dw = x' dy`;
//! * sketched — caches only the R x N invariant-scaled sketch of the input,
//!   re-sketches `dy` with the *same* plan in the backward pass, and
//!   estimates `dw ~= x_hat' dy_hat`. The input gradient `dx = dy W'` is
//!   computed exactly in both modes, so error flow to earlier layers is
//!   never approximated.
//!
//! The remaining layers (relu, gelu, layernorm, embedding, the cross-entropy
//! head) are ordinary exact implementations; their caches are elementwise
//! state that both modes persist equally.

use crate::error::{Error, Result};
use crate::sketch::{build_plan, sketch_scaled, ScalingMode, SketchPlan, SketchedTensor};
use crate::tensor::Matrix;

/// Per-row variance stabilizer in layernorm.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Weights (N x M) plus an optional bias of length M. The bias gradient is a
/// column sum of `dy` and never touches the activation cache, so it is exact
/// in both modes.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl DenseParams {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::shape("dense_params", weight.shape(), (1, b.len())));
            }
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }
}

/// Gradients produced by a dense backward pass.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dw: Matrix,
    pub db: Option<Vec<f64>>,
}

/// Exact-mode cache: the whole input.
#[derive(Debug, Clone)]
pub struct ExactCache {
    pub x: Matrix,
}

/// Sketched-mode cache: the compressed input, the plan that produced it, and
/// the shrinkage setting. The full B x N input is not retained.
#[derive(Debug, Clone)]
pub struct BasisCache {
    pub x_hat: SketchedTensor,
    pub plan: SketchPlan,
    pub lambda: f64,
    pub scaling: ScalingMode,
}

fn dense_output(x: &Matrix, params: &DenseParams) -> Result<Matrix> {
    if x.cols() != params.weight.rows() {
        return Err(Error::shape("dense_forward", x.shape(), params.weight.shape()));
    }
    let mut y = x.matmul(&params.weight)?;
    if let Some(bias) = &params.bias {
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    Ok(y)
}

// dx = dy W' — the one formula both modes share bit-for-bit.
fn input_gradient(dy: &Matrix, params: &DenseParams) -> Result<Matrix> {
    dy.matmul(&params.weight.transposed())
}

fn bias_gradient(dy: &Matrix, params: &DenseParams) -> Option<Vec<f64>> {
    params.bias.as_ref()?;
    let mut db = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        for (acc, v) in db.iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    Some(db)
}

/// y = x W (+ bias); the cache persists the full input.
pub fn dense_forward_exact(x: &Matrix, params: &DenseParams) -> Result<(Matrix, ExactCache)> {
    let y = dense_output(x, params)?;
    Ok((y, ExactCache { x: x.clone() }))
}

/// dx = dy W', dw = x' dy, db = column sum of dy.
pub fn dense_backward_exact(
    dy: &Matrix,
    cache: &ExactCache,
    params: &DenseParams,
) -> Result<(Matrix, DenseGrads)> {
    if dy.rows() != cache.x.rows() {
        return Err(Error::shape("dense_backward", dy.shape(), cache.x.shape()));
    }
    let dx = input_gradient(dy, params)?;
    let dw = cache.x.transposed().matmul(dy)?;
    let db = bias_gradient(dy, params);
    Ok((dx, DenseGrads { dw, db }))
}

/// Forward pass of the sketched dense layer. The output is identical to
/// [`dense_forward_exact`]; additionally the input is compressed at
/// `min(rank, rows)` with a fresh plan from `seed` and only the sketch is
/// cached.
pub fn basis_dense_forward(
    x: &Matrix,
    params: &DenseParams,
    rank: usize,
    lambda: f64,
    epsilon: f64,
    seed: u64,
) -> Result<(Matrix, BasisCache)> {
    basis_dense_forward_scaled(x, params, rank, lambda, epsilon, seed, ScalingMode::Invariant)
}

/// Like [`basis_dense_forward`] but with a selectable scaling mode; the raw
/// mode keeps the unbiased estimator for estimator diagnostics and is not
/// reachable from training configuration.
pub fn basis_dense_forward_scaled(
    x: &Matrix,
    params: &DenseParams,
    rank: usize,
    lambda: f64,
    epsilon: f64,
    seed: u64,
    scaling: ScalingMode,
) -> Result<(Matrix, BasisCache)> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidArgument {
            op: "basis_dense_forward",
            reason: format!("lambda must be in [0, 1), got {lambda}"),
        });
    }
    if rank == 0 {
        return Err(Error::InvalidArgument {
            op: "basis_dense_forward",
            reason: "rank must be positive".into(),
        });
    }
    let y = dense_output(x, params)?;
    let plan = build_plan(x.rows(), rank, seed);
    let x_hat = sketch_scaled(x, &plan, epsilon, scaling)?;
    Ok((y, BasisCache { x_hat, plan, lambda, scaling }))
}

/// Backward pass of the sketched dense layer: `dx` exact, `dw` estimated from
/// the cached input sketch and a same-plan sketch of `dy`, with the optional
/// `(1 - lambda)` shrinkage applied to both sketches before the product.
pub fn basis_dense_backward(
    dy: &Matrix,
    cache: &BasisCache,
    params: &DenseParams,
) -> Result<(Matrix, DenseGrads)> {
    if dy.rows() != cache.plan.batch_card {
        return Err(Error::shape(
            "basis_dense_backward",
            dy.shape(),
            (cache.plan.batch_card, dy.cols()),
        ));
    }
    let dx = input_gradient(dy, params)?;
    let dy_hat = sketch_scaled(dy, &cache.plan, cache.x_hat.epsilon, cache.scaling)?;
    let dw = if cache.lambda > 0.0 {
        let shrink = 1.0 - cache.lambda;
        let x_vals = cache.x_hat.values.scaled(shrink);
        let dy_vals = dy_hat.values.scaled(shrink);
        x_vals.transposed().matmul(&dy_vals)?
    } else {
        cache.x_hat.values.transposed().matmul(&dy_hat.values)?
    };
    let db = bias_gradient(dy, params);
    Ok((dx, DenseGrads { dw, db }))
}

/// How a given dense sublayer should execute.
#[derive(Debug, Clone)]
pub enum DenseRun {
    Exact,
    Basis { rank: usize, lambda: f64, epsilon: f64, seed: u64, scaling: ScalingMode },
}

/// Cache of whichever mode ran.
#[derive(Debug, Clone)]
pub enum DenseCache {
    Exact(ExactCache),
    Basis(BasisCache),
}

impl DenseCache {
    /// Activation floats this cache persists until the backward pass — the
    /// quantity the memory audit sums per dense layer.
    pub fn activation_floats(&self) -> usize {
        match self {
            DenseCache::Exact(c) => c.x.rows() * c.x.cols(),
            DenseCache::Basis(c) => c.x_hat.values.rows() * c.x_hat.values.cols(),
        }
    }

    /// Integer bookkeeping (bin and sign vectors) persisted alongside;
    /// reported separately from activation floats.
    pub fn plan_integers(&self) -> usize {
        match self {
            DenseCache::Exact(_) => 0,
            DenseCache::Basis(c) => c.plan.bins.len() + c.plan.signs.len(),
        }
    }
}

/// Mode-dispatched dense forward.
pub fn dense_forward(
    x: &Matrix,
    params: &DenseParams,
    run: &DenseRun,
) -> Result<(Matrix, DenseCache)> {
    match run {
        DenseRun::Exact => {
            let (y, c) = dense_forward_exact(x, params)?;
            Ok((y, DenseCache::Exact(c)))
        }
        DenseRun::Basis { rank, lambda, epsilon, seed, scaling } => {
            let (y, c) =
                basis_dense_forward_scaled(x, params, *rank, *lambda, *epsilon, *seed, *scaling)?;
            Ok((y, DenseCache::Basis(c)))
        }
    }
}

/// Mode-dispatched dense backward.
pub fn dense_backward(
    dy: &Matrix,
    cache: &DenseCache,
    params: &DenseParams,
) -> Result<(Matrix, DenseGrads)> {
    match cache {
        DenseCache::Exact(c) => dense_backward_exact(dy, c, params),
        DenseCache::Basis(c) => basis_dense_backward(dy, c, params),
    }
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    mask: Vec<bool>,
    rows: usize,
    cols: usize,
}

pub fn relu_forward(x: &Matrix) -> (Matrix, ReluCache) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let y = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j).max(0.0));
    (y, ReluCache { mask, rows: x.rows(), cols: x.cols() })
}

pub fn relu_backward(dy: &Matrix, cache: &ReluCache) -> Result<Matrix> {
    if dy.shape() != (cache.rows, cache.cols) {
        return Err(Error::shape("relu_backward", dy.shape(), (cache.rows, cache.cols)));
    }
    let data = dy
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Matrix::new(dy.rows(), dy.cols(), data)
}

#[derive(Debug, Clone)]
pub struct GeluCache {
    x: Matrix,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Tanh-form gelu; the backward differentiates the same approximation.
pub fn gelu_forward(x: &Matrix) -> (Matrix, GeluCache) {
    let y = Matrix::from_fn(x.rows(), x.cols(), |i, j| gelu_scalar(x.get(i, j)));
    (y, GeluCache { x: x.clone() })
}

pub fn gelu_backward(dy: &Matrix, cache: &GeluCache) -> Result<Matrix> {
    if dy.shape() != cache.x.shape() {
        return Err(Error::shape("gelu_backward", dy.shape(), cache.x.shape()));
    }
    Ok(Matrix::from_fn(dy.rows(), dy.cols(), |i, j| {
        dy.get(i, j) * gelu_grad_scalar(cache.x.get(i, j))
    }))
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized input, before the affine map.
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

/// Per-row normalization to mean 0 / variance 1 followed by the elementwise
/// affine map `y = scale * x_hat + shift`.
pub fn layernorm_forward(
    x: &Matrix,
    scale: &[f64],
    shift: &[f64],
) -> Result<(Matrix, LayerNormCache)> {
    let n = x.cols();
    if scale.len() != n || shift.len() != n {
        return Err(Error::shape("layernorm_forward", x.shape(), (1, scale.len())));
    }
    let mut x_hat = Matrix::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut y = Matrix::zeros(x.rows(), n);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std.push(istd);
        for j in 0..n {
            let xh = (row[j] - mean) * istd;
            x_hat.set(i, j, xh);
            y.set(i, j, scale[j] * xh + shift[j]);
        }
    }
    Ok((y, LayerNormCache { x_hat, inv_std }))
}

/// Closed-form layernorm backward:
/// `dx = istd * (dyh - mean(dyh) - x_hat * mean(dyh * x_hat))` per row with
/// `dyh = dy * scale`, plus `dscale = sum dy * x_hat` and `dshift = sum dy`.
pub fn layernorm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    scale: &[f64],
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if dy.shape() != cache.x_hat.shape() {
        return Err(Error::shape("layernorm_backward", dy.shape(), cache.x_hat.shape()));
    }
    let n = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), n);
    let mut dscale = vec![0.0; n];
    let mut dshift = vec![0.0; n];
    for i in 0..dy.rows() {
        let istd = cache.inv_std[i];
        let dyr = dy.row(i);
        let xh = cache.x_hat.row(i);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..n {
            let dyh = dyr[j] * scale[j];
            m1 += dyh;
            m2 += dyh * xh[j];
            dscale[j] += dyr[j] * xh[j];
            dshift[j] += dyr[j];
        }
        m1 /= n as f64;
        m2 /= n as f64;
        for j in 0..n {
            let dyh = dyr[j] * scale[j];
            dx.set(i, j, istd * (dyh - m1 - xh[j] * m2));
        }
    }
    Ok((dx, dscale, dshift))
}

/// Gather rows of `table` by token id.
pub fn embedding_forward(ids: &[usize], table: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(ids.len(), table.cols());
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::InvalidArgument {
                op: "embedding_forward",
                reason: format!("token id {id} out of range for vocab {}", table.rows()),
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-add of output gradients into table rows; duplicate ids accumulate.
pub fn embedding_backward(dy: &Matrix, ids: &[usize], vocab: usize) -> Result<Matrix> {
    if dy.rows() != ids.len() {
        return Err(Error::shape("embedding_backward", dy.shape(), (ids.len(), dy.cols())));
    }
    let mut grad = Matrix::zeros(vocab, dy.cols());
    for (i, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::InvalidArgument {
                op: "embedding_backward",
                reason: format!("token id {id} out of range for vocab {vocab}"),
            });
        }
        let src = dy.row(i);
        for (g, v) in grad.row_mut(id).iter_mut().zip(src) {
            *g += v;
        }
    }
    Ok(grad)
}

/// Mean negative log-likelihood over rows, with the gradient
/// `(softmax - onehot) / rows`. Rows are stabilized by max subtraction.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            logits.shape(),
            (targets.len(), logits.cols()),
        ));
    }
    let rows = logits.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        if target >= logits.cols() {
            return Err(Error::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("target {target} out of range for {} classes", logits.cols()),
            });
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z - max).exp();
        }
        loss += sum.ln() + max - row[target];
        let drow = dlogits.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum;
            drow[j] = (p - if j == target { 1.0 } else { 0.0 }) / rows;
        }
    }
    Ok((loss / rows, dlogits))
}
