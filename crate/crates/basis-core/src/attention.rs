//! Multi-head causal self-attention.
//!
//! The four projections (q, k, v, out) are ordinary dense layers and accept
//! the same per-layer execution modes as every other dense layer; the
//! attention core (scaled dot products, causal softmax, value mixing) is
//! always exact. Inputs arrive flattened as (batch * seq) x d_model rows.

use crate::error::{Error, Result};
use crate::layers::{dense_backward, dense_forward, DenseCache, DenseGrads, DenseParams, DenseRun};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: DenseParams,
    pub wk: DenseParams,
    pub wv: DenseParams,
    pub wo: DenseParams,
}

/// Execution mode per projection.
pub struct AttentionRuns {
    pub q: DenseRun,
    pub k: DenseRun,
    pub v: DenseRun,
    pub o: DenseRun,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Softmax rows per (batch, head), each seq x seq, strictly zero above
    /// the diagonal.
    probs: Vec<Matrix>,
    pub q_cache: DenseCache,
    pub k_cache: DenseCache,
    pub v_cache: DenseCache,
    pub o_cache: DenseCache,
    batch: usize,
    seq: usize,
    heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub q: DenseGrads,
    pub k: DenseGrads,
    pub v: DenseGrads,
    pub o: DenseGrads,
}

/// Copy head block (rows `b*seq..(b+1)*seq`, cols `h*dh..(h+1)*dh`) into a
/// dense seq x dh matrix.
fn head_block(m: &Matrix, b: usize, seq: usize, h: usize, dh: usize) -> Matrix {
    Matrix::from_fn(seq, dh, |t, j| m.get(b * seq + t, h * dh + j))
}

fn add_head_block(dst: &mut Matrix, src: &Matrix, b: usize, seq: usize, h: usize, dh: usize) {
    for t in 0..seq {
        for j in 0..dh {
            let cur = dst.get(b * seq + t, h * dh + j);
            dst.set(b * seq + t, h * dh + j, cur + src.get(t, j));
        }
    }
}

/// Scaled dot-product attention with a causal mask (position t attends to
/// positions <= t). Returns the mixed values and the cache for the backward
/// pass.
pub fn causal_attention_forward(
    x: &Matrix,
    params: &AttentionParams,
    n_heads: usize,
    batch: usize,
    runs: &AttentionRuns,
) -> Result<(Matrix, AttentionCache)> {
    let d = x.cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::InvalidArgument {
            op: "causal_attention_forward",
            reason: format!("d_model {d} not divisible by {n_heads} heads"),
        });
    }
    if batch == 0 || !x.rows().is_multiple_of(batch) {
        return Err(Error::InvalidArgument {
            op: "causal_attention_forward",
            reason: format!("{} rows not divisible by batch {batch}", x.rows()),
        });
    }
    let seq = x.rows() / batch;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (q, q_cache) = dense_forward(x, &params.wq, &runs.q)?;
    let (k, k_cache) = dense_forward(x, &params.wk, &runs.k)?;
    let (v, v_cache) = dense_forward(x, &params.wv, &runs.v)?;

    let mut mixed = Matrix::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(batch * n_heads);
    for b in 0..batch {
        for h in 0..n_heads {
            let qb = head_block(&q, b, seq, h, dh);
            let kb = head_block(&k, b, seq, h, dh);
            let vb = head_block(&v, b, seq, h, dh);
            let mut p = Matrix::zeros(seq, seq);
            for t in 0..seq {
                // Causal row: scores over u <= t only, softmaxed in place.
                let qrow = qb.row(t);
                let mut max = f64::NEG_INFINITY;
                let mut scores = vec![0.0; t + 1];
                for (u, s) in scores.iter_mut().enumerate() {
                    let dot: f64 =
                        qrow.iter().zip(kb.row(u)).map(|(a, c)| a * c).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (u, s) in scores.iter().enumerate() {
                    p.set(t, u, s / sum);
                }
            }
            let att = p.matmul(&vb)?;
            add_head_block(&mut mixed, &att, b, seq, h, dh);
            probs.push(p);
        }
    }

    let (y, o_cache) = dense_forward(&mixed, &params.wo, &runs.o)?;
    Ok((
        y,
        AttentionCache {
            q,
            k,
            v,
            probs,
            q_cache,
            k_cache,
            v_cache,
            o_cache,
            batch,
            seq,
            heads: n_heads,
        },
    ))
}

pub fn causal_attention_backward(
    dy: &Matrix,
    cache: &AttentionCache,
    params: &AttentionParams,
) -> Result<(Matrix, AttentionGrads)> {
    let (batch, seq, heads) = (cache.batch, cache.seq, cache.heads);
    let d = cache.q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (d_mixed, o_grads) = dense_backward(dy, &cache.o_cache, &params.wo)?;

    let mut dq = Matrix::zeros(batch * seq, d);
    let mut dk = Matrix::zeros(batch * seq, d);
    let mut dv = Matrix::zeros(batch * seq, d);
    for b in 0..batch {
        for h in 0..heads {
            let p = &cache.probs[b * heads + h];
            let qb = head_block(&cache.q, b, seq, h, dh);
            let kb = head_block(&cache.k, b, seq, h, dh);
            let vb = head_block(&cache.v, b, seq, h, dh);
            let datt = head_block(&d_mixed, b, seq, h, dh);

            let dprobs = datt.matmul(&vb.transposed())?;
            let dvb = p.transposed().matmul(&datt)?;

            // Softmax backward per row; masked entries have p == 0 and
            // therefore zero score gradient.
            let mut dscores = Matrix::zeros(seq, seq);
            for t in 0..seq {
                let mut dot = 0.0;
                for u in 0..=t {
                    dot += dprobs.get(t, u) * p.get(t, u);
                }
                for u in 0..=t {
                    dscores.set(t, u, p.get(t, u) * (dprobs.get(t, u) - dot));
                }
            }

            let dqb = dscores.matmul(&kb)?.scaled(scale);
            let dkb = dscores.transposed().matmul(&qb)?.scaled(scale);
            add_head_block(&mut dq, &dqb, b, seq, h, dh);
            add_head_block(&mut dk, &dkb, b, seq, h, dh);
            add_head_block(&mut dv, &dvb, b, seq, h, dh);
        }
    }

    let (dx_q, q_grads) = dense_backward(&dq, &cache.q_cache, &params.wq)?;
    let (dx_k, k_grads) = dense_backward(&dk, &cache.k_cache, &params.wk)?;
    let (dx_v, v_grads) = dense_backward(&dv, &cache.v_cache, &params.wv)?;

    let mut dx = dx_q;
    dx.add_in_place(&dx_k)?;
    dx.add_in_place(&dx_v)?;
    Ok((dx, AttentionGrads { q: q_grads, k: k_grads, v: v_grads, o: o_grads }))
}

impl AttentionCache {
    /// The four dense caches, labeled, for memory accounting.
    pub fn dense_caches(&self) -> [(&'static str, &DenseCache); 4] {
        [
            ("attn.q", &self.q_cache),
            ("attn.k", &self.k_cache),
            ("attn.v", &self.v_cache),
            ("attn.out", &self.o_cache),
        ]
    }
}
