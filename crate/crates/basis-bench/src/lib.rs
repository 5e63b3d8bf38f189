//! Shared fixtures for the criterion benchmarks.

use basis_core::data::TokenBatch;
use basis_core::model::{LmModel, ModelConfig, ModelKind};
use basis_core::rng::Rng;
use basis_core::tensor::Matrix;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::random_normal(rows, cols, 1.0, &mut rng)
}

/// Desk-scale model and one batch, matching the default training shape.
pub fn desk_model_and_batch() -> (LmModel, TokenBatch, TokenBatch) {
    let cfg = ModelConfig {
        kind: ModelKind::Transformer,
        vocab_size: 28,
        seq_len: 64,
        d_model: 64,
        n_heads: 2,
        n_layers: 2,
    };
    let model = LmModel::new(&cfg, 1).expect("valid config");
    let mut rng = Rng::new(2);
    let ids: Vec<usize> = (0..65).map(|_| rng.next_below(28) as usize).collect();
    let inputs = TokenBatch { batch: 1, seq: 64, ids: ids[..64].to_vec() };
    let targets = TokenBatch { batch: 1, seq: 64, ids: ids[1..].to_vec() };
    (model, inputs, targets)
}
