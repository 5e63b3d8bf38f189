//! Training toolkit built around sketched weight gradients.
//!
//! Dense layers can compute their weight updates from balanced count-sketch
//! compressions of the forward activations instead of the activations
//! themselves, shrinking per-layer activation memory from B x N to R x N
//! while the input gradient stays exact. An invariant norm scalar keeps the
//! compressed tensors on the source tensor's Frobenius norm so optimizer
//! momentum sees a stable magnitude trajectory.
//!
//! The crate also carries an exact-backpropagation baseline, a char-level
//! language-model training loop for side-by-side comparisons, and a
//! diagnostics suite that measures the estimator's bias, variance, norm
//! behavior, and memory footprint.

pub mod attention;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sketch;
pub mod tensor;
pub mod train;

pub use data::{sample_lm_batch, BatchSpec, CharCorpus, Split, TokenBatch};
pub use error::{Error, Result};
pub use model::{Execution, GradMap, LayerMode, LmModel, ModelConfig, ModelKind, Precision};
pub use optim::MomentumSgd;
pub use sketch::{
    apply_sketch, balanced_assignment, build_plan, invariant_scale, rademacher_signs,
    ScalingMode, SketchPlan, SketchedTensor,
};
pub use tensor::{signed_segment_sum, Matrix};
pub use train::{
    run_rank_sweep, run_training, EvalRecord, RunReport, SweepResult, TrainConfig, CSV_HEADER,
};
