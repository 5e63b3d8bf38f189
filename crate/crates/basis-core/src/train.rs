//! The experiment loop: build a model from a config, optimize it with exact
//! or sketched dense layers, record train/val loss at fixed intervals, and
//! drive rank sweeps with shared data streams.
//!
//! Runs are bit-deterministic given (config, corpus): data sampling, plan
//! seeds, and evaluation batches all derive from the run seed through
//! disjoint streams, so an exact run and a sketched run consume identical
//! data while the sketched run draws its plan randomness elsewhere.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::data::{sample_lm_batch, BatchSpec, CharCorpus, Split};
use crate::diagnostics::{memory_audit, MemoryReport};
use crate::error::{Error, Result};
use crate::model::{
    Execution, LayerMode, LmModel, ModelConfig, ModelKind, Precision,
};
use crate::optim::MomentumSgd;
use crate::rng::{derive, derive2};

const DATA_STREAM: u64 = 0xD0;
const PLAN_STREAM: u64 = 0xF0;
const VAL_STREAM: u64 = 0xE0;
const TRAIN_EVAL_STREAM: u64 = 0xE1;
const INIT_STREAM: u64 = 0x10;

/// Full description of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// 0 means "use the corpus vocabulary"; larger values pad the embedding
    /// and head for synthetic big-vocabulary runs.
    pub vocab_size: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub mode: LayerMode,
    pub rank: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Per-dense-layer mode overrides by layer name.
    pub layer_modes: std::collections::BTreeMap<String, LayerMode>,
    /// Fixed evaluation protocol: mean loss over this many seeded batches,
    /// drawn once per run from each split.
    pub eval_batches: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: tiny causal transformer (d_model 64, 2 heads,
    /// 2 layers, seq 64, batch 1), SGD lr 0.01 momentum 0.9, 5,000 steps.
    pub fn desk_default() -> Self {
        TrainConfig {
            model: ModelKind::Transformer,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 0,
            seq_len: 64,
            batch_size: 1,
            mode: LayerMode::Exact,
            rank: 64,
            lambda: 0.0,
            epsilon: crate::model::DEFAULT_EPSILON,
            lr: 0.01,
            momentum: 0.9,
            steps: 5_000,
            eval_interval: 100,
            seed: 42,
            precision: Precision::F64,
            layer_modes: Default::default(),
            eval_batches: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config { key: key.into(), reason };
        if self.d_model == 0 || self.n_layers == 0 || self.seq_len == 0 || self.batch_size == 0 {
            return Err(bad("model", "dimensions must be positive".into()));
        }
        if self.model == ModelKind::Transformer
            && (self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads))
        {
            return Err(bad(
                "model.n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.mode == LayerMode::Basis && self.rank == 0 {
            return Err(bad("train.rank", "rank must be >= 1 in basis mode".into()));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(bad("train.lambda", format!("must be in [0, 1), got {}", self.lambda)));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(bad("train.epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(bad("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("train.momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if self.eval_interval == 0 {
            return Err(bad("train.eval_interval", "must be >= 1".into()));
        }
        if !self.steps.is_multiple_of(self.eval_interval) {
            return Err(bad(
                "train.eval_interval",
                format!("{} does not divide steps {}", self.eval_interval, self.steps),
            ));
        }
        if self.eval_batches == 0 {
            return Err(bad("train.eval_batches", "must be >= 1".into()));
        }
        Ok(())
    }

    fn execution(&self) -> Execution {
        let mut exec = match self.mode {
            LayerMode::Exact => Execution::exact(),
            LayerMode::Basis => Execution::basis(self.rank),
        };
        exec.lambda = self.lambda;
        exec.epsilon = self.epsilon;
        exec.precision = self.precision;
        exec.overrides = self.layer_modes.clone();
        exec
    }

    pub fn mode_label(&self) -> &'static str {
        match self.mode {
            LayerMode::Exact => "exact",
            LayerMode::Basis => "basis",
        }
    }

    /// Rank as recorded in CSV rows: the configured rank in sketched mode,
    /// 0 for exact runs.
    pub fn rank_label(&self) -> usize {
        match self.mode {
            LayerMode::Exact => 0,
            LayerMode::Basis => self.rank,
        }
    }

    /// Key/value echo of the config for reports.
    pub fn summary_lines(&self) -> Vec<(String, String)> {
        let kind = match self.model {
            ModelKind::Transformer => "transformer",
            ModelKind::Mlp => "mlp",
        };
        let precision = match self.precision {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        };
        let mut lines = vec![
            ("model.kind".into(), kind.to_string()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.n_heads".into(), self.n_heads.to_string()),
            ("model.n_layers".into(), self.n_layers.to_string()),
            ("model.vocab_size".into(), self.vocab_size.to_string()),
            ("model.seq_len".into(), self.seq_len.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.mode".into(), self.mode_label().to_string()),
            ("train.rank".into(), self.rank.to_string()),
            ("train.lambda".into(), self.lambda.to_string()),
            ("train.epsilon".into(), self.epsilon.to_string()),
            ("train.lr".into(), self.lr.to_string()),
            ("train.momentum".into(), self.momentum.to_string()),
            ("train.steps".into(), self.steps.to_string()),
            ("train.eval_interval".into(), self.eval_interval.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.precision".into(), precision.to_string()),
            ("train.eval_batches".into(), self.eval_batches.to_string()),
        ];
        for (layer, mode) in &self.layer_modes {
            let m = match mode {
                LayerMode::Exact => "exact",
                LayerMode::Basis => "basis",
            };
            lines.push((format!("layer_mode.{layer}"), m.to_string()));
        }
        lines
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: TrainConfig,
    pub records: Vec<EvalRecord>,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub memory: MemoryReport,
    pub wall_secs: f64,
    pub corpus_digest: String,
}

pub const CSV_HEADER: &str = "step,train_loss,val_loss,rank,mode";

impl RunReport {
    /// Append this run's eval records as CSV rows (no header).
    pub fn append_csv_rows(&self, out: &mut String) {
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.step,
                r.train_loss,
                r.val_loss,
                self.config.rank_label(),
                self.config.mode_label()
            ));
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        self.append_csv_rows(&mut out);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("training run report\n===================\n\nconfig:\n");
        for (k, v) in self.config.summary_lines() {
            out.push_str(&format!("  {k} = {v}\n"));
        }
        out.push_str(&format!("\ncorpus digest: {}\n", self.corpus_digest));
        out.push_str(&format!(
            "final train loss: {:.6}\nfinal val loss:   {:.6}\nwall time: {:.1}s\n",
            self.final_train_loss, self.final_val_loss, self.wall_secs
        ));
        out.push_str("\n  step    train_loss      val_loss\n");
        for r in &self.records {
            out.push_str(&format!("{:>6}  {:>12.6}  {:>12.6}\n", r.step, r.train_loss, r.val_loss));
        }
        out.push('\n');
        out.push_str(&self.memory.to_text());
        out
    }

    /// Moving average of the val-loss series over a trailing window of
    /// `window` steps (each point averages the eval records in
    /// `(step - window, step]`).
    pub fn val_loss_moving_average(&self, window: usize) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .map(|r| {
                let lo = r.step.saturating_sub(window - 1);
                let (mut sum, mut count) = (0.0, 0);
                for other in &self.records {
                    if other.step >= lo && other.step <= r.step {
                        sum += other.val_loss;
                        count += 1;
                    }
                }
                (r.step, sum / count as f64)
            })
            .collect()
    }
}

fn resolve_vocab(config: &TrainConfig, corpus: &CharCorpus) -> Result<usize> {
    if config.vocab_size == 0 {
        Ok(corpus.vocab_size())
    } else if config.vocab_size < corpus.vocab_size() {
        Err(Error::Config {
            key: "model.vocab_size".into(),
            reason: format!(
                "{} is smaller than the corpus vocabulary {}",
                config.vocab_size,
                corpus.vocab_size()
            ),
        })
    } else {
        Ok(config.vocab_size)
    }
}

/// Mean loss over a fixed set of seeded batches from one split. Forward-only
/// and mode-independent.
fn eval_loss(
    model: &LmModel,
    corpus: &CharCorpus,
    split: Split,
    config: &TrainConfig,
    stream: u64,
) -> Result<f64> {
    let spec = BatchSpec {
        batch_size: config.batch_size,
        seq_len: config.seq_len,
        seed: derive(config.seed, stream),
    };
    let mut total = 0.0;
    for i in 0..config.eval_batches {
        let (inputs, targets) = sample_lm_batch(corpus, split, &spec, i as u64)?;
        total += model.loss(&inputs, &targets)?;
    }
    Ok(total / config.eval_batches as f64)
}

/// Train one model per the config and return its report. Evaluates at step 0
/// and every `eval_interval` steps on fixed seeded batch sets from both
/// splits; aborts with step and layer context if the loss goes non-finite.
pub fn run_training(config: &TrainConfig, corpus: &CharCorpus) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let vocab_size = resolve_vocab(config, corpus)?;
    let model_cfg = ModelConfig {
        kind: config.model,
        vocab_size,
        seq_len: config.seq_len,
        d_model: config.d_model,
        n_heads: config.n_heads,
        n_layers: config.n_layers,
    };
    let mut model = LmModel::new(&model_cfg, derive(config.seed, INIT_STREAM))?;
    let exec = config.execution();
    let mut optimizer = MomentumSgd::new(config.lr, config.momentum)?;
    let data_spec = BatchSpec {
        batch_size: config.batch_size,
        seq_len: config.seq_len,
        seed: derive(config.seed, DATA_STREAM),
    };

    let mut records = Vec::with_capacity(config.steps / config.eval_interval + 1);
    let evaluate = |model: &LmModel, step: usize| -> Result<EvalRecord> {
        Ok(EvalRecord {
            step,
            train_loss: eval_loss(model, corpus, Split::Train, config, TRAIN_EVAL_STREAM)?,
            val_loss: eval_loss(model, corpus, Split::Val, config, VAL_STREAM)?,
        })
    };
    records.push(evaluate(&model, 0)?);

    for step in 0..config.steps {
        let (inputs, targets) = sample_lm_batch(corpus, Split::Train, &data_spec, step as u64)?;
        let step_seed = derive2(config.seed, PLAN_STREAM, step as u64);
        let (loss, grads) = model.loss_and_grads(&inputs, &targets, &exec, step_seed)?;
        if !loss.is_finite() {
            // Re-run with stage checks to name the first offending layer.
            let mut probe = exec.clone();
            probe.check_finite = true;
            let detail = match model.forward(&inputs, &probe, step_seed) {
                Err(Error::NonFiniteLoss { detail, .. }) => detail,
                _ => "loss head".to_string(),
            };
            return Err(Error::NonFiniteLoss { step, detail });
        }
        optimizer.step_model(&mut model, &grads).map_err(|e| match e {
            Error::NonFiniteGradient { tensor } => Error::NonFiniteLoss {
                step,
                detail: format!("gradient of {tensor}"),
            },
            other => other,
        })?;
        if (step + 1) % config.eval_interval == 0 {
            records.push(evaluate(&model, step + 1)?);
        }
    }

    let (audit_inputs, _) = sample_lm_batch(corpus, Split::Train, &data_spec, 0)?;
    let memory = memory_audit(&model, &audit_inputs, &exec)?;
    let last = records.last().expect("at least the step-0 record");
    Ok(RunReport {
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
        records,
        config: config.clone(),
        memory,
        wall_secs: started.elapsed().as_secs_f64(),
        corpus_digest: corpus.digest().to_string(),
    })
}

/// One exact baseline plus one sketched run per rank, all sharing the base
/// config's seed (and therefore its data stream).
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Exact run first, then one run per requested rank, in order.
    pub runs: Vec<RunReport>,
}

pub fn run_rank_sweep(
    base: &TrainConfig,
    ranks: &[usize],
    corpus: &CharCorpus,
    jobs: usize,
) -> Result<SweepResult> {
    if ranks.is_empty() {
        return Err(Error::Config { key: "sweep.ranks".into(), reason: "must not be empty".into() });
    }
    let mut configs = Vec::with_capacity(ranks.len() + 1);
    let mut exact = base.clone();
    exact.mode = LayerMode::Exact;
    configs.push(exact);
    for &rank in ranks {
        let mut c = base.clone();
        c.mode = LayerMode::Basis;
        c.rank = rank;
        configs.push(c);
    }

    let jobs = jobs.max(1).min(configs.len());
    let slots: Vec<Mutex<Option<Result<RunReport>>>> =
        configs.iter().map(|_| Mutex::new(None)).collect();
    if jobs == 1 {
        for (config, slot) in configs.iter().zip(&slots) {
            *slot.lock().expect("poisoned") = Some(run_training(config, corpus));
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= configs.len() {
                        break;
                    }
                    let result = run_training(&configs[i], corpus);
                    *slots[i].lock().expect("poisoned") = Some(result);
                });
            }
        });
    }
    let mut runs = Vec::with_capacity(configs.len());
    for slot in slots {
        runs.push(slot.into_inner().expect("poisoned").expect("every slot filled")?);
    }
    Ok(SweepResult { runs })
}

impl SweepResult {
    /// Plain-text comparison table: one row per run (exact + each rank).
    pub fn comparison_table(&self) -> String {
        let mut out = String::new();
        out.push_str("mode   rank  compression  final_train_loss  final_val_loss\n");
        for run in &self.runs {
            let rows = run.memory.batch_rows;
            let (rank, compression) = match run.config.mode {
                LayerMode::Exact => ("-".to_string(), "1x".to_string()),
                LayerMode::Basis => {
                    let r = run.config.rank.min(rows);
                    (run.config.rank.to_string(), format_ratio(rows as f64 / r as f64))
                }
            };
            out.push_str(&format!(
                "{:<6} {:<5} {:<12} {:<17.6} {:.6}\n",
                run.config.mode_label(),
                rank,
                compression,
                run.final_train_loss,
                run.final_val_loss
            ));
        }
        out
    }

    /// All trajectories in one CSV (the loss-curve data of the sweep).
    pub fn combined_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for run in &self.runs {
            run.append_csv_rows(&mut out);
        }
        out
    }
}

fn format_ratio(ratio: f64) -> String {
    if (ratio - ratio.round()).abs() < 1e-9 {
        format!("{}x", ratio.round() as u64)
    } else {
        format!("{ratio:.1}x")
    }
}
