//! Language models assembled from the manually differentiated layers.
//!
//! Two architectures share one interface: a pre-norm causal transformer
//! (embedding + position table, attention/MLP blocks, final layernorm, LM
//! head) and a token-wise residual MLP (same pipeline minus attention,
//! position table, and layernorm). Sequences arrive as (batch x seq) token
//! ids and flow through the network flattened to (batch * seq) x d_model
//! rows, which is the row cardinality the sketched dense layers compress.
//!
//! Every dense sublayer has a stable name (`block0.attn.q`, `block1.fc2`,
//! `lm_head`, ...) used for three things: per-layer mode overrides, gradient
//! bookkeeping, and deriving the per-step sketch-plan seed for that layer.

use std::collections::BTreeMap;

use crate::attention::{
    causal_attention_backward, causal_attention_forward, AttentionCache, AttentionGrads,
    AttentionParams, AttentionRuns,
};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::layers::{
    dense_backward, dense_forward, embedding_backward, embedding_forward, gelu_backward,
    gelu_forward, layernorm_backward, layernorm_forward, relu_backward, relu_forward,
    softmax_cross_entropy, DenseCache, DenseGrads, DenseParams, DenseRun, GeluCache,
    LayerNormCache, ReluCache,
};
use crate::rng::{derive, Rng};
use crate::sketch::ScalingMode;
use crate::tensor::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-8;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Exact,
    Basis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument { op: "model_config", reason };
        if self.vocab_size == 0 || self.seq_len == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(bad("vocab_size, seq_len, d_model, n_layers must be positive".into()));
        }
        if self.kind == ModelKind::Transformer
            && (self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads))
        {
            return Err(bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        4 * self.d_model
    }
}

/// Runtime execution settings for a forward/backward pass.
#[derive(Debug, Clone)]
pub struct Execution {
    pub mode: LayerMode,
    pub rank: usize,
    pub lambda: f64,
    pub epsilon: f64,
    /// Per-dense-layer mode overrides, keyed by layer name.
    pub overrides: BTreeMap<String, LayerMode>,
    pub precision: Precision,
    /// When set, forward passes verify intermediate finiteness and report
    /// the first offending stage; used on failure paths only.
    pub check_finite: bool,
}

impl Execution {
    pub fn exact() -> Self {
        Execution {
            mode: LayerMode::Exact,
            rank: 1,
            lambda: 0.0,
            epsilon: DEFAULT_EPSILON,
            overrides: BTreeMap::new(),
            precision: Precision::F64,
            check_finite: false,
        }
    }

    pub fn basis(rank: usize) -> Self {
        Execution { mode: LayerMode::Basis, rank, ..Execution::exact() }
    }

    /// Resolve the run mode for a named dense layer. In sketched mode each
    /// layer gets its own plan seed derived from `(step_seed, ordinal)`.
    fn run_for(&self, name: &str, ordinal: u64, step_seed: u64) -> DenseRun {
        let mode = self.overrides.get(name).copied().unwrap_or(self.mode);
        match mode {
            LayerMode::Exact => DenseRun::Exact,
            LayerMode::Basis => DenseRun::Basis {
                rank: self.rank,
                lambda: self.lambda,
                epsilon: self.epsilon,
                seed: derive(step_seed, ordinal),
                scaling: ScalingMode::Invariant,
            },
        }
    }

    #[inline]
    fn quantize(&self, m: &mut Matrix) {
        if self.precision == Precision::F32 {
            m.round_to_f32();
        }
    }

    fn ensure_finite(&self, stage: &str, m: &Matrix) -> Result<()> {
        if self.check_finite && !m.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0, detail: format!("layer {stage}") });
        }
        Ok(())
    }
}

/// Per-feature scale and shift of a layernorm.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNormParams {
    fn new(n: usize) -> Self {
        LayerNormParams { scale: vec![1.0; n], shift: vec![0.0; n] }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    attn: AttentionParams,
    ln2: LayerNormParams,
    fc1: DenseParams,
    fc2: DenseParams,
}

#[derive(Debug, Clone)]
struct MlpBlock {
    fc1: DenseParams,
    fc2: DenseParams,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
    lm_head: DenseParams,
}

#[derive(Debug, Clone)]
pub struct MlpNet {
    cfg: ModelConfig,
    tok_emb: Matrix,
    blocks: Vec<MlpBlock>,
    lm_head: DenseParams,
}

#[derive(Debug, Clone)]
pub enum LmModel {
    Transformer(Transformer),
    Mlp(MlpNet),
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    fc1: DenseCache,
    gelu: GeluCache,
    fc2: DenseCache,
}

struct MlpBlockCache {
    fc1: DenseCache,
    relu: ReluCache,
    fc2: DenseCache,
}

pub struct TransformerCache {
    ids: Vec<usize>,
    batch: usize,
    seq: usize,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    head: DenseCache,
}

pub struct MlpCache {
    ids: Vec<usize>,
    blocks: Vec<MlpBlockCache>,
    head: DenseCache,
}

pub enum ModelCache {
    Transformer(TransformerCache),
    Mlp(MlpCache),
}

impl ModelCache {
    /// Dense activation caches by layer name, in forward order — the inputs
    /// the memory audit counts.
    pub fn dense_caches(&self) -> Vec<(String, &DenseCache)> {
        let mut out = Vec::new();
        match self {
            ModelCache::Transformer(c) => {
                for (i, b) in c.blocks.iter().enumerate() {
                    for (suffix, cache) in b.attn.dense_caches() {
                        out.push((format!("block{i}.{suffix}"), cache));
                    }
                    out.push((format!("block{i}.fc1"), &b.fc1));
                    out.push((format!("block{i}.fc2"), &b.fc2));
                }
                out.push(("lm_head".to_string(), &c.head));
            }
            ModelCache::Mlp(c) => {
                for (i, b) in c.blocks.iter().enumerate() {
                    out.push((format!("block{i}.fc1"), &b.fc1));
                    out.push((format!("block{i}.fc2"), &b.fc2));
                }
                out.push(("lm_head".to_string(), &c.head));
            }
        }
        out
    }
}

/// Named gradients, one entry per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    map: BTreeMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate gradient for {name}");
        self.map.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn insert_dense(&mut self, name: &str, grads: DenseGrads) {
        self.insert(format!("{name}.weight"), grads.dw.data().to_vec());
        if let Some(db) = grads.db {
            self.insert(format!("{name}.bias"), db);
        }
    }

    fn insert_attention(&mut self, prefix: &str, grads: AttentionGrads) {
        self.insert_dense(&format!("{prefix}.q"), grads.q);
        self.insert_dense(&format!("{prefix}.k"), grads.k);
        self.insert_dense(&format!("{prefix}.v"), grads.v);
        self.insert_dense(&format!("{prefix}.out"), grads.o);
    }
}

fn dense_init(n: usize, m: usize, rng: &mut Rng) -> DenseParams {
    DenseParams::new(Matrix::random_normal(n, m, INIT_STD, rng), Some(vec![0.0; m]))
        .expect("bias length matches")
}

impl LmModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(derive(seed, 0x1217));
        match cfg.kind {
            ModelKind::Transformer => {
                let d = cfg.d_model;
                let tok_emb = Matrix::random_normal(cfg.vocab_size, d, INIT_STD, &mut rng);
                let pos_emb = Matrix::random_normal(cfg.seq_len, d, INIT_STD, &mut rng);
                let blocks = (0..cfg.n_layers)
                    .map(|_| Block {
                        ln1: LayerNormParams::new(d),
                        attn: AttentionParams {
                            wq: dense_init(d, d, &mut rng),
                            wk: dense_init(d, d, &mut rng),
                            wv: dense_init(d, d, &mut rng),
                            wo: dense_init(d, d, &mut rng),
                        },
                        ln2: LayerNormParams::new(d),
                        fc1: dense_init(d, cfg.hidden(), &mut rng),
                        fc2: dense_init(cfg.hidden(), d, &mut rng),
                    })
                    .collect();
                Ok(LmModel::Transformer(Transformer {
                    cfg: cfg.clone(),
                    tok_emb,
                    pos_emb,
                    blocks,
                    ln_f: LayerNormParams::new(d),
                    lm_head: dense_init(d, cfg.vocab_size, &mut rng),
                }))
            }
            ModelKind::Mlp => {
                let d = cfg.d_model;
                let tok_emb = Matrix::random_normal(cfg.vocab_size, d, INIT_STD, &mut rng);
                let blocks = (0..cfg.n_layers)
                    .map(|_| MlpBlock {
                        fc1: dense_init(d, cfg.hidden(), &mut rng),
                        fc2: dense_init(cfg.hidden(), d, &mut rng),
                    })
                    .collect();
                Ok(LmModel::Mlp(MlpNet {
                    cfg: cfg.clone(),
                    tok_emb,
                    blocks,
                    lm_head: dense_init(d, cfg.vocab_size, &mut rng),
                }))
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LmModel::Transformer(m) => &m.cfg,
            LmModel::Mlp(m) => &m.cfg,
        }
    }

    fn validate_batch(&self, batch: &TokenBatch) -> Result<()> {
        let cfg = self.config();
        if batch.seq == 0 || batch.batch == 0 || batch.seq > cfg.seq_len {
            return Err(Error::InvalidArgument {
                op: "model_forward",
                reason: format!(
                    "batch shape {}x{} incompatible with seq_len {}",
                    batch.batch, batch.seq, cfg.seq_len
                ),
            });
        }
        Ok(())
    }

    /// Forward pass to logits. `step_seed` feeds the per-layer sketch-plan
    /// seeds in sketched mode and is ignored in exact mode.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        exec: &Execution,
        step_seed: u64,
    ) -> Result<(Matrix, ModelCache)> {
        self.validate_batch(batch)?;
        match self {
            LmModel::Transformer(m) => m.forward(batch, exec, step_seed),
            LmModel::Mlp(m) => m.forward(batch, exec, step_seed),
        }
    }

    pub fn backward(&self, dlogits: &Matrix, cache: &ModelCache) -> Result<GradMap> {
        match (self, cache) {
            (LmModel::Transformer(m), ModelCache::Transformer(c)) => m.backward(dlogits, c),
            (LmModel::Mlp(m), ModelCache::Mlp(c)) => m.backward(dlogits, c),
            _ => Err(Error::InvalidArgument {
                op: "model_backward",
                reason: "cache kind does not match model kind".into(),
            }),
        }
    }

    /// Forward-only mean cross-entropy; the forward pass is identical across
    /// modes, so evaluation always runs exact.
    pub fn loss(&self, inputs: &TokenBatch, targets: &TokenBatch) -> Result<f64> {
        let (logits, _) = self.forward(inputs, &Execution::exact(), 0)?;
        let (loss, _) = softmax_cross_entropy(&logits, &targets.ids)?;
        Ok(loss)
    }

    pub fn loss_and_grads(
        &self,
        inputs: &TokenBatch,
        targets: &TokenBatch,
        exec: &Execution,
        step_seed: u64,
    ) -> Result<(f64, GradMap)> {
        let (logits, cache) = self.forward(inputs, exec, step_seed)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &targets.ids)?;
        let grads = self.backward(&dlogits, &cache)?;
        Ok((loss, grads))
    }

    /// Parameter tensors by name, immutable.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        match self {
            LmModel::Transformer(m) => m.named_params(),
            LmModel::Mlp(m) => m.named_params(),
        }
    }

    /// Parameter tensors by name, mutable (for the optimizer and the
    /// finite-difference harness).
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        match self {
            LmModel::Transformer(m) => m.named_params_mut(),
            LmModel::Mlp(m) => m.named_params_mut(),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.named_params_mut().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Dense sublayers in forward order: (name, in_features, out_features).
    pub fn dense_layer_dims(&self) -> Vec<(String, usize, usize)> {
        let cfg = self.config();
        let d = cfg.d_model;
        let h = cfg.hidden();
        let mut out = Vec::new();
        match self {
            LmModel::Transformer(_) => {
                for i in 0..cfg.n_layers {
                    for proj in ["q", "k", "v", "out"] {
                        out.push((format!("block{i}.attn.{proj}"), d, d));
                    }
                    out.push((format!("block{i}.fc1"), d, h));
                    out.push((format!("block{i}.fc2"), h, d));
                }
            }
            LmModel::Mlp(_) => {
                for i in 0..cfg.n_layers {
                    out.push((format!("block{i}.fc1"), d, h));
                    out.push((format!("block{i}.fc2"), h, d));
                }
            }
        }
        out.push(("lm_head".to_string(), d, cfg.vocab_size));
        out
    }
}

impl Transformer {
    fn forward(
        &self,
        batch: &TokenBatch,
        exec: &Execution,
        step_seed: u64,
    ) -> Result<(Matrix, ModelCache)> {
        let seq = batch.seq;
        let mut x = embedding_forward(&batch.ids, &self.tok_emb)?;
        for i in 0..x.rows() {
            let pos = self.pos_emb.row(i % seq).to_vec();
            for (v, p) in x.row_mut(i).iter_mut().zip(&pos) {
                *v += p;
            }
        }
        exec.quantize(&mut x);
        exec.ensure_finite("embedding", &x)?;

        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let base = (i * 6) as u64;
            let (a, ln1) = layernorm_forward(&x, &block.ln1.scale, &block.ln1.shift)?;
            let runs = AttentionRuns {
                q: exec.run_for(&format!("block{i}.attn.q"), base, step_seed),
                k: exec.run_for(&format!("block{i}.attn.k"), base + 1, step_seed),
                v: exec.run_for(&format!("block{i}.attn.v"), base + 2, step_seed),
                o: exec.run_for(&format!("block{i}.attn.out"), base + 3, step_seed),
            };
            let (att, attn) =
                causal_attention_forward(&a, &block.attn, self.cfg.n_heads, batch.batch, &runs)?;
            x.add_in_place(&att)?;
            exec.quantize(&mut x);
            exec.ensure_finite(&format!("block{i}.attn"), &x)?;

            let (b2, ln2) = layernorm_forward(&x, &block.ln2.scale, &block.ln2.shift)?;
            let (h, fc1) =
                dense_forward(&b2, &block.fc1, &exec.run_for(&format!("block{i}.fc1"), base + 4, step_seed))?;
            let (g, gelu) = gelu_forward(&h);
            let (m, fc2) =
                dense_forward(&g, &block.fc2, &exec.run_for(&format!("block{i}.fc2"), base + 5, step_seed))?;
            x.add_in_place(&m)?;
            exec.quantize(&mut x);
            exec.ensure_finite(&format!("block{i}.mlp"), &x)?;

            caches.push(BlockCache { ln1, attn, ln2, fc1, gelu, fc2 });
        }

        let (xf, ln_f) = layernorm_forward(&x, &self.ln_f.scale, &self.ln_f.shift)?;
        let head_ordinal = (self.blocks.len() * 6) as u64;
        let (mut logits, head) =
            dense_forward(&xf, &self.lm_head, &exec.run_for("lm_head", head_ordinal, step_seed))?;
        exec.quantize(&mut logits);
        exec.ensure_finite("lm_head", &logits)?;

        Ok((
            logits,
            ModelCache::Transformer(TransformerCache {
                ids: batch.ids.clone(),
                batch: batch.batch,
                seq,
                blocks: caches,
                ln_f,
                head,
            }),
        ))
    }

    fn backward(&self, dlogits: &Matrix, cache: &TransformerCache) -> Result<GradMap> {
        let mut grads = GradMap::default();

        let (dxf, head_grads) = dense_backward(dlogits, &cache.head, &self.lm_head)?;
        grads.insert_dense("lm_head", head_grads);

        let (mut dx, dscale, dshift) = layernorm_backward(&dxf, &cache.ln_f, &self.ln_f.scale)?;
        grads.insert("ln_f.scale", dscale);
        grads.insert("ln_f.shift", dshift);

        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // MLP branch: x2 = x1 + fc2(gelu(fc1(ln2(x1)))).
            let (dg, fc2_grads) = dense_backward(&dx, &bc.fc2, &block.fc2)?;
            grads.insert_dense(&format!("block{i}.fc2"), fc2_grads);
            let dh = gelu_backward(&dg, &bc.gelu)?;
            let (db2, fc1_grads) = dense_backward(&dh, &bc.fc1, &block.fc1)?;
            grads.insert_dense(&format!("block{i}.fc1"), fc1_grads);
            let (dx_ln2, dscale2, dshift2) = layernorm_backward(&db2, &bc.ln2, &block.ln2.scale)?;
            grads.insert(format!("block{i}.ln2.scale"), dscale2);
            grads.insert(format!("block{i}.ln2.shift"), dshift2);
            dx.add_in_place(&dx_ln2)?;

            // Attention branch: x1 = x0 + attn(ln1(x0)).
            let (da, attn_grads) = causal_attention_backward(&dx, &bc.attn, &block.attn)?;
            grads.insert_attention(&format!("block{i}.attn"), attn_grads);
            let (dx_ln1, dscale1, dshift1) = layernorm_backward(&da, &bc.ln1, &block.ln1.scale)?;
            grads.insert(format!("block{i}.ln1.scale"), dscale1);
            grads.insert(format!("block{i}.ln1.shift"), dshift1);
            dx.add_in_place(&dx_ln1)?;
        }

        grads.insert(
            "tok_emb",
            embedding_backward(&dx, &cache.ids, self.cfg.vocab_size)?.data().to_vec(),
        );
        let mut dpos = Matrix::zeros(self.cfg.seq_len, self.cfg.d_model);
        for i in 0..dx.rows() {
            let pos = i % cache.seq;
            for (g, v) in dpos.row_mut(pos).iter_mut().zip(dx.row(i)) {
                *g += v;
            }
        }
        grads.insert("pos_emb", dpos.data().to_vec());
        let _ = cache.batch;
        Ok(grads)
    }

    fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.data()));
        out.push(("pos_emb".into(), self.pos_emb.data()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.scale"), &b.ln1.scale));
            out.push((format!("block{i}.ln1.shift"), &b.ln1.shift));
            for (proj, dense) in
                [("q", &b.attn.wq), ("k", &b.attn.wk), ("v", &b.attn.wv), ("out", &b.attn.wo)]
            {
                out.push((format!("block{i}.attn.{proj}.weight"), dense.weight.data()));
                if let Some(bias) = &dense.bias {
                    out.push((format!("block{i}.attn.{proj}.bias"), bias));
                }
            }
            out.push((format!("block{i}.ln2.scale"), &b.ln2.scale));
            out.push((format!("block{i}.ln2.shift"), &b.ln2.shift));
            for (name, dense) in [("fc1", &b.fc1), ("fc2", &b.fc2)] {
                out.push((format!("block{i}.{name}.weight"), dense.weight.data()));
                if let Some(bias) = &dense.bias {
                    out.push((format!("block{i}.{name}.bias"), bias));
                }
            }
        }
        out.push(("ln_f.scale".into(), &self.ln_f.scale));
        out.push(("ln_f.shift".into(), &self.ln_f.shift));
        out.push(("lm_head.weight".into(), self.lm_head.weight.data()));
        if let Some(bias) = &self.lm_head.bias {
            out.push(("lm_head.bias".into(), bias));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.data_mut()));
        out.push(("pos_emb".into(), self.pos_emb.data_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.scale"), b.ln1.scale.as_mut_slice()));
            out.push((format!("block{i}.ln1.shift"), b.ln1.shift.as_mut_slice()));
            for (proj, dense) in [
                ("q", &mut b.attn.wq),
                ("k", &mut b.attn.wk),
                ("v", &mut b.attn.wv),
                ("out", &mut b.attn.wo),
            ] {
                out.push((format!("block{i}.attn.{proj}.weight"), dense.weight.data_mut()));
                if let Some(bias) = &mut dense.bias {
                    out.push((format!("block{i}.attn.{proj}.bias"), bias.as_mut_slice()));
                }
            }
            out.push((format!("block{i}.ln2.scale"), b.ln2.scale.as_mut_slice()));
            out.push((format!("block{i}.ln2.shift"), b.ln2.shift.as_mut_slice()));
            for (name, dense) in [("fc1", &mut b.fc1), ("fc2", &mut b.fc2)] {
                out.push((format!("block{i}.{name}.weight"), dense.weight.data_mut()));
                if let Some(bias) = &mut dense.bias {
                    out.push((format!("block{i}.{name}.bias"), bias.as_mut_slice()));
                }
            }
        }
        out.push(("ln_f.scale".into(), self.ln_f.scale.as_mut_slice()));
        out.push(("ln_f.shift".into(), self.ln_f.shift.as_mut_slice()));
        out.push(("lm_head.weight".into(), self.lm_head.weight.data_mut()));
        if let Some(bias) = &mut self.lm_head.bias {
            out.push(("lm_head.bias".into(), bias.as_mut_slice()));
        }
        out
    }
}

impl MlpNet {
    fn forward(
        &self,
        batch: &TokenBatch,
        exec: &Execution,
        step_seed: u64,
    ) -> Result<(Matrix, ModelCache)> {
        let mut x = embedding_forward(&batch.ids, &self.tok_emb)?;
        exec.quantize(&mut x);
        exec.ensure_finite("embedding", &x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let base = (i * 2) as u64;
            let (h, fc1) =
                dense_forward(&x, &block.fc1, &exec.run_for(&format!("block{i}.fc1"), base, step_seed))?;
            let (r, relu) = relu_forward(&h);
            let (m, fc2) =
                dense_forward(&r, &block.fc2, &exec.run_for(&format!("block{i}.fc2"), base + 1, step_seed))?;
            x.add_in_place(&m)?;
            exec.quantize(&mut x);
            exec.ensure_finite(&format!("block{i}.mlp"), &x)?;
            caches.push(MlpBlockCache { fc1, relu, fc2 });
        }
        let head_ordinal = (self.blocks.len() * 2) as u64;
        let (mut logits, head) =
            dense_forward(&x, &self.lm_head, &exec.run_for("lm_head", head_ordinal, step_seed))?;
        exec.quantize(&mut logits);
        exec.ensure_finite("lm_head", &logits)?;
        Ok((logits, ModelCache::Mlp(MlpCache { ids: batch.ids.clone(), blocks: caches, head })))
    }

    fn backward(&self, dlogits: &Matrix, cache: &MlpCache) -> Result<GradMap> {
        let mut grads = GradMap::default();
        let (mut dx, head_grads) = dense_backward(dlogits, &cache.head, &self.lm_head)?;
        grads.insert_dense("lm_head", head_grads);
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let (dr, fc2_grads) = dense_backward(&dx, &bc.fc2, &block.fc2)?;
            grads.insert_dense(&format!("block{i}.fc2"), fc2_grads);
            let dh = relu_backward(&dr, &bc.relu)?;
            let (dx_block, fc1_grads) = dense_backward(&dh, &bc.fc1, &block.fc1)?;
            grads.insert_dense(&format!("block{i}.fc1"), fc1_grads);
            dx.add_in_place(&dx_block)?;
        }
        grads.insert(
            "tok_emb",
            embedding_backward(&dx, &cache.ids, self.cfg.vocab_size)?.data().to_vec(),
        );
        Ok(grads)
    }

    fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.data()));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, dense) in [("fc1", &b.fc1), ("fc2", &b.fc2)] {
                out.push((format!("block{i}.{name}.weight"), dense.weight.data()));
                if let Some(bias) = &dense.bias {
                    out.push((format!("block{i}.{name}.bias"), bias));
                }
            }
        }
        out.push(("lm_head.weight".into(), self.lm_head.weight.data()));
        if let Some(bias) = &self.lm_head.bias {
            out.push(("lm_head.bias".into(), bias));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.data_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, dense) in [("fc1", &mut b.fc1), ("fc2", &mut b.fc2)] {
                out.push((format!("block{i}.{name}.weight"), dense.weight.data_mut()));
                if let Some(bias) = &mut dense.bias {
                    out.push((format!("block{i}.{name}.bias"), bias.as_mut_slice()));
                }
            }
        }
        out.push(("lm_head.weight".into(), self.lm_head.weight.data_mut()));
        if let Some(bias) = &mut self.lm_head.bias {
            out.push(("lm_head.bias".into(), bias.as_mut_slice()));
        }
        out
    }
}
