//! Decoder-only transformer language models with low-rank adapters.
//!
//! Weights are stored in `x · W` orientation (`[d_in × d_out]`). An adapter on
//! a projection adds `s · (x · B) · A` where `B` is `[d×r]`, `A` is `[r×d]` and
//! `s = alpha / r`, i.e. the dense delta is `s · B · A`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{hash_tensors, read_container, take_record, write_container};
use crate::graph::{AttnSegment, Graph, Var};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::Rng;
use crate::tasks::{vocab, Dataset, Example};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_mult")]
    pub mlp_mult: usize,
}

fn default_mlp_mult() -> usize {
    4
}

impl LmConfig {
    /// Desk-scale small model.
    pub fn tiny() -> Self {
        LmConfig {
            vocab_size: 32,
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            max_seq_len: 24,
            mlp_mult: 4,
        }
    }

    /// Desk-scale large model.
    pub fn large() -> Self {
        LmConfig {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            max_seq_len: 24,
            mlp_mult: 4,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let check = |ok: bool, name: &str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{field}.{name}"), why))
            }
        };
        check(self.vocab_size >= vocab::MIN_VOCAB, "vocab_size", "too small for the task tokens")?;
        check(self.d_model > 0, "d_model", "must be positive")?;
        check(self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads), "n_heads", "must divide d_model")?;
        check(self.n_blocks > 0, "n_blocks", "must be positive")?;
        check(self.max_seq_len > 0, "max_seq_len", "must be positive")?;
        check(self.mlp_mult > 0, "mlp_mult", "must be positive")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightName {
    Q,
    K,
    V,
    O,
}

impl WeightName {
    pub const ALL: [WeightName; 4] = [WeightName::Q, WeightName::K, WeightName::V, WeightName::O];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightName::Q => "q",
            WeightName::K => "k",
            WeightName::V => "v",
            WeightName::O => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Scaling numerator; defaults to `rank` (scale 1).
    #[serde(default)]
    pub alpha: Option<f32>,
    /// Weights adapted in every block.
    pub targets: Vec<WeightName>,
    /// Seed for the `A` factors. Shared by every run from a given root.
    #[serde(default)]
    pub init_seed: u64,
    /// Standard deviation of `A`; defaults to `1/sqrt(d_model)`.
    #[serde(default)]
    pub init_std: Option<f32>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 2,
            alpha: None,
            targets: vec![WeightName::Q, WeightName::V],
            init_seed: 0,
            init_std: None,
        }
    }
}

impl AdapterConfig {
    pub fn alpha(&self) -> f32 {
        self.alpha.unwrap_or(self.rank as f32)
    }

    /// Targets in canonical `q, k, v, o` order without duplicates.
    pub fn canonical_targets(&self) -> Vec<WeightName> {
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        t
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config(format!("{field}.rank"), "must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config(format!("{field}.targets"), "at least one weight"));
        }
        if self.canonical_targets().len() != self.targets.len() {
            return Err(Error::config(format!("{field}.targets"), "duplicate weight names"));
        }
        if !(self.alpha() > 0.0) {
            return Err(Error::config(format!("{field}.alpha"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub block: usize,
    pub weight: WeightName,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `[r × d_model]`
    pub a: Tensor,
    /// `[d_model × r]`
    pub b: Tensor,
}

/// Low-rank factor pairs, ordered by block then canonical weight name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f32,
    pub d_model: usize,
    pub targets: Vec<AdapterTarget>,
    pub factors: Vec<LoraFactors>,
}

impl AdapterSet {
    /// Fresh adapters: `B = 0`, `A ~ N(0, std²)` from `config.init_seed`.
    pub fn new(config: &AdapterConfig, lm: &LmConfig) -> Result<Self> {
        config.validate("adapter")?;
        let d = lm.d_model;
        let std = config.init_std.unwrap_or(1.0 / (d as f32).sqrt());
        let mut rng = Rng::new(config.init_seed).derive_named("lora-a");
        let mut targets = Vec::new();
        let mut factors = Vec::new();
        for block in 0..lm.n_blocks {
            for &weight in &config.canonical_targets() {
                targets.push(AdapterTarget { block, weight });
                factors.push(LoraFactors {
                    a: rng.gaussian(&[config.rank, d], std),
                    b: Tensor::zeros(&[d, config.rank]),
                });
            }
        }
        Ok(AdapterSet {
            rank: config.rank,
            alpha: config.alpha(),
            d_model: d,
            targets,
            factors,
        })
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Weight names adapted in each block, canonical order.
    pub fn weights_per_block(&self) -> Vec<WeightName> {
        let mut w: Vec<WeightName> = self
            .targets
            .iter()
            .filter(|t| t.block == 0)
            .map(|t| t.weight)
            .collect();
        w.sort();
        w
    }

    pub fn n_blocks(&self) -> usize {
        self.targets.iter().map(|t| t.block + 1).max().unwrap_or(0)
    }

    pub fn index_of(&self, block: usize, weight: WeightName) -> Option<usize> {
        self.targets
            .iter()
            .position(|t| t.block == block && t.weight == weight)
    }

    /// Every factor tensor, `A` before `B`, in target order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.factors.iter().flat_map(|f| [&f.a, &f.b])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.factors
            .iter_mut()
            .flat_map(|f| [&mut f.a, &mut f.b])
            .collect()
    }

    pub fn header(&self) -> AdapterHeader {
        AdapterHeader {
            rank: self.rank,
            alpha: self.alpha,
            d_model: self.d_model,
            targets: self.targets.clone(),
        }
    }

    pub fn digest(&self) -> String {
        hash_tensors(self.tensors())
    }
}

/// Dense per-target deltas `s · B · A`, each `[d_model × d_model]`.
pub fn adapter_delta(adapters: &AdapterSet) -> Vec<Tensor> {
    let s = adapters.scaling();
    adapters
        .factors
        .iter()
        .map(|f| {
            let mut d = f.b.matmul(&f.a).expect("factor shapes agree");
            d.data_mut().iter_mut().for_each(|x| *x *= s);
            d
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl AttentionBlock {
    pub fn weight(&self, w: WeightName) -> &Tensor {
        match w {
            WeightName::Q => &self.wq,
            WeightName::K => &self.wk,
            WeightName::V => &self.wv,
            WeightName::O => &self.wo,
        }
    }

    fn weight_mut(&mut self, w: WeightName) -> &mut Tensor {
        match w {
            WeightName::Q => &mut self.wq,
            WeightName::K => &mut self.wk,
            WeightName::V => &mut self.wv,
            WeightName::O => &mut self.wo,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLm {
    pub config: LmConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub blocks: Vec<AttentionBlock>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub head: Tensor,
}

const INIT_STD: f32 = 0.02;

pub fn init_lm(config: &LmConfig, seed: u64) -> Result<TransformerLm> {
    config.validate("lm")?;
    let d = config.d_model;
    let hidden = d * config.mlp_mult;
    let mut rng = Rng::new(seed).derive_named("lm-init");
    let blocks = (0..config.n_blocks)
        .map(|_| AttentionBlock {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            wq: rng.gaussian(&[d, d], INIT_STD),
            wk: rng.gaussian(&[d, d], INIT_STD),
            wv: rng.gaussian(&[d, d], INIT_STD),
            wo: rng.gaussian(&[d, d], INIT_STD),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w_up: rng.gaussian(&[d, hidden], INIT_STD),
            w_down: rng.gaussian(&[hidden, d], INIT_STD),
        })
        .collect();
    Ok(TransformerLm {
        config: config.clone(),
        token_embedding: rng.gaussian(&[config.vocab_size, d], INIT_STD),
        positional_embedding: rng.gaussian(&[config.max_seq_len, d], INIT_STD),
        blocks,
        final_gamma: Tensor::full(&[d], 1.0),
        final_beta: Tensor::zeros(&[d]),
        head: rng.gaussian(&[d, config.vocab_size], INIT_STD),
    })
}

impl TransformerLm {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_gamma".into(), &self.final_gamma));
        out.push(("final_beta".into(), &self.final_beta));
        out.push(("head".into(), &self.head));
        out
    }

    /// Every weight tensor, in the same order as [`TransformerLm::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for b in &mut self.blocks {
            out.extend(b.named_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.head);
        out
    }

    /// SHA-256 over all weights; identifies a root model.
    pub fn digest(&self) -> String {
        hash_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    /// A copy with every adapter delta folded into the base weights.
    pub fn merged(&self, adapters: &AdapterSet) -> Result<TransformerLm> {
        check_adapter_fit(self, adapters)?;
        self.with_deltas(&adapters.targets, &adapter_delta(adapters))
    }

    /// A copy with each dense `[d_model × d_model]` delta added to its target weight.
    pub fn with_deltas(&self, targets: &[AdapterTarget], deltas: &[Tensor]) -> Result<TransformerLm> {
        if targets.len() != deltas.len() {
            return Err(Error::Contract(format!("{} targets but {} deltas", targets.len(), deltas.len())));
        }
        let mut out = self.clone();
        for (target, delta) in targets.iter().zip(deltas) {
            if target.block >= out.blocks.len() {
                return Err(Error::Index {
                    index: target.block,
                    bound: out.blocks.len(),
                    context: "delta target block",
                });
            }
            let w = out.blocks[target.block].weight_mut(target.weight);
            if w.shape() != delta.shape() {
                return Err(Error::dim("with_deltas", w.shape(), delta.shape()));
            }
            for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
                *x += d;
            }
        }
        Ok(out)
    }
}

fn check_adapter_fit(model: &TransformerLm, adapters: &AdapterSet) -> Result<()> {
    if adapters.d_model != model.config.d_model || adapters.n_blocks() > model.config.n_blocks {
        return Err(Error::Format(format!(
            "adapter for d_model={} over {} blocks does not fit model d_model={} with {} blocks",
            adapters.d_model,
            adapters.n_blocks(),
            model.config.d_model,
            model.config.n_blocks
        )));
    }
    Ok(())
}

// ----------------------------------------------------------------------
// graph construction
// ----------------------------------------------------------------------

struct BlockVars {
    ln1: (Var, Var),
    proj: [Var; 4],
    ln2: (Var, Var),
    up: Var,
    down: Var,
}

pub(crate) struct LmVars {
    tok: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    fin: (Var, Var),
    head: Var,
}

pub(crate) fn bind_model<'a>(g: &mut Graph<'a>, m: &'a TransformerLm) -> LmVars {
    bind_model_with(g, m, false)
}

fn bind_model_with<'a>(g: &mut Graph<'a>, m: &'a TransformerLm, trainable: bool) -> LmVars {
    let leaf = |g: &mut Graph<'a>, t: &'a Tensor| if trainable { g.param_ref(t) } else { g.constant_ref(t) };
    let blocks = m
        .blocks
        .iter()
        .map(|b| BlockVars {
            ln1: (leaf(g, &b.ln1_gamma), leaf(g, &b.ln1_beta)),
            proj: [
                leaf(g, &b.wq),
                leaf(g, &b.wk),
                leaf(g, &b.wv),
                leaf(g, &b.wo),
            ],
            ln2: (leaf(g, &b.ln2_gamma), leaf(g, &b.ln2_beta)),
            up: leaf(g, &b.w_up),
            down: leaf(g, &b.w_down),
        })
        .collect();
    LmVars {
        tok: leaf(g, &m.token_embedding),
        pos: leaf(g, &m.positional_embedding),
        blocks,
        fin: (leaf(g, &m.final_gamma), leaf(g, &m.final_beta)),
        head: leaf(g, &m.head),
    }
}

impl LmVars {
    /// Leaves in [`TransformerLm::named_tensors`] order.
    fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.tok, self.pos];
        for b in &self.blocks {
            out.extend([b.ln1.0, b.ln1.1, b.proj[0], b.proj[1], b.proj[2], b.proj[3], b.ln2.0, b.ln2.1, b.up, b.down]);
        }
        out.extend([self.fin.0, self.fin.1, self.head]);
        out
    }
}

pub(crate) struct AdapterVars {
    scaling: f32,
    /// `slots[block][weight]` = `(A, B)`
    slots: Vec<[Option<(Var, Var)>; 4]>,
    /// `A, B` per factor in target order, matching [`AdapterSet::tensors`].
    pub(crate) params: Vec<Var>,
}

pub(crate) fn bind_adapters<'a>(g: &mut Graph<'a>, a: &'a AdapterSet, trainable: bool, n_blocks: usize) -> AdapterVars {
    let mut slots = vec![[None; 4]; n_blocks];
    let mut params = Vec::with_capacity(a.factors.len() * 2);
    for (t, f) in a.targets.iter().zip(&a.factors) {
        let (av, bv) = if trainable {
            (g.param_ref(&f.a), g.param_ref(&f.b))
        } else {
            (g.constant_ref(&f.a), g.constant_ref(&f.b))
        };
        slots[t.block][t.weight.slot()] = Some((av, bv));
        params.push(av);
        params.push(bv);
    }
    AdapterVars {
        scaling: a.scaling(),
        slots,
        params,
    }
}

fn project(g: &mut Graph<'_>, x: Var, w: Var, lora: Option<(Var, Var)>, scaling: f32) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let Some((a, b)) = lora else { return Ok(base) };
    let xb = g.matmul(x, b)?;
    let xba = g.matmul(xb, a)?;
    let delta = if scaling == 1.0 { xba } else { g.scale(xba, scaling) };
    g.add(base, delta)
}

/// Logits for a batch of sequences stacked row-wise: `[Σ len × vocab]`.
pub(crate) fn forward_rows(
    g: &mut Graph<'_>,
    cfg: &LmConfig,
    lm: &LmVars,
    adapters: Option<&AdapterVars>,
    seqs: &[&[u32]],
) -> Result<Var> {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() || s.len() > cfg.max_seq_len {
            return Err(Error::Index {
                index: s.len(),
                bound: cfg.max_seq_len,
                context: "sequence length",
            });
        }
        segments.push(AttnSegment::square(tokens.len(), s.len()));
        for (p, &t) in s.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Index {
                    index: t as usize,
                    bound: cfg.vocab_size,
                    context: "token id",
                });
            }
            tokens.push(t as usize);
            positions.push(p);
        }
    }
    let te = g.embedding(lm.tok, &tokens)?;
    let pe = g.embedding(lm.pos, &positions)?;
    let mut x = g.add(te, pe)?;
    let scaling = adapters.map_or(1.0, |a| a.scaling);
    for (bi, b) in lm.blocks.iter().enumerate() {
        let slot = |w: WeightName| adapters.and_then(|a| a.slots.get(bi).and_then(|s| s[w.slot()]));
        let h = g.layer_norm(x, b.ln1.0, b.ln1.1)?;
        let q = project(g, h, b.proj[0], slot(WeightName::Q), scaling)?;
        let k = project(g, h, b.proj[1], slot(WeightName::K), scaling)?;
        let v = project(g, h, b.proj[2], slot(WeightName::V), scaling)?;
        let att = g.attention(q, k, v, cfg.n_heads, &segments, true)?;
        let o = project(g, att, b.proj[3], slot(WeightName::O), scaling)?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, b.ln2.0, b.ln2.1)?;
        let up = g.matmul(h2, b.up)?;
        let act = g.gelu(up);
        let down = g.matmul(act, b.down)?;
        x = g.add(x, down)?;
    }
    let xf = g.layer_norm(x, lm.fin.0, lm.fin.1)?;
    g.matmul(xf, lm.head)
}

/// Logits `[len × vocab]` for one token sequence.
pub fn forward(model: &TransformerLm, adapters: Option<&AdapterSet>, tokens: &[u32]) -> Result<Tensor> {
    if let Some(a) = adapters {
        check_adapter_fit(model, a)?;
    }
    let mut g = Graph::new();
    let lm = bind_model(&mut g, model);
    let av = adapters.map(|a| bind_adapters(&mut g, a, false, model.config.n_blocks));
    let logits = forward_rows(&mut g, &model.config, &lm, av.as_ref(), &[tokens])?;
    Ok(g.value(logits).clone())
}

/// Input rows and next-token targets for supervised answer prediction.
fn training_rows(examples: &[&Example]) -> (Vec<Vec<u32>>, Vec<Option<usize>>) {
    let mut inputs = Vec::with_capacity(examples.len());
    let mut targets = Vec::new();
    for e in examples {
        let full = e.full_sequence();
        let n = full.len() - 1;
        for p in 0..n {
            targets.push((p + 1 >= e.prompt.len()).then_some(full[p + 1] as usize));
        }
        inputs.push(full[..n].to_vec());
    }
    (inputs, targets)
}

/// Mean answer-token cross-entropy and its gradient with respect to every
/// adapter factor (order of [`AdapterSet::tensors`]).
pub fn adapter_gradients(
    model: &TransformerLm,
    adapters: &AdapterSet,
    examples: &[&Example],
) -> Result<(f32, Vec<Tensor>)> {
    let (inputs, targets) = training_rows(examples);
    let seqs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let lm = bind_model(&mut g, model);
    let av = bind_adapters(&mut g, adapters, true, model.config.n_blocks);
    let logits = forward_rows(&mut g, &model.config, &lm, Some(&av), &seqs)?;
    let loss = g.cross_entropy(logits, &targets)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, av.params.iter().map(|&p| g.grad_tensor(p)).collect()))
}

/// Mean answer-token cross-entropy over a whole dataset.
pub fn dataset_loss(model: &TransformerLm, adapters: Option<&AdapterSet>, data: &[Example]) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in data.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (inputs, targets) = training_rows(&refs);
        let seqs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let lm = bind_model(&mut g, model);
        let av = adapters.map(|a| bind_adapters(&mut g, a, false, model.config.n_blocks));
        let logits = forward_rows(&mut g, &model.config, &lm, av.as_ref(), &seqs)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let n = targets.iter().filter(|t| t.is_some()).count();
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok((total / count.max(1) as f64) as f32)
}

/// Greedy decode of each example's answer span: tokens up to (excluding) the
/// first `END`, decoding at most `answer.len() + 1` tokens.
pub fn greedy_answers(
    model: &TransformerLm,
    adapters: Option<&AdapterSet>,
    examples: &[Example],
) -> Result<Vec<Vec<u32>>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(128) {
        let mut seqs: Vec<Vec<u32>> = chunk.iter().map(|e| e.prompt.clone()).collect();
        let caps: Vec<usize> = chunk
            .iter()
            .map(|e| (e.answer.len() + 1).min(cfg.max_seq_len.saturating_sub(e.prompt.len())))
            .collect();
        let mut done: Vec<bool> = caps.iter().map(|&c| c == 0).collect();
        let mut answers: Vec<Vec<u32>> = vec![Vec::new(); chunk.len()];
        while done.iter().any(|d| !d) {
            let active: Vec<usize> = (0..chunk.len()).filter(|&i| !done[i]).collect();
            let rows: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut g = Graph::new();
            let lm = bind_model(&mut g, model);
            let av = adapters.map(|a| bind_adapters(&mut g, a, false, cfg.n_blocks));
            let logits = forward_rows(&mut g, cfg, &lm, av.as_ref(), &rows)?;
            let lv = g.value(logits);
            let v = cfg.vocab_size;
            let mut row_end = 0;
            for &i in &active {
                row_end += seqs[i].len();
                let last = &lv.data()[(row_end - 1) * v..row_end * v];
                let tok = argmax(last) as u32;
                seqs[i].push(tok);
                if tok == vocab::END {
                    done[i] = true;
                } else {
                    answers[i].push(tok);
                    if answers[i].len() >= caps[i] {
                        done[i] = true;
                    }
                }
            }
        }
        out.extend(answers);
    }
    Ok(out)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// ----------------------------------------------------------------------
// fine-tuning
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero at the step budget.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTrainConfig {
    pub lr: f32,
    /// Step budget.
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables.
    #[serde(default)]
    pub grad_clip: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Stop once the monitored loss has not improved for this many steps.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Steps between evaluations of the monitored loss.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn default_eval_every() -> usize {
    10
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        LoraTrainConfig {
            lr: 1e-2,
            steps: 200,
            batch_size: 16,
            grad_clip: 1.0,
            weight_decay: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adamw,
            schedule: LrSchedule::Constant,
            patience: None,
            eval_every: 10,
        }
    }
}

impl LoraTrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{field}.lr"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config(format!("{field}.eval_every"), "must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - step as f32 / self.steps.max(1) as f32),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            ..OptimizerConfig::adamw(self.lr, self.weight_decay)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub adapters: AdapterSet,
    /// Training loss of every optimizer step.
    pub losses: Vec<f32>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Shuffled epoch-wise mini-batches, reproducible from a seed.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, rng: Rng) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Per-step hook for fine-tuning.
pub type Observer<'a> = Option<&'a mut dyn FnMut(usize, &AdapterSet)>;

/// Fine-tunes fresh adapters from `config` on `data`; base weights are never
/// written. `observer` sees the adapter state after every optimizer step.
pub fn finetune_lora(
    model: &TransformerLm,
    config: &AdapterConfig,
    data: &Dataset,
    train: &LoraTrainConfig,
    observer: Observer<'_>,
) -> Result<FinetuneOutcome> {
    let adapters = AdapterSet::new(config, &model.config)?;
    finetune_adapters(model, adapters, data, train, observer)
}

pub fn finetune_adapters(
    model: &TransformerLm,
    mut adapters: AdapterSet,
    data: &Dataset,
    train: &LoraTrainConfig,
    mut observer: Observer<'_>,
) -> Result<FinetuneOutcome> {
    train.validate("train")?;
    if data.is_empty() {
        return Err(Error::config("train.dataset", "dataset is empty"));
    }
    check_adapter_fit(model, &adapters)?;
    let mut sampler = BatchSampler::new(data.len(), Rng::new(train.seed).derive_named("lora-batches"));
    let mut opt = Optimizer::new(train.optimizer_config());
    let mut losses = Vec::with_capacity(train.steps);
    let mut best = f32::INFINITY;
    let mut best_step = 0;
    let mut stopped_early = false;
    for step in 0..train.steps {
        let idx = sampler.next_batch(train.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.examples[i]).collect();
        let (loss, mut grads) = adapter_gradients(model, &adapters, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "finetune".into(),
                detail: format!("loss {loss} at step {step}"),
            });
        }
        losses.push(loss);
        if train.grad_clip > 0.0 {
            clip_global_norm(&mut grads, train.grad_clip);
        }
        opt.step_with_lr(&mut adapters.tensors_mut(), &grads, train.lr_at(step))?;
        if let Some(obs) = observer.as_mut() {
            obs(step, &adapters);
        }
        if let Some(patience) = train.patience {
            if (step + 1) % train.eval_every == 0 {
                let monitored = dataset_loss(model, Some(&adapters), &data.examples)?;
                if monitored < best {
                    best = monitored;
                    best_step = step;
                } else if step - best_step >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(FinetuneOutcome {
        steps_run: losses.len(),
        adapters,
        losses,
        stopped_early,
    })
}

/// Full-parameter training, used to warm-start root models before any
/// adapter is attached.
pub fn pretrain_lm(model: &mut TransformerLm, data: &Dataset, train: &LoraTrainConfig) -> Result<Vec<f32>> {
    train.validate("pretrain")?;
    if data.is_empty() {
        return Err(Error::config("pretrain.dataset", "dataset is empty"));
    }
    let mut sampler = BatchSampler::new(data.len(), Rng::new(train.seed).derive_named("pretrain-batches"));
    let mut opt = Optimizer::new(train.optimizer_config());
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let idx = sampler.next_batch(train.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.examples[i]).collect();
        let (inputs, targets) = training_rows(&batch);
        let seqs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let lm = bind_model_with(&mut g, model, true);
            let logits = forward_rows(&mut g, &model.config, &lm, None, &seqs)?;
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            let leaves = lm.leaves();
            (g.value(loss).data()[0], leaves.iter().map(|&v| g.grad_tensor(v)).collect::<Vec<_>>())
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "pretrain".into(),
                detail: format!("loss {loss} at step {step}"),
            });
        }
        losses.push(loss);
        if train.grad_clip > 0.0 {
            clip_global_norm(&mut grads, train.grad_clip);
        }
        opt.step_with_lr(&mut model.tensors_mut(), &grads, train.lr_at(step))?;
    }
    Ok(losses)
}

// ----------------------------------------------------------------------
// checkpoints
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterHeader {
    pub rank: usize,
    pub alpha: f32,
    pub d_model: usize,
    pub targets: Vec<AdapterTarget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub lm_config: LmConfig,
    pub adapter: Option<AdapterHeader>,
    pub seed: u64,
    pub step_count: u64,
    pub digest: String,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: TransformerLm,
    pub adapters: Option<AdapterSet>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &TransformerLm,
    adapters: Option<&AdapterSet>,
    seed: u64,
    step_count: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        lm_config: model.config.clone(),
        adapter: adapters.map(AdapterSet::header),
        seed,
        step_count,
        digest: model.digest(),
    };
    let named = model.named_tensors();
    let mut records: Vec<(String, &Tensor)> = named;
    if let Some(a) = adapters {
        for (i, f) in a.factors.iter().enumerate() {
            records.push((format!("adapter.{i}.a"), &f.a));
            records.push((format!("adapter.{i}.b"), &f.b));
        }
    }
    let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    write_container(path, CHECKPOINT_MAGIC, &header, &refs)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, mut records): (CheckpointHeader, _) = read_container(path, CHECKPOINT_MAGIC)?;
    let mut model = init_lm(&header.lm_config, 0)?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let t = take_record(&mut records, name)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "record `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if model.digest() != header.digest {
        return Err(Error::Format(format!("{}: weight digest mismatch", path.display())));
    }
    let adapters = match &header.adapter {
        None => None,
        Some(h) => {
            let mut factors = Vec::with_capacity(h.targets.len());
            for i in 0..h.targets.len() {
                factors.push(LoraFactors {
                    a: take_record(&mut records, &format!("adapter.{i}.a"))?,
                    b: take_record(&mut records, &format!("adapter.{i}.b"))?,
                });
            }
            Some(AdapterSet {
                rank: h.rank,
                alpha: h.alpha,
                d_model: h.d_model,
                targets: h.targets.clone(),
                factors,
            })
        }
    };
    Ok(Checkpoint {
        header,
        model,
        adapters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, TaskKind, TaskSpec};

    fn small_cfg() -> LmConfig {
        LmConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            max_seq_len: 12,
            mlp_mult: 2,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_lm(&LmConfig::tiny(), 3).unwrap();
        let b = init_lm(&LmConfig::tiny(), 3).unwrap();
        let c = init_lm(&LmConfig::tiny(), 4).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn heads_must_divide() {
        let mut cfg = small_cfg();
        cfg.n_heads = 3;
        assert!(matches!(init_lm(&cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn token_out_of_range() {
        let m = init_lm(&small_cfg(), 0).unwrap();
        assert!(matches!(forward(&m, None, &[1, 16]), Err(Error::Index { .. })));
    }

    #[test]
    fn single_entry_delta() {
        let mut a = AdapterSet::new(
            &AdapterConfig {
                rank: 1,
                alpha: Some(1.0),
                targets: vec![WeightName::Q],
                ..Default::default()
            },
            &small_cfg(),
        )
        .unwrap();
        let d = 8;
        let mut av = vec![0.0; d];
        av[0] = 1.0;
        let mut bv = vec![0.0; d];
        bv[d - 1] = 1.0;
        a.factors[0].a = Tensor::new(vec![1, d], av).unwrap();
        a.factors[0].b = Tensor::new(vec![d, 1], bv).unwrap();
        let delta = &adapter_delta(&a)[0];
        let nonzero: Vec<usize> = (0..d * d).filter(|&i| delta.data()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![(d - 1) * d]);
        assert_eq!(delta.data()[(d - 1) * d], 1.0);
        assert!(adapter_delta(&AdapterSet::new(&AdapterConfig::default(), &small_cfg()).unwrap())
            .iter()
            .all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn zero_steps_gives_zero_delta() {
        let m = init_lm(&small_cfg(), 0).unwrap();
        let data = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 3, 0), 8).unwrap();
        let cfg = LoraTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = finetune_lora(&m, &AdapterConfig::default(), &data, &cfg, None).unwrap();
        assert!(adapter_delta(&out.adapters).iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let m = init_lm(&small_cfg(), 0).unwrap();
        let data = Dataset::new(vec![], crate::tasks::Provenance::Private);
        let r = finetune_lora(&m, &AdapterConfig::default(), &data, &LoraTrainConfig::default(), None);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_lm(&small_cfg(), 5).unwrap();
        let mut a = AdapterSet::new(&AdapterConfig::default(), &small_cfg()).unwrap();
        a.factors[1].b.data_mut()[3] = 0.25;
        let path = dir.path().join("m.gtck");
        save_checkpoint(&path, &m, Some(&a), 5, 17).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.adapters.unwrap(), a);
        assert_eq!(ck.header.step_count, 17);
    }
}
