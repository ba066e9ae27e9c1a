//! Encoder-decoder that maps block-wise source update vectors to block-wise
//! target update vectors.
//!
//! Source blocks are embedded by an affine map and encoded with
//! bidirectional self-attention. The decoder sees a learned start vector at
//! position 0 and the embedded target block `j - 1` at position `j`; it
//! attends causally to itself and fully to the encoder output. An affine
//! head maps every decoder state back to a target block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::{Layout, ModelTag, TupleDataset, UpdateTuple, UpdateVector};
use crate::error::{Error, Result};
use crate::format::{read_container, take_record, write_container};
use crate::graph::{AttnSegment, Graph, Var};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GT_MAGIC: &[u8; 4] = b"GTGT";

const STD_FLOOR: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    /// Re-embed the previous prediction, as in training.
    #[default]
    Embed,
    /// Feed the previous decoder hidden state.
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtConfig {
    pub d_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_mlp_mult")]
    pub mlp_mult: usize,
    pub source_blocks: usize,
    pub source_dim: usize,
    pub target_blocks: usize,
    pub target_dim: usize,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub dropout: f32,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_mlp_mult() -> usize {
    2
}
fn default_true() -> bool {
    true
}

impl GtConfig {
    /// Desk defaults sized for the given layouts.
    pub fn for_layouts(source: &Layout, target: &Layout) -> Result<Self> {
        let cfg = GtConfig {
            d_hidden: 128,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 4,
            mlp_mult: default_mlp_mult(),
            source_blocks: source.n_blocks(),
            source_dim: source
                .block_len()
                .ok_or_else(|| Error::Format(format!("source layout {source} has unequal blocks")))?,
            target_blocks: target.n_blocks(),
            target_dim: target
                .block_len()
                .ok_or_else(|| Error::Format(format!("target layout {target} has unequal blocks")))?,
            standardize: true,
            dropout: 0.0,
            init_seed: 0,
        };
        cfg.validate("gt")?;
        Ok(cfg)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let positive = [
            ("d_hidden", self.d_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("n_heads", self.n_heads),
            ("mlp_mult", self.mlp_mult),
            ("source_blocks", self.source_blocks),
            ("source_dim", self.source_dim),
            ("target_blocks", self.target_blocks),
            ("target_dim", self.target_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{field}.{name}"), "must be positive"));
            }
        }
        if !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                format!("{field}.n_heads"),
                format!("{} does not divide d_hidden {}", self.n_heads, self.d_hidden),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("{field}.dropout"), "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn source_layout(&self) -> Layout {
        Layout::uniform(self.source_blocks, self.source_dim)
    }

    pub fn target_layout(&self) -> Layout {
        Layout::uniform(self.target_blocks, self.target_dim)
    }
}

/// Per-component affine standardization of flattened source and target vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub source_mean: Vec<f32>,
    pub source_std: Vec<f32>,
    pub target_mean: Vec<f32>,
    pub target_std: Vec<f32>,
}

fn moments(rows: &[Vec<f32>]) -> (Vec<f32>, Vec<f32>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0f64; dim];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; dim];
    for r in rows {
        for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x as f64 - m).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|v| ((v / n).sqrt() as f32).max(STD_FLOOR))
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn apply(x: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    x.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s).collect()
}

fn invert(z: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    z.iter().zip(mean).zip(std).map(|((z, m), s)| z * s + m).collect()
}

impl Standardizer {
    pub fn fit(tuples: &[&UpdateTuple]) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::config("gt.train", "no tuples to fit standardization on"));
        }
        let src: Vec<Vec<f32>> = tuples.iter().map(|t| t.source.to_flat()).collect();
        let tgt: Vec<Vec<f32>> = tuples.iter().map(|t| t.target.to_flat()).collect();
        let (source_mean, source_std) = moments(&src);
        let (target_mean, target_std) = moments(&tgt);
        Ok(Standardizer {
            source_mean,
            source_std,
            target_mean,
            target_std,
        })
    }

    pub fn source(&self, x: &[f32]) -> Vec<f32> {
        apply(x, &self.source_mean, &self.source_std)
    }

    pub fn target(&self, x: &[f32]) -> Vec<f32> {
        apply(x, &self.target_mean, &self.target_std)
    }

    pub fn invert_target(&self, z: &[f32]) -> Vec<f32> {
        invert(z, &self.target_mean, &self.target_std)
    }

    pub fn invert_source(&self, z: &[f32]) -> Vec<f32> {
        invert(z, &self.source_mean, &self.source_std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attn {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtLayer {
    pub self_attn: Attn,
    /// Present on decoder layers only.
    pub cross_attn: Option<Attn>,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradTransformer {
    pub config: GtConfig,
    pub emb_source: Tensor,
    pub emb_source_bias: Tensor,
    pub emb_target: Tensor,
    pub emb_target_bias: Tensor,
    pub pos_encoder: Tensor,
    pub pos_decoder: Tensor,
    /// `[1 × d_hidden]`
    pub bos: Tensor,
    pub encoder: Vec<GtLayer>,
    pub decoder: Vec<GtLayer>,
    pub enc_final: (Tensor, Tensor),
    pub dec_final: (Tensor, Tensor),
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub stats: Option<Standardizer>,
}

fn attn_init(rng: &mut Rng, h: usize) -> Attn {
    Attn {
        ln_gamma: Tensor::full(&[h], 1.0),
        ln_beta: Tensor::zeros(&[h]),
        wq: rng.gaussian(&[h, h], INIT_STD),
        wk: rng.gaussian(&[h, h], INIT_STD),
        wv: rng.gaussian(&[h, h], INIT_STD),
        wo: rng.gaussian(&[h, h], INIT_STD),
    }
}

fn layer_init(rng: &mut Rng, h: usize, mult: usize, cross: bool) -> GtLayer {
    GtLayer {
        self_attn: attn_init(rng, h),
        cross_attn: cross.then(|| attn_init(rng, h)),
        ln_gamma: Tensor::full(&[h], 1.0),
        ln_beta: Tensor::zeros(&[h]),
        w_up: rng.gaussian(&[h, h * mult], INIT_STD),
        b_up: Tensor::zeros(&[h * mult]),
        w_down: rng.gaussian(&[h * mult, h], INIT_STD),
        b_down: Tensor::zeros(&[h]),
    }
}

impl Attn {
    fn named<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        for (n, t) in [
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
        ]
    }
}

impl GradTransformer {
    pub fn new(config: GtConfig) -> Result<Self> {
        config.validate("gt")?;
        let h = config.d_hidden;
        let mut rng = Rng::new(config.init_seed).derive_named("gt-init");
        let emb_source = rng.gaussian(&[config.source_dim, h], 1.0 / (config.source_dim as f32).sqrt());
        let emb_target = rng.gaussian(&[config.target_dim, h], 1.0 / (config.target_dim as f32).sqrt());
        let pos_encoder = rng.gaussian(&[config.source_blocks, h], INIT_STD);
        let pos_decoder = rng.gaussian(&[config.target_blocks, h], INIT_STD);
        let bos = rng.gaussian(&[1, h], 1.0);
        let encoder = (0..config.enc_layers)
            .map(|_| layer_init(&mut rng, h, config.mlp_mult, false))
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|_| layer_init(&mut rng, h, config.mlp_mult, true))
            .collect();
        let w_out = rng.gaussian(&[h, config.target_dim], INIT_STD);
        Ok(GradTransformer {
            emb_source_bias: Tensor::zeros(&[h]),
            emb_target_bias: Tensor::zeros(&[h]),
            enc_final: (Tensor::full(&[h], 1.0), Tensor::zeros(&[h])),
            dec_final: (Tensor::full(&[h], 1.0), Tensor::zeros(&[h])),
            b_out: Tensor::zeros(&[config.target_dim]),
            config,
            emb_source,
            emb_target,
            pos_encoder,
            pos_decoder,
            bos,
            encoder,
            decoder,
            w_out,
            stats: None,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = [
            ("emb_source", &self.emb_source),
            ("emb_source_bias", &self.emb_source_bias),
            ("emb_target", &self.emb_target),
            ("emb_target_bias", &self.emb_target_bias),
            ("pos_encoder", &self.pos_encoder),
            ("pos_decoder", &self.pos_decoder),
            ("bos", &self.bos),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
        for (side, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                let p = format!("{side}.{i}");
                l.self_attn.named(&format!("{p}.self"), &mut out);
                if let Some(c) = &l.cross_attn {
                    c.named(&format!("{p}.cross"), &mut out);
                }
                for (n, t) in [
                    ("ln_gamma", &l.ln_gamma),
                    ("ln_beta", &l.ln_beta),
                    ("w_up", &l.w_up),
                    ("b_up", &l.b_up),
                    ("w_down", &l.w_down),
                    ("b_down", &l.b_down),
                ] {
                    out.push((format!("{p}.{n}"), t));
                }
            }
        }
        for (n, t) in [
            ("enc_final_gamma", &self.enc_final.0),
            ("enc_final_beta", &self.enc_final.1),
            ("dec_final_gamma", &self.dec_final.0),
            ("dec_final_beta", &self.dec_final.1),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ] {
            out.push((n.to_string(), t));
        }
        out
    }

    /// Every trainable tensor, in [`GradTransformer::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.emb_source,
            &mut self.emb_source_bias,
            &mut self.emb_target,
            &mut self.emb_target_bias,
            &mut self.pos_encoder,
            &mut self.pos_decoder,
            &mut self.bos,
        ];
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(l.self_attn.tensors_mut());
            if let Some(c) = &mut l.cross_attn {
                out.extend(c.tensors_mut());
            }
            out.extend([
                &mut l.ln_gamma,
                &mut l.ln_beta,
                &mut l.w_up,
                &mut l.b_up,
                &mut l.w_down,
                &mut l.b_down,
            ]);
        }
        out.extend([
            &mut self.enc_final.0,
            &mut self.enc_final.1,
            &mut self.dec_final.0,
            &mut self.dec_final.1,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ----------------------------------------------------------------------
// segmentation
// ----------------------------------------------------------------------

/// Block sequence of an update, descending when `reverse` is set.
pub fn segment(update: &UpdateVector, layout: &Layout, reverse: bool) -> Result<Vec<Vec<f32>>> {
    update.expect_layout(layout)?;
    let mut blocks = update.blocks.clone();
    if reverse {
        blocks.reverse();
    }
    Ok(blocks)
}

/// Inverse of [`segment`] for the target side.
pub fn desegment(blocks: Vec<Vec<f32>>, layout: &Layout, model_tag: ModelTag, reverse: bool) -> Result<UpdateVector> {
    let mut blocks = blocks;
    if reverse {
        blocks.reverse();
    }
    UpdateVector::new(model_tag, layout.clone(), blocks)
}

// ----------------------------------------------------------------------
// graph construction
// ----------------------------------------------------------------------

struct AttnVars {
    ln: (Var, Var),
    w: [Var; 4],
}

struct LayerVars {
    self_attn: AttnVars,
    cross_attn: Option<AttnVars>,
    ln: (Var, Var),
    up: (Var, Var),
    down: (Var, Var),
}

struct GtVars {
    emb_s: (Var, Var),
    emb_t: (Var, Var),
    pos_enc: Var,
    pos_dec: Var,
    bos: Var,
    encoder: Vec<LayerVars>,
    decoder: Vec<LayerVars>,
    enc_final: (Var, Var),
    dec_final: (Var, Var),
    out: (Var, Var),
    leaves: Vec<Var>,
}

struct Binder {
    trainable: bool,
    leaves: Vec<Var>,
}

impl Binder {
    fn leaf<'a>(&mut self, g: &mut Graph<'a>, t: &'a Tensor) -> Var {
        let v = if self.trainable { g.param_ref(t) } else { g.constant_ref(t) };
        self.leaves.push(v);
        v
    }

    fn attn<'a>(&mut self, g: &mut Graph<'a>, a: &'a Attn) -> AttnVars {
        AttnVars {
            ln: (self.leaf(g, &a.ln_gamma), self.leaf(g, &a.ln_beta)),
            w: [
                self.leaf(g, &a.wq),
                self.leaf(g, &a.wk),
                self.leaf(g, &a.wv),
                self.leaf(g, &a.wo),
            ],
        }
    }

    fn layer<'a>(&mut self, g: &mut Graph<'a>, l: &'a GtLayer) -> LayerVars {
        LayerVars {
            self_attn: self.attn(g, &l.self_attn),
            cross_attn: l.cross_attn.as_ref().map(|c| self.attn(g, c)),
            ln: (self.leaf(g, &l.ln_gamma), self.leaf(g, &l.ln_beta)),
            up: (self.leaf(g, &l.w_up), self.leaf(g, &l.b_up)),
            down: (self.leaf(g, &l.w_down), self.leaf(g, &l.b_down)),
        }
    }
}

/// Binds every tensor in [`GradTransformer::tensors_mut`] order.
fn bind<'a>(g: &mut Graph<'a>, gt: &'a GradTransformer, trainable: bool) -> GtVars {
    let mut b = Binder {
        trainable,
        leaves: Vec::new(),
    };
    let emb_s = (b.leaf(g, &gt.emb_source), b.leaf(g, &gt.emb_source_bias));
    let emb_t = (b.leaf(g, &gt.emb_target), b.leaf(g, &gt.emb_target_bias));
    let pos_enc = b.leaf(g, &gt.pos_encoder);
    let pos_dec = b.leaf(g, &gt.pos_decoder);
    let bos = b.leaf(g, &gt.bos);
    let encoder = gt.encoder.iter().map(|l| b.layer(g, l)).collect();
    let decoder = gt.decoder.iter().map(|l| b.layer(g, l)).collect();
    let enc_final = (b.leaf(g, &gt.enc_final.0), b.leaf(g, &gt.enc_final.1));
    let dec_final = (b.leaf(g, &gt.dec_final.0), b.leaf(g, &gt.dec_final.1));
    let out = (b.leaf(g, &gt.w_out), b.leaf(g, &gt.b_out));
    GtVars {
        emb_s,
        emb_t,
        pos_enc,
        pos_dec,
        bos,
        encoder,
        decoder,
        enc_final,
        dec_final,
        out,
        leaves: b.leaves,
    }
}

struct Ctx<'r> {
    heads: usize,
    dropout: f32,
    rng: Option<&'r mut Rng>,
}

impl Ctx<'_> {
    fn drop(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

fn attend(
    g: &mut Graph<'_>,
    a: &AttnVars,
    x: Var,
    memory: Option<Var>,
    segments: &[AttnSegment],
    causal: bool,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let h = g.layer_norm(x, a.ln.0, a.ln.1)?;
    let kv_src = memory.unwrap_or(h);
    let q = g.matmul(h, a.w[0])?;
    let k = g.matmul(kv_src, a.w[1])?;
    let v = g.matmul(kv_src, a.w[2])?;
    let att = g.attention(q, k, v, ctx.heads, segments, causal)?;
    let o = g.matmul(att, a.w[3])?;
    let o = ctx.drop(g, o);
    g.add(x, o)
}

fn feed_forward(g: &mut Graph<'_>, l: &LayerVars, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
    let h = g.layer_norm(x, l.ln.0, l.ln.1)?;
    let up = g.matmul(h, l.up.0)?;
    let up = g.add_bias(up, l.up.1)?;
    let act = g.gelu(up);
    let down = g.matmul(act, l.down.0)?;
    let down = g.add_bias(down, l.down.1)?;
    let down = ctx.drop(g, down);
    g.add(x, down)
}

fn positions(g: &mut Graph<'_>, table: Var, n_items: usize, len: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..n_items).flat_map(|_| 0..len).collect();
    g.gather_rows(table, &idx)
}

/// Encoder output for `n_items` stacked source sequences.
fn encode(g: &mut Graph<'_>, p: &GtVars, src: Tensor, n_items: usize, len: usize, ctx: &mut Ctx<'_>) -> Result<Var> {
    let s = g.constant(src);
    let e = g.matmul(s, p.emb_s.0)?;
    let e = g.add_bias(e, p.emb_s.1)?;
    let pe = positions(g, p.pos_enc, n_items, len)?;
    let mut x = g.add(e, pe)?;
    let segments: Vec<AttnSegment> = (0..n_items).map(|i| AttnSegment::square(i * len, len)).collect();
    for l in &p.encoder {
        x = attend(g, &l.self_attn, x, None, &segments, false, ctx)?;
        x = feed_forward(g, l, x, ctx)?;
    }
    g.layer_norm(x, p.enc_final.0, p.enc_final.1)
}

/// Final decoder hidden states for `n_items` stacked inputs of `len` rows.
#[allow(clippy::too_many_arguments)]
fn decode(
    g: &mut Graph<'_>,
    p: &GtVars,
    memory: Var,
    mem_len: usize,
    inputs: Var,
    n_items: usize,
    len: usize,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let pe = positions(g, p.pos_dec, n_items, len)?;
    let mut x = g.add(inputs, pe)?;
    let own: Vec<AttnSegment> = (0..n_items).map(|i| AttnSegment::square(i * len, len)).collect();
    let cross: Vec<AttnSegment> = (0..n_items)
        .map(|i| AttnSegment {
            q_start: i * len,
            q_len: len,
            kv_start: i * mem_len,
            kv_len: mem_len,
        })
        .collect();
    for l in &p.decoder {
        x = attend(g, &l.self_attn, x, None, &own, true, ctx)?;
        let c = l.cross_attn.as_ref().expect("decoder layers carry cross-attention");
        x = attend(g, c, x, Some(memory), &cross, false, ctx)?;
        x = feed_forward(g, l, x, ctx)?;
    }
    g.layer_norm(x, p.dec_final.0, p.dec_final.1)
}

fn project_out(g: &mut Graph<'_>, p: &GtVars, hidden: Var) -> Result<Var> {
    let y = g.matmul(hidden, p.out.0)?;
    g.add_bias(y, p.out.1)
}

/// Standardized source and target rows of a batch, each `[n·L × d]`.
fn batch_rows(gt: &GradTransformer, tuples: &[&UpdateTuple], reverse: bool) -> Result<(Tensor, Tensor)> {
    let cfg = &gt.config;
    let (sl, tl) = (cfg.source_layout(), cfg.target_layout());
    let mut src = Vec::with_capacity(tuples.len() * sl.total());
    let mut tgt = Vec::with_capacity(tuples.len() * tl.total());
    for t in tuples {
        src.extend(gt.source_rows(&segment(&t.source, &sl, reverse)?));
        tgt.extend(gt.target_rows(&segment(&t.target, &tl, reverse)?));
    }
    Ok((
        Tensor::new(vec![tuples.len() * cfg.source_blocks, cfg.source_dim], src)?,
        Tensor::new(vec![tuples.len() * cfg.target_blocks, cfg.target_dim], tgt)?,
    ))
}

impl GradTransformer {
    /// Standardized, concatenated source blocks (in the order given).
    fn source_rows(&self, blocks: &[Vec<f32>]) -> Vec<f32> {
        let flat = blocks.concat();
        match &self.stats {
            Some(s) => s.source(&flat),
            None => flat,
        }
    }

    fn target_rows(&self, blocks: &[Vec<f32>]) -> Vec<f32> {
        let flat = blocks.concat();
        match &self.stats {
            Some(s) => s.target(&flat),
            None => flat,
        }
    }

    fn target_raw(&self, z: &[f32]) -> Vec<f32> {
        match &self.stats {
            Some(s) => s.invert_target(z),
            None => z.to_vec(),
        }
    }

    /// Teacher-forced predictions `[n·L_T × d_T]` in the standardized space.
    fn teacher_forced_var(
        &self,
        g: &mut Graph<'_>,
        p: &GtVars,
        src: Tensor,
        tgt: &Tensor,
        n_items: usize,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (ls, lt) = (cfg.source_blocks, cfg.target_blocks);
        let memory = encode(g, p, src, n_items, ls, ctx)?;
        let mut parts = Vec::with_capacity(2 * n_items);
        let shifted = if lt > 1 {
            let t = g.constant(tgt.clone());
            let e = g.matmul(t, p.emb_t.0)?;
            Some(g.add_bias(e, p.emb_t.1)?)
        } else {
            None
        };
        for i in 0..n_items {
            parts.push(p.bos);
            if let Some(e) = shifted {
                parts.push(g.slice_rows(e, i * lt, lt - 1)?);
            }
        }
        let inputs = g.concat_rows(&parts)?;
        let hidden = decode(g, p, memory, ls, inputs, n_items, lt, ctx)?;
        project_out(g, p, hidden)
    }

    /// Predicted target blocks given all source blocks and the ground-truth
    /// target blocks (raw, not standardized). Prediction `j` depends on
    /// target blocks `< j` only.
    pub fn teacher_forced_forward(&self, source: &[Vec<f32>], target: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.config;
        if source.len() != cfg.source_blocks || target.len() != cfg.target_blocks {
            return Err(Error::Contract(format!(
                "expected {} source and {} target blocks, got {} and {}",
                cfg.source_blocks,
                cfg.target_blocks,
                source.len(),
                target.len()
            )));
        }
        if source.iter().any(|b| b.len() != cfg.source_dim) || target.iter().any(|b| b.len() != cfg.target_dim) {
            return Err(Error::Contract(format!(
                "blocks must have lengths {} (source) and {} (target)",
                cfg.source_dim, cfg.target_dim
            )));
        }
        let src = Tensor::new(vec![cfg.source_blocks, cfg.source_dim], self.source_rows(source))?;
        let tgt = Tensor::new(vec![cfg.target_blocks, cfg.target_dim], self.target_rows(target))?;
        let mut g = Graph::new();
        let p = bind(&mut g, self, false);
        let mut ctx = self.eval_ctx();
        let out = self.teacher_forced_var(&mut g, &p, src, &tgt, 1, &mut ctx)?;
        let z = g.value(out).data();
        Ok(self
            .target_raw(z)
            .chunks(cfg.target_dim)
            .map(<[f32]>::to_vec)
            .collect())
    }

    fn eval_ctx(&self) -> Ctx<'static> {
        Ctx {
            heads: self.config.n_heads,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Autoregressive target blocks for a source update. With
    /// `reverse_blocks` the source sequence is fed in descending block order
    /// and the generated sequence is read back the same way.
    pub fn generate(&self, source: &UpdateVector, feedback: Feedback, reverse_blocks: bool) -> Result<UpdateVector> {
        let cfg = &self.config;
        let blocks = segment(source, &cfg.source_layout(), reverse_blocks)?;
        let src = Tensor::new(vec![cfg.source_blocks, cfg.source_dim], self.source_rows(&blocks))?;
        let (ls, lt, dt) = (cfg.source_blocks, cfg.target_blocks, cfg.target_dim);
        let mut out: Vec<Vec<f32>> = Vec::with_capacity(lt);
        // rows fed back so far: re-standardized raw predictions, or hidden states
        let mut fed: Vec<f32> = Vec::new();
        for j in 0..lt {
            let mut g = Graph::new();
            let p = bind(&mut g, self, false);
            let mut ctx = self.eval_ctx();
            let memory = encode(&mut g, &p, src.clone(), 1, ls, &mut ctx)?;
            let inputs = if j == 0 {
                p.bos
            } else {
                let prev = match feedback {
                    Feedback::Embed => {
                        let t = g.constant(Tensor::new(vec![j, dt], fed.clone())?);
                        let e = g.matmul(t, p.emb_t.0)?;
                        g.add_bias(e, p.emb_t.1)?
                    }
                    Feedback::Hidden => g.constant(Tensor::new(vec![j, cfg.d_hidden], fed.clone())?),
                };
                g.concat_rows(&[p.bos, prev])?
            };
            let hidden = decode(&mut g, &p, memory, ls, inputs, 1, j + 1, &mut ctx)?;
            let last_h = g.slice_rows(hidden, j, 1)?;
            let y = project_out(&mut g, &p, last_h)?;
            let z = g.value(y).data().to_vec();
            let raw = self.target_raw_block(&z, j);
            match feedback {
                // the same path a teacher-forced pass applies to raw targets
                Feedback::Embed => fed.extend(self.target_std_block(&raw, j)),
                Feedback::Hidden => fed.extend_from_slice(g.value(last_h).data()),
            }
            out.push(raw);
        }
        desegment(out, &cfg.target_layout(), ModelTag::Target, reverse_blocks)
    }

    fn target_raw_block(&self, z: &[f32], j: usize) -> Vec<f32> {
        let dt = self.config.target_dim;
        match &self.stats {
            Some(s) => invert(z, &s.target_mean[j * dt..(j + 1) * dt], &s.target_std[j * dt..(j + 1) * dt]),
            None => z.to_vec(),
        }
    }

    fn target_std_block(&self, x: &[f32], j: usize) -> Vec<f32> {
        let dt = self.config.target_dim;
        match &self.stats {
            Some(s) => apply(x, &s.target_mean[j * dt..(j + 1) * dt], &s.target_std[j * dt..(j + 1) * dt]),
            None => x.to_vec(),
        }
    }
}

// ----------------------------------------------------------------------
// training
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtTrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_clip")]
    pub grad_clip: f32,
    /// Train on descending block order.
    #[serde(default)]
    pub reverse_blocks: bool,
}

fn default_clip() -> f32 {
    1.0
}

impl Default for GtTrainConfig {
    fn default() -> Self {
        GtTrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: default_clip(),
            reverse_blocks: false,
        }
    }
}

impl GtTrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{field}.lr"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GtTrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE.
    pub model: GradTransformer,
    /// Objective of every optimizer step.
    pub step_losses: Vec<f32>,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f32>,
    /// Validation MSE before training (index 0) and after every epoch.
    pub val_mse: Vec<f32>,
    /// Index into `val_mse` of the returned parameters.
    pub best: usize,
}

/// `Σ_items Σ_j ‖pred_j − truth_j‖² / (items · L_T)`, summed directly.
pub fn block_objective(pred: &[f32], truth: &[f32], n_blocks: usize) -> f64 {
    let sq: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p - t) as f64).powi(2))
        .sum();
    sq / n_blocks as f64
}

/// Per-component MSE of teacher-forced predictions over `tuples`, in the
/// space the model is trained in.
pub fn evaluate_mse(gt: &GradTransformer, tuples: &[&UpdateTuple], reverse: bool) -> Result<f32> {
    if tuples.is_empty() {
        return Ok(f32::NAN);
    }
    let mut total = 0f64;
    let mut count = 0usize;
    for chunk in tuples.chunks(64) {
        let (src, tgt) = batch_rows(gt, chunk, reverse)?;
        let mut g = Graph::new();
        let p = bind(&mut g, gt, false);
        let mut ctx = gt.eval_ctx();
        let out = gt.teacher_forced_var(&mut g, &p, src, &tgt, chunk.len(), &mut ctx)?;
        total += block_objective(g.value(out).data(), tgt.data(), 1);
        count += tgt.numel();
    }
    Ok((total / count as f64) as f32)
}

/// Gradient of the block objective on one batch; returns the objective.
pub(crate) fn batch_gradients(
    gt: &GradTransformer,
    tuples: &[&UpdateTuple],
    reverse: bool,
    rng: Option<&mut Rng>,
) -> Result<(f32, Vec<Tensor>)> {
    let (src, tgt) = batch_rows(gt, tuples, reverse)?;
    let mut g = Graph::new();
    let p = bind(&mut g, gt, true);
    let mut ctx = Ctx {
        heads: gt.config.n_heads,
        dropout: gt.config.dropout,
        rng,
    };
    let out = gt.teacher_forced_var(&mut g, &p, src, &tgt, tuples.len(), &mut ctx)?;
    let mse = g.mse(out, &tgt)?;
    // mean over elements times d_T = mean over blocks of squared norms
    let loss = g.scale(mse, gt.config.target_dim as f32);
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, p.leaves.iter().map(|&v| g.grad_tensor(v)).collect()))
}

/// Trains `gt` on the train partition of `data` with teacher forcing and
/// keeps the parameters with the lowest validation MSE.
pub fn train(mut gt: GradTransformer, data: &TupleDataset, cfg: &GtTrainConfig) -> Result<GtTrainOutcome> {
    cfg.validate("gt_train")?;
    let train_set = data.train();
    let val_set = data.val();
    if train_set.is_empty() {
        return Err(Error::config("gt_train", "train partition is empty"));
    }
    let (sl, tl) = (gt.config.source_layout(), gt.config.target_layout());
    if data.manifest.source_layout != sl || data.manifest.target_layout != tl {
        return Err(Error::Format(format!(
            "tuple layouts source {} target {} do not match model layouts source {sl} target {tl}",
            data.manifest.source_layout, data.manifest.target_layout
        )));
    }
    gt.stats = if gt.config.standardize {
        Some(Standardizer::fit(&train_set)?)
    } else {
        None
    };
    let monitor: &[&UpdateTuple] = if val_set.is_empty() { &train_set } else { &val_set };
    let mut val_mse = vec![evaluate_mse(&gt, monitor, cfg.reverse_blocks)?];
    let mut best = 0;
    let mut best_model = gt.clone();
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.lr, cfg.weight_decay));
    let mut rng = Rng::new(cfg.seed).derive_named("gt-train");
    let mut drop_rng = rng.derive_named("dropout");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0f64;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&UpdateTuple> = idx.iter().map(|&i| train_set[i]).collect();
            let (loss, mut grads) = batch_gradients(&gt, &batch, cfg.reverse_blocks, Some(&mut drop_rng))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "train-gt".into(),
                    detail: format!("objective {loss} in epoch {epoch}"),
                });
            }
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            opt.step(&mut gt.tensors_mut(), &grads)?;
            step_losses.push(loss);
            sum += loss as f64;
            batches += 1;
        }
        epoch_losses.push((sum / batches as f64) as f32);
        let v = evaluate_mse(&gt, monitor, cfg.reverse_blocks)?;
        log::info!("gt epoch {epoch}: train objective {:.4}, val mse {v:.4}", sum / batches as f64);
        val_mse.push(v);
        if v < val_mse[best] {
            best = val_mse.len() - 1;
            best_model = gt.clone();
        }
    }
    Ok(GtTrainOutcome {
        model: best_model,
        step_losses,
        epoch_losses,
        val_mse,
        best,
    })
}

// ----------------------------------------------------------------------
// checkpoints
// ----------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GtProvenance {
    pub tuples_digest: String,
    pub train: Option<GtTrainConfig>,
    pub val_mse: Vec<f32>,
    pub best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtHeader {
    pub config: GtConfig,
    pub source_layout: Layout,
    pub target_layout: Layout,
    pub stats: bool,
    pub provenance: GtProvenance,
}

const STAT_NAMES: [&str; 4] = ["stats.source_mean", "stats.source_std", "stats.target_mean", "stats.target_std"];

pub fn save_gt(path: &Path, gt: &GradTransformer, provenance: &GtProvenance) -> Result<()> {
    let header = GtHeader {
        config: gt.config.clone(),
        source_layout: gt.config.source_layout(),
        target_layout: gt.config.target_layout(),
        stats: gt.stats.is_some(),
        provenance: provenance.clone(),
    };
    let stat_tensors: Vec<Tensor> = gt
        .stats
        .iter()
        .flat_map(|s| {
            [&s.source_mean, &s.source_std, &s.target_mean, &s.target_std].map(|v| Tensor::from_vec(v.clone()))
        })
        .collect();
    let named = gt.named_tensors();
    let mut records: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    for (n, t) in STAT_NAMES.iter().zip(&stat_tensors) {
        records.push((n, t));
    }
    write_container(path, GT_MAGIC, &header, &records)
}

pub fn load_gt(path: &Path) -> Result<(GradTransformer, GtHeader)> {
    let (header, mut records): (GtHeader, _) = read_container(path, GT_MAGIC)?;
    let mut gt = GradTransformer::new(header.config.clone())?;
    let names: Vec<String> = gt.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(gt.tensors_mut()) {
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
    if header.stats {
        let mut v = Vec::with_capacity(4);
        for n in STAT_NAMES {
            v.push(take_record(&mut records, n)?.into_data());
        }
        let mut it = v.into_iter();
        let mut next = || it.next().expect("four statistics");
        gt.stats = Some(Standardizer {
            source_mean: next(),
            source_std: next(),
            target_mean: next(),
            target_std: next(),
        });
    }
    Ok((gt, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{split_train_val, TupleManifest};

    fn small_config() -> GtConfig {
        GtConfig {
            d_hidden: 16,
            enc_layers: 1,
            dec_layers: 2,
            n_heads: 2,
            mlp_mult: 2,
            source_blocks: 2,
            source_dim: 6,
            target_blocks: 3,
            target_dim: 5,
            standardize: true,
            dropout: 0.0,
            init_seed: 3,
        }
    }

    fn random_tuple(rng: &mut Rng, cfg: &GtConfig, id: usize) -> UpdateTuple {
        let s = rng.gaussian(&[cfg.source_blocks * cfg.source_dim], 1.0);
        let t = rng.gaussian(&[cfg.target_blocks * cfg.target_dim], 0.5);
        UpdateTuple {
            source: UpdateVector::from_flat(ModelTag::Source, cfg.source_layout(), s.data()).unwrap(),
            target: UpdateVector::from_flat(ModelTag::Target, cfg.target_layout(), t.data()).unwrap(),
            shadow_id: id,
            step: 0,
        }
    }

    pub(super) fn dataset(cfg: &GtConfig, tuples: Vec<UpdateTuple>) -> TupleDataset {
        let (train_indices, val_indices) = split_train_val(tuples.len(), 0.95, 1);
        let lm = crate::lm::LmConfig::tiny();
        let manifest = TupleManifest {
            version: 1,
            source_lm: lm.clone(),
            target_lm: lm,
            source_adapter: Default::default(),
            target_adapter: Default::default(),
            source_layout: cfg.source_layout(),
            target_layout: cfg.target_layout(),
            curation: crate::curation::CurationConfig {
                shadow_count: 1,
                shadow_size: 1,
                harvest: 1,
                train: Default::default(),
                materialize_dense: false,
            },
            seed: 0,
            source_root: String::new(),
            target_root: String::new(),
            skipped: vec![],
            tuples: tuples
                .iter()
                .map(|t| crate::curation::TupleMeta {
                    shadow_id: t.shadow_id,
                    step: t.step,
                })
                .collect(),
            train_indices,
            val_indices,
        };
        TupleDataset { manifest, tuples }
    }

    #[test]
    fn segment_round_trip_and_reverse() {
        let cfg = small_config();
        let mut rng = Rng::new(1);
        let t = random_tuple(&mut rng, &cfg, 0);
        let l = cfg.target_layout();
        for rev in [false, true] {
            let seq = segment(&t.target, &l, rev).unwrap();
            assert_eq!(seq.len(), 3);
            assert_eq!(desegment(seq, &l, ModelTag::Target, rev).unwrap(), t.target);
        }
        let seq = segment(&t.source, &cfg.source_layout(), true).unwrap();
        assert_eq!(seq[0], t.source.blocks[1]);
        assert!(segment(&t.source, &l, false).is_err());
    }

    #[test]
    fn causal_in_target_blocks() {
        let cfg = small_config();
        let gt = GradTransformer::new(cfg.clone()).unwrap();
        let mut rng = Rng::new(2);
        let t = random_tuple(&mut rng, &cfg, 0);
        let base = gt.teacher_forced_forward(&t.source.blocks, &t.target.blocks).unwrap();
        assert_eq!(base.len(), 3);
        for j in 0..3 {
            let mut tgt = t.target.blocks.clone();
            tgt[j].iter_mut().for_each(|x| *x += 1.5);
            let out = gt.teacher_forced_forward(&t.source.blocks, &tgt).unwrap();
            for i in 0..=j {
                assert_eq!(out[i], base[i], "position {i} moved when block {j} changed");
            }
            if j + 1 < 3 {
                assert_ne!(out[j + 1], base[j + 1]);
            }
        }
    }

    #[test]
    fn generation_matches_teacher_forcing() {
        let cfg = small_config();
        let mut rng = Rng::new(4);
        let tuples: Vec<UpdateTuple> = (0..6).map(|i| random_tuple(&mut rng, &cfg, i)).collect();
        let mut gt = GradTransformer::new(cfg).unwrap();
        let refs: Vec<&UpdateTuple> = tuples.iter().collect();
        gt.stats = Some(Standardizer::fit(&refs).unwrap());
        for t in &tuples {
            let out = gt.generate(&t.source, Feedback::Embed, false).unwrap();
            let again = gt.generate(&t.source, Feedback::Embed, false).unwrap();
            assert_eq!(out, again);
            let tf = gt.teacher_forced_forward(&t.source.blocks, &out.blocks).unwrap();
            assert_eq!(tf, out.blocks);
        }
    }

    #[test]
    fn standardizer_floor_and_round_trip() {
        let cfg = small_config();
        let mut rng = Rng::new(5);
        let mut tuples: Vec<UpdateTuple> = (0..8).map(|i| random_tuple(&mut rng, &cfg, i)).collect();
        for t in &mut tuples {
            t.source.blocks[0][0] = 7.0;
        }
        let refs: Vec<&UpdateTuple> = tuples.iter().collect();
        let s = Standardizer::fit(&refs).unwrap();
        assert_eq!(s.source_std[0], STD_FLOOR);
        assert_eq!(s.source(&tuples[0].source.to_flat())[0], 0.0);
        let mut mean = vec![0f64; s.source_mean.len()];
        for t in &tuples {
            for (m, z) in mean.iter_mut().zip(s.source(&t.source.to_flat())) {
                *m += z as f64 / tuples.len() as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 1e-5));
        let x = tuples[3].target.to_flat();
        let back = s.invert_target(&s.target(&x));
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn objective_paths_agree() {
        let cfg = small_config();
        let mut rng = Rng::new(6);
        let tuples: Vec<UpdateTuple> = (0..4).map(|i| random_tuple(&mut rng, &cfg, i)).collect();
        let gt = GradTransformer::new(GtConfig {
            standardize: false,
            ..cfg.clone()
        })
        .unwrap();
        let refs: Vec<&UpdateTuple> = tuples.iter().collect();
        let (loss, _) = batch_gradients(&gt, &refs, false, None).unwrap();
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for t in &tuples {
            pred.extend(gt.teacher_forced_forward(&t.source.blocks, &t.target.blocks).unwrap().concat());
            truth.extend(t.target.to_flat());
        }
        let direct = block_objective(&pred, &truth, tuples.len() * cfg.target_blocks);
        assert!((direct - loss as f64).abs() < 1e-6 * direct.max(1.0), "{direct} vs {loss}");
    }

    #[test]
    fn single_tuple_overfits() {
        let cfg = small_config();
        let mut rng = Rng::new(7);
        let t = random_tuple(&mut rng, &cfg, 0);
        let mut gt = GradTransformer::new(GtConfig {
            standardize: false,
            ..cfg
        })
        .unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(3e-3, 0.0));
        let mut last = f32::INFINITY;
        for _ in 0..500 {
            let (loss, grads) = batch_gradients(&gt, &[&t], false, None).unwrap();
            last = loss / gt.config.target_dim as f32;
            opt.step(&mut gt.tensors_mut(), &grads).unwrap();
        }
        assert!(last < 1e-3, "mse {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config();
        let mut rng = Rng::new(8);
        let tuples: Vec<UpdateTuple> = (0..20).map(|i| random_tuple(&mut rng, &cfg, i)).collect();
        let data = dataset(&cfg, tuples);
        let out = train(
            GradTransformer::new(cfg).unwrap(),
            &data,
            &GtTrainConfig {
                epochs: 2,
                batch_size: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.val_mse.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.gtgt");
        save_gt(&path, &out.model, &GtProvenance::default()).unwrap();
        let (back, header) = load_gt(&path).unwrap();
        assert!(header.stats);
        assert_eq!(back, out.model);
    }
}
