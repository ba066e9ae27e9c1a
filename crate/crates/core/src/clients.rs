//! Client-side fine-tuning, pooling of client updates and server-side patching.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{apply_update, dense_deltas, update_vector, Layout, ModelTag, UpdateVector};
use crate::error::{Error, Result};
use crate::format::{read_container, take_record, write_container};
use crate::lm::{adapter_gradients, finetune_lora, AdapterConfig, AdapterSet, LoraTrainConfig, TransformerLm};
use crate::rng::Rng;
use crate::tasks::{exact_match, Dataset, Example};
use crate::tensor::Tensor;

pub const CLIENT_MAGIC: &[u8; 4] = b"GTCU";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Per-example gradient norm bound `C`.
    pub clip_norm: f32,
    /// `σ`; the added noise has standard deviation `σ·C`.
    pub noise_multiplier: f32,
    /// Expected lot size `L`; each example joins a lot with probability `L/N`.
    pub lot_size: usize,
    pub steps: usize,
    pub lr: f32,
    pub delta: f64,
    /// Externally computed privacy budget, recorded as given.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl DpConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("{field}.clip_norm"), "must be positive"));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::config(format!("{field}.noise_multiplier"), "must be non-negative"));
        }
        if self.lot_size == 0 {
            return Err(Error::config(format!("{field}.lot_size"), "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{field}.lr"), "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("{field}.delta"), "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn epsilon_label(&self) -> String {
        self.epsilon.map_or_else(|| "none".to_string(), |e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mechanism {
    Plain,
    DpSgd(DpConfig),
}

impl Mechanism {
    pub fn label(&self) -> &'static str {
        match self {
            Mechanism::Plain => "plain",
            Mechanism::DpSgd(_) => "dp-sgd",
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match self {
            Mechanism::Plain => Ok(()),
            Mechanism::DpSgd(dp) => dp.validate(&format!("{field}.dp")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub steps: usize,
    pub train_examples: usize,
    pub first_loss: Option<f32>,
    pub final_loss: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientResult {
    pub client_id: usize,
    pub update: UpdateVector,
    pub metrics: ClientMetrics,
    pub mechanism: Mechanism,
    pub root_hash: String,
}

/// Local fine-tuning of client `client_id` from the shared source root.
/// Only the flattened update and scalar metrics leave this function.
#[allow(clippy::too_many_arguments)]
pub fn client_finetune(
    root: &TransformerLm,
    expected_root: &str,
    client_id: usize,
    data: &Dataset,
    adapter: &AdapterConfig,
    mechanism: &Mechanism,
    train: &LoraTrainConfig,
    dense: bool,
) -> Result<ClientResult> {
    let root_hash = root.digest();
    if root_hash != expected_root {
        return Err(Error::Consistency(format!(
            "client {client_id}: source root {root_hash} differs from the curation root {expected_root}"
        )));
    }
    mechanism.validate("client.mechanism")?;
    let init = AdapterSet::new(adapter, &root.config)?;
    let (adapters, losses) = match mechanism {
        Mechanism::Plain => {
            let out = finetune_lora(root, adapter, data, train, None)?;
            (out.adapters, out.losses)
        }
        Mechanism::DpSgd(dp) => dp_finetune(root, adapter, data, dp, train.seed)?,
    };
    Ok(ClientResult {
        client_id,
        update: update_vector(&adapters, &init, ModelTag::Source, dense),
        metrics: ClientMetrics {
            steps: losses.len(),
            train_examples: data.len(),
            first_loss: losses.first().copied(),
            final_loss: losses.last().copied(),
        },
        mechanism: mechanism.clone(),
        root_hash,
    })
}

/// Indices drawn independently with probability `q` each.
pub fn poisson_lot(rng: &mut Rng, n: usize, q: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.uniform() < q).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpStep {
    /// Norm of every per-example gradient before clipping.
    pub norms: Vec<f32>,
    /// Norm of every per-example gradient after clipping.
    pub clipped_norms: Vec<f32>,
}

fn norm(grads: &[Tensor]) -> f32 {
    crate::graph::global_norm(grads.iter())
}

/// One descent step: clip each per-example gradient to norm `C`, average over
/// the expected lot size `L`, add `N(0, σ²C²)` noise per coordinate and move
/// against the result.
pub fn dp_sgd_step(
    params: &mut [&mut Tensor],
    per_example: &[Vec<Tensor>],
    cfg: &DpConfig,
    lr: f32,
    rng: &mut Rng,
) -> Result<DpStep> {
    if !(cfg.clip_norm > 0.0) {
        return Err(Error::config("dp.clip_norm", "must be positive"));
    }
    for g in per_example {
        if g.len() != params.len() || g.iter().zip(params.iter()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Contract("per-example gradient does not match parameters".into()));
        }
    }
    let mut sum: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut norms = Vec::with_capacity(per_example.len());
    let mut clipped_norms = Vec::with_capacity(per_example.len());
    for g in per_example {
        let n = norm(g);
        let div = (n / cfg.clip_norm).max(1.0);
        let clipped: Vec<Tensor> = g
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|x| *x /= div);
                t
            })
            .collect();
        let cn = norm(&clipped);
        debug_assert!(cn <= cfg.clip_norm * (1.0 + 1e-5), "clipped norm {cn} above {}", cfg.clip_norm);
        norms.push(n);
        clipped_norms.push(cn);
        for (s, t) in sum.iter_mut().zip(&clipped) {
            for (a, &b) in s.iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }
    let lot = cfg.lot_size as f32;
    let noise_std = cfg.noise_multiplier * cfg.clip_norm;
    for (p, s) in params.iter_mut().zip(&sum) {
        for (w, &a) in p.data_mut().iter_mut().zip(s) {
            let mut g = a / lot;
            if noise_std > 0.0 {
                g += noise_std * rng.normal() as f32;
            }
            *w -= lr * g;
        }
    }
    Ok(DpStep { norms, clipped_norms })
}

/// Per-example gradients of the adapter factors, one micro-batch per example.
pub fn per_example_gradients(
    model: &TransformerLm,
    adapters: &AdapterSet,
    examples: &[&Example],
) -> Result<(Vec<f32>, Vec<Vec<Tensor>>)> {
    let mut losses = Vec::with_capacity(examples.len());
    let mut grads = Vec::with_capacity(examples.len());
    for e in examples {
        let (l, g) = adapter_gradients(model, adapters, &[*e])?;
        losses.push(l);
        grads.push(g);
    }
    Ok((losses, grads))
}

fn dp_finetune(
    root: &TransformerLm,
    adapter: &AdapterConfig,
    data: &Dataset,
    dp: &DpConfig,
    seed: u64,
) -> Result<(AdapterSet, Vec<f32>)> {
    if data.is_empty() {
        return Err(Error::config("client.dataset", "dataset is empty"));
    }
    let mut adapters = AdapterSet::new(adapter, &root.config)?;
    let base = Rng::new(seed);
    let mut lots = base.derive_named("dp-lots");
    let mut noise = base.derive_named("dp-noise");
    let q = (dp.lot_size as f64 / data.len() as f64).min(1.0);
    let mut losses = Vec::with_capacity(dp.steps);
    for step in 0..dp.steps {
        let lot: Vec<&Example> = poisson_lot(&mut lots, data.len(), q)
            .into_iter()
            .map(|i| &data.examples[i])
            .collect();
        let (l, grads) = per_example_gradients(root, &adapters, &lot)?;
        if l.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                stage: "client".into(),
                detail: format!("non-finite loss at dp step {step}"),
            });
        }
        let mean = if l.is_empty() { f32::NAN } else { l.iter().sum::<f32>() / l.len() as f32 };
        losses.push(mean);
        dp_sgd_step(&mut adapters.tensors_mut(), &grads, dp, dp.lr, &mut noise)?;
    }
    Ok((adapters, losses))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Sum,
}

pub fn pool(updates: &[&UpdateVector], mode: PoolMode) -> Result<UpdateVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Contract("cannot pool an empty list of updates".into()))?;
    for u in updates {
        u.expect_layout(&first.layout)?;
    }
    // f64 accumulation keeps the mean of identical copies exact.
    let mut acc: Vec<Vec<f64>> = first.layout.blocks.iter().map(|b| vec![0.0; b.len]).collect();
    for u in updates {
        for (a, b) in acc.iter_mut().zip(&u.blocks) {
            for (a, &x) in a.iter_mut().zip(b) {
                *a += x as f64;
            }
        }
    }
    let div = match mode {
        PoolMode::Mean => updates.len() as f64,
        PoolMode::Sum => 1.0,
    };
    let blocks = acc
        .into_iter()
        .map(|b| b.into_iter().map(|x| (x / div) as f32).collect())
        .collect();
    UpdateVector::new(first.model_tag, first.layout.clone(), blocks)
}

/// A target model with a generated update attached.
pub struct PatchedLlm<'m> {
    pub model: Cow<'m, TransformerLm>,
    pub adapters: Option<AdapterSet>,
}

impl PatchedLlm<'_> {
    pub fn exact_match(&self, test: &Dataset) -> Result<f64> {
        exact_match(&self.model, self.adapters.as_ref(), test)
    }
}

/// Attaches `update` to `root`: factor-form updates become an adapter set on
/// the unchanged root, dense updates are folded into a copy.
pub fn patch_llm<'m>(
    root: &'m TransformerLm,
    update: &UpdateVector,
    adapter: &AdapterConfig,
    dense: bool,
) -> Result<PatchedLlm<'m>> {
    let expected = Layout::for_adapters(adapter, &root.config, dense);
    update.expect_layout(&expected)?;
    let template = AdapterSet::new(adapter, &root.config)?;
    if dense {
        let deltas = dense_deltas(update, &template.targets, root.config.d_model)?;
        Ok(PatchedLlm {
            model: Cow::Owned(root.with_deltas(&template.targets, &deltas)?),
            adapters: None,
        })
    } else {
        Ok(PatchedLlm {
            model: Cow::Borrowed(root),
            adapters: Some(apply_update(update, &template)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientHeader {
    pub client_id: usize,
    pub mechanism: Mechanism,
    pub metrics: ClientMetrics,
    pub root_hash: String,
    pub model_tag: ModelTag,
    pub layout: Layout,
}

pub fn save_client_result(path: &Path, r: &ClientResult) -> Result<()> {
    let header = ClientHeader {
        client_id: r.client_id,
        mechanism: r.mechanism.clone(),
        metrics: r.metrics.clone(),
        root_hash: r.root_hash.clone(),
        model_tag: r.update.model_tag,
        layout: r.update.layout.clone(),
    };
    let records = r.update.records();
    let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_container(path, CLIENT_MAGIC, &header, &refs)
}

pub fn load_client_result(path: &Path) -> Result<ClientResult> {
    let (header, mut records): (ClientHeader, _) = read_container(path, CLIENT_MAGIC)?;
    let mut blocks = Vec::with_capacity(header.layout.n_blocks());
    for j in 0..header.layout.n_blocks() {
        blocks.push(take_record(&mut records, &format!("block.{j}"))?.into_data());
    }
    Ok(ClientResult {
        client_id: header.client_id,
        update: UpdateVector::new(header.model_tag, header.layout, blocks)?,
        metrics: header.metrics,
        mechanism: header.mechanism,
        root_hash: header.root_hash,
    })
}

/// Every `*.gtcu` file in `dir`, ordered by file name.
pub fn load_client_dir(dir: &Path) -> Result<Vec<ClientResult>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gtcu"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingArtifact(dir.join("*.gtcu")));
    }
    paths.iter().map(|p| load_client_result(p)).collect()
}
