//! Paired shadow fine-tuning runs and the tuple dataset they produce.
//!
//! Update vectors are stored block by block. Within a block the configured
//! weights appear in canonical `q, k, v, o` order, each contributing its `A`
//! factor row-major followed by its `B` factor row-major. With
//! `materialize_dense` each weight contributes the dense `s·B·A` instead.
//!
//! An update is measured from the shared adapter initialization: the factor
//! form holds `A − A⁰` and `B − B⁰`, so an untrained run yields the zero
//! vector. `A⁰` is regenerated from the adapter config's `init_seed`.

use std::fmt;
use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{hash_bytes, read_container, take_record, write_atomic, write_container};
use crate::lm::{
    adapter_delta, finetune_adapters, AdapterConfig, AdapterSet, AdapterTarget, LmConfig, LoraTrainConfig,
    TransformerLm, WeightName,
};
use crate::rng::Rng;
use crate::tasks::Dataset;
use crate::tensor::{read_u32, Tensor};

pub const TUPLES_MAGIC: &[u8; 4] = b"GTDX";
pub const UPDATE_MAGIC: &[u8; 4] = b"GTUV";
pub const TUPLES_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub block: usize,
    pub len: usize,
}

/// Ordered per-block vector lengths of one model's update vectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<BlockLayout>,
}

impl Layout {
    pub fn uniform(n_blocks: usize, len: usize) -> Self {
        Layout {
            blocks: (0..n_blocks).map(|block| BlockLayout { block, len }).collect(),
        }
    }

    /// Layout of the update vectors for `config` adapters on an `lm` model.
    pub fn for_adapters(config: &AdapterConfig, lm: &LmConfig, dense: bool) -> Self {
        let d = lm.d_model;
        let per_weight = if dense { d * d } else { 2 * config.rank * d };
        Layout::uniform(lm.n_blocks, per_weight * config.canonical_targets().len())
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// The common per-block length, if every block has the same one.
    pub fn block_len(&self) -> Option<usize> {
        let first = self.blocks.first()?.len;
        self.blocks.iter().all(|b| b.len == first).then_some(first)
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.blocks.iter().map(|b| format!("{}:{}", b.block, b.len)).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateVector {
    pub model_tag: ModelTag,
    pub layout: Layout,
    pub blocks: Vec<Vec<f32>>,
}

impl UpdateVector {
    pub fn new(model_tag: ModelTag, layout: Layout, blocks: Vec<Vec<f32>>) -> Result<Self> {
        let v = UpdateVector {
            model_tag,
            layout,
            blocks,
        };
        v.check()?;
        Ok(v)
    }

    pub fn zeros(model_tag: ModelTag, layout: Layout) -> Self {
        let blocks = layout.blocks.iter().map(|b| vec![0.0; b.len]).collect();
        UpdateVector {
            model_tag,
            layout,
            blocks,
        }
    }

    /// Splits a concatenated vector along `layout`.
    pub fn from_flat(model_tag: ModelTag, layout: Layout, flat: &[f32]) -> Result<Self> {
        if flat.len() != layout.total() {
            return Err(Error::Format(format!(
                "flat vector of length {} does not match layout {layout} (total {})",
                flat.len(),
                layout.total()
            )));
        }
        let mut blocks = Vec::with_capacity(layout.n_blocks());
        let mut at = 0;
        for b in &layout.blocks {
            blocks.push(flat[at..at + b.len].to_vec());
            at += b.len;
        }
        Ok(UpdateVector {
            model_tag,
            layout,
            blocks,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.blocks.len() != self.layout.n_blocks()
            || self.blocks.iter().zip(&self.layout.blocks).any(|(v, l)| v.len() != l.len)
        {
            let found: Vec<usize> = self.blocks.iter().map(Vec::len).collect();
            return Err(Error::Format(format!(
                "update vector blocks {found:?} do not match layout {}",
                self.layout
            )));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.blocks.concat()
    }

    pub fn expect_layout(&self, expected: &Layout) -> Result<()> {
        if &self.layout != expected {
            return Err(Error::Format(format!(
                "update layout {} does not match expected layout {expected}",
                self.layout
            )));
        }
        self.check()
    }

    /// Records as named tensors `block.<j>`.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(j, b)| (format!("block.{j}"), Tensor::from_vec(b.clone())))
            .collect()
    }
}

fn block_weights(adapters: &AdapterSet, block: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..adapters.targets.len())
        .filter(|&i| adapters.targets[i].block == block)
        .collect();
    idx.sort_by_key(|&i| adapters.targets[i].weight);
    idx
}

/// Concatenated factors (or dense deltas) of one attention block.
pub fn flatten_block(adapters: &AdapterSet, block: usize, dense: bool) -> Vec<f32> {
    let mut out = Vec::new();
    let deltas = dense.then(|| adapter_delta(adapters));
    for i in block_weights(adapters, block) {
        match &deltas {
            Some(d) => out.extend_from_slice(d[i].data()),
            None => {
                out.extend_from_slice(adapters.factors[i].a.data());
                out.extend_from_slice(adapters.factors[i].b.data());
            }
        }
    }
    out
}

pub fn flatten(adapters: &AdapterSet, model_tag: ModelTag, dense: bool) -> UpdateVector {
    let n_blocks = adapters.n_blocks();
    let blocks: Vec<Vec<f32>> = (0..n_blocks).map(|j| flatten_block(adapters, j, dense)).collect();
    let layout = Layout {
        blocks: blocks
            .iter()
            .enumerate()
            .map(|(block, v)| BlockLayout { block, len: v.len() })
            .collect(),
    };
    UpdateVector {
        model_tag,
        layout,
        blocks,
    }
}

/// Update of `adapters` relative to the initialization `init`.
pub fn update_vector(adapters: &AdapterSet, init: &AdapterSet, model_tag: ModelTag, dense: bool) -> UpdateVector {
    let mut u = flatten(adapters, model_tag, dense);
    if !dense {
        let base = flatten(init, model_tag, false);
        for (b, b0) in u.blocks.iter_mut().zip(&base.blocks) {
            b.iter_mut().zip(b0).for_each(|(x, x0)| *x -= x0);
        }
    }
    u
}

/// Inverse of [`update_vector`] for factor-form updates.
pub fn apply_update(update: &UpdateVector, init: &AdapterSet) -> Result<AdapterSet> {
    let base = flatten(init, update.model_tag, false);
    update.expect_layout(&base.layout)?;
    let mut sum = update.clone();
    for (b, b0) in sum.blocks.iter_mut().zip(&base.blocks) {
        b.iter_mut().zip(b0).for_each(|(x, x0)| *x += x0);
    }
    unflatten(&sum, init)
}

/// Rebuilds factor tensors from a factor-form update, using `template` for
/// rank, scaling and targets.
pub fn unflatten(update: &UpdateVector, template: &AdapterSet) -> Result<AdapterSet> {
    let expected = flatten(template, update.model_tag, false).layout;
    update.expect_layout(&expected)?;
    let mut out = template.clone();
    let (r, d) = (template.rank, template.d_model);
    for (j, block) in update.blocks.iter().enumerate() {
        let mut at = 0;
        for i in block_weights(template, j) {
            let f = &mut out.factors[i];
            f.a = Tensor::new(vec![r, d], block[at..at + r * d].to_vec())?;
            at += r * d;
            f.b = Tensor::new(vec![d, r], block[at..at + d * r].to_vec())?;
            at += d * r;
        }
    }
    Ok(out)
}

/// Reads a dense-form update back into per-target `[d × d]` deltas, in the
/// order of `targets`.
pub fn dense_deltas(update: &UpdateVector, targets: &[AdapterTarget], d_model: usize) -> Result<Vec<Tensor>> {
    let mut per_block: Vec<Vec<(WeightName, usize)>> = vec![Vec::new(); update.blocks.len()];
    for (i, t) in targets.iter().enumerate() {
        if t.block >= per_block.len() {
            return Err(Error::Format(format!(
                "target block {} outside update layout {}",
                t.block, update.layout
            )));
        }
        per_block[t.block].push((t.weight, i));
    }
    let mut out: Vec<Option<Tensor>> = vec![None; targets.len()];
    for (j, ws) in per_block.iter_mut().enumerate() {
        ws.sort();
        if update.blocks[j].len() != ws.len() * d_model * d_model {
            return Err(Error::Format(format!(
                "dense block {j} has {} values, expected {} for layout {}",
                update.blocks[j].len(),
                ws.len() * d_model * d_model,
                update.layout
            )));
        }
        for (n, &(_, i)) in ws.iter().enumerate() {
            let chunk = &update.blocks[j][n * d_model * d_model..(n + 1) * d_model * d_model];
            out[i] = Some(Tensor::new(vec![d_model, d_model], chunk.to_vec())?);
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every target filled")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateTuple {
    pub source: UpdateVector,
    pub target: UpdateVector,
    pub shadow_id: usize,
    /// Optimizer step (0-based) the snapshot was taken after.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    /// Number of shadow datasets.
    pub shadow_count: usize,
    pub shadow_size: usize,
    /// Snapshots kept from the end of every run.
    pub harvest: usize,
    pub train: LoraTrainConfig,
    #[serde(default)]
    pub materialize_dense: bool,
}

impl CurationConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.shadow_count == 0 {
            return Err(Error::config(format!("{field}.shadow_count"), "must be positive"));
        }
        if self.shadow_size == 0 {
            return Err(Error::config(format!("{field}.shadow_size"), "must be positive"));
        }
        if self.harvest == 0 {
            return Err(Error::config(format!("{field}.harvest"), "must be positive"));
        }
        if self.harvest > self.train.steps {
            return Err(Error::config(
                format!("{field}.harvest"),
                format!("window {} longer than the step budget {}", self.harvest, self.train.steps),
            ));
        }
        self.train.validate(&format!("{field}.train"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRun {
    pub shadow_id: usize,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleMeta {
    pub shadow_id: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleManifest {
    pub version: u32,
    pub source_lm: LmConfig,
    pub target_lm: LmConfig,
    pub source_adapter: AdapterConfig,
    pub target_adapter: AdapterConfig,
    pub source_layout: Layout,
    pub target_layout: Layout,
    pub curation: CurationConfig,
    pub seed: u64,
    pub source_root: String,
    pub target_root: String,
    pub skipped: Vec<SkippedRun>,
    pub tuples: Vec<TupleMeta>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TupleDataset {
    pub manifest: TupleManifest,
    pub tuples: Vec<UpdateTuple>,
}

impl TupleDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn train(&self) -> Vec<&UpdateTuple> {
        self.manifest.train_indices.iter().map(|&i| &self.tuples[i]).collect()
    }

    pub fn val(&self) -> Vec<&UpdateTuple> {
        self.manifest.val_indices.iter().map(|&i| &self.tuples[i]).collect()
    }

    /// SHA-256 over the on-disk payload and the manifest.
    pub fn digest(&self) -> Result<String> {
        let mut bytes = encode_tuples(&self.tuples);
        bytes.extend(serde_json::to_vec(&self.manifest)?);
        Ok(hash_bytes(&bytes))
    }
}

/// Paired models and adapter settings shared by every shadow run.
pub struct Roots<'m> {
    pub source: &'m TransformerLm,
    pub target: &'m TransformerLm,
    pub source_adapter: &'m AdapterConfig,
    pub target_adapter: &'m AdapterConfig,
}

/// Batch-order seed of shadow run `k`; source and target runs share it.
pub fn shadow_seed(seed: u64, k: usize) -> u64 {
    Rng::new(seed).derive(k as u64).derive_named("shadow-batches").next_u64()
}

struct RunOutcome {
    tuples: Vec<UpdateTuple>,
    skipped: Option<SkippedRun>,
}

fn shadow_run(roots: &Roots<'_>, shadow: &Dataset, k: usize, cfg: &CurationConfig, seed: u64) -> RunOutcome {
    let dense = cfg.materialize_dense;
    let train = LoraTrainConfig {
        seed: shadow_seed(seed, k),
        ..cfg.train.clone()
    };
    let run = |model: &TransformerLm, adapter: &AdapterConfig, tag: ModelTag| -> Result<Vec<UpdateVector>> {
        let init = AdapterSet::new(adapter, &model.config)?;
        let mut traj = Vec::new();
        let mut obs = |_step: usize, a: &AdapterSet| traj.push(update_vector(a, &init, tag, dense));
        finetune_adapters(model, init.clone(), shadow, &train, Some(&mut obs))?;
        Ok(traj)
    };
    let source = run(roots.source, roots.source_adapter, ModelTag::Source);
    let target = run(roots.target, roots.target_adapter, ModelTag::Target);
    let (source, target) = match (source, target) {
        (Ok(s), Ok(t)) => (s, t),
        (Err(e), _) | (_, Err(e)) => {
            return RunOutcome {
                tuples: Vec::new(),
                skipped: Some(SkippedRun {
                    shadow_id: k,
                    reason: e.to_string(),
                }),
            }
        }
    };
    let end = source.len().min(target.len());
    if end < cfg.harvest {
        return RunOutcome {
            tuples: Vec::new(),
            skipped: Some(SkippedRun {
                shadow_id: k,
                reason: format!("run stopped after {end} steps, shorter than the harvest window {}", cfg.harvest),
            }),
        };
    }
    let tuples = (end - cfg.harvest..end)
        .map(|step| UpdateTuple {
            source: source[step].clone(),
            target: target[step].clone(),
            shadow_id: k,
            step,
        })
        .collect();
    RunOutcome { tuples, skipped: None }
}

/// Fine-tunes one source and one target adapter set per shadow dataset,
/// both from the same roots, and keeps the last `harvest` snapshots of each
/// pair. Runs that diverge or stop too early are skipped and recorded.
pub fn curate(
    roots: &Roots<'_>,
    shadows: &[Dataset],
    cfg: &CurationConfig,
    seed: u64,
    workers: usize,
) -> Result<TupleDataset> {
    cfg.validate("curation")?;
    if shadows.is_empty() || shadows.iter().any(Dataset::is_empty) {
        return Err(Error::config("curation.shadows", "every shadow dataset must be nonempty"));
    }
    roots.source_adapter.validate("source_adapter")?;
    roots.target_adapter.validate("target_adapter")?;
    let source_root = roots.source.digest();
    let target_root = roots.target.digest();

    let job = |(k, shadow): (usize, &Dataset)| {
        let out = shadow_run(roots, shadow, k, cfg, seed);
        // every run must see the roots it was handed
        debug_assert_eq!(roots.source.digest(), source_root);
        out
    };
    let outcomes: Vec<RunOutcome> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Contract(e.to_string()))?;
        pool.install(|| shadows.par_iter().enumerate().map(job).collect())
    } else {
        shadows.iter().enumerate().map(job).collect()
    };
    if roots.source.digest() != source_root || roots.target.digest() != target_root {
        return Err(Error::Consistency("root weights changed during curation".into()));
    }

    let mut tuples = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        tuples.extend(o.tuples);
        if let Some(s) = o.skipped {
            log::warn!("shadow run {} skipped: {}", s.shadow_id, s.reason);
            skipped.push(s);
        }
    }
    let dense = cfg.materialize_dense;
    let (train_indices, val_indices) = split_train_val(tuples.len(), 0.95, seed);
    let manifest = TupleManifest {
        version: MANIFEST_VERSION,
        source_lm: roots.source.config.clone(),
        target_lm: roots.target.config.clone(),
        source_adapter: roots.source_adapter.clone(),
        target_adapter: roots.target_adapter.clone(),
        source_layout: Layout::for_adapters(roots.source_adapter, &roots.source.config, dense),
        target_layout: Layout::for_adapters(roots.target_adapter, &roots.target.config, dense),
        curation: cfg.clone(),
        seed,
        source_root,
        target_root,
        skipped,
        tuples: tuples
            .iter()
            .map(|t| TupleMeta {
                shadow_id: t.shadow_id,
                step: t.step,
            })
            .collect(),
        train_indices,
        val_indices,
    };
    Ok(TupleDataset { manifest, tuples })
}

/// Random partition of `0..n` into train and validation index sets, with
/// `round(n · train_fraction)` training items.
pub fn split_train_val(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).derive_named("train-val").shuffle(&mut order);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = if n >= 2 { n_train.clamp(1, n - 1) } else { n };
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn encode_tuples(tuples: &[UpdateTuple]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TUPLES_MAGIC);
    buf.extend_from_slice(&TUPLES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tuples.len() as u32).to_le_bytes());
    for t in tuples {
        for v in t.source.blocks.iter().chain(&t.target.blocks) {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateHeader {
    pub model_tag: ModelTag,
    pub layout: Layout,
    /// Free-form provenance, e.g. which clients were pooled.
    pub note: String,
}

/// Stores a single update vector as a `GTUV` container.
pub fn save_update(path: &Path, update: &UpdateVector, note: &str) -> Result<()> {
    let header = UpdateHeader {
        model_tag: update.model_tag,
        layout: update.layout.clone(),
        note: note.to_string(),
    };
    let records = update.records();
    let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_container(path, UPDATE_MAGIC, &header, &refs)
}

pub fn load_update(path: &Path) -> Result<(UpdateVector, UpdateHeader)> {
    let (header, mut records): (UpdateHeader, _) = read_container(path, UPDATE_MAGIC)?;
    let blocks = (0..header.layout.n_blocks())
        .map(|j| take_record(&mut records, &format!("block.{j}")).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    Ok((UpdateVector::new(header.model_tag, header.layout.clone(), blocks)?, header))
}

/// Writes `manifest.json` and `tuples.bin` into `dir`.
pub fn save_tuples(dir: &Path, data: &TupleDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("tuples.bin"), &encode_tuples(&data.tuples))?;
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&data.manifest)?)
}

/// Reads only the count field of a `tuples.bin` header.
pub fn read_tuple_count(path: &Path) -> Result<u32> {
    let mut r = BufReader::new(open(path)?);
    read_tuples_header(&mut r)
}

fn open(path: &Path) -> Result<fs::File> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::File::open(path)?)
}

fn read_tuples_header<R: Read>(r: &mut R) -> Result<u32> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TUPLES_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(TUPLES_MAGIC)
        )));
    }
    let version = read_u32(r)?;
    if version != TUPLES_VERSION {
        return Err(Error::Format(format!(
            "tuple file version {version} unsupported (expected {TUPLES_VERSION})"
        )));
    }
    read_u32(r)
}

/// Loads a tuple directory. When `expected` is given, its source and target
/// layouts must equal the manifest's.
pub fn load_tuples(dir: &Path, expected: Option<(&Layout, &Layout)>) -> Result<TupleDataset> {
    let manifest: TupleManifest = serde_json::from_reader(BufReader::new(open(&dir.join("manifest.json"))?))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if let Some((src, tgt)) = expected {
        if src != &manifest.source_layout || tgt != &manifest.target_layout {
            return Err(Error::Format(format!(
                "tuple layouts do not match the current configs: stored source {} target {}, expected source {src} target {tgt}",
                manifest.source_layout, manifest.target_layout
            )));
        }
    }
    let mut r = BufReader::new(open(&dir.join("tuples.bin"))?);
    let count = read_tuples_header(&mut r)? as usize;
    if count != manifest.tuples.len() {
        return Err(Error::Format(format!(
            "tuples.bin holds {count} tuples but the manifest lists {}",
            manifest.tuples.len()
        )));
    }
    let (ns, nt) = (manifest.source_layout.total(), manifest.target_layout.total());
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * (ns + nt) * 4 {
        return Err(Error::Format(format!(
            "tuples.bin payload is {} bytes, expected {} for source layout {} and target layout {}",
            bytes.len(),
            count * (ns + nt) * 4,
            manifest.source_layout,
            manifest.target_layout
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut tuples = Vec::with_capacity(count);
    for (i, chunk) in floats.chunks_exact(ns + nt).enumerate() {
        let meta = manifest.tuples[i];
        tuples.push(UpdateTuple {
            source: UpdateVector::from_flat(ModelTag::Source, manifest.source_layout.clone(), &chunk[..ns])?,
            target: UpdateVector::from_flat(ModelTag::Target, manifest.target_layout.clone(), &chunk[ns..])?,
            shadow_id: meta.shadow_id,
            step: meta.step,
        });
    }
    Ok(TupleDataset { manifest, tuples })
}
