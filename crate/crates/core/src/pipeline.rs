//! End-to-end orchestration driven by one JSON configuration.
//!
//! Stages run in order `roots → curate → train-gt → client → pool → update →
//! eval`. Each stage records a digest of the configuration it depends on in
//! `run_manifest.json`; a stage whose digest and artifacts are unchanged is
//! skipped unless forced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clients::{client_finetune, load_client_dir, pool, save_client_result, ClientResult, Mechanism, PoolMode};
use crate::curation::{
    curate, load_tuples, load_update, save_tuples, save_update, Layout, Roots, TupleDataset, UpdateVector,
};
use crate::error::{Error, Result};
use crate::eval::{run_benchmark, write_report, BenchmarkContext, PgrReport, Scenario};
use crate::format::{hash_bytes, write_atomic};
use crate::gt::{self, load_gt, save_gt, Feedback, GradTransformer, GtConfig, GtProvenance, GtTrainConfig};
use crate::lm::{
    init_lm, load_checkpoint, pretrain_lm, save_checkpoint, AdapterConfig, LmConfig, LoraTrainConfig, TransformerLm,
};
use crate::rng::Rng;
use crate::tasks::{
    generate_dataset, generate_mixture, split_clients, split_public_private, split_shadow, ClientShard, ClientSplit,
    Dataset, TaskKind, TaskSpec,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub length: usize,
    #[serde(default = "default_modulus")]
    pub modulus: u32,
    /// Size of the full dataset before the public/private split.
    pub examples: usize,
}

fn default_modulus() -> u32 {
    10
}

/// Full-parameter warm start of both roots on a public mixture of all tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub examples: usize,
    /// Share of the configured task in the mixture; the rest is split evenly
    /// between the other task kinds.
    pub task_fraction: f64,
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Marker token for the configured task during pretraining. A marker
    /// other than the task's own leaves the skill latent: the roots learn it
    /// under a different prompt format that fine-tuning has to bridge.
    #[serde(default)]
    pub task_marker: Option<u32>,
    /// Directory of reusable root checkpoints keyed by digest.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSection {
    pub d_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub mlp_mult: usize,
    pub standardize: bool,
    #[serde(default)]
    pub dropout: f32,
    #[serde(default)]
    pub init_seed: u64,
    /// Inference-time options used by the `update` stage.
    #[serde(default)]
    pub feedback: Feedback,
    #[serde(default)]
    pub reverse_blocks: bool,
    pub train: GtTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    pub count: usize,
    pub split: ClientSplit,
    pub train_ratio: f64,
    /// Cap on each client's train split; the surplus moves to its test split.
    #[serde(default)]
    pub train_examples: Option<usize>,
    pub mechanism: Mechanism,
    pub train: LoraTrainConfig,
    #[serde(default)]
    pub pool: PoolMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scenarios: Vec<Scenario>,
    /// Training of the directly fine-tuned target; defaults to `clients.train`.
    #[serde(default)]
    pub ceiling: Option<LoraTrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    pub source: LmConfig,
    pub target: LmConfig,
    pub adapter: AdapterConfig,
    pub curation: crate::curation::CurationConfig,
    pub gt: GtSection,
    pub clients: ClientsConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// The desk-scale default configuration.
    pub fn desk() -> Self {
        let lora = LoraTrainConfig {
            lr: 1e-2,
            steps: 400,
            batch_size: 16,
            grad_clip: 1.0,
            ..LoraTrainConfig::default()
        };
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            task: TaskConfig { kind: TaskKind::Modsum, length: 2, modulus: 10, examples: 2000 },
            pretrain: PretrainConfig {
                examples: 4000,
                task_fraction: 0.3,
                steps: 1000,
                lr: 3e-3,
                batch_size: 32,
                seed: 1,
                task_marker: Some(crate::tasks::vocab::FREE),
                cache_dir: None,
            },
            source: LmConfig::tiny(),
            target: LmConfig::large(),
            adapter: AdapterConfig::default(),
            curation: crate::curation::CurationConfig {
                shadow_count: 32,
                shadow_size: 64,
                harvest: 16,
                train: lora.clone(),
                materialize_dense: false,
            },
            gt: GtSection {
                d_hidden: 128,
                enc_layers: 2,
                dec_layers: 2,
                n_heads: 4,
                mlp_mult: 2,
                standardize: true,
                dropout: 0.0,
                init_seed: 0,
                feedback: Feedback::Embed,
                reverse_blocks: false,
                train: GtTrainConfig { lr: 8e-5, ..GtTrainConfig::default() },
            },
            clients: ClientsConfig {
                count: 1,
                split: ClientSplit::Uniform,
                train_ratio: 0.5,
                train_examples: Some(64),
                mechanism: Mechanism::Plain,
                train: lora,
                pool: PoolMode::Mean,
            },
            eval: EvalConfig {
                scenarios: vec![
                    Scenario::forward("desk"),
                    Scenario { name: "reverse".into(), feedback: Feedback::Embed, reverse_blocks: true },
                ],
                ceiling: None,
            },
        }
    }

    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "config".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        if self.task.examples < 4 {
            return Err(Error::config("task.examples", "need at least 4 examples"));
        }
        let p = &self.pretrain;
        if !(0.0..=1.0).contains(&p.task_fraction) {
            return Err(Error::config("pretrain.task_fraction", "must lie in [0, 1]"));
        }
        if p.steps > 0 && (p.examples == 0 || p.batch_size == 0 || !(p.lr > 0.0)) {
            return Err(Error::config("pretrain", "examples, batch_size and lr must be positive"));
        }
        self.source.validate("source")?;
        self.target.validate("target")?;
        if let Some(m) = p.task_marker {
            let vocab = self.source.vocab_size.min(self.target.vocab_size);
            if m < crate::tasks::vocab::FREE && m != self.task.kind.marker() {
                return Err(Error::config("pretrain.task_marker", format!("token {m} is reserved")));
            }
            if m as usize >= vocab {
                return Err(Error::config("pretrain.task_marker", format!("token {m} outside the {vocab}-token vocabulary")));
            }
        }
        let need = self.task_spec().max_sequence_len();
        for (field, lm) in [("source", &self.source), ("target", &self.target)] {
            if lm.max_seq_len < need {
                return Err(Error::config(
                    format!("{field}.max_seq_len"),
                    format!("{} is shorter than the task's {need} tokens", lm.max_seq_len),
                ));
            }
        }
        self.adapter.validate("adapter")?;
        for (field, lm) in [("source", &self.source), ("target", &self.target)] {
            if self.adapter.rank > lm.d_model {
                return Err(Error::config("adapter.rank", format!("exceeds {field}.d_model {}", lm.d_model)));
            }
        }
        self.curation.validate("curation")?;
        if self.curation.shadow_size > self.task.examples - self.task.examples / 2 {
            return Err(Error::config(
                "curation.shadow_size",
                format!("larger than the public half of {} examples", self.task.examples),
            ));
        }
        self.gt_config()?.validate("gt")?;
        self.gt.train.validate("gt.train")?;
        let c = &self.clients;
        if c.count == 0 {
            return Err(Error::config("clients.count", "must be positive"));
        }
        if !(c.train_ratio > 0.0 && c.train_ratio < 1.0) {
            return Err(Error::config("clients.train_ratio", "must lie in (0, 1)"));
        }
        if c.train_examples == Some(0) {
            return Err(Error::config("clients.train_examples", "must be positive"));
        }
        c.mechanism.validate("clients.mechanism")?;
        c.train.validate("clients.train")?;
        if let Some(t) = &self.eval.ceiling {
            t.validate("eval.ceiling")?;
        }
        if self.eval.scenarios.is_empty() {
            return Err(Error::config("eval.scenarios", "at least one scenario is required"));
        }
        for (i, s) in self.eval.scenarios.iter().enumerate() {
            s.validate(&format!("eval.scenarios[{i}]"))?;
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task.kind,
            length: self.task.length,
            modulus: self.task.modulus,
            seed: stage_seed(self.seed, "data"),
            marker: None,
        }
    }

    pub fn source_layout(&self) -> Layout {
        Layout::for_adapters(&self.adapter, &self.source, self.curation.materialize_dense)
    }

    pub fn target_layout(&self) -> Layout {
        Layout::for_adapters(&self.adapter, &self.target, self.curation.materialize_dense)
    }

    pub fn gt_config(&self) -> Result<GtConfig> {
        let mut c = GtConfig::for_layouts(&self.source_layout(), &self.target_layout())?;
        let g = &self.gt;
        c.d_hidden = g.d_hidden;
        c.enc_layers = g.enc_layers;
        c.dec_layers = g.dec_layers;
        c.n_heads = g.n_heads;
        c.mlp_mult = g.mlp_mult;
        c.standardize = g.standardize;
        c.dropout = g.dropout;
        c.init_seed = g.init_seed ^ stage_seed(self.seed, "gt-init");
        Ok(c)
    }

    pub fn digest(&self) -> Result<String> {
        digest_of(self)
    }
}

/// Per-stage seed derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    Rng::new(master).derive_named(stage).next_u64()
}

fn digest_of<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(hash_bytes(&serde_json::to_vec(value)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub digest: String,
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Splits derived from the task config and master seed.
pub struct Splits {
    pub public: Dataset,
    pub private: Dataset,
    pub shadows: Vec<Dataset>,
    pub shards: Vec<ClientShard>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub force: bool,
    pub workers: usize,
    manifest: RunManifest,
    roots: Option<(TransformerLm, TransformerLm)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool, workers: usize) -> Result<Self> {
        config.validate()?;
        let path = config.output_dir.join("run_manifest.json");
        let mut manifest: RunManifest = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?)?
        } else {
            RunManifest::default()
        };
        manifest.tool_version = TOOL_VERSION.to_string();
        manifest.config_digest = config.digest()?;
        Ok(Pipeline { config, force, workers: workers.max(1), manifest, roots: None })
    }

    pub fn out(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn source_root_path(&self) -> PathBuf {
        self.out().join("roots").join("source.gtck")
    }
    pub fn target_root_path(&self) -> PathBuf {
        self.out().join("roots").join("target.gtck")
    }
    pub fn tuples_dir(&self) -> PathBuf {
        self.out().join("tuples")
    }
    pub fn gt_path(&self) -> PathBuf {
        self.out().join("gt").join("model.gtgt")
    }
    pub fn clients_dir(&self) -> PathBuf {
        self.out().join("clients")
    }
    pub fn pooled_path(&self) -> PathBuf {
        self.out().join("pooled").join("source_update.gtuv")
    }
    pub fn update_path(&self) -> PathBuf {
        self.out().join("update").join("target_update.gtuv")
    }
    pub fn report_path(&self) -> PathBuf {
        self.out().join("report.csv")
    }

    fn roots_digest(&self) -> Result<String> {
        let c = &self.config;
        let mut p = c.pretrain.clone();
        p.cache_dir = None;
        digest_of(&(
            "roots",
            &p,
            &c.source,
            &c.target,
            (c.task.kind, c.task.length, c.task.modulus),
        ))
    }

    fn curate_digest(&self) -> Result<String> {
        let c = &self.config;
        digest_of(&("curate", self.roots_digest()?, c.seed, &c.task, &c.adapter, &c.curation))
    }

    fn gt_digest(&self) -> Result<String> {
        let c = &self.config;
        let mut g = c.gt.clone();
        g.feedback = Feedback::Embed;
        g.reverse_blocks = false;
        digest_of(&("train-gt", self.curate_digest()?, &g))
    }

    fn client_digest(&self) -> Result<String> {
        let c = &self.config;
        digest_of(&("client", self.roots_digest()?, c.seed, &c.task, &c.adapter, &c.curation.materialize_dense, &c.clients))
    }

    fn pool_digest(&self) -> Result<String> {
        digest_of(&("pool", self.client_digest()?, self.config.clients.pool))
    }

    fn update_digest(&self) -> Result<String> {
        let g = &self.config.gt;
        digest_of(&("update", self.pool_digest()?, self.gt_digest()?, g.feedback, g.reverse_blocks))
    }

    fn eval_digest(&self) -> Result<String> {
        digest_of(&("eval", self.pool_digest()?, self.gt_digest()?, &self.config.eval, &self.config.clients.train))
    }

    fn up_to_date(&self, stage: &str, digest: &str) -> bool {
        !self.force
            && self
                .manifest
                .stages
                .get(stage)
                .is_some_and(|r| r.digest == digest && r.artifacts.iter().all(|a| a.exists()))
    }

    fn record(&mut self, stage: &str, digest: String, artifacts: Vec<PathBuf>, started: Instant) -> Result<()> {
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord { digest, artifacts, seconds: started.elapsed().as_secs_f64() },
        );
        write_atomic(
            &self.out().join("run_manifest.json"),
            &serde_json::to_vec_pretty(&self.manifest)?,
        )
    }

    fn skip_notice(stage: &str) {
        log::warn!("{stage}: outputs are up to date for this configuration, skipping (use --force to rerun)");
    }

    /// Deterministic data splits for the current master seed.
    pub fn splits(&self) -> Result<Splits> {
        let c = &self.config;
        let spec = c.task_spec();
        let full = generate_dataset(&spec, c.task.examples)?;
        let data_seed = spec.seed;
        let (private, public) = split_public_private(&full, data_seed);
        let shadows = split_shadow(&public, c.curation.shadow_count, c.curation.shadow_size, data_seed)?;
        let mut shards = split_clients(&private, c.clients.count, &c.clients.split, c.clients.train_ratio, data_seed)?;
        if let Some(cap) = c.clients.train_examples {
            shards.iter_mut().for_each(|s| s.cap_train(cap));
        }
        Ok(Splits { public, private, shadows, shards })
    }

    /// Builds or loads the pretrained source and target roots.
    pub fn stage_roots(&mut self) -> Result<StageStatus> {
        let digest = self.roots_digest()?;
        let (sp, tp) = (self.source_root_path(), self.target_root_path());
        if self.up_to_date("roots", &digest) {
            Self::skip_notice("roots");
            return Ok(StageStatus::Skipped);
        }
        let started = Instant::now();
        let cache = self.config.pretrain.cache_dir.clone();
        let cached = |tag: &str| cache.as_ref().map(|d| d.join(format!("{tag}-{}.gtck", &digest[..16])));
        let mut models = Vec::with_capacity(2);
        for (tag, lm, path) in [("source", self.config.source.clone(), &sp), ("target", self.config.target.clone(), &tp)] {
            let model = match cached(tag).filter(|p| p.exists()) {
                Some(p) => load_checkpoint(&p)?.model,
                None => {
                    let m = self.pretrain_root(tag, &lm)?;
                    if let Some(p) = cached(tag) {
                        save_checkpoint(&p, &m, None, self.config.pretrain.seed, self.config.pretrain.steps as u64)?;
                    }
                    m
                }
            };
            save_checkpoint(path, &model, None, self.config.pretrain.seed, self.config.pretrain.steps as u64)?;
            models.push(model);
        }
        let target = models.pop().expect("two roots");
        let source = models.pop().expect("two roots");
        self.roots = Some((source, target));
        self.record("roots", digest, vec![sp, tp], started)?;
        Ok(StageStatus::Ran)
    }

    fn pretrain_root(&self, tag: &str, lm: &LmConfig) -> Result<TransformerLm> {
        let p = &self.config.pretrain;
        let t = &self.config.task;
        let mut model = init_lm(lm, Rng::new(p.seed).derive_named(tag).next_u64())?;
        if p.steps == 0 {
            return Ok(model);
        }
        let specs: Vec<TaskSpec> = TaskKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &kind)| TaskSpec {
                kind,
                length: t.length,
                modulus: t.modulus,
                seed: p.seed.wrapping_add(1000 + i as u64),
                marker: if kind == t.kind { p.task_marker } else { None },
            })
            .collect();
        let rest = (1.0 - p.task_fraction) / (specs.len() - 1) as f64;
        let weights: Vec<f64> = specs.iter().map(|s| if s.kind == t.kind { p.task_fraction } else { rest }).collect();
        let mixture = generate_mixture(&specs, &weights, p.examples, p.seed)?;
        let train = LoraTrainConfig {
            lr: p.lr,
            steps: p.steps,
            batch_size: p.batch_size,
            grad_clip: 1.0,
            seed: p.seed,
            ..LoraTrainConfig::default()
        };
        log::info!("pretraining {tag} root for {} steps", p.steps);
        pretrain_lm(&mut model, &mixture, &train).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { stage: format!("roots ({tag})"), detail },
            other => other,
        })?;
        Ok(model)
    }

    /// The roots, loaded from disk when an earlier run produced them.
    pub fn roots(&mut self) -> Result<&(TransformerLm, TransformerLm)> {
        if self.roots.is_none() {
            let s = load_checkpoint(&self.source_root_path())?.model;
            let t = load_checkpoint(&self.target_root_path())?.model;
            self.roots = Some((s, t));
        }
        Ok(self.roots.as_ref().expect("roots loaded"))
    }

    fn curation_config(&self) -> crate::curation::CurationConfig {
        let mut c = self.config.curation.clone();
        c.train.seed ^= stage_seed(self.config.seed, "curation-train");
        c
    }

    pub fn stage_curate(&mut self) -> Result<StageStatus> {
        let digest = self.curate_digest()?;
        if self.up_to_date("curate", &digest) {
            Self::skip_notice("curate");
            return Ok(StageStatus::Skipped);
        }
        let started = Instant::now();
        let splits = self.splits()?;
        let cfg = self.curation_config();
        let seed = stage_seed(self.config.seed, "curation");
        let workers = self.workers;
        let adapter = self.config.adapter.clone();
        let (s, t) = self.roots()?;
        let roots = Roots { source: s, target: t, source_adapter: &adapter, target_adapter: &adapter };
        let data = curate(&roots, &splits.shadows, &cfg, seed, workers)?;
        let dir = self.tuples_dir();
        save_tuples(&dir, &data)?;
        log::info!("curate: {} tuples, {} skipped runs", data.len(), data.manifest.skipped.len());
        self.record("curate", digest, vec![dir.join("manifest.json"), dir.join("tuples.bin")], started)?;
        Ok(StageStatus::Ran)
    }

    pub fn load_tuples(&self) -> Result<TupleDataset> {
        let (s, t) = (self.config.source_layout(), self.config.target_layout());
        load_tuples(&self.tuples_dir(), Some((&s, &t)))
    }

    fn gt_train_config(&self) -> GtTrainConfig {
        let mut c = self.config.gt.train.clone();
        c.seed ^= stage_seed(self.config.seed, "gt-train");
        c
    }

    pub fn stage_train_gt(&mut self) -> Result<StageStatus> {
        let digest = self.gt_digest()?;
        if self.up_to_date("train-gt", &digest) {
            Self::skip_notice("train-gt");
            return Ok(StageStatus::Skipped);
        }
        let started = Instant::now();
        let data = self.load_tuples()?;
        let model = GradTransformer::new(self.config.gt_config()?)?;
        let train = self.gt_train_config();
        let out = gt::train(model, &data, &train)?;
        let provenance = GtProvenance {
            tuples_digest: data.digest()?,
            train: Some(train),
            val_mse: out.val_mse.clone(),
            best: out.best,
        };
        let path = self.gt_path();
        save_gt(&path, &out.model, &provenance)?;
        let log_path = path.with_file_name("train_log.json");
        write_atomic(
            &log_path,
            &serde_json::to_vec_pretty(&serde_json::json!({
                "epoch_losses": out.epoch_losses,
                "val_mse": out.val_mse,
                "best": out.best,
            }))?,
        )?;
        self.record("train-gt", digest, vec![path, log_path], started)?;
        Ok(StageStatus::Ran)
    }

    pub fn load_gt(&self) -> Result<GradTransformer> {
        let (gt, header) = load_gt(&self.gt_path())?;
        let (s, t) = (self.config.source_layout(), self.config.target_layout());
        if header.source_layout != s || header.target_layout != t {
            return Err(Error::Format(format!(
                "Grad-Transformer layouts source {} target {} do not match the configured source {s} target {t}",
                header.source_layout, header.target_layout
            )));
        }
        Ok(gt)
    }

    fn client_train(&self, id: usize) -> LoraTrainConfig {
        let mut c = self.config.clients.train.clone();
        c.seed ^= Rng::new(stage_seed(self.config.seed, "clients")).derive(id as u64).next_u64();
        c
    }

    pub fn stage_clients(&mut self) -> Result<StageStatus> {
        let digest = self.client_digest()?;
        if self.up_to_date("client", &digest) {
            Self::skip_notice("client");
            return Ok(StageStatus::Skipped);
        }
        let started = Instant::now();
        let splits = self.splits()?;
        let dir = self.clients_dir();
        if dir.exists() {
            for e in fs::read_dir(&dir)? {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "gtcu") {
                    fs::remove_file(p)?;
                }
            }
        }
        let tuples = load_tuples(&self.tuples_dir(), None).ok();
        let trains: Vec<LoraTrainConfig> = (0..splits.shards.len()).map(|i| self.client_train(i)).collect();
        let cfg = self.config.clone();
        let (source, _) = self.roots()?;
        let expected = match &tuples {
            Some(t) => t.manifest.source_root.clone(),
            None => source.digest(),
        };
        let mut paths = Vec::new();
        for (i, shard) in splits.shards.iter().enumerate() {
            let r = client_finetune(
                source,
                &expected,
                i,
                &shard.train,
                &cfg.adapter,
                &cfg.clients.mechanism,
                &trains[i],
                cfg.curation.materialize_dense,
            )?;
            let p = dir.join(format!("client_{i:03}.gtcu"));
            save_client_result(&p, &r)?;
            paths.push(p);
        }
        self.record("client", digest, paths, started)?;
        Ok(StageStatus::Ran)
    }

    pub fn load_clients(&self) -> Result<Vec<ClientResult>> {
        let clients = load_client_dir(&self.clients_dir())?;
        let layout = self.config.source_layout();
        for c in &clients {
            c.update.expect_layout(&layout)?;
        }
        Ok(clients)
    }

    pub fn stage_pool(&mut self) -> Result<StageStatus> {
        let digest = self.pool_digest()?;
        if self.up_to_date("pool", &digest) {
            Self::skip_notice("pool");
            return Ok(StageStatus::Skipped);
        }
        let started = Instant::now();
        let clients = self.load_clients()?;
        let updates: Vec<&UpdateVector> = clients.iter().map(|c| &c.update).collect();
        let pooled = pool(&updates, self.config.clients.pool)?;
        let path = self.pooled_path();
        let note = format!("{:?} of {} client updates", self.config.clients.pool, clients.len());
        save_update(&path, &pooled, &note)?;
        self.record("pool", digest, vec![path], started)?;
        Ok(StageStatus::Ran)
    }

    pub fn stage_update(&mut self) -> Result<StageStatus> {
        let digest = self.update_digest()?;
        if self.up_to_date("update", &digest) {
            Self::skip_notice("update");
            return Ok(StageStatus::Skipped);
        }
        let started = Instant::now();
        let (pooled, _) = load_update(&self.pooled_path())?;
        let gt = self.load_gt()?;
        let g = &self.config.gt;
        let generated = gt.generate(&pooled, g.feedback, g.reverse_blocks)?;
        let path = self.update_path();
        save_update(&path, &generated, &format!("generated with {:?} feedback, reverse_blocks={}", g.feedback, g.reverse_blocks))?;
        self.record("update", digest, vec![path], started)?;
        Ok(StageStatus::Ran)
    }

    fn ceiling_config(&self) -> LoraTrainConfig {
        let mut c = self.config.eval.ceiling.clone().unwrap_or_else(|| self.config.clients.train.clone());
        c.seed ^= stage_seed(self.config.seed, "ceiling");
        c
    }

    /// Scores all scenarios and writes the reports plus a combined `report.csv`.
    pub fn stage_eval(&mut self) -> Result<(StageStatus, Vec<PgrReport>)> {
        let digest = self.eval_digest()?;
        let json_paths: Vec<PathBuf> = self
            .config
            .eval
            .scenarios
            .iter()
            .map(|s| self.out().join("reports").join(&s.name).join("report.json"))
            .collect();
        if self.up_to_date("eval", &digest) {
            Self::skip_notice("eval");
            let reports = json_paths
                .iter()
                .map(|p| Ok(serde_json::from_slice(&fs::read(p)?)?))
                .collect::<Result<Vec<PgrReport>>>()?;
            return Ok((StageStatus::Skipped, reports));
        }
        let started = Instant::now();
        let splits = self.splits()?;
        let clients = self.load_clients()?;
        let gt = self.load_gt()?;
        let ceiling = self.ceiling_config();
        let cfg = self.config.clone();
        let config_digest = self.manifest.config_digest.clone();
        let (source, target) = self.roots()?;
        let ctx = BenchmarkContext {
            source_root: source,
            target_root: target,
            source_adapter: &cfg.adapter,
            target_adapter: &cfg.adapter,
            dense: cfg.curation.materialize_dense,
            gt: &gt,
            shards: &splits.shards,
            clients: &clients,
            ceiling: &ceiling,
            pool: cfg.clients.pool,
            task: format!("{:?}-{}", cfg.task.kind, cfg.task.length).to_lowercase(),
            seed: cfg.seed,
            config_digest,
        };
        let reports = run_benchmark(&ctx, &cfg.eval.scenarios)?;
        let mut artifacts = Vec::new();
        let mut combined = Vec::new();
        for (i, r) in reports.iter().enumerate() {
            let csv_path = write_report(self.out(), r)?;
            let body = fs::read(&csv_path)?;
            // keep a single header line in the combined file
            let skip = if i == 0 { 0 } else { body.iter().position(|&b| b == b'\n').map_or(body.len(), |p| p + 1) };
            combined.extend_from_slice(&body[skip..]);
            artifacts.push(csv_path);
        }
        artifacts.extend(json_paths);
        let report = self.report_path();
        write_atomic(&report, &combined)?;
        artifacts.push(report);
        self.record("eval", digest, artifacts, started)?;
        Ok((StageStatus::Ran, reports))
    }

    /// All stages in order.
    pub fn run(&mut self) -> Result<Vec<PgrReport>> {
        self.stage_roots()?;
        self.stage_curate()?;
        self.stage_train_gt()?;
        self.stage_clients()?;
        self.stage_pool()?;
        self.stage_update()?;
        Ok(self.stage_eval()?.1)
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}
