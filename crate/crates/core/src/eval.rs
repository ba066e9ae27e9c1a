//! Performance-gap-recovered scoring, benchmark reports and diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::{patch_llm, pool, ClientResult, Mechanism, PoolMode};
use crate::curation::TupleDataset;
use crate::error::{Error, Result};
use crate::format::{hash_bytes, write_atomic};
use crate::gt::{evaluate_mse, Feedback, GradTransformer};
use crate::lm::{finetune_lora, AdapterConfig, LoraTrainConfig, TransformerLm};
use crate::tasks::{combine, exact_match, ClientShard, Provenance};

const GAP_EPS: f64 = 1e-9;

/// `100 (p_hat - p_s) / (p_t - p_s)`.
pub fn pgr(p_hat: f64, p_s: f64, p_t: f64) -> Result<f64> {
    if (p_t - p_s).abs() <= GAP_EPS {
        return Err(Error::UndefinedGap { baseline: p_s, ceiling: p_t });
    }
    Ok(100.0 * (p_hat - p_s) / (p_t - p_s))
}

/// One evaluation condition applied at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub feedback: Feedback,
    #[serde(default)]
    pub reverse_blocks: bool,
}

impl Scenario {
    pub fn forward(name: &str) -> Self {
        Scenario { name: name.to_string(), feedback: Feedback::Embed, reverse_blocks: false }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = !self.name.is_empty()
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(Error::config(format!("{field}.name"), "must be a non-empty [A-Za-z0-9_-] identifier"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub client_id: usize,
    pub p_s: f64,
    pub p_t: f64,
    pub p_hat: f64,
    pub pgr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgrReport {
    pub scenario: String,
    pub task: String,
    pub seed: u64,
    pub epsilon_label: String,
    pub feedback: Feedback,
    pub reverse_blocks: bool,
    /// Means over clients.
    pub p_s: f64,
    pub p_t: f64,
    pub p_hat: f64,
    /// `None` when the ceiling equals the baseline.
    pub pgr: Option<f64>,
    /// Target root without any update, for reference.
    pub p_base: f64,
    pub clients: Vec<ClientRow>,
    pub config_digest: String,
}

impl PgrReport {
    pub fn digest(&self) -> Result<String> {
        Ok(hash_bytes(&serde_json::to_vec(self)?))
    }
}

/// Everything needed to score one trained pipeline.
pub struct BenchmarkContext<'a> {
    pub source_root: &'a TransformerLm,
    pub target_root: &'a TransformerLm,
    pub source_adapter: &'a AdapterConfig,
    pub target_adapter: &'a AdapterConfig,
    pub dense: bool,
    pub gt: &'a GradTransformer,
    pub shards: &'a [ClientShard],
    pub clients: &'a [ClientResult],
    /// Training setup for the directly fine-tuned target ceiling.
    pub ceiling: &'a LoraTrainConfig,
    pub pool: PoolMode,
    pub task: String,
    pub seed: u64,
    pub config_digest: String,
}

/// Scores every scenario. Baseline and ceiling are computed once and shared.
pub fn run_benchmark(ctx: &BenchmarkContext, scenarios: &[Scenario]) -> Result<Vec<PgrReport>> {
    if ctx.clients.len() != ctx.shards.len() {
        return Err(Error::Contract(format!(
            "{} client results for {} client shards",
            ctx.clients.len(),
            ctx.shards.len()
        )));
    }
    let p_s = ctx
        .clients
        .iter()
        .zip(ctx.shards)
        .map(|(c, shard)| {
            let patched = patch_llm(ctx.source_root, &c.update, ctx.source_adapter, ctx.dense)?;
            patched.exact_match(&shard.test)
        })
        .collect::<Result<Vec<_>>>()?;

    let parts: Vec<_> = ctx.shards.iter().map(|s| &s.train).collect();
    let combined = combine(&parts, Provenance::Private);
    let ceiling = finetune_lora(ctx.target_root, ctx.target_adapter, &combined, ctx.ceiling, None)?;
    let p_t = ctx
        .shards
        .iter()
        .map(|s| exact_match(ctx.target_root, Some(&ceiling.adapters), &s.test))
        .collect::<Result<Vec<_>>>()?;
    let base = ctx
        .shards
        .iter()
        .map(|s| exact_match(ctx.target_root, None, &s.test))
        .collect::<Result<Vec<_>>>()?;

    let updates: Vec<_> = ctx.clients.iter().map(|c| &c.update).collect();
    let pooled = pool(&updates, ctx.pool)?;
    let epsilon_label = epsilon_label(&ctx.clients[0].mechanism);

    let mut reports = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let generated = ctx.gt.generate(&pooled, sc.feedback, sc.reverse_blocks)?;
        let patched = patch_llm(ctx.target_root, &generated, ctx.target_adapter, ctx.dense)?;
        let p_hat = ctx
            .shards
            .iter()
            .map(|s| patched.exact_match(&s.test))
            .collect::<Result<Vec<_>>>()?;
        let clients = (0..ctx.shards.len())
            .map(|i| ClientRow {
                client_id: ctx.clients[i].client_id,
                p_s: p_s[i],
                p_t: p_t[i],
                p_hat: p_hat[i],
                pgr: pgr(p_hat[i], p_s[i], p_t[i]).ok(),
            })
            .collect();
        let (ms, mt, mh) = (mean(&p_s), mean(&p_t), mean(&p_hat));
        reports.push(PgrReport {
            scenario: sc.name.clone(),
            task: ctx.task.clone(),
            seed: ctx.seed,
            epsilon_label: epsilon_label.clone(),
            feedback: sc.feedback,
            reverse_blocks: sc.reverse_blocks,
            p_s: ms,
            p_t: mt,
            p_hat: mh,
            pgr: pgr(mh, ms, mt).ok(),
            p_base: mean(&base),
            clients,
            config_digest: ctx.config_digest.clone(),
        });
    }
    Ok(reports)
}

fn epsilon_label(m: &Mechanism) -> String {
    match m {
        Mechanism::Plain => "inf".to_string(),
        Mechanism::DpSgd(dp) => dp.epsilon_label(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Serialize)]
struct CsvRow<'a> {
    scenario: &'a str,
    client_id: String,
    #[serde(rename = "P_S")]
    p_s: f64,
    #[serde(rename = "P_T")]
    p_t: f64,
    #[serde(rename = "P_hat")]
    p_hat: f64,
    pgr: String,
    seed: u64,
    epsilon_label: &'a str,
}

/// CSV body: one row per client plus a `mean` row.
pub fn report_csv(report: &PgrReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |p: Option<f64>| p.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    let mut rows: Vec<CsvRow> = report
        .clients
        .iter()
        .map(|c| CsvRow {
            scenario: &report.scenario,
            client_id: c.client_id.to_string(),
            p_s: c.p_s,
            p_t: c.p_t,
            p_hat: c.p_hat,
            pgr: fmt(c.pgr),
            seed: report.seed,
            epsilon_label: &report.epsilon_label,
        })
        .collect();
    rows.push(CsvRow {
        scenario: &report.scenario,
        client_id: "mean".into(),
        p_s: report.p_s,
        p_t: report.p_t,
        p_hat: report.p_hat,
        pgr: fmt(report.pgr),
        seed: report.seed,
        epsilon_label: &report.epsilon_label,
    });
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Writes `reports/<scenario>/report.{json,csv}` under `dir` and returns the CSV path.
pub fn write_report(dir: &Path, report: &PgrReport) -> Result<PathBuf> {
    let sub = dir.join("reports").join(&report.scenario);
    write_atomic(&sub.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    let csv_path = sub.join("report.csv");
    write_atomic(&csv_path, &report_csv(report)?)?;
    Ok(csv_path)
}

/// Median of a non-empty slice (mean of the two middle values when even).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_per: usize,
    pub scores: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
    /// Median score never decreases along `points`.
    pub monotone: bool,
}

/// Runs `score(n_per, seed)` over the grid and checks the median trend.
pub fn shadow_size_sweep(
    n_per: &[usize],
    seeds: &[u64],
    mut score: impl FnMut(usize, u64) -> Result<f64>,
) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "at least one seed is required"));
    }
    let mut points = Vec::with_capacity(n_per.len());
    for &n in n_per {
        let scores = seeds.iter().map(|&s| score(n, s)).collect::<Result<Vec<_>>>()?;
        points.push(SweepPoint { n_per: n, median: median(&scores), scores });
    }
    let monotone = points.windows(2).all(|w| w[1].median >= w[0].median);
    Ok(SweepReport { points, seeds: seeds.to_vec(), monotone })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenGapEstimate {
    /// MSE on the partition the model was trained on.
    pub train_risk: f64,
    /// MSE on tuples curated from shadow sets never used in training.
    pub heldout_risk: f64,
    pub gap: f64,
}

pub fn gen_gap(gt: &GradTransformer, tuples: &TupleDataset, fresh: &TupleDataset, reverse: bool) -> Result<GenGapEstimate> {
    for (what, a, b) in [
        ("source", &fresh.manifest.source_layout, &tuples.manifest.source_layout),
        ("target", &fresh.manifest.target_layout, &tuples.manifest.target_layout),
    ] {
        if a != b {
            return Err(Error::Contract(format!("fresh {what} layout {a} differs from training layout {b}")));
        }
    }
    let train = tuples.train();
    let held: Vec<_> = fresh.tuples.iter().collect();
    if train.is_empty() || held.is_empty() {
        return Err(Error::Contract("generalization gap needs non-empty train and fresh tuples".into()));
    }
    let train_risk = evaluate_mse(gt, &train, reverse)? as f64;
    let heldout_risk = evaluate_mse(gt, &held, reverse)? as f64;
    Ok(GenGapEstimate { train_risk, heldout_risk, gap: heldout_risk - train_risk })
}
