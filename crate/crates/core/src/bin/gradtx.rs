use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use grad_transformer::gt::Feedback;
use grad_transformer::inspect::{inspect, render};
use grad_transformer::pipeline::{exit_code, Pipeline, PipelineConfig, StageStatus};
use grad_transformer::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gradtx", version, about = "Transfer small-model LoRA updates to a larger model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (JSON). Defaults to the built-in desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for parallel-safe stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print a machine-readable summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    feedback: Option<FeedbackArg>,
    /// Generate target blocks in descending order.
    #[arg(long, global = true)]
    reverse_blocks: bool,
    /// Train and run the Grad-Transformer on raw, unstandardized blocks.
    #[arg(long, global = true)]
    no_standardize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedbackArg {
    Embed,
    Hidden,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the roots if needed and build the tuple dataset.
    Curate,
    /// Train the Grad-Transformer on the curated tuples.
    TrainGt,
    /// Fine-tune every client's small model.
    Client,
    /// Pool the client updates.
    Pool,
    /// Generate the large-model update from the pooled update.
    Update,
    /// Score all configured scenarios.
    Eval,
    /// Run every stage in order.
    Pipeline,
    /// Print the header and summary statistics of an artifact.
    Inspect { file: PathBuf },
    /// Print the built-in desk configuration.
    DefaultConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.feedback {
        let f = match f {
            FeedbackArg::Embed => Feedback::Embed,
            FeedbackArg::Hidden => Feedback::Hidden,
        };
        cfg.gt.feedback = f;
        cfg.eval.scenarios.iter_mut().for_each(|s| s.feedback = f);
    }
    if cli.reverse_blocks {
        cfg.gt.reverse_blocks = true;
        cfg.eval.scenarios.iter_mut().for_each(|s| s.reverse_blocks = true);
    }
    if cli.no_standardize {
        cfg.gt.standardize = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn status(s: StageStatus) -> &'static str {
    match s {
        StageStatus::Ran => "ran",
        StageStatus::Skipped => "skipped",
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Inspect { file } => {
            let summary = inspect(file)?;
            if !cli.json {
                print!("{}", render(&summary));
            }
            return Ok(summary);
        }
        Command::DefaultConfig => {
            let cfg = PipelineConfig::desk();
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(serde_json::Value::Null);
        }
        _ => {}
    }
    let cfg = load_config(cli)?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut p = Pipeline::new(cfg, cli.force, workers)?;
    let mut stages = serde_json::Map::new();
    let mut put = |name: &str, s: StageStatus| {
        eprintln!("{name}: {}", status(s));
        stages.insert(name.to_string(), json!(status(s)));
    };
    let mut reports = None;
    match cli.command {
        Command::Curate => {
            put("roots", p.stage_roots()?);
            put("curate", p.stage_curate()?);
        }
        Command::TrainGt => put("train-gt", p.stage_train_gt()?),
        Command::Client => put("client", p.stage_clients()?),
        Command::Pool => put("pool", p.stage_pool()?),
        Command::Update => put("update", p.stage_update()?),
        Command::Eval => {
            let (s, r) = p.stage_eval()?;
            put("eval", s);
            reports = Some(r);
        }
        Command::Pipeline => {
            put("roots", p.stage_roots()?);
            put("curate", p.stage_curate()?);
            put("train-gt", p.stage_train_gt()?);
            put("client", p.stage_clients()?);
            put("pool", p.stage_pool()?);
            put("update", p.stage_update()?);
            let (s, r) = p.stage_eval()?;
            put("eval", s);
            reports = Some(r);
        }
        Command::Inspect { .. } | Command::DefaultConfig => unreachable!(),
    }
    if let Some(rs) = &reports {
        for r in rs {
            let pgr = r.pgr.map_or("undefined".to_string(), |v| format!("{v:.2}"));
            eprintln!(
                "{}: P_S {:.4} P_T {:.4} P_hat {:.4} PGR {pgr}",
                r.scenario, r.p_s, r.p_t, r.p_hat
            );
        }
    }
    Ok(json!({
        "output_dir": p.out(),
        "config_digest": p.manifest().config_digest,
        "stages": stages,
        "reports": reports,
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            if cli.json && !summary.is_null() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            match &e {
                Error::Config { .. } => eprintln!("invalid configuration: {e}"),
                Error::MissingArtifact(p) => eprintln!("missing artifact {}: run the upstream stage first", p.display()),
                Error::Divergence { .. } => eprintln!("numerical divergence: {e}"),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
