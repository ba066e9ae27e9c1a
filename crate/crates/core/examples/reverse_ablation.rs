//! Scores the generated update under forward and reversed block order, with
//! either feedback mode. Reuses any stages already present in the run directory.
//!
//! ```text
//! cargo run --release --example reverse_ablation -- [output_dir]
//! ```

use std::path::PathBuf;

use grad_transformer::eval::Scenario;
use grad_transformer::gt::Feedback;
use grad_transformer::pipeline::{Pipeline, PipelineConfig};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut cfg = PipelineConfig::desk();
    cfg.output_dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from);
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    cfg.eval.scenarios = vec![];
    for feedback in [Feedback::Embed, Feedback::Hidden] {
        for reverse_blocks in [false, true] {
            let name = format!("{}-{}", format!("{feedback:?}").to_lowercase(), if reverse_blocks { "reverse" } else { "forward" });
            cfg.eval.scenarios.push(Scenario { name, feedback, reverse_blocks });
        }
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let reports = Pipeline::new(cfg, false, workers)?.run()?;
    println!("{:<16} {:>7} {:>7} {:>7} {:>8}", "scenario", "P_S", "P_T", "P_hat", "PGR");
    for r in &reports {
        let pgr = r.pgr.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        println!("{:<16} {:>7.4} {:>7.4} {:>7.4} {pgr:>8}", r.scenario, r.p_s, r.p_t, r.p_hat);
    }
    Ok(())
}
