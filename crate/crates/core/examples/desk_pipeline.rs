//! Runs every stage of the desk configuration and prints the PGR table.
//!
//! ```text
//! cargo run --release --example desk_pipeline -- [output_dir] [seed]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use grad_transformer::pipeline::{Pipeline, PipelineConfig};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::desk();
    if let Some(dir) = args.next() {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    let t0 = Instant::now();
    let mut p = Pipeline::new(cfg, false, 1)?;
    let reports = p.run()?;
    for r in &reports {
        let pgr = r.pgr.map_or("undefined".to_string(), |v| format!("{v:.1}%"));
        println!(
            "{:<10} base {:.3}  P_S {:.3}  P_T {:.3}  P_hat {:.3}  PGR {pgr}",
            r.scenario, r.p_base, r.p_s, r.p_t, r.p_hat
        );
    }
    for (stage, rec) in &p.manifest().stages {
        println!("  {stage:<9} {:>7.1}s", rec.seconds);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
