//! Runs the whole pipeline at several shadow-set sizes and reports the median
//! generated-update score per size. Each run takes a few minutes.
//!
//! ```text
//! cargo run --release --example shadow_sweep -- [sizes] [seeds]
//! cargo run --release --example shadow_sweep -- 16,64,256 0,1,2
//! ```

use std::path::PathBuf;

use grad_transformer::eval::shadow_size_sweep;
use grad_transformer::pipeline::{Pipeline, PipelineConfig};

fn list<T: std::str::FromStr>(s: Option<String>, default: &str) -> Vec<T> {
    s.as_deref()
        .unwrap_or(default)
        .split(',')
        .map(|x| x.trim().parse().ok().expect("comma separated numbers"))
        .collect()
}

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let sizes: Vec<usize> = list(args.next(), "16,64,256");
    let seeds: Vec<u64> = list(args.next(), "0");
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());

    let report = shadow_size_sweep(&sizes, &seeds, |n, seed| {
        let mut cfg = PipelineConfig::desk();
        cfg.seed = seed;
        cfg.curation.shadow_size = n;
        cfg.output_dir = PathBuf::from(format!("runs/sweep-{n}-{seed}"));
        cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
        cfg.eval.scenarios.retain(|s| !s.reverse_blocks);
        let reports = Pipeline::new(cfg, false, workers)?.run()?;
        let r = &reports[0];
        println!("n_per {n:>4} seed {seed}: P_S {:.4} P_T {:.4} P_hat {:.4}", r.p_s, r.p_t, r.p_hat);
        Ok(r.p_hat)
    })?;
    println!("n_per  median P_hat");
    for pt in &report.points {
        println!("{:>5}  {:.4}", pt.n_per, pt.median);
    }
    println!("non-decreasing: {}", report.monotone);
    Ok(())
}
