//! Plain versus DP-SGD client fine-tuning at a few noise levels.
//!
//! ```text
//! cargo run --release --example dp_client -- [steps]
//! ```

use grad_transformer::clients::{client_finetune, patch_llm, DpConfig, Mechanism};
use grad_transformer::pipeline::{Pipeline, PipelineConfig};
use grad_transformer::tasks::{generate_dataset, TaskKind, TaskSpec};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let steps: usize = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let mut cfg = PipelineConfig::desk();
    cfg.output_dir = std::env::temp_dir().join("gradtx-example-dp");
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    let adapter = cfg.adapter.clone();
    let mut train = cfg.clients.train.clone();
    train.steps = steps;
    let mut p = Pipeline::new(cfg, false, 1)?;
    p.stage_roots()?;
    let (source, _) = p.roots()?;
    let hash = source.digest();

    let data = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 3), 64)?;
    let test = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 4), 200)?;
    let mut mechanisms = vec![("plain".to_string(), Mechanism::Plain)];
    for sigma in [0.0, 0.5, 1.0, 2.0] {
        let dp = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: sigma,
            lot_size: 16,
            steps,
            lr: 0.5,
            delta: 1e-5,
            epsilon: None,
        };
        mechanisms.push((format!("dp sigma={sigma}"), Mechanism::DpSgd(dp)));
    }
    println!("{:<14} {:>10} {:>10} {:>8}", "mechanism", "first loss", "last loss", "exact");
    for (name, m) in &mechanisms {
        let r = client_finetune(source, &hash, 0, &data, &adapter, m, &train, false)?;
        let em = patch_llm(source, &r.update, &adapter, false)?.exact_match(&test)?;
        println!(
            "{name:<14} {:>10.4} {:>10.4} {em:>8.3}",
            r.metrics.first_loss.unwrap_or(f32::NAN),
            r.metrics.final_loss.unwrap_or(f32::NAN)
        );
    }
    Ok(())
}
