//! Trains the Grad-Transformer on a curated tuple dataset and prints the
//! validation curve.
//!
//! ```text
//! cargo run --release --example train_gt -- [output_dir] [epochs]
//! ```

use std::path::PathBuf;

use grad_transformer::pipeline::{Pipeline, PipelineConfig};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::desk();
    cfg.output_dir = args.next().map_or_else(|| PathBuf::from("runs/example-curate"), PathBuf::from);
    if let Some(e) = args.next() {
        cfg.gt.train.epochs = e.parse().expect("epochs");
    }
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut p = Pipeline::new(cfg, false, workers)?;
    p.stage_roots()?;
    p.stage_curate()?;
    println!("train-gt: {:?}", p.stage_train_gt()?);

    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(p.gt_path().with_file_name("train_log.json"))?)?;
    let val = log["val_mse"].as_array().cloned().unwrap_or_default();
    let train = log["epoch_losses"].as_array().cloned().unwrap_or_default();
    println!("epoch  train objective  val mse");
    for (i, v) in val.iter().enumerate() {
        let t = if i == 0 { "-".to_string() } else { format!("{:.4}", train[i - 1].as_f64().unwrap_or(f64::NAN)) };
        println!("{i:>5}  {t:>15}  {:.4}", v.as_f64().unwrap_or(f64::NAN));
    }
    println!("kept epoch {}", log["best"]);
    let gt = p.load_gt()?;
    println!("{} parameters", gt.n_params());
    Ok(())
}
