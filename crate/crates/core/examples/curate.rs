//! Builds a tuple dataset from paired small/large shadow runs.
//!
//! ```text
//! cargo run --release --example curate -- [output_dir] [shadow_count]
//! ```

use std::path::PathBuf;

use grad_transformer::pipeline::{Pipeline, PipelineConfig};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::desk();
    cfg.output_dir = args.next().map_or_else(|| PathBuf::from("runs/example-curate"), PathBuf::from);
    if let Some(k) = args.next() {
        cfg.curation.shadow_count = k.parse().expect("shadow_count");
    }
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut p = Pipeline::new(cfg, false, workers)?;
    println!("roots:  {:?}", p.stage_roots()?);
    println!("curate: {:?}", p.stage_curate()?);

    let data = p.load_tuples()?;
    let m = &data.manifest;
    println!(
        "{} tuples from {} shadow sets ({} skipped), {} train / {} val",
        data.len(),
        m.curation.shadow_count,
        m.skipped.len(),
        m.train_indices.len(),
        m.val_indices.len()
    );
    println!("source layout {}\ntarget layout {}", m.source_layout, m.target_layout);
    for t in data.tuples.iter().step_by(m.curation.harvest).take(4) {
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        println!(
            "  shadow {:>2} step {:>3}: |source| {:.4} |target| {:.4}",
            t.shadow_id,
            t.step,
            norm(&t.source.to_flat()),
            norm(&t.target.to_flat())
        );
    }
    Ok(())
}
