//! Fine-tunes a rank-2 LoRA adapter on the small root and reports exact match
//! before and after. The roots are pretrained once and cached.
//!
//! ```text
//! cargo run --release --example finetune_lora -- [steps] [train_examples]
//! ```

use grad_transformer::clients::patch_llm;
use grad_transformer::curation::{save_update, update_vector, ModelTag};
use grad_transformer::lm::{finetune_lora, AdapterSet};
use grad_transformer::pipeline::{Pipeline, PipelineConfig};
use grad_transformer::tasks::{exact_match, generate_dataset, TaskKind, TaskSpec};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(400, |s| s.parse().expect("steps"));
    let n: usize = args.next().map_or(64, |s| s.parse().expect("train_examples"));

    let mut cfg = PipelineConfig::desk();
    cfg.output_dir = std::env::temp_dir().join("gradtx-example-lora");
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    let adapter = cfg.adapter.clone();
    let mut tc = cfg.clients.train.clone();
    tc.steps = steps;
    let mut p = Pipeline::new(cfg, false, 1)?;
    p.stage_roots()?;
    let (source, _) = p.roots()?;

    let train = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 1), n)?;
    let test = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 2), 200)?;
    println!("before: exact match {:.3}", exact_match(source, None, &test)?);

    let out = finetune_lora(source, &adapter, &train, &tc, None)?;
    for (i, l) in out.losses.iter().enumerate().step_by((steps / 8).max(1)) {
        println!("  step {i:>4} loss {l:.4}");
    }
    let init = AdapterSet::new(&adapter, &source.config)?;
    let update = update_vector(&out.adapters, &init, ModelTag::Source, false);
    let patched = patch_llm(source, &update, &adapter, false)?;
    println!("after:  exact match {:.3}", patched.exact_match(&test)?);
    println!("update layout {}", update.layout);

    let path = p.out().join("source_update.gtuv");
    save_update(&path, &update, "example fine-tune")?;
    println!("wrote {}", path.display());
    Ok(())
}
