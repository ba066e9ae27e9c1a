//! Non-IID clients fine-tune locally from the shared small root and the server
//! averages their updates. Each row scores one update on the union of client
//! test splits.
//!
//! ```text
//! cargo run --release --example federated_pool -- [clients] [alpha]
//! ```

use grad_transformer::clients::{client_finetune, patch_llm, pool, PoolMode};
use grad_transformer::pipeline::{Pipeline, PipelineConfig};
use grad_transformer::tasks::{generate_dataset, split_clients, ClientSplit, Dataset, TaskKind, TaskSpec};

fn main() -> grad_transformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let clients: usize = args.next().map_or(4, |s| s.parse().expect("clients"));
    let alpha: f64 = args.next().map_or(0.3, |s| s.parse().expect("alpha"));

    let mut cfg = PipelineConfig::desk();
    cfg.output_dir = std::env::temp_dir().join("gradtx-example-pool");
    cfg.pretrain.cache_dir = Some(std::env::temp_dir().join("gradtx-roots"));
    let (adapter, mechanism, train) = (cfg.adapter.clone(), cfg.clients.mechanism.clone(), cfg.clients.train.clone());
    let mut p = Pipeline::new(cfg, false, 1)?;
    p.stage_roots()?;
    let (source, _) = p.roots()?;
    let hash = source.digest();

    let private = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 7), 600)?;
    let split = ClientSplit::Dirichlet { alpha: vec![alpha] };
    let mut shards = split_clients(&private, clients, &split, 0.5, 7)?;
    for s in &mut shards {
        s.cap_train(64);
    }
    let test = Dataset::new(
        shards.iter().flat_map(|s| s.test.examples.iter().cloned()).collect(),
        private.provenance,
    );

    let mut results = Vec::new();
    println!("{:<8} {:>6} {:>6} {:>8}", "update", "train", "test", "exact");
    for (i, s) in shards.iter().enumerate() {
        let r = client_finetune(source, &hash, i, &s.train, &adapter, &mechanism, &train, false)?;
        let em = patch_llm(source, &r.update, &adapter, false)?.exact_match(&test)?;
        println!("client {i} {:>6} {:>6} {em:>8.3}", s.train.examples.len(), s.test.examples.len());
        results.push(r);
    }
    let updates: Vec<_> = results.iter().map(|r| &r.update).collect();
    for mode in [PoolMode::Mean, PoolMode::Sum] {
        let pooled = pool(&updates, mode)?;
        let em = patch_llm(source, &pooled, &adapter, false)?.exact_match(&test)?;
        println!("{:<8} {:>6} {:>6} {em:>8.3}", format!("{mode:?}").to_lowercase(), "", test.examples.len());
    }
    Ok(())
}
