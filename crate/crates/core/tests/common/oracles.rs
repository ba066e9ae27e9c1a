//! Oracles shared by the focused tests and the acceptance run.

use grad_transformer::clients::{client_finetune, dp_sgd_step, patch_llm, poisson_lot, pool, DpConfig, Mechanism, PoolMode};
use grad_transformer::curation::{update_vector, Layout, ModelTag, UpdateVector};
use grad_transformer::gt::{Feedback, GradTransformer, GtConfig};
use grad_transformer::lm::{adapter_gradients, forward, init_lm, AdapterConfig, AdapterSet, LmConfig, LoraTrainConfig};
use grad_transformer::rng::Rng;
use grad_transformer::tasks::{generate_dataset, TaskKind, TaskSpec};
use grad_transformer::tensor::Tensor;

pub fn dp(clip: f32, sigma: f32, lot: usize, steps: usize) -> DpConfig {
    DpConfig {
        clip_norm: clip,
        noise_multiplier: sigma,
        lot_size: lot,
        steps,
        lr: 0.05,
        delta: 1e-5,
        epsilon: None,
    }
}

fn norm(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

pub struct DpComparison {
    /// Coordinates whose bits differ between the two trajectories.
    pub mismatches: usize,
    pub coordinates: usize,
    pub nonempty_lots: usize,
    /// Largest per-example gradient norm seen; must stay below the clip bound.
    pub max_norm: f64,
    pub clip: f32,
    pub moved: bool,
}

/// Client fine-tuning through DP-SGD with `σ = 0` and an inactive clip bound,
/// against plain SGD on per-example gradients averaged over the expected lot
/// size, with the same Poisson lots, on a 4-example dataset.
pub fn dp_versus_plain_sgd() -> DpComparison {
    let lm = LmConfig::tiny();
    let root = init_lm(&lm, 3).unwrap();
    let data = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 11), 4).unwrap();
    let adapter = AdapterConfig::default();
    let cfg = dp(1e6, 0.0, 2, 12);
    let train = LoraTrainConfig {
        seed: 5,
        ..LoraTrainConfig::default()
    };
    let got = client_finetune(&root, &root.digest(), 0, &data, &adapter, &Mechanism::DpSgd(cfg.clone()), &train, false)
        .unwrap();

    let init = AdapterSet::new(&adapter, &lm).unwrap();
    let mut a = init.clone();
    let mut lots = Rng::new(train.seed).derive_named("dp-lots");
    let q = cfg.lot_size as f64 / data.len() as f64;
    let mut max_norm = 0.0f64;
    let mut nonempty_lots = 0;
    for _ in 0..cfg.steps {
        let lot = poisson_lot(&mut lots, data.len(), q);
        nonempty_lots += usize::from(!lot.is_empty());
        let grads: Vec<Vec<Tensor>> = lot
            .iter()
            .map(|&i| adapter_gradients(&root, &a, &[&data.examples[i]]).unwrap().1)
            .collect();
        for g in &grads {
            max_norm = max_norm.max(norm(g));
        }
        for (pi, p) in a.tensors_mut().into_iter().enumerate() {
            for (ci, w) in p.data_mut().iter_mut().enumerate() {
                let mut s = 0.0f32;
                for g in &grads {
                    s += g[pi].data()[ci];
                }
                *w -= cfg.lr * (s / cfg.lot_size as f32);
            }
        }
    }
    let want = update_vector(&a, &init, ModelTag::Source, false).to_flat();
    let got = got.update.to_flat();
    DpComparison {
        mismatches: got.iter().zip(&want).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
            + got.len().abs_diff(want.len()),
        coordinates: want.len(),
        nonempty_lots,
        max_norm,
        clip: cfg.clip_norm,
        moved: want.iter().any(|&x| x != 0.0),
    }
}

/// Clips the all-twos gradient in four coordinates (norm 4) with `C = 2`;
/// returns (norm before, norm after, parameters after a unit step).
pub fn clip_norm_four() -> (f32, f32, Vec<f32>) {
    let mut p = Tensor::zeros(&[4]);
    let g = vec![vec![Tensor::from_vec(vec![2.0, 2.0, 2.0, 2.0])]];
    let step = dp_sgd_step(&mut [&mut p], &g, &dp(2.0, 0.0, 1, 1), 1.0, &mut Rng::new(0)).unwrap();
    (step.norms[0], step.clipped_norms[0], p.data().to_vec())
}

pub struct MultiClient {
    pub identical_updates: bool,
    pub pooled_equals_single: bool,
    pub p_hat_single: f64,
    pub p_hat_pooled: f64,
    /// Patched logits on one test sequence, one client against three.
    pub logits_identical: bool,
    /// How far the generated update moves those logits from the bare target.
    pub logits_moved: f32,
}

/// Three clients with the same shard and seed against one client, through
/// pooling, generation and patching.
pub fn three_identical_clients() -> MultiClient {
    let (small, large) = (LmConfig::tiny(), LmConfig::large());
    let source = init_lm(&small, 1).unwrap();
    let target = init_lm(&large, 2).unwrap();
    let adapter = AdapterConfig::default();
    let data = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 9), 48).unwrap();
    let test = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 2, 10), 64).unwrap();
    let train = LoraTrainConfig {
        steps: 15,
        seed: 4,
        ..LoraTrainConfig::default()
    };
    let results: Vec<_> = (0..3)
        .map(|id| {
            client_finetune(&source, &source.digest(), id, &data, &adapter, &Mechanism::Plain, &train, false).unwrap()
        })
        .collect();

    let src_layout = Layout::for_adapters(&adapter, &small, false);
    let tgt_layout = Layout::for_adapters(&adapter, &large, false);
    let mut cfg = GtConfig::for_layouts(&src_layout, &tgt_layout).unwrap();
    cfg.d_hidden = 16;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.standardize = false;
    let gt = GradTransformer::new(cfg).unwrap();

    let p_hat = |updates: Vec<&UpdateVector>| {
        let pooled = pool(&updates, PoolMode::Mean).unwrap();
        let generated = gt.generate(&pooled, Feedback::Embed, false).unwrap();
        let patched = patch_llm(&target, &generated, &adapter, false).unwrap();
        let logits = forward(&patched.model, patched.adapters.as_ref(), &test.examples[0].full_sequence()).unwrap();
        (pooled, patched.exact_match(&test).unwrap(), logits)
    };
    let (one, p1, l1) = p_hat(vec![&results[0].update]);
    let (three, p3, l3) = p_hat(results.iter().map(|r| &r.update).collect());
    let base = forward(&target, None, &test.examples[0].full_sequence()).unwrap();
    MultiClient {
        identical_updates: results.iter().all(|r| r.update == results[0].update),
        pooled_equals_single: one == three && one == results[0].update,
        p_hat_single: p1,
        p_hat_pooled: p3,
        logits_identical: l1.bit_eq(&l3),
        logits_moved: l1.max_abs_diff(&base),
    }
}
