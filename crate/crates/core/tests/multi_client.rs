mod common;

use common::oracles::three_identical_clients;
use grad_transformer::clients::{patch_llm, pool, PoolMode};
use grad_transformer::curation::{BlockLayout, Layout, ModelTag, UpdateVector};
use grad_transformer::lm::{forward, init_lm, AdapterConfig, LmConfig};
use grad_transformer::Error;

fn v(blocks: Vec<Vec<f32>>) -> UpdateVector {
    let layout = Layout {
        blocks: blocks.iter().enumerate().map(|(block, b)| BlockLayout { block, len: b.len() }).collect(),
    };
    UpdateVector::new(ModelTag::Source, layout, blocks).unwrap()
}

#[test]
fn three_identical_clients_match_one() {
    let r = three_identical_clients();
    assert!(r.identical_updates);
    assert!(r.pooled_equals_single);
    assert_eq!(r.p_hat_single.to_bits(), r.p_hat_pooled.to_bits());
    assert!(r.logits_identical);
    assert!(r.logits_moved > 0.0, "generated update left the target unchanged");
}

#[test]
fn pool_arithmetic() {
    let a = v(vec![vec![1.0, 2.0]]);
    let b = v(vec![vec![3.0, 4.0]]);
    assert_eq!(pool(&[&a, &b], PoolMode::Mean).unwrap().blocks, vec![vec![2.0, 3.0]]);
    assert_eq!(pool(&[&a, &b], PoolMode::Sum).unwrap().blocks, vec![vec![4.0, 6.0]]);
    let neg = v(vec![vec![-1.0, -2.0]]);
    assert_eq!(pool(&[&a, &neg], PoolMode::Mean).unwrap().blocks, vec![vec![0.0, 0.0]]);
    assert_eq!(pool(&[&a], PoolMode::Mean).unwrap(), a);
}

#[test]
fn pool_rejects_empty_and_mismatched() {
    assert!(matches!(pool(&[], PoolMode::Mean), Err(Error::Contract(_))));
    let a = v(vec![vec![1.0, 2.0]]);
    let b = v(vec![vec![1.0], vec![2.0]]);
    assert!(matches!(pool(&[&a, &b], PoolMode::Mean), Err(Error::Format(_))));
}

#[test]
fn zero_generated_update_is_neutral_and_patching_is_fresh() {
    let large = LmConfig::large();
    let target = init_lm(&large, 8).unwrap();
    let adapter = AdapterConfig::default();
    let layout = Layout::for_adapters(&adapter, &large, false);
    let tokens = [12, 3, 4, 10, 7, 11];
    let base = forward(&target, None, &tokens).unwrap();
    let zero = UpdateVector::zeros(ModelTag::Target, layout.clone());
    let patched = patch_llm(&target, &zero, &adapter, false).unwrap();
    let logits = forward(&patched.model, patched.adapters.as_ref(), &tokens).unwrap();
    assert!(logits.bit_eq(&base));

    let flat: Vec<f32> = (0..layout.total()).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
    let u = UpdateVector::from_flat(ModelTag::Target, layout, &flat).unwrap();
    let first = patch_llm(&target, &u, &adapter, false).unwrap();
    let second = patch_llm(&target, &u, &adapter, false).unwrap();
    let l1 = forward(&first.model, first.adapters.as_ref(), &tokens).unwrap();
    let l2 = forward(&second.model, second.adapters.as_ref(), &tokens).unwrap();
    assert!(l1.bit_eq(&l2));
    assert!(!l1.bit_eq(&base));
    assert!(forward(&target, None, &tokens).unwrap().bit_eq(&base));
}
