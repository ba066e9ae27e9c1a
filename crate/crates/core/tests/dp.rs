mod common;

use common::oracles::{clip_norm_four, dp, dp_versus_plain_sgd};
use grad_transformer::clients::dp_sgd_step;
use grad_transformer::rng::Rng;
use grad_transformer::tensor::Tensor;

#[test]
fn zero_noise_unclipped_matches_per_example_sgd() {
    let c = dp_versus_plain_sgd();
    assert!(c.nonempty_lots > 0, "every lot was empty");
    assert!(c.max_norm < c.clip as f64, "clipping would be active");
    assert!(c.moved);
    assert_eq!(c.mismatches, 0, "{} of {} coordinates differ", c.mismatches, c.coordinates);
}

#[test]
fn norm_four_gradient_is_clipped_to_two() {
    let (before, after, p) = clip_norm_four();
    assert_eq!((before, after), (4.0, 2.0));
    assert_eq!(p, vec![-1.0; 4]);

    let mut p = Tensor::zeros(&[2]);
    let g = vec![vec![Tensor::from_vec(vec![2.4, 3.2])]];
    let step = dp_sgd_step(&mut [&mut p], &g, &dp(2.0, 0.0, 1, 1), 1.0, &mut Rng::new(0)).unwrap();
    assert!((step.clipped_norms[0] - 2.0).abs() < 1e-6);
    assert!((p.data()[0] + 1.2).abs() < 1e-6 && (p.data()[1] + 1.6).abs() < 1e-6);
}

#[test]
fn within_bound_gradients_average_over_the_lot() {
    let mut p = Tensor::zeros(&[2]);
    let g = vec![vec![Tensor::from_vec(vec![1.0, 0.5])], vec![Tensor::from_vec(vec![-0.5, 1.0])]];
    dp_sgd_step(&mut [&mut p], &g, &dp(2.0, 0.0, 2, 1), 1.0, &mut Rng::new(0)).unwrap();
    assert_eq!(p.data(), &[-0.25, -0.75]);
}

#[test]
fn one_parameter_hand_trace() {
    // g1 = 3 clips to 2, g2 = -1 stays; (2 - 1) / 2 + σC·z = 0.5 + 2z.
    let z = Rng::new(42).normal() as f32;
    let mut p = Tensor::zeros(&[1]);
    let g = vec![vec![Tensor::from_vec(vec![3.0])], vec![Tensor::from_vec(vec![-1.0])]];
    dp_sgd_step(&mut [&mut p], &g, &dp(2.0, 1.0, 2, 1), 1.0, &mut Rng::new(42)).unwrap();
    let expected = -(0.5 + 2.0 * z);
    assert!((p.data()[0] - expected).abs() < 1e-6, "{} vs {expected}", p.data()[0]);
}

#[test]
fn non_positive_clip_is_a_config_error() {
    let mut p = Tensor::zeros(&[1]);
    let g = vec![vec![Tensor::from_vec(vec![1.0])]];
    let err = dp_sgd_step(&mut [&mut p], &g, &dp(0.0, 0.0, 1, 1), 1.0, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, grad_transformer::Error::Config { .. }));
}
