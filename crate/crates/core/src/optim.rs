//! First-order optimizers over flat parameter lists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::global_norm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adamw(lr: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..OptimizerConfig::sgd(lr)
        }
    }
}

/// Optimizer state. Moments are indexed by parameter position, so the same
/// parameter order must be passed to every [`Optimizer::step`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using `lr` in place of the configured rate.
    pub fn step_with_lr(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.steps += 1;
        let c = &self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gr) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * (gr + c.weight_decay * *w);
                    }
                }
            }
            OptimizerKind::Adamw => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[idx];
                    let v = &mut self.second[idx];
                    for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gr;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gr * gr;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let norm = global_norm(grads.iter());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f32) -> Tensor {
        Tensor::from_vec(vec![x])
    }

    #[test]
    fn sgd_definition() {
        let mut p = scalar(5.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0));
        opt.step(&mut [&mut p], &[scalar(2.0)]).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn adamw_first_step_hand_computed() {
        // m1 = 0.1 g, v1 = 0.001 g², m̂ = g, v̂ = g² ⇒ step = lr·g/(|g|+eps)
        let lr = 0.01f32;
        let g = 0.3f32;
        let mut p = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(lr, 0.0));
        opt.step(&mut [&mut p], &[scalar(g)]).unwrap();
        let m = (1.0 - 0.9f32) * g / (1.0 - 0.9f32);
        let v = (1.0 - 0.999f32) * g * g / (1.0 - 0.999f32);
        let expected = 1.0 - lr * m / (v.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-7);
        assert!((p.data()[0] - (1.0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn adamw_without_decay_ignores_magnitude() {
        let mut small = scalar(0.1);
        let mut large = scalar(100.0);
        let mut o1 = Optimizer::new(OptimizerConfig::adamw(0.01, 0.0));
        let mut o2 = Optimizer::new(OptimizerConfig::adamw(0.01, 0.0));
        for _ in 0..3 {
            o1.step(&mut [&mut small], &[scalar(-0.5)]).unwrap();
            o2.step(&mut [&mut large], &[scalar(-0.5)]).unwrap();
        }
        let d1 = small.data()[0] - 0.1;
        let d2 = large.data()[0] - 100.0;
        assert!((d1 - d2).abs() < 1e-5, "{d1} vs {d2}");
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(g.iter()) - 1.0).abs() < 1e-6);
    }
}
