use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adadelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub adam_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rho: f64,
    pub adadelta_eps: f64,
    pub adadelta_lr: f64,
    /// Multiplies both learning rates.
    pub lr_scale: f64,
    /// Global gradient-norm clip, applied to recurrent networks only.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            adam_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rho: 0.95,
            adadelta_eps: 1e-6,
            adadelta_lr: 1.0,
            lr_scale: 1.0,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
enum State {
    Adam { m: Vec<f64>, v: Vec<f64> },
    Adadelta { sq_grad: Vec<f64>, sq_delta: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Per-parameter Adam or Adadelta state; each parameter uses the kind it
/// was registered with.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    states: Vec<State>,
    steps: u64,
    clip: Option<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore, clip: bool) -> Self {
        let states = store
            .iter()
            .map(|p| {
                let n = p.value.len();
                match p.optimizer {
                    OptimizerKind::Adam => State::Adam {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                    OptimizerKind::Adadelta => State::Adadelta {
                        sq_grad: vec![0.0; n],
                        sq_delta: vec![0.0; n],
                    },
                }
            })
            .collect();
        let clip = if clip { cfg.clip_norm } else { None };
        Optimizer {
            cfg,
            states,
            steps: 0,
            clip,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; frozen
    /// parameters and `None` gradients are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for (p, g) in store.iter().zip(grads) {
            if let (true, Some(g)) = (p.trainable, g) {
                if !g.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for {}", p.name)));
                }
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        let factor = match self.clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.cfg;
        for ((p, g), state) in store.iter_mut().zip(grads).zip(&mut self.states) {
            let (true, Some(g)) = (p.trainable, g) else { continue };
            let w = p.value.data_mut();
            match state {
                State::Adam { m, v } => {
                    let lr = c.adam_lr * c.lr_scale;
                    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
                    for i in 0..w.len() {
                        let gi = g.data()[i] * factor;
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.adam_eps);
                    }
                }
                State::Adadelta { sq_grad, sq_delta } => {
                    let lr = c.adadelta_lr * c.lr_scale;
                    for i in 0..w.len() {
                        let gi = g.data()[i] * factor;
                        sq_grad[i] = c.rho * sq_grad[i] + (1.0 - c.rho) * gi * gi;
                        let delta = -((sq_delta[i] + c.adadelta_eps).sqrt() / (sq_grad[i] + c.adadelta_eps).sqrt()) * gi;
                        sq_delta[i] = c.rho * sq_delta[i] + (1.0 - c.rho) * delta * delta;
                        w[i] += lr * delta;
                    }
                }
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped: factor < 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(kind: OptimizerKind, value: f64, n: usize) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(vec![n], value), kind).unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store(OptimizerKind::Adam, 0.0, 5);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s, false);
        opt.step(&mut s, &[Some(Tensor::full(vec![5], 1.0))]).unwrap();
        for &w in s.iter().next().unwrap().value.data() {
            assert!((w + 1e-3).abs() < 1e-10, "{w}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Adadelta] {
            let mut s = store(kind, 0.7, 3);
            let before = s.clone();
            let mut opt = Optimizer::new(OptimizerConfig::default(), &s, true);
            for _ in 0..3 {
                opt.step(&mut s, &[Some(Tensor::zeros(vec![3]))]).unwrap();
            }
            assert_eq!(s, before);
        }
    }

    #[test]
    fn adadelta_shrinks_quadratic_monotonically() {
        let mut s = store(OptimizerKind::Adadelta, 1.0, 1);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s, false);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let w = s.iter().next().unwrap().value.data()[0];
            opt.step(&mut s, &[Some(Tensor::full(vec![1], 2.0 * w))]).unwrap();
            let now = s.iter().next().unwrap().value.data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(OptimizerKind::Adam, 0.0, 2);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s, false);
        let err = opt.step(&mut s, &[Some(Tensor::full(vec![2], f64::NAN))]).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store(OptimizerKind::Adam, 1.0, 2);
        s.set_trainable("w", false);
        let before = s.clone();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s, false);
        opt.step(&mut s, &[Some(Tensor::full(vec![2], 3.0))]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = store(OptimizerKind::Adam, 0.0, 4);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s, true);
        let stats = opt.step(&mut s, &[Some(Tensor::full(vec![4], 10.0))]).unwrap();
        assert!(stats.clipped);
        assert!((stats.grad_norm - 20.0).abs() < 1e-12);
    }
}
