//! Adam with linear learning-rate warmup.

use super::{ParamHost, Scalar};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Learning rate at a given optimizer step: a linear ramp from 0 over
/// `warmup_steps` updates, then constant. `warmup_steps = 0` means the
/// base rate from the very first step.
pub fn lr_at(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        base_lr
    } else {
        base_lr * ((step as f64 / warmup_steps as f64).min(1.0))
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        AdamConfig {
            base_lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over every trainable, unfrozen parameter of a [`ParamHost`].
///
/// Moments are keyed by parameter name and held in double precision
/// regardless of the model's element type. The step counter drives both
/// the warmup ramp (evaluated before the increment, so the first update
/// uses the step-0 rate) and the bias correction.
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients currently stored in the model.
    /// Frozen parameters and stat buffers are untouched. If any gradient
    /// is non-finite the step is aborted before any parameter changes.
    pub fn step<S: Scalar, M: ParamHost<S> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut bad: Option<String> = None;
        model.visit_params(&mut |p| {
            if bad.is_some() || p.frozen {
                return;
            }
            if let Some(grad) = p.grad {
                if grad.iter().any(|g| !g.is_finite()) {
                    bad = Some(p.name);
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Training(format!(
                "non-finite gradient in '{name}', step aborted"
            )));
        }

        let lr = lr_at(self.step_count, self.config.base_lr, self.config.warmup_steps);
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.config.beta1.powi(t as i32);
        let bc2 = 1.0 - self.config.beta2.powi(t as i32);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let moments = &mut self.moments;

        model.visit_params(&mut |p| {
            if p.frozen {
                return;
            }
            let Some(grad) = p.grad else { return };
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            assert_eq!(m.len(), grad.len(), "parameter '{}' changed size", p.name);
            for i in 0..grad.len() {
                let g = grad[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let delta = lr * mhat / (vhat.sqrt() + eps);
                p.value[i] = S::from_f64(p.value[i].to_f64() - delta);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamVisit;

    struct Scalars {
        values: Vec<f64>,
        grads: Vec<f64>,
        frozen: Vec<bool>,
    }

    impl ParamHost<f64> for Scalars {
        fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, f64>)) {
            for i in 0..self.values.len() {
                f(ParamVisit {
                    name: format!("p{i}"),
                    dims: vec![1],
                    value: std::slice::from_mut(&mut self.values[i]),
                    grad: Some(std::slice::from_mut(&mut self.grads[i])),
                    frozen: self.frozen[i],
                });
            }
        }
    }

    #[test]
    fn warmup_schedule_pinned_points() {
        assert_eq!(lr_at(0, 0.0007, 40), 0.0);
        assert!((lr_at(40, 0.0007, 40) - 0.0007).abs() < 1e-18);
        assert!((lr_at(20, 0.0007, 40) - 0.00035).abs() < 1e-18);
        assert!((lr_at(1000, 0.0007, 40) - 0.0007).abs() < 1e-18);
        assert_eq!(lr_at(0, 0.01, 0), 0.01);
        assert_eq!(lr_at(7, 0.01, 0), 0.01);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut model = Scalars {
            values: vec![1.5, -2.0],
            grads: vec![0.0, 0.0],
            frozen: vec![false, false],
        };
        let mut adam = Adam::new(AdamConfig::new(0.1, 0));
        adam.step(&mut model).unwrap();
        assert_eq!(model.values, vec![1.5, -2.0]);
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_step() {
        let mut model = Scalars {
            values: vec![1.5, -2.0],
            grads: vec![3.0, 3.0],
            frozen: vec![true, false],
        };
        let mut adam = Adam::new(AdamConfig::new(0.1, 0));
        adam.step(&mut model).unwrap();
        assert_eq!(model.values[0].to_bits(), 1.5f64.to_bits());
        assert_ne!(model.values[1], -2.0);
    }

    #[test]
    fn first_step_magnitude_is_the_learning_rate() {
        let mut model = Scalars {
            values: vec![0.0],
            grads: vec![1.0],
            frozen: vec![false],
        };
        let mut adam = Adam::new(AdamConfig::new(0.1, 0));
        adam.step(&mut model).unwrap();
        assert!((model.values[0] + 0.1).abs() < 1e-6, "got {}", model.values[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut model = Scalars {
            values: vec![1.0, 2.0],
            grads: vec![f64::INFINITY, 1.0],
            frozen: vec![false, false],
        };
        let mut adam = Adam::new(AdamConfig::new(0.1, 0));
        assert!(adam.step(&mut model).is_err());
        assert_eq!(model.values, vec![1.0, 2.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn warmup_first_update_is_a_no_op() {
        let mut model = Scalars {
            values: vec![1.0],
            grads: vec![5.0],
            frozen: vec![false],
        };
        let mut adam = Adam::new(AdamConfig::new(0.1, 40));
        adam.step(&mut model).unwrap();
        assert_eq!(model.values[0], 1.0);
        model.grads[0] = 5.0;
        adam.step(&mut model).unwrap();
        assert_ne!(model.values[0], 1.0);
    }
}
