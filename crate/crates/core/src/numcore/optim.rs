//! AdamW with linear warmup and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`.
    pub warmup_steps: usize,
    /// Global L2 clip applied before each step; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    /// Learning rate used by the 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Moments and step counter for one parameter list.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Domain(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// One AdamW update with bias correction and decoupled weight decay.
/// Clipping (if configured) is applied to `grads` first.
pub fn adamw_step(params: &mut [Tensor], grads: &mut [Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    if let Some(max) = state.config.max_grad_norm {
        clip_global_norm(grads, max)?;
    }
    state.step += 1;
    let cfg = &state.config;
    let lr = cfg.lr_at(state.step);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            if cfg.weight_decay != 0.0 {
                pd[i] -= lr * cfg.weight_decay * pd[i];
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_clip(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            warmup_steps: 0,
            max_grad_norm: None,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn clip_leaves_small_norms_alone() {
        let mut g = vec![Tensor::vector(vec![0.3, 0.4])];
        let before = g[0].clone();
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 0.5);
        assert!(g[0].bit_eq(&before));
    }

    #[test]
    fn clip_halves_norm_two() {
        let mut g = vec![Tensor::vector(vec![1.2, 1.6]), Tensor::vector(vec![0.0])];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g[0].data(), &[0.6, 0.8]);
    }

    #[test]
    fn clip_single_three_four() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_rejects_nonpositive_max() {
        assert!(clip_global_norm(&mut [Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = vec![Tensor::vector(vec![0.5, -2.0])];
        let before = p[0].clone();
        let mut st = OptimState::new(no_clip(1e-2, 0.0), &p);
        adamw_step(&mut p, &mut [Tensor::zeros(&[2])], &mut st).unwrap();
        assert!(p[0].bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g² after bias correction, so Δ = -lr·g/(|g|+eps).
        let lr = 1e-3;
        let g = [0.7, -3.0, 1e-2];
        let mut p = vec![Tensor::zeros(&[3])];
        let mut st = OptimState::new(no_clip(lr, 0.0), &p);
        adamw_step(&mut p, &mut [Tensor::vector(g.to_vec())], &mut st).unwrap();
        for (pi, gi) in p[0].data().iter().zip(g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi + lr * gi.signum()).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let (lr, wd) = (0.1, 0.5);
        let mut p = vec![Tensor::vector(vec![2.0, -4.0])];
        let mut st = OptimState::new(no_clip(lr, wd), &p);
        adamw_step(&mut p, &mut [Tensor::zeros(&[2])], &mut st).unwrap();
        assert_eq!(p[0].data(), &[2.0 * (1.0 - lr * wd), -4.0 * (1.0 - lr * wd)]);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = AdamWConfig {
            lr: 1e-4,
            warmup_steps: 100,
            ..AdamWConfig::default()
        };
        assert!((cfg.lr_at(1) - 1e-6).abs() < 1e-20);
        assert_eq!(cfg.lr_at(50), 5e-5);
        assert_eq!(cfg.lr_at(100), 1e-4);
        assert_eq!(cfg.lr_at(5000), 1e-4);
    }

    #[test]
    fn step_counter_increases() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        for expected in 1..=3 {
            adamw_step(&mut p, &mut [Tensor::scalar(1.0)], &mut st).unwrap();
            assert_eq!(st.step(), expected);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = OptimState::new(AdamWConfig::default(), &p);
        assert!(adamw_step(&mut p, &mut [Tensor::zeros(&[3])], &mut st).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_max(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
            max in 1e-3f64..10.0,
        ) {
            let mut g = vec![Tensor::vector(vals)];
            clip_global_norm(&mut g, max).unwrap();
            prop_assert!(global_norm(&g) <= max + 1e-9);
        }
    }
}
