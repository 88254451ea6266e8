use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// SGD with momentum, L2 weight decay and a stepwise learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `decay_every` iterations.
    pub decay: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: u64,
}

fn default_decay_every() -> u64 {
    1000
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay: 0.98,
            decay_every: default_decay_every(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight decay must be >= 0".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Invalid(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 {
            return Err(Error::Invalid("decay_every must be >= 1".into()));
        }
        Ok(())
    }

    /// `lr * decay^floor(iteration / decay_every)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr * self.decay.powi((iteration / self.decay_every) as i32)
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &[f32] {
        &self.velocity[i]
    }
}

/// `v <- momentum * v + grad + wd * param; param <- param - lr(iteration) * v`.
pub fn sgd_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut SgdState,
    config: &SgdConfig,
    iteration: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = config.lr_at(iteration) as f32;
    let (mu, wd) = (config.momentum as f32, config.weight_decay as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if p.shape() != g.shape() || v.len() != p.len() {
            return Err(Error::Shape(format!(
                "sgd_step: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((w, &d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *m = mu * *m + d + wd * *w;
            *w -= lr * *m;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig {
            lr: 0.1,
            momentum,
            weight_decay,
            decay: 0.98,
            decay_every: 1000,
        }
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = vec![Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap()];
        let g = vec![Tensor::new(&[2], vec![0.5f32, 0.25]).unwrap()];
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut s, &cfg(0.0, 0.0), 0).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn stepwise_decay_boundary() {
        let c = SgdConfig::default();
        assert_eq!(c.lr_at(999), 1e-3);
        assert!((c.lr_at(1000) / c.lr_at(999) - 0.98).abs() < 1e-15);
        assert!((c.lr_at(2500) - 1e-3 * 0.98 * 0.98).abs() < 1e-18);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = vec![Tensor::new(&[1], vec![0.0f32]).unwrap()];
        let g = vec![Tensor::new(&[1], vec![1.0f32]).unwrap()];
        let mut s = SgdState::new(&p);
        let c = cfg(0.9, 0.0);
        sgd_step(&mut p, &g, &mut s, &c, 0).unwrap();
        assert_eq!(s.velocity(0), &[1.0]);
        sgd_step(&mut p, &g, &mut s, &c, 1).unwrap();
        assert!((s.velocity(0)[0] - 1.9).abs() < 1e-6);
        assert!((p[0].data()[0] - -(0.1 + 0.19)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = vec![Tensor::new(&[1], vec![2.0f32]).unwrap()];
        let g = vec![Tensor::new(&[1], vec![0.0f32]).unwrap()];
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut s, &cfg(0.0, 0.5), 0).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = vec![Tensor::new(&[2], vec![0.0f32; 2]).unwrap()];
        let g = vec![Tensor::new(&[3], vec![0.0f32; 3]).unwrap()];
        let mut s = SgdState::new(&p);
        assert!(sgd_step(&mut p, &g, &mut s, &cfg(0.0, 0.0), 0).is_err());
        assert!(SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        }
        .validate()
        .is_err());
    }
}
