//! Small strided convolutional feature extractor.
//!
//! Each stage is a 3×3 convolution (padding 1) followed by ReLU; the first
//! `log2(downsample)` stages use stride 2. A final 1×1 convolution without a
//! nonlinearity projects to `feature_dim` channels, so features may point in
//! any direction — cosine scoring needs negative components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub downsample: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            widths: vec![16, 32, 32],
            feature_dim: 32,
            downsample: 4,
        }
    }
}

impl EncoderConfig {
    /// Two-stage network used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            in_channels: 1,
            widths: vec![4, 4],
            feature_dim: 4,
            downsample: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Invalid("encoder channels must be >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Invalid("encoder needs at least one stage of width >= 1".into()));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "downsample must be a power of two, got {}",
                self.downsample
            )));
        }
        if self.strided_stages() > self.widths.len() {
            return Err(Error::Invalid(format!(
                "downsample {} needs {} strided stages, only {} configured",
                self.downsample,
                self.strided_stages(),
                self.widths.len()
            )));
        }
        Ok(())
    }

    fn strided_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn stride(&self, stage: usize) -> usize {
        if stage < self.strided_stages() {
            2
        } else {
            1
        }
    }

    /// (name, shape) of every parameter tensor in forward order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("encoder.stage{i}.weight"), vec![w, cin, 3, 3]));
            out.push((format!("encoder.stage{i}.bias"), vec![w]));
            cin = w;
        }
        out.push(("encoder.proj.weight".into(), vec![self.feature_dim, cin, 1, 1]));
        out.push(("encoder.proj.bias".into(), vec![self.feature_dim]));
        out
    }
}

/// Named encoder tensors in [`EncoderConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

/// He-normal kernels (variance 2 / fan_in), zero biases.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in config.layout() {
        let len: usize = shape.iter().product();
        let data = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
        } else {
            vec![0.0; len]
        };
        tensors.push(Tensor::new(&shape, data)?);
        names.push(name);
    }
    Ok(EncoderParams { names, tensors })
}

impl EncoderParams {
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "encoder expects {} tensors, got {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Runs the encoder on `image` [1, C, H, W] using parameter variables in
/// layout order; returns features [d, H/s, W/s].
pub fn encode<F: Scalar>(tape: &mut Tape<F>, config: &EncoderConfig, params: &[Var], image: Var) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != config.in_channels {
        return Err(Error::Shape(format!(
            "encoder input must be [1, {}, H, W], got {shape:?}",
            config.in_channels
        )));
    }
    let s = config.downsample;
    if !shape[2].is_multiple_of(s) || !shape[3].is_multiple_of(s) {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by downsampling factor {s}; pad first",
            shape[2], shape[3]
        )));
    }
    if params.len() != 2 * config.widths.len() + 2 {
        return Err(Error::Shape("encoder parameter count".into()));
    }
    let mut x = image;
    for i in 0..config.widths.len() {
        x = tape.conv2d(x, params[2 * i], Some(params[2 * i + 1]), config.stride(i), 1)?;
        x = tape.relu(x)?;
    }
    let n = params.len();
    x = tape.conv2d(x, params[n - 2], Some(params[n - 1]), 1, 0)?;
    let out = tape.shape(x).to_vec();
    tape.reshape(x, &out[1..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward(config: &EncoderConfig, params: &EncoderParams, img: &[f32], h: usize, w: usize) -> Tensor<f32> {
        let mut tape: Tape<f32> = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let x = tape.constant(Tensor::from_f32(&[1, 1, h, w], img).unwrap()).unwrap();
        let f = encode(&mut tape, config, &vars, x).unwrap();
        tape.value(f).clone()
    }

    #[test]
    fn shape_law() {
        let cfg = EncoderConfig::default();
        let p = init_encoder(&cfg, 1).unwrap();
        let img: Vec<f32> = (0..64 * 64).map(|i| (i % 7) as f32).collect();
        let f = forward(&cfg, &p, &img, 64, 64);
        assert_eq!(f.shape(), &[32, 16, 16]);
        assert!(f.is_finite());
        assert_eq!(f, forward(&cfg, &p, &img, 64, 64));
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let cfg = EncoderConfig::default();
        let a = init_encoder(&cfg, 9).unwrap();
        assert_eq!(a, init_encoder(&cfg, 9).unwrap());
        assert_ne!(a, init_encoder(&cfg, 10).unwrap());
        for (name, t) in a.names.iter().zip(&a.tensors) {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        // 100 * 100 * 3 * 3 = 90k weights, fan_in 900
        let big = EncoderConfig {
            in_channels: 100,
            widths: vec![100],
            feature_dim: 1,
            downsample: 1,
        };
        let p = init_encoder(&big, 3).unwrap();
        let w = p.tensors[0].data();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 900.0;
        assert!((var / target - 1.0).abs() < 0.2, "variance {var} vs {target}");
    }

    #[test]
    fn rejects_indivisible_and_bad_configs() {
        let cfg = EncoderConfig::default();
        let p = init_encoder(&cfg, 0).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let vars: Vec<Var> = p.tensors.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let x = tape.constant(Tensor::zeros(&[1, 1, 30, 32])).unwrap();
        assert!(encode(&mut tape, &cfg, &vars, x).is_err());
        let bad = EncoderConfig {
            downsample: 3,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            downsample: 16,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
