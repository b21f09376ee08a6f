//! Small convolutional encoder mapping a thumbnail to the parameter matrices
//! `d` (normalizing) and `r` (stylizing).
//!
//! Layout: input shifted by -0.5, then per stage a 3x3 stride-2 convolution
//! followed by relu, then a global average pool feeding two independent
//! linear heads of width k^2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dncm::ColorMapMatrix;
use crate::imaging::Thumbnail;
use crate::tensor::{
    conv2d, global_avg_pool, linear, relu, Gradients, Scalar, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("thumbnail side {actual} does not match encoder input size {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub k: usize,
    pub thumbnail_size: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            k: 16,
            thumbnail_size: 64,
            widths: vec![16, 32, 64, 128],
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("stage widths must be nonempty and positive, got {:?}", self.widths));
        }
        if self.widths.len() >= usize::BITS as usize {
            return bad("too many stages".into());
        }
        let div = 1usize << self.widths.len();
        if self.thumbnail_size == 0 || self.thumbnail_size % div != 0 {
            return bad(format!(
                "thumbnail size {} must be a positive multiple of {div}",
                self.thumbnail_size
            ));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.widths.len()
    }

    /// Length of the pooled feature vector feeding both heads.
    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T> {
    /// `out x in x 3 x 3`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    /// `features x k^2`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T = f32> {
    pub config: EncoderConfig,
    pub stages: Vec<ConvStage<T>>,
    pub head_d: Head<T>,
    pub head_r: Head<T>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// All parameter tensors in a fixed order: stage kernels and biases,
    /// then head_d weight and bias, then head_r weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::with_capacity(self.stages.len() * 2 + 4);
        for s in &self.stages {
            v.push(&s.kernel);
            v.push(&s.bias);
        }
        v.extend([&self.head_d.weight, &self.head_d.bias, &self.head_r.weight, &self.head_r.bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::with_capacity(self.stages.len() * 2 + 4);
        for s in &mut self.stages {
            v.push(&mut s.kernel);
            v.push(&mut s.bias);
        }
        v.extend([
            &mut self.head_d.weight,
            &mut self.head_d.bias,
            &mut self.head_r.weight,
            &mut self.head_r.bias,
        ]);
        v
    }

    /// Rebuild from tensors in [`EncoderWeights::tensors`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor<T>>) -> Result<Self, EncoderError> {
        config.validate()?;
        let like = zeros_like_config::<T>(&config);
        let expected = like.tensors();
        if tensors.len() != expected.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (t, e) in tensors.iter().zip(&expected) {
            if t.shape() != e.shape() {
                return Err(EncoderError::InvalidConfig(format!(
                    "tensor shape {:?}, expected {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("counted");
        let stages = (0..config.n_stages())
            .map(|_| ConvStage { kernel: next(), bias: next() })
            .collect();
        let head_d = Head { weight: next(), bias: next() };
        let head_r = Head { weight: next(), bias: next() };
        Ok(Self { config, stages, head_d, head_r })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        EncoderWeights::from_tensors(self.config.clone(), tensors).expect("same layout")
    }
}

fn zeros_like_config<T: Scalar>(config: &EncoderConfig) -> EncoderWeights<T> {
    let mut c_in = 3;
    let stages = config
        .widths
        .iter()
        .map(|&c_out| {
            let s = ConvStage {
                kernel: Tensor::zeros([c_out, c_in, 3, 3]),
                bias: Tensor::zeros([c_out]),
            };
            c_in = c_out;
            s
        })
        .collect();
    let kk = config.k * config.k;
    let head = || Head {
        weight: Tensor::zeros([config.feature_width(), kk]),
        bias: Tensor::zeros([kk]),
    };
    EncoderWeights {
        config: config.clone(),
        stages,
        head_d: head(),
        head_r: head(),
    }
}

/// He-normal convolution kernels drawn from the config seed, zero conv
/// biases, zero head weights and identity head biases.
pub fn init_weights(config: &EncoderConfig) -> Result<EncoderWeights, EncoderError> {
    config.validate()?;
    let mut w = zeros_like_config::<f32>(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for stage in &mut w.stages {
        let fan_in = stage.kernel.shape()[1] * 9;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in stage.kernel.data_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    let eye = ColorMapMatrix::<f32>::identity(config.k);
    w.head_d.bias.data_mut().copy_from_slice(eye.values());
    w.head_r.bias.data_mut().copy_from_slice(eye.values());
    Ok(w)
}

/// Channel-major `3 x s x s` encoder input, shifted by -0.5.
pub fn thumbnail_tensor<T: Scalar>(thumb: &Thumbnail) -> Tensor<T> {
    let s = thumb.side();
    let n = s * s;
    let mut data = vec![T::zero(); 3 * n];
    for (i, px) in thumb.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = T::from_f32(px[c] - 0.5);
        }
    }
    Tensor::new([3, s, s], data).expect("3*s*s values")
}

fn check_input<T: Scalar>(weights: &EncoderWeights<T>, input: &Tensor<T>) -> Result<(), EncoderError> {
    let s = weights.config.thumbnail_size;
    if input.shape() != [3, s, s] {
        return Err(EncoderError::SizeMismatch {
            expected: s,
            actual: input.shape().get(1).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// Raw head outputs `(d, r)` as length-k^2 tensors for an already prepared
/// input tensor.
pub fn encode_tensor<T: Scalar>(
    input: &Tensor<T>,
    weights: &EncoderWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>), EncoderError> {
    check_input(weights, input)?;
    let mut x = input.clone();
    for s in &weights.stages {
        x = relu(&conv2d(&x, &s.kernel, &s.bias)?);
    }
    let pooled = global_avg_pool(&x)?;
    let d = linear(&pooled, &weights.head_d.weight, &weights.head_d.bias)?;
    let r = linear(&pooled, &weights.head_r.weight, &weights.head_r.bias)?;
    Ok((d, r))
}

pub fn encode(
    thumb: &Thumbnail,
    weights: &EncoderWeights,
) -> Result<(ColorMapMatrix, ColorMapMatrix), EncoderError> {
    if thumb.side() != weights.config.thumbnail_size {
        return Err(EncoderError::SizeMismatch {
            expected: weights.config.thumbnail_size,
            actual: thumb.side(),
        });
    }
    let (d, r) = encode_tensor(&thumbnail_tensor(thumb), weights)?;
    let k = weights.config.k;
    let wrap = |t: Tensor<f32>| {
        ColorMapMatrix::new(k, t.into_data())
            .map_err(|e| EncoderError::InvalidConfig(format!("head output: {e}")))
    };
    Ok((wrap(d)?, wrap(r)?))
}

/// Tape handles for every encoder parameter, in [`EncoderWeights::tensors`]
/// order.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub vars: Vec<Var>,
}

impl WeightVars {
    pub fn record<T: Scalar>(tape: &mut Tape<T>, weights: &EncoderWeights<T>) -> Self {
        let vars = weights.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        Self { vars }
    }

    /// Collect gradients into the weights layout; untouched parameters get
    /// zeros.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &mut Gradients<T>,
        like: &EncoderWeights<T>,
    ) -> EncoderWeights<T> {
        let tensors = self
            .vars
            .iter()
            .zip(like.tensors())
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        EncoderWeights::from_tensors(like.config.clone(), tensors).expect("same layout")
    }
}

/// Record the encoder forward on `tape`; returns the `(d, r)` head outputs as
/// `k x k` tensors.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    vars: &WeightVars,
    k: usize,
) -> Result<(Var, Var), EncoderError> {
    let n_stages = (vars.vars.len() - 4) / 2;
    let mut x = input;
    for s in 0..n_stages {
        let y = tape.conv2d(x, vars.vars[2 * s], vars.vars[2 * s + 1])?;
        x = tape.relu(y);
    }
    let pooled = tape.global_avg_pool(x)?;
    let h = 2 * n_stages;
    let d = tape.linear(pooled, vars.vars[h], vars.vars[h + 1])?;
    let r = tape.linear(pooled, vars.vars[h + 2], vars.vars[h + 3])?;
    Ok((tape.reshape(d, &[k, k])?, tape.reshape(r, &[k, k])?))
}

/// Weight gradients for upstream gradients `grad_d`, `grad_r` (each k^2
/// values, row-major) on the encoder outputs.
pub fn encode_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &EncoderWeights<T>,
    grad_d: &Tensor<T>,
    grad_r: &Tensor<T>,
) -> Result<EncoderWeights<T>, EncoderError> {
    check_input(weights, input)?;
    let k = weights.config.k;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let vars = WeightVars::record(&mut tape, weights);
    let (d, r) = encode_on_tape(&mut tape, x, &vars, k)?;
    let gd = grad_d.clone().reshape([k, k])?;
    let gr = grad_r.clone().reshape([k, k])?;
    let mut grads = tape.backward_from(vec![(d, gd), (r, gr)])?;
    Ok(vars.gradients(&mut grads, weights))
}
