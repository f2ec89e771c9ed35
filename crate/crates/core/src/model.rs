//! Conditional temporal convolutional network.
//!
//! Each block computes
//!
//! ```text
//! h = prelu(film(conv_i(x_i), gamma_i, beta_i)) + residual_i(x_i)
//! ```
//!
//! where `(gamma_i, beta_i)` is an affine projection of the conditioning
//! vector and `conv_i` is a causal convolution with dilation
//! `dilation_growth^i`. A 1x1 convolution maps the last block to a single
//! output channel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::diffkit::{
    conv1d_causal_bwd, conv1d_causal_fwd, film_bwd, film_fwd, linear_bwd, linear_fwd, prelu_bwd,
    prelu_fwd, ConvKernel, FeatureMap, Real, ShapeError,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NAFX";
pub const CHECKPOINT_VERSION: u32 = 1;
const PRELU_INIT: f64 = 0.25;
const FILM_WEIGHT_INIT: f64 = 0.01;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input sample rate {found} Hz does not match model rate {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("conditioning has {found} values, model expects {expected}")]
    ConditioningDim { expected: usize, found: usize },
    #[error("conditioning contains a non-finite value")]
    NonFiniteConditioning,
    #[error("model input must be mono, got {0} channels")]
    NotMono(usize),
    #[error("backward called without a forward cache")]
    MissingCache,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected \"NAFX\"")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint config is not valid JSON: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    InvalidConfig(#[from] ModelError),
    #[error("checkpoint declares {declared} parameters but its config implies {expected}")]
    ParamCountMismatch { declared: usize, expected: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation_growth: usize,
    pub cond_dim: usize,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    /// The 4-layer compressor configuration.
    fn default() -> Self {
        Self {
            layers: 4,
            channels: 32,
            kernel_size: 9,
            dilation_growth: 10,
            cond_dim: 2,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Receptive field of a model in samples and milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReceptiveField {
    pub samples: usize,
    pub ms: f64,
}

impl ModelConfig {
    /// The 5-layer reverberation configuration.
    pub fn reverb() -> Self {
        Self {
            layers: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("layers", self.layers),
            ("channels", self.channels),
            ("kernel_size", self.kernel_size),
            ("dilation_growth", self.dilation_growth),
            ("cond_dim", self.cond_dim),
            ("sample_rate", self.sample_rate as usize),
        ];
        for (name, value) in fields {
            if value < 1 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        (0..self.layers)
            .try_fold(1usize, |acc, i| {
                if i == 0 {
                    Some(1)
                } else {
                    acc.checked_mul(self.dilation_growth)
                }
            })
            .ok_or_else(|| ModelError::InvalidConfig("dilation overflows".into()))?;
        Ok(())
    }

    /// Dilation of block `index`: `dilation_growth^index`.
    pub fn dilation(&self, index: usize) -> usize {
        self.dilation_growth.pow(index as u32)
    }

    /// `1 + (K - 1) * sum_i g^i`.
    pub fn receptive_field(&self) -> ReceptiveField {
        let span: usize = (0..self.layers).map(|i| self.dilation(i)).sum();
        let samples = 1 + (self.kernel_size - 1) * span;
        ReceptiveField {
            samples,
            ms: samples as f64 * 1000.0 / self.sample_rate as f64,
        }
    }

    fn block_inputs(&self, index: usize) -> usize {
        if index == 0 {
            1
        } else {
            self.channels
        }
    }

    /// Parameter tensor lengths in declaration (checkpoint) order.
    pub fn tensor_sizes(&self) -> Vec<usize> {
        let c = self.channels;
        let mut sizes = Vec::with_capacity(self.layers * 7 + 2);
        for i in 0..self.layers {
            let inputs = self.block_inputs(i);
            sizes.extend([
                c * inputs * self.kernel_size,
                c,
                2 * c * self.cond_dim,
                2 * c,
                c,
                c * inputs,
                c,
            ]);
        }
        sizes.extend([c, 1]);
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }
}

/// Learnable tensors of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub conv: ConvKernel<T>,
    /// `2C x D` projection, gamma rows first.
    pub film_weight: Vec<T>,
    pub film_bias: Vec<T>,
    pub prelu: Vec<T>,
    pub residual: ConvKernel<T>,
}

/// Every learnable tensor in the network. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub blocks: Vec<Block<T>>,
    pub output: ConvKernel<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.channels;
        let blocks = (0..config.layers)
            .map(|i| {
                let inputs = config.block_inputs(i);
                Block {
                    conv: ConvKernel::zeros(c, inputs, config.kernel_size, config.dilation(i)),
                    film_weight: vec![T::zero(); 2 * c * config.cond_dim],
                    film_bias: vec![T::zero(); 2 * c],
                    prelu: vec![T::zero(); c],
                    residual: ConvKernel::zeros(c, inputs, 1, 1),
                }
            })
            .collect();
        Self {
            blocks,
            output: ConvKernel::zeros(1, c, 1, 1),
        }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.blocks.len() * 7 + 2);
        for b in &self.blocks {
            out.extend([
                &b.conv.weights[..],
                &b.conv.bias[..],
                &b.film_weight[..],
                &b.film_bias[..],
                &b.prelu[..],
                &b.residual.weights[..],
                &b.residual.bias[..],
            ]);
        }
        out.extend([&self.output.weights[..], &self.output.bias[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.blocks.len() * 7 + 2);
        for b in &mut self.blocks {
            out.extend([
                &mut b.conv.weights[..],
                &mut b.conv.bias[..],
                &mut b.film_weight[..],
                &mut b.film_bias[..],
                &mut b.prelu[..],
                &mut b.residual.weights[..],
                &mut b.residual.bias[..],
            ]);
        }
        out.extend([&mut self.output.weights[..], &mut self.output.bias[..]]);
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values flattened in declaration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }
}

/// Conditioning values; finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector(Vec<f32>);

impl ConditioningVector {
    pub fn new(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteConditioning);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct BlockCache<T> {
    input: FeatureMap<T>,
    conv_out: FeatureMap<T>,
    film_out: FeatureMap<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

/// Intermediate activations retained by a forward pass for backward.
pub struct ForwardCache<T> {
    conditioning: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    last: FeatureMap<T>,
}

pub struct Gradients<T> {
    pub params: Params<T>,
    /// Gradient w.r.t. the conditioning vector. Unused when steering.
    pub conditioning: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Params<T>,
}

/// Deterministic initialization from `seed`.
///
/// Convolutions draw uniformly from `±sqrt(1 / (in_channels * K))` (weights
/// and biases), FiLM projections from `±0.01` with the bias set so that
/// `gamma = 1` and `beta = 0`, and PReLU slopes start at 0.25.
pub fn init_model<T: Real>(config: ModelConfig, seed: u64) -> Result<TcnModel<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::<T>::zeros(&config);
    let fill = |values: &mut [T], bound: f64, rng: &mut ChaCha8Rng| {
        for v in values {
            *v = T::of(rng.random_range(-bound..bound));
        }
    };
    let c = config.channels;
    for block in &mut params.blocks {
        let conv_bound = (1.0 / (block.conv.in_channels * config.kernel_size) as f64).sqrt();
        fill(&mut block.conv.weights, conv_bound, &mut rng);
        fill(&mut block.conv.bias, conv_bound, &mut rng);
        fill(&mut block.film_weight, FILM_WEIGHT_INIT, &mut rng);
        for (j, b) in block.film_bias.iter_mut().enumerate() {
            *b = if j < c { T::one() } else { T::zero() };
        }
        block.prelu.fill(T::of(PRELU_INIT));
        let res_bound = (1.0 / block.residual.in_channels as f64).sqrt();
        fill(&mut block.residual.weights, res_bound, &mut rng);
        fill(&mut block.residual.bias, res_bound, &mut rng);
    }
    let out_bound = (1.0 / c as f64).sqrt();
    fill(&mut params.output.weights, out_bound, &mut rng);
    fill(&mut params.output.bias, out_bound, &mut rng);
    Ok(TcnModel {
        config,
        seed,
        params,
    })
}

impl<T: Real> TcnModel<T> {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        self.config.receptive_field()
    }

    /// Zero every FiLM projection weight, making the output independent of
    /// the conditioning vector.
    pub fn zero_film_weights(&mut self) {
        for b in &mut self.params.blocks {
            b.film_weight.fill(T::zero());
        }
    }

    /// `(gamma, beta)` of block `index` for conditioning `c`.
    pub fn film_parameters(&self, index: usize, c: &[T]) -> Result<(Vec<T>, Vec<T>), ModelError> {
        let b = &self.params.blocks[index];
        let mut gb = linear_fwd(c, &b.film_weight, &b.film_bias)?;
        let beta = gb.split_off(self.config.channels);
        Ok((gb, beta))
    }

    /// Forward pass over a raw mono sample sequence.
    pub fn forward_samples(
        &self,
        x: &[T],
        c: &[T],
        keep_cache: bool,
    ) -> Result<(Vec<T>, Option<ForwardCache<T>>), ModelError> {
        if c.len() != self.config.cond_dim {
            return Err(ModelError::ConditioningDim {
                expected: self.config.cond_dim,
                found: c.len(),
            });
        }
        if x.is_empty() {
            return Err(ShapeError::Mismatch {
                what: "model input frames",
                expected: 1,
                found: 0,
            }
            .into());
        }
        let mut h = FeatureMap::from_signal(x);
        let mut caches = Vec::with_capacity(if keep_cache { self.config.layers } else { 0 });
        for (i, block) in self.params.blocks.iter().enumerate() {
            let (gamma, beta) = self.film_parameters(i, c)?;
            let conv_out = conv1d_causal_fwd(&h, &block.conv)?;
            let film_out = film_fwd(&conv_out, &gamma, &beta)?;
            let mut next = prelu_fwd(&film_out, &block.prelu)?;
            next.add_assign(&conv1d_causal_fwd(&h, &block.residual)?);
            let input = std::mem::replace(&mut h, next);
            if keep_cache {
                caches.push(BlockCache {
                    input,
                    conv_out,
                    film_out,
                    gamma,
                    beta,
                });
            }
        }
        let y = conv1d_causal_fwd(&h, &self.params.output)?.into_vec();
        let cache = keep_cache.then(|| ForwardCache {
            conditioning: c.to_vec(),
            blocks: caches,
            last: h,
        });
        Ok((y, cache))
    }

    /// Gradients of `sum(grad_output * y)` for every parameter and the
    /// conditioning vector.
    pub fn backward(
        &self,
        cache: Option<&ForwardCache<T>>,
        grad_output: &[T],
    ) -> Result<Gradients<T>, ModelError> {
        let cache = cache.ok_or(ModelError::MissingCache)?;
        let mut grads = Params::zeros(&self.config);
        let mut grad_c = vec![T::zero(); self.config.cond_dim];
        let g = FeatureMap::from_vec(1, grad_output.len(), grad_output.to_vec())?;
        let out = conv1d_causal_bwd(&cache.last, &self.params.output, &g)?;
        grads.output.weights = out.grad_weights;
        grads.output.bias = out.grad_bias;
        let mut upstream = out.grad_x;

        for (i, block) in self.params.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let gb = &mut grads.blocks[i];
            let pre = prelu_bwd(&bc.film_out, &block.prelu, &upstream)?;
            gb.prelu = pre.grad_slopes;
            let film = film_bwd(&bc.conv_out, &bc.gamma, &bc.beta, &pre.grad_x)?;
            let mut grad_proj = film.grad_gamma;
            grad_proj.extend(film.grad_beta);
            let lin = linear_bwd(&cache.conditioning, &block.film_weight, &block.film_bias, &grad_proj)?;
            gb.film_weight = lin.grad_w;
            gb.film_bias = lin.grad_b;
            for (acc, v) in grad_c.iter_mut().zip(lin.grad_c) {
                *acc = *acc + v;
            }
            let conv = conv1d_causal_bwd(&bc.input, &block.conv, &film.grad_x)?;
            gb.conv.weights = conv.grad_weights;
            gb.conv.bias = conv.grad_bias;
            let res = conv1d_causal_bwd(&bc.input, &block.residual, &upstream)?;
            gb.residual.weights = res.grad_weights;
            gb.residual.bias = res.grad_bias;
            upstream = conv.grad_x;
            upstream.add_assign(&res.grad_x);
        }
        Ok(Gradients {
            params: grads,
            conditioning: grad_c,
        })
    }
}

impl TcnModel<f32> {
    /// Process a mono buffer under conditioning `c`.
    pub fn forward(
        &self,
        x: &AudioBuffer,
        c: &ConditioningVector,
        keep_cache: bool,
    ) -> Result<(AudioBuffer, Option<ForwardCache<f32>>), ModelError> {
        if x.sample_rate() != self.config.sample_rate {
            return Err(ModelError::SampleRateMismatch {
                expected: self.config.sample_rate,
                found: x.sample_rate(),
            });
        }
        if x.channel_count() != 1 {
            return Err(ModelError::NotMono(x.channel_count()));
        }
        let (y, cache) = self.forward_samples(x.samples(), c.values(), keep_cache)?;
        let out = AudioBuffer::mono(y, self.config.sample_rate).expect("valid output shape");
        Ok((out, cache))
    }

    pub fn render(&self, x: &AudioBuffer, c: &ConditioningVector) -> Result<AudioBuffer, ModelError> {
        Ok(self.forward(x, c, false)?.0)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            layers: self.config.layers,
            channels: self.config.channels,
            kernel_size: self.config.kernel_size,
            dilation_growth: self.config.dilation_growth,
            cond_dim: self.config.cond_dim,
            sample_rate: self.config.sample_rate,
            seed: self.seed,
            param_count: self.param_count(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for tensor in self.params.tensors() {
            for v in tensor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(CheckpointError::Truncated {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        need(12)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json_end = 12 + json_len;
        need(json_end)?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..json_end])?;
        let config = header.config();
        config.validate()?;
        let expected = config.param_count();
        if header.param_count != expected {
            return Err(CheckpointError::ParamCountMismatch {
                declared: header.param_count,
                expected,
            });
        }
        let params_end = json_end + 4 * expected;
        need(params_end + 4)?;
        if bytes.len() > params_end + 4 {
            return Err(CheckpointError::TrailingBytes(bytes.len() - params_end - 4));
        }
        let stored = u32::from_le_bytes(bytes[params_end..params_end + 4].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..params_end]);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut params = Params::<f32>::zeros(&config);
        let mut words = bytes[json_end..params_end]
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes(w.try_into().unwrap()));
        for tensor in params.tensors_mut() {
            for v in tensor {
                *v = words.next().expect("length checked");
            }
        }
        Ok(Self {
            config,
            seed: header.seed,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layers: usize,
    channels: usize,
    kernel_size: usize,
    dilation_growth: usize,
    cond_dim: usize,
    sample_rate: u32,
    seed: u64,
    param_count: usize,
}

impl CheckpointHeader {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            channels: self.channels,
            kernel_size: self.kernel_size,
            dilation_growth: self.dilation_growth,
            cond_dim: self.cond_dim,
            sample_rate: self.sample_rate,
        }
    }
}
