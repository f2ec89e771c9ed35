//! Differentiable layer primitives with hand-written forward and backward
//! passes, plus the Adam update.
//!
//! Every kernel is generic over [`Real`] so that training runs in `f32` while
//! gradient checks instantiate the identical code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Floating point scalar the kernels are instantiated for.
pub trait Real:
    Float + FromPrimitive + rustfft::FftNum + Default + Debug + Sum + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ShapeError {
    #[error("{what}: expected {expected}, got {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite gradient in tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
}

fn expect_len(what: &'static str, expected: usize, found: usize) -> Result<(), ShapeError> {
    if expected == found {
        Ok(())
    } else {
        Err(ShapeError::Mismatch {
            what,
            expected,
            found,
        })
    }
}

/// Channels x frames activation grid, addressed as `(channel, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    frames: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, frames: usize) -> Self {
        assert!(channels >= 1 && frames >= 1, "feature map must be non-empty");
        Self {
            channels,
            frames,
            data: vec![T::zero(); channels * frames],
        }
    }

    pub fn from_vec(channels: usize, frames: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        assert!(channels >= 1 && frames >= 1, "feature map must be non-empty");
        expect_len("feature map data", channels * frames, data.len())?;
        Ok(Self {
            channels,
            frames,
            data,
        })
    }

    /// Single-channel map over a sample sequence.
    pub fn from_signal(samples: &[T]) -> Self {
        Self {
            channels: 1,
            frames: samples.len(),
            data: samples.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, channel: usize, frame: usize) -> T {
        self.data[channel * self.frames + frame]
    }

    pub fn set(&mut self, channel: usize, frame: usize, value: T) {
        self.data[channel * self.frames + frame] = value;
    }

    pub fn row(&self, channel: usize) -> &[T] {
        &self.data[channel * self.frames..(channel + 1) * self.frames]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [T] {
        &mut self.data[channel * self.frames..(channel + 1) * self.frames]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.channels, other.channels);
        assert_eq!(self.frames, other.frames);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Weights of a causal dilated 1-D convolution.
///
/// `weights` is laid out `[out][in][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        assert!(kernel_size >= 1 && dilation >= 1);
        Self {
            out_channels,
            in_channels,
            kernel_size,
            dilation,
            weights: vec![T::zero(); out_channels * in_channels * kernel_size],
            bias: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    pub fn index(&self, out: usize, input: usize, tap: usize) -> usize {
        (out * self.in_channels + input) * self.kernel_size + tap
    }

    pub fn weight(&self, out: usize, input: usize, tap: usize) -> T {
        self.weights[self.index(out, input, tap)]
    }

    /// Delay, in frames, applied to the input by `tap`.
    #[inline]
    pub fn tap_delay(&self, tap: usize) -> usize {
        self.dilation * (self.kernel_size - 1 - tap)
    }

    fn check_shapes(&self) -> Result<(), ShapeError> {
        expect_len(
            "conv weights",
            self.out_channels * self.in_channels * self.kernel_size,
            self.weights.len(),
        )?;
        expect_len("conv bias", self.out_channels, self.bias.len())
    }
}

/// Frames processed together so the working rows stay cache resident.
const FRAME_BLOCK: usize = 2048;
const LANES: usize = 8;

#[inline]
fn axpy<T: Real>(y: &mut [T], w: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + w * xv;
    }
}

/// Dot product with a fixed eight-lane summation order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            lanes[l] = lanes[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&p, &q) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + p * q;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    ((pairs[0] + pairs[2]) + (pairs[1] + pairs[3])) + tail
}

#[inline]
fn sum<T: Real>(a: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let mut chunks = a.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            lanes[l] = lanes[l] + c[l];
        }
    }
    let tail = chunks.remainder().iter().fold(T::zero(), |acc, &v| acc + v);
    lanes.iter().fold(T::zero(), |acc, &v| acc + v) + tail
}

/// Causal dilated convolution with left zero-padding of `dilation * (K - 1)`.
///
/// Each output element is accumulated as `bias + sum_i sum_t w * x` in a
/// fixed order, so results do not depend on the frame blocking.
pub fn conv1d_causal_fwd<T: Real>(
    x: &FeatureMap<T>,
    k: &ConvKernel<T>,
) -> Result<FeatureMap<T>, ShapeError> {
    k.check_shapes()?;
    expect_len("conv input channels", k.in_channels, x.channels())?;
    let n = x.frames();
    let mut y = FeatureMap::zeros(k.out_channels, n);
    for a in (0..n).step_by(FRAME_BLOCK) {
        let b = (a + FRAME_BLOCK).min(n);
        for o in 0..k.out_channels {
            let row = &mut y.row_mut(o)[a..b];
            row.fill(k.bias[o]);
            for i in 0..k.in_channels {
                let xi = x.row(i);
                for t in 0..k.kernel_size {
                    let shift = k.tap_delay(t);
                    let lo = a.max(shift);
                    if lo >= b {
                        continue;
                    }
                    axpy(&mut row[lo - a..], k.weight(o, i, t), &xi[lo - shift..b - shift]);
                }
            }
        }
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub grad_x: FeatureMap<T>,
    pub grad_weights: Vec<T>,
    pub grad_bias: Vec<T>,
}

pub fn conv1d_causal_bwd<T: Real>(
    x: &FeatureMap<T>,
    k: &ConvKernel<T>,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>, ShapeError> {
    k.check_shapes()?;
    expect_len("conv input channels", k.in_channels, x.channels())?;
    expect_len("conv grad channels", k.out_channels, grad_out.channels())?;
    expect_len("conv grad frames", x.frames(), grad_out.frames())?;
    let n = x.frames();
    let mut grad_x = FeatureMap::zeros(k.in_channels, n);
    let mut grad_weights = vec![T::zero(); k.weights.len()];
    let grad_bias = (0..k.out_channels).map(|o| sum(grad_out.row(o))).collect();

    for a in (0..n).step_by(FRAME_BLOCK) {
        let b = (a + FRAME_BLOCK).min(n);
        // weight gradients: output frames [a, b) against delayed inputs
        for o in 0..k.out_channels {
            let go = grad_out.row(o);
            for i in 0..k.in_channels {
                let xi = x.row(i);
                for t in 0..k.kernel_size {
                    let shift = k.tap_delay(t);
                    let lo = a.max(shift);
                    if lo >= b {
                        continue;
                    }
                    let idx = k.index(o, i, t);
                    grad_weights[idx] = grad_weights[idx] + dot(&go[lo..b], &xi[lo - shift..b - shift]);
                }
            }
        }
        // input gradients: input frames [a, b) from later outputs
        for i in 0..k.in_channels {
            let gx = &mut grad_x.row_mut(i)[a..b];
            for o in 0..k.out_channels {
                let go = grad_out.row(o);
                for t in 0..k.kernel_size {
                    let shift = k.tap_delay(t);
                    if shift >= n {
                        continue;
                    }
                    let hi = b.min(n - shift);
                    if hi <= a {
                        continue;
                    }
                    axpy(&mut gx[..hi - a], k.weight(o, i, t), &go[a + shift..hi + shift]);
                }
            }
        }
    }
    Ok(ConvGrads {
        grad_x,
        grad_weights,
        grad_bias,
    })
}

/// Feature-wise affine modulation: `gamma[c] * x[c][n] + beta[c]`.
pub fn film_fwd<T: Real>(
    x: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<FeatureMap<T>, ShapeError> {
    expect_len("film gamma", x.channels(), gamma.len())?;
    expect_len("film beta", x.channels(), beta.len())?;
    let mut y = x.clone();
    for c in 0..x.channels() {
        let (g, b) = (gamma[c], beta[c]);
        for v in y.row_mut(c) {
            *v = g * *v + b;
        }
    }
    Ok(y)
}

pub struct FilmGrads<T> {
    pub grad_x: FeatureMap<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

pub fn film_bwd<T: Real>(
    x: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
    grad_out: &FeatureMap<T>,
) -> Result<FilmGrads<T>, ShapeError> {
    expect_len("film gamma", x.channels(), gamma.len())?;
    expect_len("film beta", x.channels(), beta.len())?;
    expect_len("film grad channels", x.channels(), grad_out.channels())?;
    expect_len("film grad frames", x.frames(), grad_out.frames())?;
    let mut grad_x = grad_out.clone();
    let mut grad_gamma = vec![T::zero(); x.channels()];
    let mut grad_beta = vec![T::zero(); x.channels()];
    for c in 0..x.channels() {
        let go = grad_out.row(c);
        let xc = x.row(c);
        grad_beta[c] = sum(go);
        grad_gamma[c] = dot(go, xc);
        let g = gamma[c];
        for v in grad_x.row_mut(c) {
            *v = g * *v;
        }
    }
    Ok(FilmGrads {
        grad_x,
        grad_gamma,
        grad_beta,
    })
}

/// Dense affine projection `W c + b`, with `W` stored row-major as
/// `outputs x inputs`.
pub fn linear_fwd<T: Real>(c: &[T], w: &[T], b: &[T]) -> Result<Vec<T>, ShapeError> {
    let outputs = b.len();
    expect_len("linear weight", outputs * c.len(), w.len())?;
    Ok((0..outputs)
        .map(|r| {
            let row = &w[r * c.len()..(r + 1) * c.len()];
            row.iter().zip(c).fold(b[r], |acc, (&wv, &cv)| acc + wv * cv)
        })
        .collect())
}

pub struct LinearGrads<T> {
    pub grad_c: Vec<T>,
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
}

pub fn linear_bwd<T: Real>(
    c: &[T],
    w: &[T],
    b: &[T],
    grad_out: &[T],
) -> Result<LinearGrads<T>, ShapeError> {
    let outputs = b.len();
    expect_len("linear weight", outputs * c.len(), w.len())?;
    expect_len("linear grad", outputs, grad_out.len())?;
    let d = c.len();
    let mut grad_c = vec![T::zero(); d];
    let mut grad_w = vec![T::zero(); w.len()];
    for r in 0..outputs {
        let g = grad_out[r];
        for j in 0..d {
            grad_w[r * d + j] = g * c[j];
            grad_c[j] = grad_c[j] + w[r * d + j] * g;
        }
    }
    Ok(LinearGrads {
        grad_c,
        grad_w,
        grad_b: grad_out.to_vec(),
    })
}

/// Per-channel parametric ReLU.
pub fn prelu_fwd<T: Real>(x: &FeatureMap<T>, slopes: &[T]) -> Result<FeatureMap<T>, ShapeError> {
    expect_len("prelu slopes", x.channels(), slopes.len())?;
    let mut y = x.clone();
    for (c, &a) in slopes.iter().enumerate() {
        for v in y.row_mut(c) {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
    }
    Ok(y)
}

pub struct PreluGrads<T> {
    pub grad_x: FeatureMap<T>,
    pub grad_slopes: Vec<T>,
}

/// Backward pass; at `x == 0` the positive branch is taken.
pub fn prelu_bwd<T: Real>(
    x: &FeatureMap<T>,
    slopes: &[T],
    grad_out: &FeatureMap<T>,
) -> Result<PreluGrads<T>, ShapeError> {
    expect_len("prelu slopes", x.channels(), slopes.len())?;
    expect_len("prelu grad channels", x.channels(), grad_out.channels())?;
    expect_len("prelu grad frames", x.frames(), grad_out.frames())?;
    let mut grad_x = grad_out.clone();
    let mut grad_slopes = vec![T::zero(); x.channels()];
    for c in 0..x.channels() {
        let a = slopes[c];
        let xc = x.row(c);
        let mut acc = T::zero();
        for (gv, &xv) in grad_x.row_mut(c).iter_mut().zip(xc) {
            if xv < T::zero() {
                acc = acc + *gv * xv;
                *gv = a * *gv;
            }
        }
        grad_slopes[c] = acc;
    }
    Ok(PreluGrads {
        grad_x,
        grad_slopes,
    })
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self::with_hyperparameters(len, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_hyperparameters(len: usize, beta1: T, beta2: T, epsilon: T) -> Self {
        assert!(beta1 > T::zero() && beta1 < T::one());
        assert!(beta2 > T::zero() && beta2 < T::one());
        Self {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam update over a set of tensors that together make up
/// the flat parameter vector tracked by `state`.
///
/// Gradients are validated before anything is modified, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<(), ShapeError> {
    assert!(lr > T::zero(), "learning rate must be positive");
    expect_len("adam tensor count", params.len(), grads.len())?;
    let mut total = 0;
    for (tensor, (p, g)) in params.iter().zip(grads).enumerate() {
        expect_len("adam tensor", p.len(), g.len())?;
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(ShapeError::NonFiniteGradient { tensor, index });
        }
        total += p.len();
    }
    expect_len("adam state", state.len(), total)?;

    state.step_count += 1;
    let step = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let correction1 = T::one() - b1.powi(step);
    let correction2 = T::one() - b2.powi(step);
    let mut offset = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        let m = &mut state.first_moment[offset..offset + p.len()];
        let v = &mut state.second_moment[offset..offset + p.len()];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        offset += p.len();
    }
    Ok(())
}
