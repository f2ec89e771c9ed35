//! Multi-resolution STFT loss and its gradient with respect to the
//! prediction.
//!
//! For every resolution the signal is reflect-padded by `fft_size / 2` on both
//! sides, cut into Hann-windowed frames every `hop` samples (frame `f` is
//! centered on sample `f * hop`, giving `ceil(len / hop)` frames) and
//! transformed. With magnitudes `|X| = sqrt(re^2 + im^2 + 1e-12)`:
//!
//! ```text
//! sc      = || |Y| - |Y^| ||_F / || |Y| ||_F
//! log_mag = mean | ln(|Y| + 1e-8) - ln(|Y^| + 1e-8) |
//! total   = mean over resolutions of (sc + log_mag)
//! ```

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::Real;

/// Added under the square root of every magnitude.
pub const MAG_FLOOR: f64 = 1e-12;
/// Added inside the log-magnitude term and used as the silent-target bound.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction has {prediction} samples but target has {target}")]
    LengthMismatch { prediction: usize, target: usize },
    #[error("signal of {len} samples is shorter than fft size {fft_size}")]
    TooShort { len: usize, fft_size: usize },
    #[error("target is silent at fft size {fft_size}: spectral convergence is undefined")]
    SilentTarget { fft_size: usize },
    #[error("invalid STFT resolution: {0}")]
    InvalidResolution(String),
    #[error("at least one STFT resolution is required")]
    NoResolutions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftResolution {
    pub fft_size: usize,
    pub hop: usize,
}

impl StftResolution {
    /// Resolution with 75% overlap.
    pub fn new(fft_size: usize) -> Result<Self, LossError> {
        Self::with_hop(fft_size, (fft_size / 4).max(1))
    }

    pub fn with_hop(fft_size: usize, hop: usize) -> Result<Self, LossError> {
        if fft_size < 2 || !fft_size.is_power_of_two() {
            return Err(LossError::InvalidResolution(format!(
                "fft size {fft_size} is not a power of two"
            )));
        }
        if hop == 0 || hop > fft_size {
            return Err(LossError::InvalidResolution(format!(
                "hop {hop} outside 1..={fft_size}"
            )));
        }
        Ok(Self { fft_size, hop })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// `{32, 128, 512, 2048}` with hop `fft_size / 4`.
pub fn default_resolutions() -> Vec<StftResolution> {
    resolutions(&[32, 128, 512, 2048]).expect("valid sizes")
}

pub fn resolutions(sizes: &[usize]) -> Result<Vec<StftResolution>, LossError> {
    sizes.iter().map(|&s| StftResolution::new(s)).collect()
}

/// Frames x bins magnitude grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitudes<T> {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<T>,
}

impl<T: Real> Magnitudes<T> {
    pub fn get(&self, frame: usize, bin: usize) -> T {
        self.values[frame * self.bins + bin]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolutionLoss {
    pub fft_size: usize,
    pub spectral_convergence: f64,
    pub log_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<ResolutionLoss>,
}

impl LossReport {
    fn from_terms(terms: Vec<ResolutionLoss>) -> Self {
        let r = terms.len() as f64;
        let total = terms
            .iter()
            .map(|t| t.spectral_convergence + t.log_magnitude)
            .sum::<f64>()
            / r;
        Self { total, terms }
    }

    /// Mean spectral convergence over resolutions.
    pub fn spectral_convergence(&self) -> f64 {
        self.terms.iter().map(|t| t.spectral_convergence).sum::<f64>() / self.terms.len() as f64
    }

    /// Mean log-magnitude distance over resolutions.
    pub fn log_magnitude(&self) -> f64 {
        self.terms.iter().map(|t| t.log_magnitude).sum::<f64>() / self.terms.len() as f64
    }
}

/// Reflect index into `0..len` (edge sample not repeated).
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

struct Transform<T: Real> {
    res: StftResolution,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

struct Spectrum<T> {
    frames: usize,
    /// Complex bins `0..=fft/2` per frame.
    bins: Vec<Complex<T>>,
    mags: Vec<T>,
    /// `sum(re^2 + im^2)` without the magnitude floor.
    raw_energy: f64,
}

impl<T: Real> Transform<T> {
    fn new(res: StftResolution, planner: &mut FftPlanner<T>) -> Self {
        let n = res.fft_size;
        let window = (0..n)
            .map(|i| T::of(0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
            .collect();
        Self {
            res,
            window,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    fn analyze(&self, x: &[T]) -> Result<Spectrum<T>, LossError> {
        let n = self.res.fft_size;
        if x.len() < n {
            return Err(LossError::TooShort {
                len: x.len(),
                fft_size: n,
            });
        }
        let frames = self.res.frames(x.len());
        let nb = self.res.bins();
        let half = (n / 2) as isize;
        let floor = T::of(MAG_FLOOR);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.forward.get_inplace_scratch_len()];
        let mut bins = Vec::with_capacity(frames * nb);
        let mut mags = Vec::with_capacity(frames * nb);
        let mut raw_energy = 0.0;
        for f in 0..frames {
            let start = (f * self.res.hop) as isize - half;
            for (j, slot) in buf.iter_mut().enumerate() {
                let s = x[reflect(start + j as isize, x.len())];
                *slot = Complex::new(s * self.window[j], T::zero());
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for c in &buf[..nb] {
                let power = c.re * c.re + c.im * c.im;
                raw_energy += power.to_f64().unwrap();
                mags.push((power + floor).sqrt());
                bins.push(*c);
            }
        }
        Ok(Spectrum {
            frames,
            bins,
            mags,
            raw_energy,
        })
    }

    /// Maps a gradient w.r.t. the complex bins back onto the signal.
    fn synthesize_grad(&self, grad_bins: &[Complex<T>], frames: usize, out: &mut [T]) {
        let n = self.res.fft_size;
        let nb = self.res.bins();
        let half = (n / 2) as isize;
        let zero = Complex::new(T::zero(), T::zero());
        let mut buf = vec![zero; n];
        let mut scratch = vec![zero; self.inverse.get_inplace_scratch_len()];
        for f in 0..frames {
            buf[..nb].copy_from_slice(&grad_bins[f * nb..(f + 1) * nb]);
            buf[nb..].fill(zero);
            // d re_k / d s = w cos, d im_k / d s = -w sin, so the adjoint is
            // w * Re(sum_k G_k e^{+i theta}).
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = (f * self.res.hop) as isize - half;
            for (j, c) in buf.iter().enumerate() {
                let idx = reflect(start + j as isize, out.len());
                out[idx] = out[idx] + c.re * self.window[j];
            }
        }
    }
}

/// Magnitude spectrogram of `x` at one resolution.
pub fn stft_magnitude<T: Real>(x: &[T], res: StftResolution) -> Result<Magnitudes<T>, LossError> {
    let mut planner = FftPlanner::new();
    let spec = Transform::new(res, &mut planner).analyze(x)?;
    Ok(Magnitudes {
        frames: spec.frames,
        bins: res.bins(),
        values: spec.mags,
    })
}

struct TargetSpectrum<T: Real> {
    transform: Transform<T>,
    mags: Vec<T>,
    /// `ln(|Y| + eps)` per bin.
    log_mags: Vec<f64>,
    norm: f64,
}

/// Loss against a fixed target, with the target spectra computed once.
pub struct MrStftLoss<T: Real> {
    len: usize,
    targets: Vec<TargetSpectrum<T>>,
}

impl<T: Real> MrStftLoss<T> {
    pub fn new(target: &[T], resolutions: &[StftResolution]) -> Result<Self, LossError> {
        if resolutions.is_empty() {
            return Err(LossError::NoResolutions);
        }
        let mut planner = FftPlanner::new();
        let mut targets = Vec::with_capacity(resolutions.len());
        for &res in resolutions {
            let transform = Transform::new(res, &mut planner);
            let spec = transform.analyze(target)?;
            if spec.raw_energy.sqrt() < LOG_EPS {
                return Err(LossError::SilentTarget {
                    fft_size: res.fft_size,
                });
            }
            let norm = spec.mags.iter().map(|m| m.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            let log_mags = spec.mags.iter().map(|m| (m.to_f64().unwrap() + LOG_EPS).ln()).collect();
            targets.push(TargetSpectrum {
                transform,
                log_mags,
                mags: spec.mags,
                norm,
            });
        }
        Ok(Self {
            len: target.len(),
            targets,
        })
    }

    pub fn target_len(&self) -> usize {
        self.len
    }

    fn check_len(&self, prediction: &[T]) -> Result<(), LossError> {
        if prediction.len() != self.len {
            return Err(LossError::LengthMismatch {
                prediction: prediction.len(),
                target: self.len,
            });
        }
        Ok(())
    }

    pub fn loss(&self, prediction: &[T]) -> Result<LossReport, LossError> {
        self.evaluate(prediction, false).map(|(r, _)| r)
    }

    pub fn loss_and_grad(&self, prediction: &[T]) -> Result<(LossReport, Vec<T>), LossError> {
        self.evaluate(prediction, true)
            .map(|(r, g)| (r, g.expect("gradient requested")))
    }

    fn evaluate(&self, prediction: &[T], want_grad: bool) -> Result<(LossReport, Option<Vec<T>>), LossError> {
        self.check_len(prediction)?;
        let r = self.targets.len() as f64;
        let mut terms = Vec::with_capacity(self.targets.len());
        let mut grad = want_grad.then(|| vec![T::zero(); prediction.len()]);
        for target in &self.targets {
            let spec = target.transform.analyze(prediction)?;
            let count = spec.mags.len() as f64;
            let mut diff_sq = 0.0;
            let mut log_sum = 0.0;
            // prediction minus target, in log magnitude
            let mut log_diffs = Vec::with_capacity(spec.mags.len());
            for ((&p, &t), &lt) in spec.mags.iter().zip(&target.mags).zip(&target.log_mags) {
                let (p, t) = (p.to_f64().unwrap(), t.to_f64().unwrap());
                diff_sq += (t - p) * (t - p);
                let log_diff = (p + LOG_EPS).ln() - lt;
                log_sum += log_diff.abs();
                log_diffs.push(log_diff);
            }
            let diff_norm = diff_sq.sqrt();
            terms.push(ResolutionLoss {
                fft_size: target.transform.res.fft_size,
                spectral_convergence: diff_norm / target.norm,
                log_magnitude: log_sum / count,
            });

            if let Some(grad) = grad.as_mut() {
                let sc_scale = if diff_norm > 0.0 {
                    1.0 / (r * diff_norm * target.norm)
                } else {
                    0.0
                };
                let log_scale = 1.0 / (r * count);
                let grad_bins: Vec<Complex<T>> = spec
                    .bins
                    .iter()
                    .zip(spec.mags.iter().zip(&target.mags).zip(&log_diffs))
                    .map(|(c, ((&p, &t), &log_diff))| {
                        let (pf, tf) = (p.to_f64().unwrap(), t.to_f64().unwrap());
                        let sign = if log_diff > 0.0 {
                            1.0
                        } else if log_diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let d_mag = sc_scale * (pf - tf) + log_scale * sign / (pf + LOG_EPS);
                        let k = T::of(d_mag / pf);
                        Complex::new(c.re * k, c.im * k)
                    })
                    .collect();
                target.transform.synthesize_grad(&grad_bins, spec.frames, grad);
            }
        }
        Ok((LossReport::from_terms(terms), grad))
    }
}

pub fn mrstft_loss<T: Real>(
    prediction: &[T],
    target: &[T],
    resolutions: &[StftResolution],
) -> Result<LossReport, LossError> {
    if prediction.len() != target.len() {
        return Err(LossError::LengthMismatch {
            prediction: prediction.len(),
            target: target.len(),
        });
    }
    MrStftLoss::new(target, resolutions)?.loss(prediction)
}

pub fn mrstft_grad<T: Real>(
    prediction: &[T],
    target: &[T],
    resolutions: &[StftResolution],
) -> Result<Vec<T>, LossError> {
    if prediction.len() != target.len() {
        return Err(LossError::LengthMismatch {
            prediction: prediction.len(),
            target: target.len(),
        });
    }
    Ok(MrStftLoss::new(target, resolutions)?.loss_and_grad(prediction)?.1)
}
