//! Analysis metrics: integrated loudness, Schroeder energy decay, T60
//! estimation, conditioning-grid sweeps and the varying-level decay report.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{make_impulse, AudioBuffer};
use crate::model::{ConditioningVector, ModelError, TcnModel};

/// Lowest level reported by an energy decay curve, in dB.
pub const EDC_FLOOR_DB: f64 = -120.0;
/// Loudness block length and hop, in seconds.
pub const BLOCK_SECS: f64 = 0.4;
pub const BLOCK_STEP_SECS: f64 = 0.1;
const ABSOLUTE_GATE_LUFS: f64 = -70.0;
const RELATIVE_GATE_LU: f64 = -10.0;
const LOUDNESS_OFFSET: f64 = -0.691;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("input is {secs:.3} s long; loudness needs at least 0.4 s")]
    TooShort { secs: f64 },
    #[error("impulse response is all zeros")]
    ZeroImpulseResponse,
    #[error("decay fit failed: the curve only reaches {reached_db:.1} dB (need -15 dB and two points in the fit span)")]
    FitFailure { reached_db: f64 },
    #[error("grid needs at least 2 steps per axis, got {0}")]
    TooFewSteps(usize),
    #[error("grid range must satisfy min < max (got {min}..{max})")]
    BadRange { min: f64, max: f64 },
    #[error("grid sweep needs a model with at least 2 conditioning dimensions, got {0}")]
    ConditioningTooSmall(usize),
    #[error("no input levels given")]
    NoLevels,
    #[error("input level {0} must be positive and finite")]
    BadLevel(f64),
    #[error("impulse response length must be positive")]
    EmptyImpulse,
    #[error("unknown metric {0:?} (expected lufs, t60 or rms)")]
    UnknownMetric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of an integrated loudness measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loudness {
    Lufs(f64),
    /// Every block fell below the absolute gate (e.g. digital silence).
    BelowGate,
}

impl Loudness {
    pub fn lufs(self) -> Option<f64> {
        match self {
            Self::Lufs(v) => Some(v),
            Self::BelowGate => None,
        }
    }
}

impl fmt::Display for Loudness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Lufs(v) => write!(f, "{v:.2} LUFS"),
            Self::BelowGate => f.write_str("below gate"),
        }
    }
}

/// Direct-form biquad with `a0` normalized to one.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn process(&self, x: &[f32]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let v = v as f64;
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }

    fn process_f64(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }
}

/// The two K-weighting stages, derived for `sample_rate` from the analog
/// prototypes via the bilinear transform. At 48 kHz these reproduce the
/// tabulated coefficients of the loudness standard.
fn k_weighting(sample_rate: u32) -> (Biquad, Biquad) {
    let fs = sample_rate as f64;

    // high-shelf pre-filter
    let (f0, gain_db, q) = (1681.974450955533, 3.999843853973347, 0.7071752369554196);
    let k = (PI * f0 / fs).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.4996667741545416);
    let a0 = 1.0 + k / q + k * k;
    let shelf = Biquad {
        b: [
            (vh + vb * k / q + k * k) / a0,
            2.0 * (k * k - vh) / a0,
            (vh - vb * k / q + k * k) / a0,
        ],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };

    // RLB high-pass
    let (f0, q) = (38.13547087602444, 0.5003270373238773);
    let k = (PI * f0 / fs).tan();
    let a0 = 1.0 + k / q + k * k;
    let highpass = Biquad {
        b: [1.0, -2.0, 1.0],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };
    (shelf, highpass)
}

fn block_loudness(power: f64) -> f64 {
    LOUDNESS_OFFSET + 10.0 * power.log10()
}

/// Gated integrated loudness. All channels are weighted equally.
pub fn integrated_loudness(buffer: &AudioBuffer) -> Result<Loudness, EvalError> {
    let fs = buffer.sample_rate() as f64;
    let block = (BLOCK_SECS * fs).round() as usize;
    let step = (BLOCK_STEP_SECS * fs).round() as usize;
    if buffer.len() < block || block == 0 {
        return Err(EvalError::TooShort {
            secs: buffer.duration_secs(),
        });
    }
    let (shelf, highpass) = k_weighting(buffer.sample_rate());
    let weighted: Vec<Vec<f64>> = buffer
        .channels()
        .iter()
        .map(|ch| highpass.process_f64(&shelf.process(ch)))
        .collect();

    let blocks = (buffer.len() - block) / step + 1;
    let powers: Vec<f64> = (0..blocks)
        .map(|j| {
            let range = j * step..j * step + block;
            weighted
                .iter()
                .map(|ch| ch[range.clone()].iter().map(|v| v * v).sum::<f64>() / block as f64)
                .sum()
        })
        .collect();

    let gated_mean = |threshold: f64| -> Option<f64> {
        let kept: Vec<f64> = powers
            .iter()
            .copied()
            .filter(|&p| p > 0.0 && block_loudness(p) > threshold)
            .collect();
        (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
    };
    let Some(absolute) = gated_mean(ABSOLUTE_GATE_LUFS) else {
        return Ok(Loudness::BelowGate);
    };
    let relative_gate = block_loudness(absolute) + RELATIVE_GATE_LU;
    let mean = gated_mean(relative_gate.max(ABSOLUTE_GATE_LUFS)).unwrap_or(absolute);
    Ok(Loudness::Lufs(block_loudness(mean)))
}

/// Schroeder backward-integrated energy decay, normalized to 0 dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub times: Vec<f64>,
    pub levels_db: Vec<f64>,
}

impl DecayCurve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Lowest level the curve reaches.
    pub fn min_level(&self) -> f64 {
        self.levels_db.iter().copied().fold(0.0, f64::min)
    }

    /// CSV with header `time_s,level_db`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "time_s,level_db")?;
        for (t, l) in self.times.iter().zip(&self.levels_db) {
            writeln!(out, "{t},{l}")?;
        }
        Ok(())
    }
}

/// Energy decay curve of `ir`; energies are summed across channels.
pub fn schroeder_edc(ir: &AudioBuffer) -> Result<DecayCurve, EvalError> {
    let energy: Vec<f64> = (0..ir.len())
        .map(|n| ir.channels().iter().map(|ch| (ch[n] as f64).powi(2)).sum())
        .collect();
    let mut remaining = vec![0.0; energy.len()];
    let mut acc = 0.0;
    for (slot, e) in remaining.iter_mut().zip(&energy).rev() {
        acc += e;
        *slot = acc;
    }
    let total = acc;
    if !(total > 0.0) {
        return Err(EvalError::ZeroImpulseResponse);
    }
    let fs = ir.sample_rate() as f64;
    let levels_db = remaining
        .iter()
        .map(|&r| {
            if r > 0.0 {
                (10.0 * (r / total).log10()).clamp(EDC_FLOOR_DB, 0.0)
            } else {
                EDC_FLOOR_DB
            }
        })
        .collect();
    Ok(DecayCurve {
        times: (0..energy.len()).map(|n| n as f64 / fs).collect(),
        levels_db,
    })
}

/// Which part of the decay the line was fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSpan {
    /// -5..-25 dB, extrapolated x3.
    Primary,
    /// -5..-15 dB, extrapolated x6; reduced confidence.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T60Estimate {
    pub seconds: f64,
    pub span: FitSpan,
    /// Fitted decay rate in dB per second (negative).
    pub slope_db_per_s: f64,
    pub points: usize,
}

/// Least-squares line through the curve points with `lo <= level <= hi`.
fn fit_slope(edc: &DecayCurve, lo: f64, hi: f64) -> Option<(f64, usize)> {
    let pts: Vec<(f64, f64)> = edc
        .times
        .iter()
        .zip(&edc.levels_db)
        .filter(|(_, &l)| (lo..=hi).contains(&l))
        .map(|(&t, &l)| (t, l))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(t, l)| (t - mt) * (l - ml)).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| (t - mt) * (t - mt)).sum();
    let slope = sxy / sxx;
    (sxx > 0.0 && slope < 0.0).then_some((slope, pts.len()))
}

/// Reverberation time from the -5..-25 dB span of the decay, falling back
/// to -5..-15 dB when the curve is too shallow.
pub fn estimate_t60(edc: &DecayCurve) -> Result<T60Estimate, EvalError> {
    let reached = edc.min_level();
    let attempt = if reached <= -25.0 {
        fit_slope(edc, -25.0, -5.0).map(|f| (f, FitSpan::Primary))
    } else {
        None
    };
    let attempt = attempt.or_else(|| {
        if reached <= -15.0 {
            fit_slope(edc, -15.0, -5.0).map(|f| (f, FitSpan::Fallback))
        } else {
            None
        }
    });
    let ((slope, points), span) = attempt.ok_or(EvalError::FitFailure { reached_db: reached })?;
    Ok(T60Estimate {
        seconds: -60.0 / slope,
        span,
        slope_db_per_s: slope,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Lufs,
    T60,
    /// RMS level in dB re full scale.
    Rms,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lufs => "lufs",
            Self::T60 => "t60",
            Self::Rms => "rms",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lufs" => Ok(Self::Lufs),
            "t60" => Ok(Self::T60),
            "rms" => Ok(Self::Rms),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }
}

/// Outcome of evaluating one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// T60 from the shorter fallback span.
    Fallback,
    BelowGate,
    FitFailure,
    /// Output was silent (RMS metric) or the metric could not be computed.
    Failed,
}

impl CellStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Fallback => "fallback",
            Self::BelowGate => "below_gate",
            Self::FitFailure => "fit_failure",
            Self::Failed => "failed",
        }
    }
}

impl FromStr for CellStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::Ok, Self::Fallback, Self::BelowGate, Self::FitFailure, Self::Failed]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown cell status {s:?}"))
    }
}

/// Evaluate `metric` on one rendered output.
pub fn measure(metric: Metric, output: &AudioBuffer) -> (Option<f64>, CellStatus) {
    match metric {
        Metric::Rms => {
            let rms = output.rms();
            if rms > 0.0 && rms.is_finite() {
                (Some(20.0 * rms.log10()), CellStatus::Ok)
            } else {
                (None, CellStatus::Failed)
            }
        }
        Metric::Lufs => match integrated_loudness(output) {
            Ok(Loudness::Lufs(v)) if v.is_finite() => (Some(v), CellStatus::Ok),
            Ok(Loudness::BelowGate) => (None, CellStatus::BelowGate),
            _ => (None, CellStatus::Failed),
        },
        Metric::T60 => match schroeder_edc(output).and_then(|edc| estimate_t60(&edc)) {
            Ok(est) if est.seconds.is_finite() => (
                Some(est.seconds),
                match est.span {
                    FitSpan::Primary => CellStatus::Ok,
                    FitSpan::Fallback => CellStatus::Fallback,
                },
            ),
            Ok(_) | Err(EvalError::FitFailure { .. }) => (None, CellStatus::FitFailure),
            Err(_) => (None, CellStatus::Failed),
        },
    }
}

/// `steps` evenly spaced values from `min` to `max` inclusive.
pub fn lattice(min: f64, max: f64, steps: usize) -> Result<Vec<f64>, EvalError> {
    if steps < 2 {
        return Err(EvalError::TooFewSteps(steps));
    }
    if !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(EvalError::BadRange { min, max });
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| min + (max - min) * i as f64 / last)
        .collect())
}

/// Metric values over a `c0 x c1` lattice. `values[i][j]` belongs to
/// `(c0_axis[i], c1_axis[j])`; failed cells hold `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSweep {
    pub metric: Metric,
    pub c0_axis: Vec<f64>,
    pub c1_axis: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
    pub status: Vec<Vec<CellStatus>>,
}

impl GridSweep {
    /// Finite cell values in lattice order.
    pub fn finite_values(&self) -> Vec<f64> {
        self.values.iter().flatten().flatten().copied().collect()
    }

    /// `max - min` over the finite cells, or `None` if there are none.
    pub fn spread(&self) -> Option<f64> {
        let v = self.finite_values();
        let max = v.iter().copied().reduce(f64::max)?;
        let min = v.iter().copied().reduce(f64::min)?;
        Some(max - min)
    }

    /// CSV with header `c0,c1,metric,value,status`; failed cells have an
    /// empty value.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "c0,c1,metric,value,status")?;
        for (i, c0) in self.c0_axis.iter().enumerate() {
            for (j, c1) in self.c1_axis.iter().enumerate() {
                let value = self.values[i][j].map(|v| v.to_string()).unwrap_or_default();
                writeln!(out, "{c0},{c1},{},{value},{}", self.metric, self.status[i][j].name())?;
            }
        }
        Ok(())
    }
}

/// Square lattice over `[min, max]` on both conditioning axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: -5.0,
            max: 5.0,
            steps: 11,
        }
    }
}

/// Render `input` at every lattice point and evaluate `metric`. Conditioning
/// dimensions beyond the first two are held at zero. Cells are computed in
/// parallel and assembled in lattice order, so the result does not depend
/// on scheduling.
pub fn grid_sweep(
    model: &TcnModel<f32>,
    input: &AudioBuffer,
    c0_range: (f64, f64),
    c1_range: (f64, f64),
    steps: usize,
    metric: Metric,
) -> Result<GridSweep, EvalError> {
    let dim = model.config.cond_dim;
    if dim < 2 {
        return Err(EvalError::ConditioningTooSmall(dim));
    }
    let c0_axis = lattice(c0_range.0, c0_range.1, steps)?;
    let c1_axis = lattice(c1_range.0, c1_range.1, steps)?;
    // surface shape errors once instead of in every cell
    if input.sample_rate() != model.config.sample_rate {
        return Err(ModelError::SampleRateMismatch {
            expected: model.config.sample_rate,
            found: input.sample_rate(),
        }
        .into());
    }
    if input.channel_count() != 1 {
        return Err(ModelError::NotMono(input.channel_count()).into());
    }

    let cells: Vec<(usize, usize)> = (0..c0_axis.len())
        .flat_map(|i| (0..c1_axis.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<(Option<f64>, CellStatus)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut c = vec![0.0f32; dim];
            c[0] = c0_axis[i] as f32;
            c[1] = c1_axis[j] as f32;
            let c = ConditioningVector::new(c).expect("lattice values are finite");
            match model.render(input, &c) {
                Ok(out) => measure(metric, &out),
                Err(_) => (None, CellStatus::Failed),
            }
        })
        .collect();

    let cols = c1_axis.len();
    let values = results.chunks(cols).map(|row| row.iter().map(|r| r.0).collect()).collect();
    let status = results.chunks(cols).map(|row| row.iter().map(|r| r.1).collect()).collect();
    Ok(GridSweep {
        metric,
        c0_axis,
        c1_axis,
        values,
        status,
    })
}

/// One row of the varying-level decay report.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDecay {
    pub level: f64,
    pub curve: Result<DecayCurve, EvalError>,
    pub t60: Result<T60Estimate, EvalError>,
}

/// Render impulses of each amplitude in `levels` (each `ir_length` samples
/// long) under conditioning `c` and measure their decay.
pub fn decay_consistency(
    model: &TcnModel<f32>,
    levels: &[f64],
    ir_length: usize,
    c: &ConditioningVector,
) -> Result<Vec<LevelDecay>, EvalError> {
    if levels.is_empty() {
        return Err(EvalError::NoLevels);
    }
    if let Some(&bad) = levels.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(EvalError::BadLevel(bad));
    }
    if ir_length == 0 {
        return Err(EvalError::EmptyImpulse);
    }
    let sample_rate = model.config.sample_rate;
    levels
        .iter()
        .map(|&level| {
            let out = model.render(&make_impulse(ir_length, level as f32, sample_rate), c)?;
            let curve = schroeder_edc(&out);
            let t60 = curve.clone().and_then(|edc| estimate_t60(&edc));
            Ok(LevelDecay { level, curve, t60 })
        })
        .collect()
}

/// Long-format CSV of every curve: `level,time_s,level_db`.
pub fn write_decay_curves_csv(report: &[LevelDecay], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "level,time_s,level_db")?;
    for row in report {
        if let Ok(curve) = &row.curve {
            for (t, l) in curve.times.iter().zip(&curve.levels_db) {
                writeln!(out, "{},{t},{l}", row.level)?;
            }
        }
    }
    Ok(())
}

/// Summary CSV: `level,t60_s,span,status`.
pub fn write_decay_summary_csv(report: &[LevelDecay], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "level,t60_s,span,status")?;
    for row in report {
        match (&row.curve, &row.t60) {
            (_, Ok(est)) => {
                let span = match est.span {
                    FitSpan::Primary => "primary",
                    FitSpan::Fallback => "fallback",
                };
                writeln!(out, "{},{},{span},ok", row.level, est.seconds)?
            }
            (Err(EvalError::ZeroImpulseResponse), _) => writeln!(out, "{},,,silent", row.level)?,
            (_, Err(EvalError::FitFailure { .. })) => writeln!(out, "{},,,fit_failure", row.level)?,
            _ => writeln!(out, "{},,,failed", row.level)?,
        }
    }
    Ok(())
}
