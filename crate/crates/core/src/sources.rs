//! Built-in test signals addressable by short specs, so experiments need no
//! binary fixtures: `impulse:<dur>`, `noise:<dur>`, `sine:<freq>,<dur>`.
//! Durations are seconds with an optional `s` suffix.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{make_impulse, make_noise, make_sine, read_wav, to_mono, AudioBuffer, AudioError};

/// Peak amplitude of the built-in noise source.
pub const NOISE_AMPLITUDE: f32 = 0.5;
/// Seed of the built-in noise source.
pub const NOISE_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("bad source spec {spec:?}: {reason}")]
    BadSpec { spec: String, reason: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BuiltinSource {
    /// Unit impulse at sample 0 followed by silence.
    Impulse { secs: f64 },
    /// Seeded uniform white noise at half scale.
    Noise { secs: f64 },
    /// Full-scale sine.
    Sine { freq: f64, secs: f64 },
}

impl BuiltinSource {
    pub fn duration_secs(&self) -> f64 {
        match *self {
            Self::Impulse { secs } | Self::Noise { secs } | Self::Sine { secs, .. } => secs,
        }
    }

    pub fn generate(&self, sample_rate: u32) -> Result<AudioBuffer, SourceError> {
        let frames = |secs: f64| ((secs * sample_rate as f64).round() as usize).max(1);
        Ok(match *self {
            Self::Impulse { secs } => make_impulse(frames(secs), 1.0, sample_rate),
            Self::Noise { secs } => make_noise(secs, NOISE_AMPLITUDE, NOISE_SEED, sample_rate),
            Self::Sine { freq, secs } => make_sine(freq, 1.0, secs, sample_rate)?,
        })
    }
}

impl fmt::Display for BuiltinSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Impulse { secs } => write!(f, "impulse:{secs}s"),
            Self::Noise { secs } => write!(f, "noise:{secs}s"),
            Self::Sine { freq, secs } => write!(f, "sine:{freq},{secs}s"),
        }
    }
}

impl FromStr for BuiltinSource {
    type Err = SourceError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| SourceError::BadSpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let (kind, args) = spec
            .split_once(':')
            .ok_or_else(|| bad("expected <kind>:<args>"))?;
        let duration = |text: &str| -> Result<f64, SourceError> {
            let text = text.trim();
            let secs: f64 = text
                .strip_suffix('s')
                .unwrap_or(text)
                .parse()
                .map_err(|_| bad("duration is not a number"))?;
            if secs.is_finite() && secs > 0.0 {
                Ok(secs)
            } else {
                Err(bad("duration must be positive"))
            }
        };
        match kind {
            "impulse" => Ok(Self::Impulse { secs: duration(args)? }),
            "noise" => Ok(Self::Noise { secs: duration(args)? }),
            "sine" => {
                let (freq, secs) = args
                    .split_once(',')
                    .ok_or_else(|| bad("expected sine:<freq>,<dur>"))?;
                let freq: f64 = freq.trim().parse().map_err(|_| bad("frequency is not a number"))?;
                if !(freq.is_finite() && freq > 0.0) {
                    return Err(bad("frequency must be positive"));
                }
                Ok(Self::Sine {
                    freq,
                    secs: duration(secs)?,
                })
            }
            _ => Err(bad("kind must be impulse, noise or sine")),
        }
    }
}

/// Returns true if `spec` looks like a built-in source rather than a path.
pub fn is_builtin(spec: &str) -> bool {
    ["impulse:", "noise:", "sine:"].iter().any(|p| spec.starts_with(p))
}

/// Resolve a built-in spec or a WAV path to a mono buffer. Built-ins are
/// generated at `sample_rate`; files keep their own rate.
pub fn load_source(spec: &str, sample_rate: u32) -> Result<AudioBuffer, SourceError> {
    if is_builtin(spec) {
        spec.parse::<BuiltinSource>()?.generate(sample_rate)
    } else {
        Ok(to_mono(&read_wav(Path::new(spec))?))
    }
}
