//! Synthetic reference effects used to manufacture steering targets.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::audio::AudioBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum EffectError {
    #[error("unknown effect {0:?} (expected gain, softclip, echo or lowpass)")]
    UnknownEffect(String),
    #[error("bad parameters for {effect}: {reason}")]
    BadParams { effect: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceEffect {
    Gain { gain: f32 },
    /// `tanh(drive * x)`.
    SoftClip { drive: f32 },
    /// `x[n] + mix * x[n - delay]`.
    Echo { delay: usize, mix: f32 },
    /// `y[n] = (1 - a) x[n] + a y[n - 1]`.
    OnePoleLowpass { coefficient: f32 },
}

impl ReferenceEffect {
    /// Build an effect from its name and numeric parameters. Missing
    /// parameters take defaults (gain 0.5, drive 4, 1000-sample echo at 0.5,
    /// lowpass coefficient 0.9).
    pub fn from_name(name: &str, params: &[f64]) -> Result<Self, EffectError> {
        let arg = |i: usize, default: f64| params.get(i).copied().unwrap_or(default);
        let effect = match name {
            "gain" => Self::Gain {
                gain: arg(0, 0.5) as f32,
            },
            "softclip" => Self::SoftClip {
                drive: arg(0, 4.0) as f32,
            },
            "echo" => {
                let delay = arg(0, 1000.0);
                if delay < 0.0 || delay.fract() != 0.0 {
                    return Err(EffectError::BadParams {
                        effect: "echo",
                        reason: format!("delay {delay} is not a whole number of samples"),
                    });
                }
                Self::Echo {
                    delay: delay as usize,
                    mix: arg(1, 0.5) as f32,
                }
            }
            "lowpass" | "onepole_lowpass" => {
                let a = arg(0, 0.9);
                if !(0.0..1.0).contains(&a) {
                    return Err(EffectError::BadParams {
                        effect: "lowpass",
                        reason: format!("coefficient {a} outside [0, 1)"),
                    });
                }
                Self::OnePoleLowpass {
                    coefficient: a as f32,
                }
            }
            other => return Err(EffectError::UnknownEffect(other.to_string())),
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(EffectError::BadParams {
                effect: effect.name(),
                reason: "non-finite parameter".into(),
            });
        }
        Ok(effect)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gain { .. } => "gain",
            Self::SoftClip { .. } => "softclip",
            Self::Echo { .. } => "echo",
            Self::OnePoleLowpass { .. } => "lowpass",
        }
    }

    pub fn process(&self, x: &[f32]) -> Vec<f32> {
        match *self {
            Self::Gain { gain } => x.iter().map(|v| v * gain).collect(),
            Self::SoftClip { drive } => x.iter().map(|v| (drive * v).tanh()).collect(),
            Self::Echo { delay, mix } => (0..x.len())
                .map(|n| if n >= delay { x[n] + mix * x[n - delay] } else { x[n] })
                .collect(),
            Self::OnePoleLowpass { coefficient: a } => {
                let mut state = 0.0;
                x.iter()
                    .map(|&v| {
                        state = (1.0 - a) * v + a * state;
                        state
                    })
                    .collect()
            }
        }
    }

    /// Apply channel by channel.
    pub fn apply(&self, buffer: &AudioBuffer) -> AudioBuffer {
        let channels = buffer.channels().iter().map(|c| self.process(c)).collect();
        AudioBuffer::new(channels, buffer.sample_rate()).expect("shape preserved")
    }
}

impl fmt::Display for ReferenceEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gain { gain } => write!(f, "gain:{gain}"),
            Self::SoftClip { drive } => write!(f, "softclip:{drive}"),
            Self::Echo { delay, mix } => write!(f, "echo:{delay}:{mix}"),
            Self::OnePoleLowpass { coefficient } => write!(f, "lowpass:{coefficient}"),
        }
    }
}

/// Parses `name[:param[:param]]`, e.g. `echo:2205:0.5`.
impl FromStr for ReferenceEffect {
    type Err = EffectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let params = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| EffectError::BadParams {
                    effect: "effect",
                    reason: format!("{p:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_name(name, &params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::make_impulse;

    #[test]
    fn gain_halves() {
        let fx = ReferenceEffect::from_name("gain", &[0.5]).unwrap();
        assert_eq!(fx.process(&[1.0]), vec![0.5]);
    }

    #[test]
    fn softclip_fixes_zero() {
        let fx = ReferenceEffect::from_name("softclip", &[4.0]).unwrap();
        assert_eq!(fx.process(&[0.0]), vec![0.0]);
        assert!((fx.process(&[1.0])[0] - 4.0f32.tanh()).abs() < 1e-7);
    }

    #[test]
    fn echo_on_impulse() {
        let fx = ReferenceEffect::from_name("echo", &[1000.0, 0.5]).unwrap();
        let y = fx.apply(&make_impulse(3000, 1.0, 44_100));
        let nonzero: Vec<usize> = y
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![0, 1000]);
        assert_eq!(y.samples()[1000], 0.5);
    }

    #[test]
    fn lowpass_step_response() {
        let fx = ReferenceEffect::from_name("lowpass", &[0.5]).unwrap();
        assert_eq!(fx.process(&[1.0, 1.0, 1.0]), vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn parse_and_errors() {
        assert_eq!(
            "echo:2205:0.5".parse::<ReferenceEffect>().unwrap(),
            ReferenceEffect::Echo { delay: 2205, mix: 0.5 }
        );
        assert_eq!("softclip".parse::<ReferenceEffect>().unwrap(), ReferenceEffect::SoftClip { drive: 4.0 });
        assert!(matches!(
            ReferenceEffect::from_name("flanger", &[]),
            Err(EffectError::UnknownEffect(_))
        ));
        assert!("echo:1.5".parse::<ReferenceEffect>().is_err());
        assert!("lowpass:1.0".parse::<ReferenceEffect>().is_err());
        assert!("gain:abc".parse::<ReferenceEffect>().is_err());
    }
}
