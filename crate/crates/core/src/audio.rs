//! Sampled audio buffers, WAV input/output and synthetic test signals.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unreadable WAV data: {0}")]
    Malformed(String),
    #[error("unsupported WAV codec: {0}")]
    UnsupportedCodec(String),
    #[error("WAV contains no audio frames")]
    Empty,
    #[error("WAV contains non-finite sample at frame {0}")]
    NonFinite(usize),
    #[error("channels have unequal lengths")]
    RaggedChannels,
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("sine frequency {freq} Hz outside (0, {nyquist}) Hz")]
    FrequencyOutOfRange { freq: f64, nyquist: f64 },
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

/// Per-channel sample sequences at a fixed sample rate. Full scale is ±1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        let first = channels.first().map(Vec::len).ok_or(AudioError::Empty)?;
        if channels.iter().any(|c| c.len() != first) {
            return Err(AudioError::RaggedChannels);
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Number of frames (samples per channel).
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, index: usize) -> &[f32] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    /// Samples of a mono buffer. Panics on multichannel input.
    pub fn samples(&self) -> &[f32] {
        assert_eq!(self.channels.len(), 1, "expected mono buffer");
        &self.channels[0]
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&v| v * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Root-mean-square over all channels and frames.
    pub fn rms(&self) -> f64 {
        let count = (self.len() * self.channel_count()) as f64;
        let energy: f64 = self
            .channels
            .iter()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        (energy / count).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Float32,
    Pcm16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteReport {
    /// Samples clamped into [-1, 1] (PCM only).
    pub clipped: usize,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

/// Decode an in-memory RIFF/WAVE file.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    let mut reader =
        hound::WavReader::new(Cursor::new(bytes)).map_err(|e| AudioError::Malformed(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::Malformed("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| AudioError::Malformed(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| AudioError::Malformed(e.to_string()))?
        }
        (format, bits) => {
            return Err(AudioError::UnsupportedCodec(format!("{format:?} {bits}-bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(AudioError::Empty);
    }
    if let Some(pos) = interleaved.iter().position(|v| !v.is_finite()) {
        return Err(AudioError::NonFinite(pos / channels));
    }
    let frames = interleaved.len() / channels;
    let mut split = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (dst, &v) in split.iter_mut().zip(frame) {
            dst.push(v);
        }
    }
    AudioBuffer::new(split, spec.sample_rate)
}

/// Encode a buffer as a little-endian RIFF/WAVE byte stream.
pub fn encode_wav(
    buffer: &AudioBuffer,
    format: SampleFormat,
) -> Result<(Vec<u8>, WriteReport), AudioError> {
    let spec = hound::WavSpec {
        channels: buffer.channel_count() as u16,
        sample_rate: buffer.sample_rate(),
        bits_per_sample: match format {
            SampleFormat::Float32 => 32,
            SampleFormat::Pcm16 => 16,
        },
        sample_format: match format {
            SampleFormat::Float32 => hound::SampleFormat::Float,
            SampleFormat::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let fail = |e: hound::Error| AudioError::Write {
        path: "<memory>".into(),
        reason: e.to_string(),
    };
    let mut out = Vec::new();
    let mut report = WriteReport::default();
    {
        let mut writer = hound::WavWriter::new(Cursor::new(&mut out), spec).map_err(fail)?;
        for n in 0..buffer.len() {
            for ch in buffer.channels() {
                let v = ch[n];
                match format {
                    SampleFormat::Float32 => writer.write_sample(v).map_err(fail)?,
                    SampleFormat::Pcm16 => {
                        if !(-1.0..=1.0).contains(&v) {
                            report.clipped += 1;
                        }
                        let q = (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0);
                        writer.write_sample(q as i16).map_err(fail)?
                    }
                }
            }
        }
        writer.finalize().map_err(fail)?;
    }
    Ok((out, report))
}

pub fn write_wav(
    path: impl AsRef<Path>,
    buffer: &AudioBuffer,
    format: SampleFormat,
) -> Result<WriteReport, AudioError> {
    let path = path.as_ref();
    let (bytes, report) = encode_wav(buffer, format)?;
    std::fs::write(path, bytes).map_err(|e| AudioError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if report.clipped > 0 {
        log::warn!("{}: {} samples clipped to full scale", path.display(), report.clipped);
    }
    Ok(report)
}

/// Mean over channels. Mono input is returned unchanged.
pub fn to_mono(buffer: &AudioBuffer) -> AudioBuffer {
    if buffer.channel_count() == 1 {
        return buffer.clone();
    }
    let count = buffer.channel_count() as f32;
    let samples = (0..buffer.len())
        .map(|n| buffer.channels().iter().map(|c| c[n]).sum::<f32>() / count)
        .collect();
    AudioBuffer {
        channels: vec![samples],
        sample_rate: buffer.sample_rate(),
    }
}

pub fn make_impulse(length: usize, amplitude: f32, sample_rate: u32) -> AudioBuffer {
    assert!(length >= 1, "impulse needs at least one sample");
    let mut samples = vec![0.0; length];
    samples[0] = amplitude;
    AudioBuffer {
        channels: vec![samples],
        sample_rate,
    }
}

pub fn make_sine(
    freq: f64,
    amplitude: f32,
    duration_secs: f64,
    sample_rate: u32,
) -> Result<AudioBuffer, AudioError> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(freq > 0.0 && freq < nyquist) {
        return Err(AudioError::FrequencyOutOfRange { freq, nyquist });
    }
    let frames = (duration_secs * sample_rate as f64).round() as usize;
    let step = 2.0 * PI * freq / sample_rate as f64;
    let samples = (0..frames.max(1))
        .map(|n| amplitude * (step * n as f64).sin() as f32)
        .collect();
    AudioBuffer::mono(samples, sample_rate)
}

/// Uniform white noise in `[-amplitude, amplitude)`, reproducible from `seed`.
pub fn make_noise(duration_secs: f64, amplitude: f32, seed: u64, sample_rate: u32) -> AudioBuffer {
    let frames = ((duration_secs * sample_rate as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..frames)
        .map(|_| amplitude * rng.random_range(-1.0f32..1.0))
        .collect();
    AudioBuffer {
        channels: vec![samples],
        sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16_bytes(samples: &[i16]) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut out = Vec::new();
        let mut w = hound::WavWriter::new(Cursor::new(&mut out), spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        out
    }

    #[test]
    fn pcm16_scaling() {
        let buf = decode_wav(&pcm16_bytes(&[0, 16384, -32768])).unwrap();
        assert_eq!(buf.samples(), &[0.0, 0.5, -1.0]);
    }

    #[test]
    fn pcm24_scaling() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 48_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut out = Vec::new();
        let mut w = hound::WavWriter::new(Cursor::new(&mut out), spec).unwrap();
        for s in [0i32, 1 << 22, -(1 << 23)] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let buf = decode_wav(&out).unwrap();
        assert_eq!(buf.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(buf.sample_rate(), 48_000);
    }

    #[test]
    fn float_passthrough() {
        let buf = AudioBuffer::mono(vec![0.25], 44_100).unwrap();
        let (bytes, _) = encode_wav(&buf, SampleFormat::Float32).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap().samples(), &[0.25]);
    }

    #[test]
    fn pcm16_write_clamps_and_counts() {
        let buf = AudioBuffer::mono(vec![1.5, 0.0, -2.0], 44_100).unwrap();
        let (bytes, report) = encode_wav(&buf, SampleFormat::Pcm16).unwrap();
        assert_eq!(report.clipped, 2);
        let mut r = hound::WavReader::new(Cursor::new(&bytes)).unwrap();
        let raw: Vec<i16> = r.samples::<i16>().map(Result::unwrap).collect();
        assert_eq!(raw, vec![32767, 0, -32768]);
    }

    #[test]
    fn unsupported_and_empty() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut out = Vec::new();
        let mut w = hound::WavWriter::new(Cursor::new(&mut out), spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(decode_wav(&out), Err(AudioError::UnsupportedCodec(_))));
        assert!(matches!(decode_wav(&pcm16_bytes(&[])), Err(AudioError::Empty)));
        assert!(matches!(decode_wav(b"not a wav"), Err(AudioError::Malformed(_))));
        assert!(matches!(read_wav("/nonexistent/x.wav"), Err(AudioError::Io { .. })));
    }

    #[test]
    fn non_finite_float_rejected() {
        let buf = AudioBuffer::mono(vec![0.0, f32::INFINITY], 44_100).unwrap();
        let (bytes, _) = encode_wav(&buf, SampleFormat::Float32).unwrap();
        assert!(matches!(decode_wav(&bytes), Err(AudioError::NonFinite(1))));
    }

    #[test]
    fn stereo_round_trip_interleaving() {
        let buf = AudioBuffer::new(vec![vec![0.1, 0.2], vec![-0.3, -0.4]], 22_050).unwrap();
        let (bytes, _) = encode_wav(&buf, SampleFormat::Float32).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap(), buf);
    }

    #[test]
    fn mono_mixdown() {
        let st = AudioBuffer::new(vec![vec![1.0], vec![0.0]], 44_100).unwrap();
        assert_eq!(to_mono(&st).samples(), &[0.5]);
        let three = AudioBuffer::new(vec![vec![0.3]; 3], 44_100).unwrap();
        assert!((to_mono(&three).samples()[0] - 0.3).abs() < 1e-7);
        let mono = AudioBuffer::mono(vec![0.1, -0.7], 44_100).unwrap();
        assert_eq!(to_mono(&mono), mono);
    }

    #[test]
    fn ragged_and_zero_rate_rejected() {
        assert!(matches!(
            AudioBuffer::new(vec![vec![0.0], vec![]], 44_100),
            Err(AudioError::RaggedChannels)
        ));
        assert!(matches!(AudioBuffer::mono(vec![0.0], 0), Err(AudioError::ZeroSampleRate)));
    }

    #[test]
    fn impulses() {
        assert_eq!(make_impulse(4, 1.0, 44_100).samples(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(make_impulse(4, 0.1, 44_100).samples(), &[0.1, 0.0, 0.0, 0.0]);
        assert_eq!(make_impulse(1, -0.5, 44_100).samples(), &[-0.5]);
    }

    #[test]
    fn sine_quarter_rate() {
        let s = make_sine(11_025.0, 1.0, 8.0 / 44_100.0, 44_100).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0];
        for (a, b) in s.samples().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        let silent = make_sine(440.0, 0.0, 0.01, 44_100).unwrap();
        assert!(silent.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_rms() {
        let s = make_sine(997.0, 1.0, 10.0, 48_000).unwrap();
        assert!((s.rms() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
    }

    #[test]
    fn sine_frequency_range() {
        assert!(make_sine(0.0, 1.0, 1.0, 44_100).is_err());
        assert!(make_sine(22_050.0, 1.0, 1.0, 44_100).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let a = make_noise(0.01, 0.5, 3, 44_100);
        assert_eq!(a, make_noise(0.01, 0.5, 3, 44_100));
        assert_ne!(a, make_noise(0.01, 0.5, 4, 44_100));
        assert!(a.samples().iter().all(|v| v.abs() <= 0.5));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn float32_round_trip_is_bit_exact(
                samples in prop::collection::vec(-1.0e6f32..1.0e6, 1..512),
                rate in 1u32..192_000,
            ) {
                let buf = AudioBuffer::mono(samples, rate).unwrap();
                let (bytes, _) = encode_wav(&buf, SampleFormat::Float32).unwrap();
                let back = decode_wav(&bytes).unwrap();
                let a: Vec<u32> = buf.samples().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = back.samples().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
                prop_assert_eq!(back.sample_rate(), rate);
            }

            #[test]
            fn to_mono_is_idempotent(
                chans in 1usize..4,
                frames in 1usize..64,
                seed in any::<u64>(),
            ) {
                let noise = make_noise(frames as f64 / 1000.0, 1.0, seed, 1000);
                let channels = (0..chans).map(|c| noise.samples().iter().map(|v| v * (c as f32 + 1.0)).collect()).collect();
                let buf = AudioBuffer::new(channels, 1000).unwrap();
                let once = to_mono(&buf);
                prop_assert_eq!(to_mono(&once), once);
            }

            #[test]
            fn impulse_has_single_nonzero(len in 1usize..2048, amp in -10.0f32..10.0) {
                prop_assume!(amp != 0.0);
                let imp = make_impulse(len, amp, 44_100);
                prop_assert_eq!(imp.samples().iter().filter(|&&v| v != 0.0).count(), 1);
            }
        }
    }
}
