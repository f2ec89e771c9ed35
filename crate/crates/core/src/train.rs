//! Steering: fit the conditional TCN to one input/target pair with the
//! conditioning vector held at zero.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::diffkit::{adam_step, AdamState, ShapeError};
use crate::loss::{default_resolutions, LossError, LossReport, MrStftLoss, StftResolution};
use crate::model::{init_model, CheckpointError, ModelConfig, ModelError, TcnModel};

const STATE_MAGIC: &[u8; 4] = b"NAFS";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("input has {input} samples but target has {target}")]
    LengthMismatch { input: usize, target: usize },
    #[error("input rate {input} Hz differs from target rate {target} Hz")]
    SampleRateMismatch { input: u32, target: u32 },
    #[error("steering signals must be mono")]
    NotMono,
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("non-finite gradient at iteration {iteration}: {source}")]
    NonFiniteGradient {
        iteration: usize,
        source: ShapeError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training state: {0}")]
    State(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Learning rate is divided by `divisor` from `fraction * iterations` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMilestone {
    pub fraction: f64,
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<LrMilestone>,
    pub seed: u64,
    pub resolutions: Vec<StftResolution>,
    pub log_every: usize,
    /// Model checkpoint written at the end of steering and, together with a
    /// resumable `.state` file, every `checkpoint_every` iterations.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Train on a random crop of this many samples per iteration.
    pub crop_length: Option<usize>,
    /// Rescale the global gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            base_lr: 1e-3,
            lr_milestones: vec![
                LrMilestone {
                    fraction: 0.8,
                    divisor: 10.0,
                },
                LrMilestone {
                    fraction: 0.95,
                    divisor: 100.0,
                },
            ],
            seed: 0,
            resolutions: default_resolutions(),
            log_every: 50,
            checkpoint_path: None,
            checkpoint_every: None,
            crop_length: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.iterations < 1 {
            return fail("iterations must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.base_lr));
        }
        let mut last = 0.0;
        for m in &self.lr_milestones {
            if !(m.fraction > last && m.fraction <= 1.0) {
                return fail("milestone fractions must be strictly increasing in (0, 1]".into());
            }
            if !(m.divisor > 0.0) {
                return fail("milestone divisors must be positive".into());
            }
            last = m.fraction;
        }
        if self.resolutions.is_empty() {
            return fail("at least one STFT resolution is required".into());
        }
        if self.checkpoint_every == Some(0) || self.log_every == 0 {
            return fail("intervals must be at least 1".into());
        }
        if self.checkpoint_every.is_some() && self.checkpoint_path.is_none() {
            return fail("checkpoint_every needs a checkpoint path".into());
        }
        if let Some(crop) = self.crop_length {
            if crop < self.max_fft() {
                return fail(format!("crop length {crop} is shorter than the largest fft"));
            }
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return fail("clip norm must be positive".into());
        }
        Ok(())
    }

    fn max_fft(&self) -> usize {
        self.resolutions.iter().map(|r| r.fft_size).max().unwrap_or(0)
    }
}

/// Staged learning rate for `iteration` (0-based).
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    let mut lr = config.base_lr;
    for m in &config.lr_milestones {
        let start = (m.fraction * config.iterations as f64).floor() as usize;
        if iteration >= start {
            lr = config.base_lr / m.divisor;
        }
    }
    lr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub sc_total: f64,
    pub logmag_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
    pub duration: Duration,
}

impl TrainHistory {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss_total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss_total)
    }

    /// Trailing moving average of the total loss over `window` iterations.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.records.iter().map(|r| r.loss_total).collect();
        losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }

    /// Mean total loss over consecutive, non-overlapping windows of `window`
    /// iterations; a shorter trailing window is averaged over what it holds.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.records.iter().map(|r| r.loss_total).collect();
        losses
            .chunks(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }

    /// CSV with header `iteration,lr,loss_total,sc_total,logmag_total`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,lr,loss_total,sc_total,logmag_total")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.lr, r.loss_total, r.sc_total, r.logmag_total
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)
    }
}

fn check_pair(x: &AudioBuffer, y: &AudioBuffer) -> Result<(), TrainError> {
    if x.channel_count() != 1 || y.channel_count() != 1 {
        return Err(TrainError::NotMono);
    }
    if x.sample_rate() != y.sample_rate() {
        return Err(TrainError::SampleRateMismatch {
            input: x.sample_rate(),
            target: y.sample_rate(),
        });
    }
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch {
            input: x.len(),
            target: y.len(),
        });
    }
    Ok(())
}

/// Incremental steering run. Each [`Steerer::step`] performs one full
/// forward / loss / backward / Adam iteration.
pub struct Steerer {
    model: TcnModel<f32>,
    adam: AdamState<f32>,
    config: TrainConfig,
    input: Vec<f32>,
    target: Vec<f32>,
    /// Target spectra for full-sequence training.
    loss: Option<MrStftLoss<f32>>,
    conditioning: Vec<f32>,
    history: Vec<IterationRecord>,
    elapsed: Duration,
}

impl Steerer {
    pub fn new(
        x: &AudioBuffer,
        y: &AudioBuffer,
        model_config: ModelConfig,
        train_config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let model = init_model::<f32>(model_config, train_config.seed)?;
        Self::from_parts(x, y, model, train_config, None, Vec::new())
    }

    fn from_parts(
        x: &AudioBuffer,
        y: &AudioBuffer,
        model: TcnModel<f32>,
        config: TrainConfig,
        adam: Option<AdamState<f32>>,
        history: Vec<IterationRecord>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        check_pair(x, y)?;
        if x.sample_rate() != model.config.sample_rate {
            return Err(ModelError::SampleRateMismatch {
                expected: model.config.sample_rate,
                found: x.sample_rate(),
            }
            .into());
        }
        let rf = model.receptive_field().samples;
        if x.len() < rf {
            log::warn!(
                "steering signal ({} samples) is shorter than the receptive field ({rf} samples)",
                x.len()
            );
        }
        let loss = match config.crop_length {
            Some(_) => {
                if x.len() < config.crop_length.unwrap() {
                    return Err(TrainError::Config(format!(
                        "crop length exceeds the {}-sample signal",
                        x.len()
                    )));
                }
                None
            }
            None => Some(MrStftLoss::new(y.samples(), &config.resolutions)?),
        };
        let adam = adam.unwrap_or_else(|| AdamState::new(model.param_count()));
        Ok(Self {
            conditioning: vec![0.0; model.config.cond_dim],
            model,
            adam,
            config,
            input: x.samples().to_vec(),
            target: y.samples().to_vec(),
            loss,
            history,
            elapsed: Duration::ZERO,
        })
    }

    pub fn model(&self) -> &TcnModel<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.iteration() >= self.config.iterations
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.history
    }

    fn crop_window(&self, iteration: usize) -> (usize, usize) {
        match self.config.crop_length {
            None => (0, self.input.len()),
            Some(len) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (iteration as u64).rotate_left(32));
                let start = rng.random_range(0..=self.input.len() - len);
                (start, start + len)
            }
        }
    }

    /// Run one iteration and return its record. The loss is that of the
    /// parameters before this iteration's update.
    pub fn step(&mut self) -> Result<IterationRecord, TrainError> {
        let started = Instant::now();
        let iteration = self.iteration();
        if iteration >= self.config.iterations {
            return Err(TrainError::Config("steering already finished".into()));
        }
        assert!(
            self.conditioning.iter().all(|&c| c == 0.0),
            "conditioning must stay at zero while steering"
        );
        let lr = lr_at(iteration, &self.config);
        let (start, end) = self.crop_window(iteration);
        let (prediction, cache) =
            self.model
                .forward_samples(&self.input[start..end], &self.conditioning, true)?;
        let (report, grad_out) = match &self.loss {
            Some(loss) => loss.loss_and_grad(&prediction)?,
            None => MrStftLoss::new(&self.target[start..end], &self.config.resolutions)?
                .loss_and_grad(&prediction)?,
        };
        if !report.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration });
        }
        let mut grads = self.model.backward(cache.as_ref(), &grad_out)?.params;
        if let Some(max_norm) = self.config.clip_norm {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let scale = (max_norm / norm) as f32;
                for t in grads.tensors_mut() {
                    t.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        let grad_tensors = grads.tensors();
        let mut params = self.model.params.tensors_mut();
        adam_step(&mut params, &grad_tensors, &mut self.adam, lr as f32)
            .map_err(|source| TrainError::NonFiniteGradient { iteration, source })?;

        let record = record_for(iteration, lr, &report);
        self.history.push(record);
        self.elapsed += started.elapsed();
        Ok(record)
    }

    /// Write the model checkpoint and resumable state when due.
    fn maybe_checkpoint(&self) -> Result<(), TrainError> {
        let (Some(path), Some(every)) = (&self.config.checkpoint_path, self.config.checkpoint_every) else {
            return Ok(());
        };
        if self.iteration().is_multiple_of(every) {
            self.model.save_checkpoint(path)?;
            std::fs::write(state_path(path), self.to_state_bytes())?;
        }
        Ok(())
    }

    /// Run to completion, calling `observe` after every iteration.
    pub fn run(
        mut self,
        mut observe: impl FnMut(&IterationRecord),
    ) -> Result<(TcnModel<f32>, TrainHistory), TrainError> {
        while !self.is_done() {
            let record = self.step()?;
            observe(&record);
            self.maybe_checkpoint()?;
        }
        if let Some(path) = &self.config.checkpoint_path {
            self.model.save_checkpoint(path)?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> (TcnModel<f32>, TrainHistory) {
        (
            self.model,
            TrainHistory {
                records: self.history,
                duration: self.elapsed,
            },
        )
    }

    /// Everything needed to continue this run bit-exactly: model, optimizer
    /// moments, configuration and history so far.
    pub fn to_state_bytes(&self) -> Vec<u8> {
        let header = StateHeader {
            config: self.config.clone(),
            history: self.history.clone(),
            adam_steps: self.adam.step_count,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            epsilon: self.adam.epsilon,
        };
        let json = serde_json::to_vec(&header).expect("state serializes");
        let checkpoint = self.model.to_checkpoint_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(checkpoint.len() as u32).to_le_bytes());
        out.extend_from_slice(&checkpoint);
        for v in self.adam.first_moment.iter().chain(&self.adam.second_moment) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Continue a run from [`Steerer::to_state_bytes`] output on the same
    /// signal pair.
    pub fn resume(state: &[u8], x: &AudioBuffer, y: &AudioBuffer) -> Result<Self, TrainError> {
        let bad = |msg: &str| TrainError::State(msg.to_string());
        if state.len() < 16 || &state[..4] != STATE_MAGIC {
            return Err(bad("not a steering state file"));
        }
        let (body, crc) = state.split_at(state.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(bad("CRC mismatch"));
        }
        if u32::from_le_bytes(body[4..8].try_into().unwrap()) != STATE_VERSION {
            return Err(bad("unsupported state version"));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8], TrainError> {
            let chunk = body.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(chunk)
        };
        let json_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header: StateHeader =
            serde_json::from_slice(take(json_len)?).map_err(|e| TrainError::State(e.to_string()))?;
        let ckpt_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let model = TcnModel::from_checkpoint_bytes(take(ckpt_len)?)?;
        let count = model.param_count();
        let mut read_floats = |n: usize| -> Result<Vec<f32>, TrainError> {
            Ok(take(4 * n)?
                .chunks_exact(4)
                .map(|w| f32::from_le_bytes(w.try_into().unwrap()))
                .collect())
        };
        let first_moment = read_floats(count)?;
        let second_moment = read_floats(count)?;
        if pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let adam = AdamState {
            first_moment,
            second_moment,
            step_count: header.adam_steps,
            beta1: header.beta1,
            beta2: header.beta2,
            epsilon: header.epsilon,
        };
        Self::from_parts(x, y, model, header.config, Some(adam), header.history)
    }
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config: TrainConfig,
    history: Vec<IterationRecord>,
    adam_steps: u64,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
}

/// `model.nafx` -> `model.nafx.state`.
pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".state");
    PathBuf::from(name)
}

fn record_for(iteration: usize, lr: f64, report: &LossReport) -> IterationRecord {
    IterationRecord {
        iteration,
        lr,
        loss_total: report.total,
        sc_total: report.spectral_convergence(),
        logmag_total: report.log_magnitude(),
    }
}

/// Steer a freshly initialized model to map `x` onto `y`.
pub fn steer(
    x: &AudioBuffer,
    y: &AudioBuffer,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> Result<(TcnModel<f32>, TrainHistory), TrainError> {
    Steerer::new(x, y, model_config, train_config)?.run(|_| {})
}
