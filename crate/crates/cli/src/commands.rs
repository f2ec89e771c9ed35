use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::anyhow;
use nafx_client::{Client, ClientError, RenderRequest, SweepParams};
use nafx_core::audio::{encode_wav, read_wav, to_mono, AudioBuffer, SampleFormat};
use nafx_core::effects::ReferenceEffect;
use nafx_core::eval::{
    decay_consistency, estimate_t60, grid_sweep, integrated_loudness, schroeder_edc, write_decay_curves_csv,
    write_decay_summary_csv, CellStatus, EvalError, FitSpan, GridSweep, Loudness, Metric,
};
use nafx_core::loss::resolutions;
use nafx_core::model::{ConditioningVector, ModelConfig, TcnModel};
use nafx_core::render::render_wav;
use nafx_core::sources::{is_builtin, load_source, SourceError};
use nafx_core::train::{state_path, IterationRecord, Steerer, TrainConfig, TrainError};
use nafx_server::{AppState, ServerConfig};

use crate::args::{AnalyzeArgs, DecayArgs, RenderArgs, ServeArgs, SteerArgs, SweepArgs};

/// Exit code 1 for problems with the request, 2 for failures while running it.
#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Runtime(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::User(e) | Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

type CliResult = Result<(), CliError>;

fn user(e: impl Into<anyhow::Error>) -> CliError {
    CliError::User(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        if e.is_client_error() {
            user(e)
        } else {
            runtime(e)
        }
    }
}

fn load_input(spec: &str, sample_rate: u32) -> Result<AudioBuffer, CliError> {
    load_source(spec, sample_rate).map_err(|e| user(anyhow!("input {spec}: {e}")))
}

fn load_model(path: &Path) -> Result<TcnModel<f32>, CliError> {
    TcnModel::load_checkpoint(path).map_err(|e| user(anyhow!("checkpoint {}: {e}", path.display())))
}

fn conditioning(values: &[f64], dim: usize) -> Result<Vec<f32>, CliError> {
    if values.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    if values.len() != dim {
        return Err(user(anyhow!(
            "--c has {} values but the model has {dim} conditioning dimensions",
            values.len()
        )));
    }
    // narrowed the same way the service narrows JSON numbers
    Ok(values.iter().map(|&v| v as f32).collect())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(anyhow!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| runtime(anyhow!("cannot write {}: {e}", path.display())))
}

fn print_model(config: &ModelConfig) {
    let rf = config.receptive_field();
    println!(
        "model layers={} channels={} kernel_size={} dilation_growth={} cond_dim={} sample_rate={}",
        config.layers, config.channels, config.kernel_size, config.dilation_growth, config.cond_dim, config.sample_rate
    );
    println!("receptive_field_samples={} receptive_field_ms={:.1}", rf.samples, rf.ms);
}

fn progress(r: &IterationRecord) -> String {
    format!(
        "iter={} lr={:e} loss={:.6} sc={:.6} logmag={:.6}",
        r.iteration, r.lr, r.loss_total, r.sc_total, r.logmag_total
    )
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } | TrainError::Io(_) => runtime(e),
        _ => user(e),
    }
}

pub fn steer(a: SteerArgs) -> CliResult {
    let x = to_mono(&load_input(&a.input, a.sample_rate)?);
    let y = match a.target.strip_prefix("effect:") {
        Some(spec) => spec
            .parse::<ReferenceEffect>()
            .map_err(|e| user(anyhow!("--target: {e}")))?
            .apply(&x),
        None => to_mono(&load_input(&a.target, x.sample_rate())?),
    };
    let model_config = ModelConfig {
        layers: a.layers,
        channels: a.channels,
        kernel_size: a.kernel,
        dilation_growth: a.dilation_growth,
        cond_dim: a.cond_dim,
        sample_rate: x.sample_rate(),
    };
    model_config.validate().map_err(user)?;
    let train_config = TrainConfig {
        iterations: a.iters,
        base_lr: a.lr,
        seed: a.seed,
        resolutions: resolutions(&a.fft_sizes).map_err(user)?,
        log_every: a.log_every,
        checkpoint_path: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        crop_length: a.crop_length,
        clip_norm: a.clip_norm,
        ..TrainConfig::default()
    };
    train_config.validate().map_err(user)?;

    let steerer = match &a.resume {
        Some(state) => {
            let bytes = std::fs::read(state).map_err(|e| user(anyhow!("{}: {e}", state.display())))?;
            Steerer::resume(&bytes, &x, &y).map_err(train_error)?
        }
        None => Steerer::new(&x, &y, model_config, train_config).map_err(train_error)?,
    };

    print_model(&steerer.model().config);
    let cfg = steerer.config();
    println!(
        "steer input={} target={} frames={} iters={} lr={:e} seed={} fft_sizes={} log_every={} out={} history={} resume={}",
        a.input,
        a.target,
        x.len(),
        cfg.iterations,
        cfg.base_lr,
        cfg.seed,
        cfg.resolutions.iter().map(|r| r.fft_size.to_string()).collect::<Vec<_>>().join(","),
        cfg.log_every,
        a.out.display(),
        a.history.display(),
        a.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
    );
    println!(
        "lr_schedule={}",
        cfg.lr_milestones
            .iter()
            .map(|m| format!("{}@{}", cfg.base_lr / m.divisor, (m.fraction * cfg.iterations as f64).floor()))
            .collect::<Vec<_>>()
            .join(",")
    );
    if a.dry_run {
        return Ok(());
    }

    let log_every = cfg.log_every.max(1);
    let last = cfg.iterations.saturating_sub(1);
    let (model, history) = steerer
        .run(|r| {
            if r.iteration % log_every == 0 || r.iteration == last {
                println!("{}", progress(r));
            }
        })
        .map_err(train_error)?;
    history
        .save_csv(&a.history)
        .map_err(|e| runtime(anyhow!("cannot write {}: {e}", a.history.display())))?;
    let rf = model.receptive_field();
    println!(
        "done initial_loss={:.6} final_loss={:.6} seconds={:.1} receptive_field_samples={} receptive_field_ms={:.1} checkpoint={}",
        history.initial_loss().unwrap_or(f64::NAN),
        history.final_loss().unwrap_or(f64::NAN),
        history.duration.as_secs_f64(),
        rf.samples,
        rf.ms,
        a.out.display()
    );
    if a.checkpoint_every.is_some() {
        println!("state={}", state_path(&a.out).display());
    }
    Ok(())
}

/// Upload a local file, or pass a built-in spec through unchanged.
fn remote_source(client: &Client, input: &str) -> Result<String, CliError> {
    if is_builtin(input) {
        return Ok(input.to_string());
    }
    let buffer = read_wav(input).map_err(|e| user(anyhow!("input {input}: {e}")))?;
    let wav = encode_wav(&buffer, SampleFormat::Float32).map_err(runtime)?.0;
    Ok(client.upload_source(wav)?.id)
}

pub fn render(a: RenderArgs) -> CliResult {
    let bytes = match &a.remote.server {
        Some(url) => {
            let client = Client::new(url).map_err(runtime)?;
            let info = client.model()?;
            let c = conditioning(&a.c, info.cond_dim)?;
            println!("render server={url} input={} c={c:?} out={}", a.input, a.out.display());
            let source = remote_source(&client, &a.input)?;
            client.render(&RenderRequest { conditioning: c, source })?
        }
        None => {
            let path = a.model.as_ref().expect("clap requires --model without --server");
            let model = load_model(path)?;
            let c = conditioning(&a.c, model.config.cond_dim)?;
            print_model(&model.config);
            println!("render model={} input={} c={c:?} out={}", path.display(), a.input, a.out.display());
            let input = load_input(&a.input, model.config.sample_rate)?;
            render_wav(&model, &input, &c).map_err(user)?
        }
    };
    write_file(&a.out, &bytes)?;
    println!("wrote {} bytes to {}", bytes.len(), a.out.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult {
    let metric: Metric = a.metric.parse().map_err(user)?;
    // reject a bad lattice before doing any work
    nafx_core::eval::lattice(a.min, a.max, a.steps).map_err(user)?;
    println!(
        "sweep input={} metric={metric} min={} max={} steps={} out={}",
        a.input,
        a.min,
        a.max,
        a.steps,
        a.out.display()
    );
    let grid = match &a.remote.server {
        Some(url) => {
            let client = Client::new(url).map_err(runtime)?;
            let source = remote_source(&client, &a.input)?;
            let r = client.sweep(&SweepParams {
                source,
                metric: metric.name().into(),
                min: a.min,
                max: a.max,
                steps: a.steps,
            })?;
            let status = r
                .status
                .iter()
                .map(|row| row.iter().map(|s| parse_status(s)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            GridSweep {
                metric,
                c0_axis: r.c0_axis,
                c1_axis: r.c1_axis,
                values: r.values,
                status,
            }
        }
        None => {
            let model = load_model(a.model.as_ref().expect("clap requires --model without --server"))?;
            print_model(&model.config);
            let input = load_input(&a.input, model.config.sample_rate)?;
            grid_sweep(&model, &input, (a.min, a.max), (a.min, a.max), a.steps, metric).map_err(user)?
        }
    };
    let mut out = create(&a.out)?;
    grid.write_csv(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| runtime(anyhow!("cannot write {}: {e}", a.out.display())))?;
    let failed = grid.status.iter().flatten().filter(|s| !matches!(s, CellStatus::Ok)).count();
    match grid.spread() {
        Some(spread) => println!("cells={} not_ok={failed} spread={spread:.4}", a.steps * a.steps),
        None => println!("cells={} not_ok={failed} spread=none", a.steps * a.steps),
    }
    Ok(())
}

fn parse_status(s: &str) -> Result<CellStatus, CliError> {
    s.parse().map_err(|e: String| runtime(anyhow!("server response: {e}")))
}

pub fn analyze(a: AnalyzeArgs) -> CliResult {
    let read = |spec: &str| -> Result<AudioBuffer, CliError> {
        load_source(spec, a.sample_rate).map_err(|e: SourceError| user(anyhow!("{spec}: {e}")))
    };
    if let Some(spec) = &a.lufs {
        match integrated_loudness(&read(spec)?).map_err(user)? {
            Loudness::Lufs(v) => println!("lufs={v:.2}"),
            Loudness::BelowGate => println!("lufs=below_gate (every block is under the -70 LUFS gate)"),
        }
    } else if let Some(spec) = &a.t60 {
        let edc = schroeder_edc(&read(spec)?).map_err(runtime)?;
        let est = estimate_t60(&edc).map_err(|e| match e {
            EvalError::FitFailure { .. } => runtime(e),
            other => user(other),
        })?;
        let span = match est.span {
            FitSpan::Primary => "primary (-5..-25 dB)",
            FitSpan::Fallback => "fallback (-5..-15 dB, reduced confidence)",
        };
        println!("t60={:.4} span={span} slope_db_per_s={:.3}", est.seconds, est.slope_db_per_s);
    } else if let Some(spec) = &a.edc {
        let edc = schroeder_edc(&read(spec)?).map_err(runtime)?;
        let result = match &a.out {
            Some(path) => {
                let mut out = create(path)?;
                edc.write_csv(&mut out).and_then(|_| out.flush())
            }
            None => edc.write_csv(std::io::stdout().lock()),
        };
        result.map_err(runtime)?;
    }
    Ok(())
}

pub fn decay(a: DecayArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let c = ConditioningVector::new(conditioning(&a.c, model.config.cond_dim)?).map_err(user)?;
    print_model(&model.config);
    let ir_length = (a.ir_secs * model.config.sample_rate as f64).round() as usize;
    println!(
        "decay levels={:?} ir_secs={} c={:?} out_curves={} out_summary={}",
        a.levels,
        a.ir_secs,
        c.values(),
        a.out_curves.display(),
        a.out_summary.display()
    );
    let report = decay_consistency(&model, &a.levels, ir_length, &c).map_err(user)?;
    let mut curves = create(&a.out_curves)?;
    write_decay_curves_csv(&report, &mut curves)
        .and_then(|_| curves.flush())
        .map_err(runtime)?;
    let mut summary = create(&a.out_summary)?;
    write_decay_summary_csv(&report, &mut summary)
        .and_then(|_| summary.flush())
        .map_err(runtime)?;
    for row in &report {
        match &row.t60 {
            Ok(est) => println!("level={} t60={:.4}", row.level, est.seconds),
            Err(e) => println!("level={} t60=none reason=\"{e}\"", row.level),
        }
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CliResult {
    let model = load_model(&a.model)?;
    print_model(&model.config);
    let state = Arc::new(AppState::new(
        model,
        ServerConfig {
            max_render_secs: a.max_render_secs,
            static_dir: a.static_dir.clone(),
            ..ServerConfig::default()
        },
    ));
    if let Some(dir) = &a.input_dir {
        let loaded = state
            .preload_dir(dir)
            .map_err(|e| user(anyhow!("input dir {}: {e}", dir.display())))?;
        for s in loaded {
            println!("source id={} frames={}", s.id, s.frames);
        }
    }
    let runtime_ = tokio::runtime::Runtime::new().map_err(runtime)?;
    runtime_.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| runtime(anyhow!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(runtime)?;
        println!("listening url=http://{local}");
        nafx_server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(runtime)
    })
}
