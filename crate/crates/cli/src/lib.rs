//! `mdsrn` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (including an
//! unknown subcommand), 3 invalid configuration, 4 missing input file.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdsrn_core::checkpoint::{load_checkpoint, read_header, save_checkpoint, TrainingMetadata, FORMAT_VERSION};
use mdsrn_core::metrics::{evaluate_fields, squared_error, MetricRow};
use mdsrn_core::models::{train, ModelKind, UncertainModel, LOSS_CSV_HEADER};
use mdsrn_core::render::{
    half_voxel_diagonal, raymarch_mean, raymarch_statistical, render_scalar_overlay, Camera,
    RenderConfig, TransferFunction,
};
use mdsrn_core::volume::{write_raw_volume, VolumeGrid};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mdsrn_core::Error),
}

impl CliError {
    pub fn from_io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) | CliError::Core(mdsrn_core::Error::NotFound { .. }) => EXIT_MISSING,
            CliError::Io { .. } | CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mdsrn", version, about = "Train and evaluate uncertainty-aware volume networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic volume as `.raw` plus metadata.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint and loss history.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV path; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Reconstruct mean and variance over the volume and print metrics.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label for the model column; defaults to the model kind.
        #[arg(long)]
        name: Option<String>,
    },
    /// Render mean, statistical, and top-variance / top-error images.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and evaluate every (lambda_max, decoder count) combination.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata.
    Info {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the exit status.
pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_output(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::from_io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Synth { cfg, out: path } => synth(&cfg.load()?, &path, out),
        Command::Train {
            cfg,
            out: path,
            loss_csv,
        } => {
            let loss_csv = loss_csv.unwrap_or_else(|| path.with_extension("loss.csv"));
            train_command(&cfg.load()?, &path, &loss_csv, out)
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            out: csv,
            name,
        } => evaluate(&cfg.load()?, &checkpoint, csv.as_deref(), name, out),
        Command::Render {
            cfg,
            checkpoint,
            out_dir,
        } => render(&cfg.load()?, &checkpoint, &out_dir, out),
        Command::Sweep { cfg, out: csv } => sweep(&cfg.load()?, csv.as_deref(), out),
        Command::Info { checkpoint } => info(&checkpoint, out),
    }
}

fn synth(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.volume.synthetic.is_none() {
        return Err(CliError::Config("synth needs a [volume.synthetic] section".into()));
    }
    let v = cfg.load_volume()?;
    write_raw_volume(path, &v, cfg.volume.name.clone())?;
    emit(out, &format!("wrote {:?} volume to {}\n", v.dims(), path.display()))
}

fn train_command(cfg: &RunConfig, path: &Path, loss_csv: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let volume = cfg.load_volume()?;
    let (model, history) = train(&volume, &cfg.train)?;
    let meta = TrainingMetadata {
        steps_completed: history.len(),
        seed: cfg.train.seed,
        config: Some(cfg.train.clone()),
    };
    save_checkpoint(&model, &meta, path)?;
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    for r in &history {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(loss_csv, &csv)?;
    let last = history.last().map(|r| r.total).unwrap_or(f64::NAN);
    emit(
        out,
        &format!(
            "trained {} for {} steps (final loss {last:e}); checkpoint {}\n",
            model.kind(),
            history.len(),
            path.display()
        ),
    )
}

fn metric_row(cfg: &RunConfig, model: &UncertainModel, volume: &VolumeGrid, name: &str) -> Result<MetricRow, CliError> {
    let (mean, variance) = model.reconstruct(volume.dims())?;
    Ok(evaluate_fields(
        name,
        volume.dims(),
        volume.values(),
        &mean,
        &variance,
        &cfg.metrics.fractions,
    )?)
}

fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    csv: Option<&Path>,
    name: Option<String>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let volume = cfg.load_volume()?;
    let name = name.unwrap_or_else(|| model.kind().to_string());
    let row = metric_row(cfg, &model, &volume, &name)?;
    let text = format!("{}\n{}\n", MetricRow::csv_header(&cfg.metrics.fractions), row.csv_row());
    if let Some(p) = csv {
        write_file(p, &text)?;
    }
    emit(out, &text)
}

/// Opacity rises with the scalar; used for variance and error overlays.
fn overlay_tf() -> TransferFunction {
    TransferFunction::new(vec![
        [0.0, 1.0, 0.95, 0.6, 0.35],
        [1.0, 0.75, 0.05, 0.05, 0.95],
    ])
    .expect("valid overlay transfer function")
}

/// Scales a non-negative field by its maximum so it fits a transfer function.
fn unit_field(dims: [usize; 3], values: &[f64]) -> Result<VolumeGrid, CliError> {
    let top = values.iter().copied().fold(0.0, f64::max);
    let scaled = values
        .iter()
        .map(|v| if top > 0.0 { v / top } else { 0.0 })
        .collect();
    Ok(VolumeGrid::from_normalized(dims, scaled)?)
}

fn render(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let volume = cfg.load_volume()?;
    let dims = volume.dims();
    let r = &cfg.render;
    let tf = match &r.transfer_function {
        Some(p) => TransferFunction::load(p)?,
        None => TransferFunction::default_ramp(),
    };
    let mut cam = Camera::orbit(r.azimuth, r.elevation, r.distance, r.width, r.height);
    cam.fov_deg = r.fov;
    let rc = RenderConfig {
        step: r.step.unwrap_or_else(|| half_voxel_diagonal(dims)),
        reference_step: r.reference_step.unwrap_or_else(|| half_voxel_diagonal(dims)),
        threshold: r.threshold,
        background: r.background,
        variance_floor: r.variance_floor,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::from_io(out_dir, e))?;
    let mut written = Vec::new();
    let mut save = |name: &str, img: mdsrn_core::render::RenderedImage| -> Result<(), CliError> {
        let p = out_dir.join(name);
        img.write_png(&p)?;
        written.push(p);
        Ok(())
    };
    save("mean.png", raymarch_mean(&model, &cam, &tf, &rc)?)?;
    if model.kind() != ModelKind::Pv {
        save("statistical.png", raymarch_statistical(&model, &cam, &tf, &rc)?)?;
    }
    let (mean, variance) = model.reconstruct(dims)?;
    let error = squared_error(&mean, volume.values())?;
    let overlay = overlay_tf();
    let p = r.overlay_fraction;
    save(
        "variance_top.png",
        render_scalar_overlay(&unit_field(dims, &variance)?, p, &cam, &overlay, &rc)?,
    )?;
    save(
        "error_top.png",
        render_scalar_overlay(&unit_field(dims, &error)?, p, &cam, &overlay, &rc)?,
    )?;
    let mut text = String::new();
    for p in written {
        let _ = writeln!(text, "wrote {}", p.display());
    }
    emit(out, &text)
}

fn sweep(cfg: &RunConfig, csv: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.sweep.lambda_max.is_empty() {
        return Err(CliError::Config("sweep.lambda_max must not be empty".into()));
    }
    let volume = cfg.load_volume()?;
    let members = if cfg.sweep.members.is_empty() {
        vec![cfg.train.members]
    } else {
        cfg.sweep.members.clone()
    };
    let mut text = MetricRow::csv_header(&cfg.metrics.fractions);
    text.push('\n');
    emit(out, &text)?;
    for &lambda_max in &cfg.sweep.lambda_max {
        for &m in &members {
            let mut tc = cfg.train.clone();
            tc.kind = ModelKind::Rmdsrn;
            tc.members = m;
            tc.schedule.lambda_max = lambda_max;
            tc.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let (model, _) = train(&volume, &tc)?;
            let row = metric_row(cfg, &model, &volume, &format!("rmdsrn_lmax{lambda_max}_m{m}"))?;
            let line = format!("{}\n", row.csv_row());
            emit(out, &line)?;
            text.push_str(&line);
        }
    }
    if let Some(p) = csv {
        write_file(p, &text)?;
    }
    Ok(())
}

fn info(checkpoint: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let h = read_header(checkpoint)?;
    let mut text = String::new();
    let _ = writeln!(text, "format version: {FORMAT_VERSION}");
    let _ = writeln!(text, "kind: {}", h.kind);
    let _ = writeln!(text, "encoder: {}", inline_toml(&h.encoder));
    let _ = writeln!(text, "decoder: {}", inline_toml(&h.decoder));
    let _ = writeln!(text, "networks: {}", h.networks);
    let _ = writeln!(text, "decoders per network: {}", h.decoders);
    let _ = writeln!(text, "outputs: {}", h.outputs);
    if let Some(p) = h.mcd_passes {
        let _ = writeln!(text, "dropout: {} ({p} passes)", h.dropout);
    }
    if let Some(f) = h.pv_variance_floor {
        let _ = writeln!(text, "variance floor: {f}");
    }
    let _ = writeln!(text, "parameters: {}", h.num_params());
    let _ = writeln!(text, "steps completed: {}", h.metadata.steps_completed);
    let _ = writeln!(text, "seed: {}", h.metadata.seed);
    if let Some(c) = &h.metadata.config {
        let body = toml::to_string(c).unwrap_or_default();
        let _ = writeln!(text, "[train]\n{body}");
    }
    emit(out, &text)
}

fn inline_toml<T: serde::Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .map(|t| t.to_string())
        .unwrap_or_else(|e| e.to_string())
}
