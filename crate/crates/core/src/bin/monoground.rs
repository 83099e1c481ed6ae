use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use monoground::camera::{project, CameraIntrinsics, Point3D};
use monoground::decoder::{gradcheck, Checkpoint, DecoderConfig, TrainConfig, GRADCHECK_TOLERANCE};
use monoground::harness::{
    evaluate, perfect_predictions, predict_toy, read_predictions, read_scenes, synth_scenes, train_toy,
    write_jsonl, write_loss_csv, DatasetProfile, HarnessError, PredictionMode, ProfileKind, SynthRanges,
};
use monoground::metrics::{aggregate, format_report, report_json, DepthErrorKind};

const SEED_ENV: &str = "MONOGROUND_SEED";

#[derive(Parser)]
#[command(name = "monoground", version, about = "Synthetic 3D grounding scenes, evaluation and decoder checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Indoor,
    Outdoor,
}

impl From<Profile> for ProfileKind {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Indoor => ProfileKind::Indoor,
            Profile::Outdoor => ProfileKind::Outdoor,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Raw,
    Box,
}

impl From<Mode> for PredictionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Raw => PredictionMode::Raw,
            Mode::Box => PredictionMode::Box,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthError {
    /// |ΔZ| along the optical axis
    Axis,
    /// distance between centers
    Euclidean,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as JSONL.
    Synth {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth and print the report line.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_enum)]
        profile: Profile,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "axis")]
        depth_error: DepthError,
    },
    /// Project a camera-frame point to pixels.
    Project {
        /// Intrinsics as an inline JSON object or a path to one.
        #[arg(long)]
        intrinsics: String,
        /// X,Y,Z in meters.
        #[arg(long, allow_hyphen_values = true)]
        point: String,
    },
    /// Train the toy decoder on a scene file.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "indoor")]
        profile: Profile,
        /// Write the per-epoch mean loss as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Write raw-mode predictions of the trained decoder for the training scenes.
        #[arg(long)]
        pred_out: Option<PathBuf>,
        /// Gaussian noise on image tokens.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Compare analytic decoder gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Write predictions that describe the ground truth exactly.
    PerfectPreds {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_enum)]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
        /// Scale d_v by 1 + eps·U[-1, 1] (raw mode only).
        #[arg(long)]
        depth_noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Validation(String),
    Io(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Validation(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn parse_point(s: &str) -> Result<Point3D, Failure> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Validation(format!("--point expects X,Y,Z, got {s}")))?;
    match parts.as_slice() {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Point3D::new(*x, *y, *z)),
        _ => Err(Failure::Validation(format!("--point expects three finite numbers, got {s}"))),
    }
}

fn parse_intrinsics(arg: &str) -> Result<CameraIntrinsics, Failure> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| Failure::Io(format!("{arg}: {e}")))?
    };
    let cam: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("--intrinsics: {e}")))?;
    cam.validate()
        .map_err(|e| Failure::Validation(format!("--intrinsics: {e}")))?;
    Ok(cam)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth {
            scenes,
            seed,
            profile,
            out,
        } => {
            let seed = resolve_seed(seed)?;
            let records = synth_scenes(scenes, seed, &SynthRanges::for_kind(profile.into()))?;
            write_jsonl(&out, &records)?;
            let objects: usize = records.iter().map(|s| s.objects.len()).sum();
            eprintln!("wrote {} scenes ({objects} objects) to {}", records.len(), out.display());
        }
        Command::Evaluate {
            gt,
            pred,
            mode,
            profile,
            report,
            depth_error,
        } => {
            let gt = read_scenes(&gt)?;
            let preds = read_predictions(&pred)?;
            let kind = match depth_error {
                DepthError::Axis => DepthErrorKind::AxisZ,
                DepthError::Euclidean => DepthErrorKind::Euclidean,
            };
            let results = evaluate(
                &gt,
                &preds,
                mode.into(),
                &DatasetProfile::for_kind(profile.into()),
                kind,
            )?;
            let r = aggregate(&results);
            println!("{}", format_report(&r));
            if let Some(path) = report {
                write_text(&path, &(report_json(&r) + "\n"))?;
            }
        }
        Command::Project { intrinsics, point } => {
            let cam = parse_intrinsics(&intrinsics)?;
            let p = parse_point(&point)?;
            let px = project(p, &cam).map_err(|e| Failure::Validation(e.to_string()))?;
            println!("{}", serde_json::json!({ "u": px.u, "v": px.v }));
        }
        Command::TrainToy {
            data,
            epochs,
            seed,
            out,
            profile,
            loss_csv,
            pred_out,
            noise,
            batch_size,
            lr,
        } => {
            let seed = resolve_seed(seed)?;
            if !(noise >= 0.0 && noise.is_finite()) || !(lr >= 0.0 && lr.is_finite()) || batch_size == 0 {
                return Err(Failure::Validation(
                    "--noise and --lr must be non-negative and --batch-size positive".into(),
                ));
            }
            let scenes = read_scenes(&data)?;
            let profile = DatasetProfile::for_kind(profile.into());
            let cfg = TrainConfig {
                model: DecoderConfig::default(),
                epochs,
                batch_size,
                lr,
                seed,
                ..TrainConfig::default()
            };
            let outcome = train_toy(&scenes, &profile, &cfg, noise)?;
            let t = &outcome.train;
            let ckpt = serde_json::to_string(&Checkpoint::from_params(&t.params, seed))
                .map_err(|e| Failure::Validation(e.to_string()))?;
            write_text(&out, &(ckpt + "\n"))?;
            if let Some(path) = loss_csv {
                write_loss_csv(&path, t.initial_loss, &t.history)?;
            }
            if let Some(path) = pred_out {
                write_jsonl(&path, &predict_toy(&t.params, &outcome.samples)?)?;
            }
            let last = t.history.last().copied().unwrap_or(t.initial_loss);
            println!("initial mean loss {:.6} | final mean loss {last:.6} | epochs {epochs}", t.initial_loss);
        }
        Command::Gradcheck { seed, instances } => {
            let seed = resolve_seed(seed)?;
            let r = gradcheck(seed, instances).map_err(|e| Failure::Validation(e.to_string()))?;
            println!(
                "max relative error {:.3e} over {} instances (tolerance {GRADCHECK_TOLERANCE:e})",
                r.max_rel_error, r.instances
            );
            if !r.passed() {
                return Err(Failure::Validation("gradient check failed".into()));
            }
        }
        Command::PerfectPreds {
            gt,
            mode,
            profile,
            out,
            depth_noise,
            seed,
        } => {
            let seed = resolve_seed(seed)?;
            if depth_noise.is_some() && matches!(mode, Mode::Box) {
                return Err(Failure::Validation("--depth-noise applies to raw mode only".into()));
            }
            let gt = read_scenes(&gt)?;
            let preds = perfect_predictions(
                &gt,
                mode.into(),
                &DatasetProfile::for_kind(profile.into()),
                depth_noise.map(|eps| (eps, seed)),
            )?;
            write_jsonl(&out, &preds)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
