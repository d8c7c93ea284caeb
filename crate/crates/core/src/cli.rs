//! Command-line interface: dataset creation, training, sampling, evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::conditioning::{plan_autoregression, ConditioningError, Task};
use crate::data::{generate_dataset, DataError};
use crate::diffusion::{DiffusionError, NoiseSchedule};
use crate::io::{self, IoError};
use crate::metrics::{psnr, ssim, MetricError, MetricReport};
use crate::model::{LgcModel, ModelConfig, ModelError};
use crate::numerics::Array;
use crate::sampling::{sample_video, SamplingError};
use crate::training::{train, TrainState, TrainingConfig, TrainingError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "lgcvd", version, about = "Conditional video diffusion with local and global context")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic bouncing-squares dataset.
    MakeData(MakeDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict, interpolate or generate frames with a trained model.
    Sample(SampleArgs),
    /// Report per-frame PSNR and SSIM against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 14)]
    pub length: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the second training stage.
    #[arg(long)]
    pub no_stage2: bool,
    /// Zero and freeze the cross-attention value projections.
    #[arg(long)]
    pub no_global: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub base_width: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue the run stored at --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Predict,
    Interpolate,
    Generate,
}

#[derive(Debug, Args, Clone)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted frames; not needed with --best-of.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    /// Sample this many trajectories (seeds S..S+N−1) and keep the best.
    #[arg(long)]
    pub best_of: Option<usize>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<(), CliError> {
    match cli.command {
        Command::MakeData(a) => make_data(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Sample(a) => {
            let video = sample_cmd(&a)?;
            io::save_frames(&video, &a.out)?;
            Ok(())
        }
        Command::Eval(a) => eval_cmd(&a, out),
    }
}

fn write_out(out: &mut impl Write, line: String) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|source| {
        CliError::Io(IoError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
    })
}

pub fn clip_dir_name(i: usize) -> String {
    format!("clip_{i:05}")
}

fn make_data(a: &MakeDataArgs, out: &mut impl Write) -> Result<(), CliError> {
    let clips = generate_dataset(a.count, a.length, a.size, a.seed)?;
    for (i, clip) in clips.iter().enumerate() {
        io::save_frames(&clip.frames, &a.out.join(clip_dir_name(i)))?;
    }
    write_out(out, format!("wrote {} clips to {}", clips.len(), a.out.display()))
}

/// Every clip under `root`, `[L, 3, H, W]` each, sharing one frame size.
pub fn load_dataset(root: &Path) -> Result<Vec<Array<f32>>, CliError> {
    let dirs = io::clip_dirs(root)?;
    if dirs.is_empty() {
        return Err(usage(format!("no clip directories under {}", root.display())));
    }
    let clips = dirs
        .iter()
        .map(|d| io::load_frames(d))
        .collect::<Result<Vec<_>, _>>()?;
    let frame = clips[0].shape()[1..].to_vec();
    if let Some(i) = clips.iter().position(|c| c.shape()[1..] != frame[..]) {
        return Err(usage(format!(
            "{} has frame shape {:?}, expected {:?}",
            dirs[i].display(),
            &clips[i].shape()[1..],
            frame
        )));
    }
    Ok(clips)
}

fn train_cmd(a: &TrainArgs, out: &mut impl Write) -> Result<(), CliError> {
    let clips = load_dataset(&a.data)?;
    let shape = clips[0].shape().to_vec();
    let min_len = clips.iter().map(|c| c.shape()[0]).min().unwrap_or(0);
    let model_cfg = ModelConfig {
        height: shape[2],
        width: shape[3],
        base_width: a.base_width,
        groups: 8.min(a.base_width),
        ..ModelConfig::default()
    };
    let cfg = TrainingConfig {
        clip_len: min_len,
        cond_frames: model_cfg.cond_frames,
        pred_frames: model_cfg.pred_frames,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_steps: a.steps,
        seed: a.seed,
        stage_two: !a.no_stage2,
        global_context: !a.no_global,
        ..TrainingConfig::default()
    };
    let log_path = io::loss_log_path(&a.out);
    let mut state = if a.resume {
        io::load_train_state(&a.out, cfg)?
    } else {
        let model = LgcModel::new(model_cfg, a.seed)?;
        if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| IoError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(&log_path, "").map_err(|source| IoError::Io {
            path: log_path.clone(),
            source,
        })?;
        TrainState::new(model, cfg)?
    };
    let mut log = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|source| IoError::Io {
            path: log_path.clone(),
            source,
        })?;
    let every = a.checkpoint_every;
    let ckpt = a.out.clone();
    train(&mut state, &clips, |r, st| {
        let loss2 = r.loss2.map_or("nan".to_string(), |l| format!("{l:.6}"));
        writeln!(log, "{}\t{:.6}\t{}", r.step, r.loss1, loss2).map_err(|source| {
            TrainingError::Config(format!("{}: {source}", log_path.display()))
        })?;
        if every > 0 && r.step % every == 0 {
            io::save_train_state(st, &ckpt)
                .map_err(|e| TrainingError::Config(format!("checkpoint failed: {e}")))?;
        }
        Ok(())
    })?;
    io::save_train_state(&state, &a.out)?;
    write_out(
        out,
        format!("trained {} steps; checkpoint {}", state.step, a.out.display()),
    )
}

/// Runs the sampling pipeline for `a`, without writing anything.
pub fn sample_cmd(a: &SampleArgs) -> Result<Array<f32>, CliError> {
    let model = io::load_model(&a.ckpt)?;
    let meta = io::read_meta(&a.ckpt)?;
    let sched = NoiseSchedule::cosine(meta.training.diffusion_steps)?;
    let (plan, given) = build_plan(&model, a)?;
    Ok(sample_video(&model, &sched, &plan, &given, a.steps, a.seed)?)
}

fn build_plan(
    model: &LgcModel<f32>,
    a: &SampleArgs,
) -> Result<(crate::conditioning::AutoregressionPlan, Vec<Array<f32>>), CliError> {
    let cfg = model.config();
    if a.k != cfg.pred_frames {
        return Err(usage(format!(
            "--k {} does not match the model's {} frames per fragment",
            a.k, cfg.pred_frames
        )));
    }
    let (task, p) = match a.task {
        TaskArg::Generate => {
            if a.cond.is_some() {
                return Err(usage("generate takes no --cond frames"));
            }
            (Task::Generate { context: cfg.cond_frames }, 0)
        }
        TaskArg::Predict => (Task::Predict, a.p),
        TaskArg::Interpolate => (Task::Interpolate, a.p),
    };
    if p != 0 && p != cfg.cond_frames {
        return Err(usage(format!(
            "--p {} does not match the model's {} condition frames",
            p, cfg.cond_frames
        )));
    }
    if a.task == TaskArg::Interpolate && a.n != p + a.k {
        return Err(usage(format!(
            "interpolation produces p+k = {} frames; got --n {}",
            p + a.k,
            a.n
        )));
    }
    let plan = plan_autoregression(task, p, a.k, a.n)?;
    let given = match (&a.cond, a.task) {
        (None, TaskArg::Generate) => Vec::new(),
        (None, _) => return Err(usage("--cond is required for predict and interpolate")),
        (Some(dir), task) => {
            let frames = io::load_frames(dir)?;
            let count = frames.shape()[0];
            let enough = match task {
                TaskArg::Interpolate => count == p,
                _ => count >= p,
            };
            if !enough {
                return Err(usage(format!(
                    "{} holds {count} condition frames; {} needs {}{p}",
                    dir.display(),
                    if task == TaskArg::Interpolate { "interpolation" } else { "prediction" },
                    if task == TaskArg::Interpolate { "exactly " } else { "at least " },
                )));
            }
            let frame: Vec<usize> = frames.shape()[1..].to_vec();
            if frame != cfg.frame_shape() {
                return Err(usage(format!(
                    "condition frames are {:?}, the model expects {:?}",
                    frame,
                    cfg.frame_shape()
                )));
            }
            (0..p)
                .map(|i| frames.slice_outer(i, i + 1).and_then(|f| f.reshape(frame.clone())))
                .collect::<Result<_, _>>()
                .map_err(|e| usage(e.to_string()))?
        }
    };
    Ok((plan, given))
}

/// Best trajectory for each metric, judged by its mean.
fn best_of(reports: &[(MetricReport, MetricReport)]) -> (MetricReport, MetricReport) {
    let pick = |get: fn(&(MetricReport, MetricReport)) -> &MetricReport| {
        reports
            .iter()
            .map(get)
            .fold(None::<&MetricReport>, |best, r| match best {
                Some(b) if b.mean >= r.mean => Some(b),
                _ => Some(r),
            })
            .cloned()
            .expect("at least one trajectory")
    };
    (pick(|r| &r.0), pick(|r| &r.1))
}

pub fn evaluate(pred: &Array<f32>, truth: &Array<f32>) -> Result<(MetricReport, MetricReport), CliError> {
    if pred.shape()[0] != truth.shape()[0] {
        return Err(usage(format!(
            "prediction has {} frames, ground truth {}",
            pred.shape()[0],
            truth.shape()[0]
        )));
    }
    Ok((psnr(pred, truth)?, ssim(pred, truth)?))
}

fn eval_cmd(a: &EvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let truth = io::load_frames(&a.truth)?;
    let (p, s) = match a.best_of {
        None => {
            let pred = a
                .pred
                .as_ref()
                .ok_or_else(|| usage("--pred is required without --best-of"))?;
            evaluate(&io::load_frames(pred)?, &truth)?
        }
        Some(0) => return Err(usage("--best-of must be at least 1")),
        Some(count) => {
            let sample = SampleArgs {
                task: a.task.ok_or_else(|| usage("--best-of needs --task"))?,
                ckpt: a.ckpt.clone().ok_or_else(|| usage("--best-of needs --ckpt"))?,
                cond: a.cond.clone(),
                p: a.p,
                k: a.k,
                n: a.n.unwrap_or(truth.shape()[0]),
                steps: a.steps,
                seed: a.seed,
                out: PathBuf::new(),
            };
            let mut reports = Vec::with_capacity(count);
            for i in 0..count as u64 {
                let args = SampleArgs {
                    seed: a.seed.wrapping_add(i),
                    ..sample.clone()
                };
                reports.push(evaluate(&sample_cmd(&args)?, &truth)?);
            }
            best_of(&reports)
        }
    };
    for (i, (pv, sv)) in p.per_frame.iter().zip(&s.per_frame).enumerate() {
        write_out(out, format!("{i}\t{pv:.4}\t{sv:.4}"))?;
    }
    write_out(out, format!("mean\t{:.4}\t{:.4}", p.mean, s.mean))
}
