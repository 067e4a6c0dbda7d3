//! Experiment runner behind the `zoft` binary: config-driven fine-tuning
//! runs, method comparisons, learning-rate sweeps, ablations and bound
//! verification campaigns, all emitting CSV.

pub mod config;
pub mod ini;
mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub use commands::{
    ablate, compare, finetune, sweep_lr, train_finetuner, verify_bounds, AblationCell, AblationReport, BoundsRow,
    BoundsSummary, CompareReport, MethodSummary, SweepCell, SweepReport, TrainReport,
};
pub use config::{ExperimentConfig, Method, Stability};
pub use output::{RunRow, RUN_HEADER};

use crate::error::{Error, Result};
use crate::paramspace::{BlockPartition, PerturbScales};
use crate::pertnn::PertNNParams;
use crate::testbeds::{Batch, Granularity, MlpTask, Objective, QuadraticTask};
use crate::zo::{run_trajectory, ScalePolicy, Trajectory, ZoConfig};
use config::{TaskKind, TaskSection};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const BOUND_VIOLATION: i32 = 4;
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Checkpoint(_) => exit::CONFIG,
        Error::Divergence { .. } | Error::NumericOverflow { .. } | Error::NonFiniteLoss { .. } | Error::PertNN { .. } => {
            exit::DIVERGENCE
        }
        _ => exit::OTHER,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainFinetuner,
    Finetune,
    Compare,
    SweepLr,
    Ablate,
    VerifyBounds,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::TrainFinetuner,
        Command::Finetune,
        Command::Compare,
        Command::SweepLr,
        Command::Ablate,
        Command::VerifyBounds,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::TrainFinetuner => "train-finetuner",
            Command::Finetune => "finetune",
            Command::Compare => "compare",
            Command::SweepLr => "sweep-lr",
            Command::Ablate => "ablate",
            Command::VerifyBounds => "verify-bounds",
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable summary printed by the binary.
    pub summary: String,
    pub exit_code: i32,
    pub report: Report,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Train(TrainReport),
    Finetune { rows: usize },
    Compare(CompareReport),
    Sweep(SweepReport),
    Ablation(AblationReport),
    Bounds(BoundsSummary),
}

/// Runs `command` with `config` inside a pool of `options.threads` workers.
pub fn run_command(command: Command, config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match command {
        Command::TrainFinetuner => train_finetuner(config, options),
        Command::Finetune => finetune(config, options),
        Command::Compare => compare(config, options),
        Command::SweepLr => sweep_lr(config, options),
        Command::Ablate => ablate(config, options),
        Command::VerifyBounds => verify_bounds(config, options),
    })
}

/// A testbed instance of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Quadratic(QuadraticTask),
    Mlp(MlpTask),
}

impl Task {
    pub fn regrouped(&self, granularity: Granularity) -> Result<Self> {
        match self {
            Task::Quadratic(_) => Err(Error::Config("partition granularity applies only to the mlp task".into())),
            Task::Mlp(m) => Ok(Task::Mlp(m.regrouped(granularity)?)),
        }
    }
}

impl Objective for Task {
    fn name(&self) -> &str {
        match self {
            Task::Quadratic(t) => t.name(),
            Task::Mlp(t) => t.name(),
        }
    }

    fn partition(&self) -> &Arc<BlockPartition> {
        match self {
            Task::Quadratic(t) => t.partition(),
            Task::Mlp(t) => t.partition(),
        }
    }

    fn initial_theta(&self) -> Vec<f64> {
        match self {
            Task::Quadratic(t) => t.initial_theta(),
            Task::Mlp(t) => t.initial_theta(),
        }
    }

    fn sample_batch(&self, batch_size: usize, seed: u64) -> Batch {
        match self {
            Task::Quadratic(t) => t.sample_batch(batch_size, seed),
            Task::Mlp(t) => t.sample_batch(batch_size, seed),
        }
    }

    fn loss(&self, theta: &[f64], batch: &Batch) -> f64 {
        match self {
            Task::Quadratic(t) => t.loss(theta, batch),
            Task::Mlp(t) => t.loss(theta, batch),
        }
    }

    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> f64 {
        match self {
            Task::Quadratic(t) => t.loss_grad(theta, batch, grad),
            Task::Mlp(t) => t.loss_grad(theta, batch, grad),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

pub fn build_tasks(section: &TaskSection, split: Split) -> Result<Vec<Task>> {
    let (count, base) = match split {
        Split::Train => (section.train_tasks, section.train_seed),
        Split::Eval => (section.eval_tasks, section.eval_seed),
    };
    (0..count as u64)
        .map(|k| {
            let seed = base + k;
            Ok(match &section.kind {
                TaskKind::Quadratic(fam) => Task::Quadratic(fam.sample(seed)?),
                TaskKind::Mlp { spec, granularity, sampling } => Task::Mlp(
                    MlpTask::gaussian_blobs(*spec, *granularity, seed)?
                        .with_sampling(*sampling)
                        .with_name(format!("mlp-{seed}")),
                ),
            })
        })
        .collect()
}

/// One fine-tuning run of the grid.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub method: Method,
    pub task: &'a Task,
    pub seed: u64,
    pub lr: f64,
}

/// A finished run with its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub lr: f64,
    pub trajectory: Trajectory,
    pub wall_ms: Vec<f64>,
}

impl RunResult {
    /// Mean pre-update loss over the last `window` fraction of the planned
    /// steps; infinite for a diverged run.
    pub fn final_loss(&self, window: f64, steps: usize) -> f64 {
        if self.trajectory.diverged() {
            return f64::INFINITY;
        }
        let recs = &self.trajectory.records;
        if recs.is_empty() || steps == 0 {
            return self.trajectory.initial_loss;
        }
        let k = ((window * steps as f64).ceil() as usize).clamp(1, recs.len());
        recs[recs.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// Steps to reach `threshold * initial`; `steps + 1` when never reached.
    pub fn steps_to_threshold(&self, threshold: f64, steps: usize) -> usize {
        if self.trajectory.diverged() {
            return steps + 1;
        }
        self.trajectory.steps_to_fraction(threshold).unwrap_or(steps + 1)
    }

    pub fn rows(&self, experiment: &str) -> Vec<RunRow> {
        self.trajectory
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let (min, med, max) = output::scale_summary(&r.scales);
                RunRow {
                    experiment: experiment.to_string(),
                    method: self.method.as_str().to_string(),
                    task: self.task.clone(),
                    seed: self.seed,
                    lr: self.lr,
                    step: r.step,
                    loss: r.loss,
                    wall_ms: self.wall_ms.get(i).copied().unwrap_or(0.0),
                    scale_min: min,
                    scale_med: med,
                    scale_max: max,
                }
            })
            .collect()
    }
}

/// Shared settings for a batch of fine-tuning runs.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings<'a> {
    pub steps: usize,
    pub epsilon: f64,
    pub batch_size: usize,
    pub normalize: bool,
    pub record_wall_time: bool,
    pub pertnn: Option<&'a PertNNParams>,
}

pub fn run_one(spec: RunSpec<'_>, settings: RunSettings<'_>) -> Result<RunResult> {
    let mut zo = ZoConfig::new(spec.method.mode(), spec.lr, settings.steps, spec.seed);
    zo.epsilon = settings.epsilon;
    zo.batch_size = settings.batch_size;
    zo.normalize = settings.normalize;
    let policy = match spec.method {
        Method::Mezo => ScalePolicy::Unit,
        Method::FineTuner => {
            let nn = settings
                .pertnn
                .ok_or_else(|| Error::Config("finetuner runs need a trained fine-tuner".into()))?;
            nn.check_partition(spec.task.partition())?;
            ScalePolicy::Learned(nn)
        }
    };
    let start = Instant::now();
    let trajectory = run_trajectory(spec.task, &zo, policy)?;
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    if settings.normalize {
        check_budget(spec.task.partition(), &trajectory)?;
    }
    let wall_ms = if settings.record_wall_time {
        let n = trajectory.records.len().max(1) as f64;
        (1..=trajectory.records.len()).map(|i| total_ms * i as f64 / n).collect()
    } else {
        Vec::new()
    };
    Ok(RunResult {
        method: spec.method,
        task: spec.task.name().to_string(),
        seed: spec.seed,
        lr: spec.lr,
        trajectory,
        wall_ms,
    })
}

/// Every recorded step must sit on the variance budget.
fn check_budget(partition: &BlockPartition, trajectory: &Trajectory) -> Result<()> {
    let d = partition.total() as f64;
    for r in &trajectory.records {
        let budget = PerturbScales::new_allow_zero(r.scales.clone())?.budget(partition);
        if (budget - d).abs() > 1e-12 * d {
            return Err(Error::NumericOverflow {
                context: format!("variance budget {budget} != {d} at step {}", r.step),
            });
        }
    }
    Ok(())
}

/// Output directory: `--out`, then `[experiment] out`, then `./zoft-out`.
pub fn output_dir(options: &RunOptions, configured: Option<&Path>) -> Result<PathBuf> {
    let dir = options
        .out
        .clone()
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("zoft-out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
