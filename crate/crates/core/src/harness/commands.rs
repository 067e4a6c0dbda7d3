use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;

use super::config::{Axis, ExperimentConfig, ExperimentSection, Method, Stability, TaskKind, TaskSection};
use super::output::{csv, table, write_file, write_runs, RunRow};
use super::{
    build_tasks, exit, median, output_dir, run_one, Outcome, Report, RunOptions, RunResult, RunSettings, RunSpec,
    Split, Task,
};
use crate::bounds::{verify_bound, BoundReport, VerifyOptions};
use crate::error::{Error, Result};
use crate::meta::{self, MetaLog};
use crate::paramspace::{BlockNormals, NoiseSeed, PerturbScales};
use crate::pertnn::PertNNParams;
use crate::testbeds::{make_rank_family, Granularity, Objective};

fn experiment(config: &ExperimentConfig, options: &RunOptions, default_id: &str) -> Result<ExperimentSection> {
    let mut e = config.experiment(default_id)?;
    if let Some(seed) = options.seed {
        e.seeds = vec![seed];
    }
    Ok(e)
}

fn settings<'a>(e: &ExperimentSection, normalize: bool, pertnn: Option<&'a PertNNParams>) -> RunSettings<'a> {
    RunSettings {
        steps: e.steps,
        epsilon: e.epsilon,
        batch_size: e.batch_size,
        normalize,
        record_wall_time: e.record_wall_time,
        pertnn,
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(":")
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6e}")
}

/// Meta-trains on the config's training tasks.
fn meta_train(
    config: &ExperimentConfig,
    task: &TaskSection,
    seed_override: Option<u64>,
    tweak: impl FnOnce(&mut meta::MetaConfig),
    granularity: Option<Granularity>,
) -> Result<(PertNNParams, MetaLog, Vec<Task>)> {
    let m = config.meta()?;
    let mut cfg = m.config.clone();
    let mut init_seed = m.init_seed;
    if let Some(s) = seed_override {
        cfg.seed = s;
        init_seed = s;
    }
    tweak(&mut cfg);
    let mut tasks = build_tasks(task, Split::Train)?;
    if let Some(g) = granularity {
        tasks = tasks.iter().map(|t| t.regrouped(g)).collect::<Result<_>>()?;
    }
    let nn = PertNNParams::init(tasks[0].partition(), m.hidden, NoiseSeed::new(init_seed, 0))?;
    let (nn, log) = meta::train(&cfg, &tasks, nn)?;
    Ok((nn, log, tasks))
}

/// The fine-tuner from `[finetuner] checkpoint`, else meta-trained from `[meta]`.
fn obtain_finetuner(config: &ExperimentConfig, task: &TaskSection) -> Result<PertNNParams> {
    if let Some(path) = config.checkpoint()? {
        return Ok(PertNNParams::load(&path)?);
    }
    if config.has_meta() {
        return Ok(meta_train(config, task, None, |_| (), None)?.0);
    }
    Err(Error::Config("finetuner method needs [finetuner] checkpoint or a [meta] section".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub rows: usize,
    pub resets: Vec<usize>,
    /// Mean of `L_zo - L_zo(unit scales)` over the last quarter of the log.
    pub late_improvement: f64,
}

pub fn train_finetuner(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let e = experiment(config, options, "train")?;
    let task = config.task()?;
    let out = output_dir(options, e.out.as_deref())?;
    let (nn, log, tasks) = meta_train(config, &task, options.seed, |_| (), None)?;
    let m = config.meta()?;
    let seed = options.seed.unwrap_or(m.config.seed);
    let rows: Vec<RunRow> = log
        .rows
        .iter()
        .map(|r| {
            let (min, med, max) = super::output::scale_summary(&r.record.scales);
            RunRow {
                experiment: e.id.clone(),
                method: "l2l".into(),
                task: tasks[r.task].name().to_string(),
                seed,
                lr: m.config.eta1,
                step: r.step,
                loss: r.record.l_zo,
                wall_ms: 0.0,
                scale_min: min,
                scale_med: med,
                scale_max: max,
            }
        })
        .collect();
    let n = rows.len();
    let ckpt = out.join(format!("{}.pertnn", e.id));
    nn.save(&ckpt)?;
    let csv_path = write_runs(&out, &format!("{}_meta.csv", e.id), rows)?;
    let tail = &log.rows[n - n.div_ceil(4)..];
    let late = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|r| r.record.l_zo - r.record.unit_l_zo).sum::<f64>() / tail.len() as f64
    };
    let mut summary = String::new();
    let _ = writeln!(summary, "meta-trained {} tasks for {} steps", tasks.len(), m.config.steps);
    let _ = writeln!(summary, "resets after steps: {:?}", log.resets);
    let _ = writeln!(summary, "late mean L_zo - unit-scale L_zo: {late:.6e}");
    let _ = writeln!(summary, "checkpoint: {}.pertnn", e.id);
    let summary_path = write_file(&out, &format!("{}_meta_summary.txt", e.id), &summary)?;
    Ok(Outcome {
        files: vec![ckpt.clone(), csv_path, summary_path],
        summary,
        exit_code: exit::SUCCESS,
        report: Report::Train(TrainReport { checkpoint: ckpt, rows: n, resets: log.resets, late_improvement: late }),
    })
}

/// Runs the grid `methods x lrs x tasks x seeds` in parallel, in a stable order.
fn run_grid(
    e: &ExperimentSection,
    tasks: &[Task],
    grids: &[(Method, Vec<f64>)],
    normalize: bool,
    pertnn: Option<&PertNNParams>,
) -> Result<Vec<RunResult>> {
    let mut specs = Vec::new();
    for (method, lrs) in grids {
        for &lr in lrs {
            for task in tasks {
                for &seed in &e.seeds {
                    specs.push(RunSpec { method: *method, task, seed, lr });
                }
            }
        }
    }
    let s = settings(e, normalize, pertnn);
    specs.into_par_iter().map(|spec| run_one(spec, s)).collect()
}

fn method_grids(e: &ExperimentSection) -> Vec<(Method, Vec<f64>)> {
    e.methods.iter().copied().zip(e.lr.iter().cloned()).collect()
}

pub fn finetune(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let e = experiment(config, options, "finetune")?;
    let task = config.task()?;
    let method = config.finetune_mode()?;
    let pertnn = match method {
        Method::Mezo => None,
        Method::FineTuner => {
            let path = config
                .checkpoint()?
                .ok_or_else(|| Error::Config("finetuner mode needs [finetuner] checkpoint".into()))?;
            Some(PertNNParams::load(&path)?)
        }
    };
    let lrs = e
        .methods
        .iter()
        .position(|m| *m == method)
        .map(|i| e.lr[i].clone())
        .unwrap_or_else(|| e.lr[0].clone());
    let tasks = build_tasks(&task, Split::Eval)?;
    let out = output_dir(options, e.out.as_deref())?;
    let results = run_grid(&e, &tasks, &[(method, lrs)], true, pertnn.as_ref())?;
    let rows: Vec<RunRow> = results.iter().flat_map(|r| r.rows(&e.id)).collect();
    let n = rows.len();
    let path = write_runs(&out, &format!("{}_trajectory.csv", e.id), rows)?;
    if let Some(err) = results.iter().find_map(|r| r.trajectory.stopped.clone()) {
        return Err(err);
    }
    let finals: Vec<f64> = results.iter().map(|r| r.final_loss(e.final_window, e.steps)).collect();
    let summary = format!(
        "{} runs of {} ({} rows), median final loss {}\n",
        results.len(),
        method.as_str(),
        n,
        fmt_num(median(&finals))
    );
    Ok(Outcome { files: vec![path], summary, exit_code: exit::SUCCESS, report: Report::Finetune { rows: n } })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub best_lr_final: f64,
    /// Median over task-seed pairs of the final-window loss at `best_lr_final`.
    pub final_loss: f64,
    pub best_lr_steps: f64,
    /// Median steps to threshold at `best_lr_steps`; `steps + 1` means never.
    pub median_steps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub methods: Vec<MethodSummary>,
    pub pairs: usize,
    /// Fine-tuner against MeZO at each method's steps-best learning rate.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl CompareReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn win_rate(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.wins as f64 / self.pairs as f64
        }
    }
}

type PairKey = (String, u64);

/// Keyed by the bits of the learning rate: the rate and, per (task, seed),
/// final loss and steps.
type LrGrid = BTreeMap<u64, (f64, BTreeMap<PairKey, (f64, usize)>)>;

fn by_lr(results: &[RunResult], method: Method, e: &ExperimentSection) -> LrGrid {
    let mut out = LrGrid::new();
    for r in results.iter().filter(|r| r.method == method) {
        out.entry(r.lr.to_bits()).or_insert_with(|| (r.lr, BTreeMap::new())).1.insert(
            (r.task.clone(), r.seed),
            (r.final_loss(e.final_window, e.steps), r.steps_to_threshold(e.threshold, e.steps)),
        );
    }
    out
}

fn summarize(results: &[RunResult], method: Method, e: &ExperimentSection) -> (MethodSummary, BTreeMap<PairKey, usize>) {
    let grid = by_lr(results, method, e);
    let mut best_final = (f64::INFINITY, f64::NAN);
    let mut best_steps = (f64::INFINITY, f64::INFINITY, f64::NAN);
    let mut best_pairs = BTreeMap::new();
    for (lr, pairs) in grid.values() {
        let finals: Vec<f64> = pairs.values().map(|v| v.0).collect();
        let steps: Vec<f64> = pairs.values().map(|v| v.1 as f64).collect();
        let (mf, ms) = (median(&finals), median(&steps));
        if mf < best_final.0 || best_final.1.is_nan() {
            best_final = (mf, *lr);
        }
        if (ms, mf) < (best_steps.0, best_steps.1) || best_steps.2.is_nan() {
            best_steps = (ms, mf, *lr);
            best_pairs = pairs.iter().map(|(k, v)| (k.clone(), v.1)).collect();
        }
    }
    (
        MethodSummary {
            method,
            best_lr_final: best_final.1,
            final_loss: best_final.0,
            best_lr_steps: best_steps.2,
            median_steps: best_steps.0,
        },
        best_pairs,
    )
}

pub fn compare(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let e = experiment(config, options, "compare")?;
    if e.lr.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config("compare needs the same learning-rate grid for every method".into()));
    }
    let task = config.task()?;
    let pertnn = if e.methods.contains(&Method::FineTuner) { Some(obtain_finetuner(config, &task)?) } else { None };
    let tasks = build_tasks(&task, Split::Eval)?;
    let out = output_dir(options, e.out.as_deref())?;
    let results = run_grid(&e, &tasks, &method_grids(&e), true, pertnn.as_ref())?;

    let mut methods = Vec::new();
    let mut pair_steps = BTreeMap::new();
    for &m in &e.methods {
        let (s, pairs) = summarize(&results, m, &e);
        methods.push(s);
        pair_steps.insert(m, pairs);
    }
    let (mut wins, mut losses, mut ties, mut pairs) = (0, 0, 0, 0);
    if let (Some(ft), Some(mz)) = (pair_steps.get(&Method::FineTuner), pair_steps.get(&Method::Mezo)) {
        for (k, &a) in ft {
            if let Some(&b) = mz.get(k) {
                pairs += 1;
                match a.cmp(&b) {
                    std::cmp::Ordering::Less => wins += 1,
                    std::cmp::Ordering::Greater => losses += 1,
                    std::cmp::Ordering::Equal => ties += 1,
                }
            }
        }
    }
    let report = CompareReport { methods, pairs, wins, losses, ties };

    let header = ["method", "best_lr_final", "final_loss", "best_lr_steps", "median_steps", "wins", "losses", "ties"];
    let cells: Vec<Vec<String>> = report
        .methods
        .iter()
        .map(|s| {
            let (w, l) = match s.method {
                Method::FineTuner => (wins, losses),
                Method::Mezo => (losses, wins),
            };
            vec![
                s.method.as_str().to_string(),
                s.best_lr_final.to_string(),
                fmt_num(s.final_loss),
                s.best_lr_steps.to_string(),
                s.median_steps.to_string(),
                w.to_string(),
                l.to_string(),
                ties.to_string(),
            ]
        })
        .collect();
    let runs = write_runs(&out, &format!("{}_runs.csv", e.id), results.iter().flat_map(|r| r.rows(&e.id)).collect())?;
    let summary_csv = write_file(&out, &format!("{}_summary.csv", e.id), &csv(&header, &cells))?;
    let mut summary = table(&header, &cells);
    let _ = writeln!(
        summary,
        "{} task-seed pairs, threshold {}x initial loss, final window {}",
        pairs, e.threshold, e.final_window
    );
    let summary_txt = write_file(&out, &format!("{}_summary.txt", e.id), &summary)?;
    Ok(Outcome {
        files: vec![runs, summary_csv, summary_txt],
        summary,
        exit_code: exit::SUCCESS,
        report: Report::Compare(report),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Flag {
    Diverged,
    Plateaued,
    Converged,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Diverged => "diverged",
            Flag::Plateaued => "plateaued",
            Flag::Converged => "converged",
        }
    }

    pub fn of(run: &RunResult, window: f64, steps: usize, s: &Stability) -> Self {
        let fin = run.final_loss(window, steps);
        let init = run.trajectory.initial_loss;
        if run.trajectory.diverged() || !fin.is_finite() || fin > s.diverge_ratio * init {
            Flag::Diverged
        } else if fin > s.plateau_ratio * init {
            Flag::Plateaued
        } else {
            Flag::Converged
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub lr: f64,
    pub diverged: usize,
    pub plateaued: usize,
    pub converged: usize,
    pub median_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn diverged(&self, m: Method) -> usize {
        self.cells.iter().filter(|c| c.method == m).map(|c| c.diverged).sum()
    }

    /// Lowest median final loss over the grid.
    pub fn best_final(&self, m: Method) -> f64 {
        self.cells.iter().filter(|c| c.method == m).map(|c| c.median_final).fold(f64::INFINITY, f64::min)
    }

    pub fn runs(&self) -> usize {
        self.cells.iter().map(|c| c.diverged + c.plateaued + c.converged).sum()
    }
}

pub fn sweep_lr(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let e = experiment(config, options, "sweep")?;
    for (m, grid) in e.methods.iter().zip(&e.lr) {
        let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().cloned().fold(0.0, f64::max);
        if grid.len() < 3 || lo <= 0.0 || hi / lo < 100.0 * (1.0 - 1e-9) {
            return Err(Error::Config(format!(
                "{} learning-rate grid needs >= 3 positive values spanning >= 2 orders of magnitude",
                m.as_str()
            )));
        }
    }
    let stability = config.stability()?;
    let task = config.task()?;
    let pertnn = if e.methods.contains(&Method::FineTuner) { Some(obtain_finetuner(config, &task)?) } else { None };
    let tasks = build_tasks(&task, Split::Eval)?;
    let out = output_dir(options, e.out.as_deref())?;
    let results = run_grid(&e, &tasks, &method_grids(&e), true, pertnn.as_ref())?;

    let mut flags = Vec::new();
    let mut cells: Vec<SweepCell> = Vec::new();
    for (m, grid) in e.methods.iter().zip(&e.lr) {
        for &lr in grid {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.method == *m && r.lr == lr).collect();
            let mut cell = SweepCell { method: *m, lr, diverged: 0, plateaued: 0, converged: 0, median_final: 0.0 };
            let mut finals = Vec::new();
            for r in &runs {
                let f = Flag::of(r, e.final_window, e.steps, &stability);
                match f {
                    Flag::Diverged => cell.diverged += 1,
                    Flag::Plateaued => cell.plateaued += 1,
                    Flag::Converged => cell.converged += 1,
                }
                let fin = r.final_loss(e.final_window, e.steps);
                finals.push(fin);
                flags.push(vec![
                    e.id.clone(),
                    m.as_str().to_string(),
                    lr.to_string(),
                    r.task.clone(),
                    r.seed.to_string(),
                    fin.to_string(),
                    r.trajectory.initial_loss.to_string(),
                    f.as_str().to_string(),
                ]);
            }
            cell.median_final = median(&finals);
            cells.push(cell);
        }
    }
    flags.sort();
    let curves =
        write_runs(&out, &format!("{}_curves.csv", e.id), results.iter().flat_map(|r| r.rows(&e.id)).collect())?;
    let stab = write_file(
        &out,
        &format!("{}_stability.csv", e.id),
        &csv(&["experiment", "method", "lr", "task", "seed", "final_loss", "initial_loss", "flag"], &flags),
    )?;
    let header = ["method", "lr", "diverged", "plateaued", "converged", "median_final_loss"];
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.method.as_str().to_string(),
                c.lr.to_string(),
                c.diverged.to_string(),
                c.plateaued.to_string(),
                c.converged.to_string(),
                fmt_num(c.median_final),
            ]
        })
        .collect();
    let summ = write_file(&out, &format!("{}_summary.csv", e.id), &csv(&header, &rows))?;
    Ok(Outcome {
        files: vec![curves, stab, summ],
        summary: table(&header, &rows),
        exit_code: exit::SUCCESS,
        report: Report::Sweep(SweepReport { cells }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub reset: Option<bool>,
    pub normalization: Option<bool>,
    pub partition: Option<Granularity>,
    /// Per seed, mean final loss over the evaluation tasks.
    pub per_seed: Vec<f64>,
    pub median: f64,
    pub failed: usize,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let mut parts = Vec::new();
        if let Some(r) = self.reset {
            parts.push(format!("reset={}", on(r)));
        }
        if let Some(n) = self.normalization {
            parts.push(format!("normalization={}", on(n)));
        }
        if let Some(p) = self.partition {
            parts.push(format!("partition={}", granularity_str(p)));
        }
        parts.join(";")
    }
}

fn granularity_str(g: Granularity) -> &'static str {
    match g {
        Granularity::Block => "block",
        Granularity::Layer => "layer",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn find(&self, reset: Option<bool>, normalization: Option<bool>, partition: Option<Granularity>) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.reset == reset && c.normalization == normalization && c.partition == partition)
    }
}

/// Seed `s` meta-trains on tasks `train_seed + STRIDE * s ..`.
const ABLATION_SEED_STRIDE: u64 = 100;

pub fn ablate(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let e = experiment(config, options, "ablate")?;
    let axes = config.ablation()?.axes;
    let task = config.task()?;
    if axes.contains(&Axis::Partition) && !matches!(task.kind, TaskKind::Mlp { .. }) {
        return Err(Error::Config("the partition axis needs kind = mlp".into()));
    }
    let meta_cfg = config.meta()?;
    let period = meta_cfg.config.reset_period;
    if axes.contains(&Axis::Reset) && period.is_none() {
        return Err(Error::Config("the reset axis needs [meta] reset_period to be set".into()));
    }
    let lr = match e.methods.iter().position(|m| *m == Method::FineTuner) {
        Some(i) if e.lr[i].len() == 1 => e.lr[i][0],
        Some(_) => return Err(Error::Config("ablate takes a single finetuner learning rate".into())),
        None => return Err(Error::Config("ablate needs the finetuner method".into())),
    };

    let mut cells: Vec<(Option<bool>, Option<bool>, Option<Granularity>)> = vec![(None, None, None)];
    for axis in &axes {
        let mut next = Vec::new();
        for c in &cells {
            match axis {
                Axis::Reset => next.extend([true, false].map(|v| (Some(v), c.1, c.2))),
                Axis::Normalization => next.extend([true, false].map(|v| (c.0, Some(v), c.2))),
                Axis::Partition => next.extend([Granularity::Block, Granularity::Layer].map(|g| (c.0, c.1, Some(g)))),
            }
        }
        cells = next;
    }
    let eval = build_tasks(&task, Split::Eval)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| e.seeds.iter().map(move |&s| (c, s))).collect();
    let outcomes: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (reset, norm, part) = cells[c];
            let normalize = norm.unwrap_or(meta_cfg.config.normalize);
            let mut train_split = task.clone();
            train_split.train_seed = task.train_seed.wrapping_add(ABLATION_SEED_STRIDE.wrapping_mul(seed));
            let trained = meta_train(
                config,
                &train_split,
                Some(seed),
                |m| {
                    if let Some(r) = reset {
                        m.reset_period = if r { period } else { None };
                        if !r {
                            m.reset_loss_ratio = None;
                        }
                    }
                    m.normalize = normalize;
                },
                part,
            );
            let nn = match trained {
                Ok((nn, _, _)) => nn,
                Err(Error::Config(msg)) => return Err(Error::Config(msg)),
                Err(_) => return Ok(f64::INFINITY),
            };
            let tasks: Vec<Task> = match part {
                Some(g) => eval.iter().map(|t| t.regrouped(g)).collect::<Result<_>>()?,
                None => eval.clone(),
            };
            let s = settings(&e, normalize, Some(&nn));
            let mut total = 0.0;
            for t in &tasks {
                match run_one(RunSpec { method: Method::FineTuner, task: t, seed, lr }, s) {
                    Ok(r) => total += r.final_loss(e.final_window, e.steps),
                    Err(Error::Config(msg)) => return Err(Error::Config(msg)),
                    Err(_) => return Ok(f64::INFINITY),
                }
            }
            Ok(total / tasks.len() as f64)
        })
        .collect();
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    for (&(c, _), o) in jobs.iter().zip(outcomes) {
        per_cell[c].push(o?);
    }
    let report = AblationReport {
        cells: cells
            .iter()
            .zip(per_cell)
            .map(|(&(reset, normalization, partition), per_seed)| AblationCell {
                reset,
                normalization,
                partition,
                median: median(&per_seed),
                failed: per_seed.iter().filter(|v| !v.is_finite()).count(),
                per_seed,
            })
            .collect(),
    };
    let on = |b: Option<bool>| b.map_or("-", |v| if v { "on" } else { "off" }).to_string();
    let header = ["experiment", "cell", "reset", "normalization", "partition", "seeds", "median_final_loss", "failed"];
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                e.id.clone(),
                c.label(),
                on(c.reset),
                on(c.normalization),
                c.partition.map_or("-", granularity_str).to_string(),
                c.per_seed.len().to_string(),
                fmt_num(c.median),
                c.failed.to_string(),
            ]
        })
        .collect();
    let mut seed_rows = Vec::new();
    for c in &report.cells {
        for (s, v) in e.seeds.iter().zip(&c.per_seed) {
            seed_rows.push(vec![e.id.clone(), c.label(), s.to_string(), v.to_string()]);
        }
    }
    let out = output_dir(options, e.out.as_deref())?;
    let a = write_file(&out, &format!("{}_ablation.csv", e.id), &csv(&header, &rows))?;
    let b = write_file(
        &out,
        &format!("{}_ablation_seeds.csv", e.id),
        &csv(&["experiment", "cell", "seed", "final_loss"], &seed_rows),
    )?;
    Ok(Outcome {
        files: vec![a, b],
        summary: table(&header[1..], &rows.iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>()),
        exit_code: exit::SUCCESS,
        report: Report::Ablation(report),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRow {
    pub profile: Vec<f64>,
    pub eta: f64,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsSummary {
    pub rows: Vec<BoundsRow>,
}

impl BoundsSummary {
    pub fn violations(&self) -> usize {
        self.rows.iter().map(|r| r.report.violations.len()).sum()
    }
}

pub fn verify_bounds(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let e = experiment(config, options, "bounds")?;
    let b = config.bounds()?;
    let seed = options.seed.unwrap_or(b.seed);
    let d: usize = b.block_sizes.iter().sum();
    let mut normals = BlockNormals::new(NoiseSeed::new(b.theta_seed, 0), 0);
    let theta: Vec<f64> = (0..d).map(|_| b.init_std * normals.next_normal()).collect();
    let configs: Vec<(usize, &Vec<f64>, f64)> = b
        .profiles
        .iter()
        .flat_map(|p| b.etas.iter().map(move |&eta| (p, eta)))
        .enumerate()
        .map(|(i, (p, eta))| (i, p, eta))
        .collect();
    let rows: Vec<BoundsRow> = configs
        .par_iter()
        .map(|&(i, profile, eta)| {
            let task = make_rank_family(&b.block_sizes, profile, &b.opnorms)?
                .with_initial(theta.clone())?
                .with_name(format!("ranks-{}", fmt_list(profile)));
            let options = VerifyOptions {
                samples: b.samples,
                seed: seed.wrapping_add(i as u64),
                epsilon: b.epsilon,
                scheme: b.scheme,
            };
            let report = verify_bound(&task, &theta, &PerturbScales::unit(b.block_sizes.len()), eta, &options)?;
            Ok(BoundsRow { profile: profile.clone(), eta, report })
        })
        .collect::<Result<_>>()?;
    let summary = BoundsSummary { rows };

    let header = [
        "experiment", "profile", "eta", "scheme", "mezo_bound", "blockwise_unit", "blockwise_optimal", "gap",
        "measured_unit", "stderr_unit", "closed_unit", "measured_optimal", "stderr_optimal", "closed_optimal",
        "optimal_scales", "passed", "violations",
    ];
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let cells: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|row| {
            let r = &row.report;
            let given = r.check("given").expect("given scales are always checked");
            let optimal = r.check("optimal").expect("optimal scales are always checked");
            vec![
                e.id.clone(),
                fmt_list(&row.profile),
                row.eta.to_string(),
                r.scheme.as_str().to_string(),
                r.mezo_bound.to_string(),
                r.blockwise_unit.to_string(),
                r.blockwise_optimal.to_string(),
                r.gap().to_string(),
                given.monte_carlo.mean.to_string(),
                opt(given.monte_carlo.stderr),
                opt(given.closed_form),
                optimal.monte_carlo.mean.to_string(),
                opt(optimal.monte_carlo.stderr),
                opt(optimal.closed_form),
                fmt_list(&optimal.scales),
                r.passed().to_string(),
                r.violations.len().to_string(),
            ]
        })
        .collect();
    let out = output_dir(options, e.out.as_deref())?;
    let path = write_file(&out, &format!("{}_bounds.csv", e.id), &csv(&header, &cells))?;
    let violations = summary.violations();
    let mut text = String::new();
    let _ = writeln!(text, "{} configurations, {} violations", summary.rows.len(), violations);
    for row in summary.rows.iter().filter(|r| !r.report.passed()) {
        let _ = writeln!(text, "  ranks {} eta {}: {:?}", fmt_list(&row.profile), row.eta, row.report.violations);
    }
    Ok(Outcome {
        files: vec![path],
        summary: text,
        exit_code: if violations == 0 { exit::SUCCESS } else { exit::BOUND_VIOLATION },
        report: Report::Bounds(summary),
    })
}
