//! Typed experiment configuration on top of the INI parser.

use std::path::{Path, PathBuf};

use super::ini::{split_list, Ini, Section};
use crate::bounds::Scheme;
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::pertnn::{FeatureAffine, DEFAULT_HIDDEN, FEATURES};
use crate::testbeds::{Granularity, MlpSpec, QuadraticFamily, Sampling};
use crate::zo::{Mode, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Mezo,
    FineTuner,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mezo => "mezo",
            Method::FineTuner => "finetuner",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Method::Mezo => Mode::Mezo,
            Method::FineTuner => Mode::FineTuner,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "mezo" => Some(Method::Mezo),
            "finetuner" | "fine-tuner" => Some(Method::FineTuner),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub id: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub epsilon: f64,
    pub batch_size: usize,
    pub methods: Vec<Method>,
    /// Learning-rate grid per method, in `methods` order.
    pub lr: Vec<Vec<f64>>,
    pub threshold: f64,
    pub final_window: f64,
    pub out: Option<PathBuf>,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Quadratic(QuadraticFamily),
    Mlp { spec: MlpSpec, granularity: Granularity, sampling: Sampling },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub train_tasks: usize,
    pub train_seed: u64,
    pub eval_tasks: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSection {
    pub config: MetaConfig,
    pub hidden: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    /// Flag a run as diverged when the guard trips or its final loss exceeds
    /// `diverge_ratio * initial`.
    pub diverge_ratio: f64,
    /// Flag as plateaued when the final loss stays above `plateau_ratio * initial`.
    pub plateau_ratio: f64,
}

impl Default for Stability {
    fn default() -> Self {
        Self { diverge_ratio: 1.0, plateau_ratio: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    Reset,
    Normalization,
    Partition,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Reset => "reset",
            Axis::Normalization => "normalization",
            Axis::Partition => "partition",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSection {
    pub axes: Vec<Axis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsSection {
    pub block_sizes: Vec<usize>,
    pub profiles: Vec<Vec<f64>>,
    pub etas: Vec<f64>,
    pub opnorms: Vec<f64>,
    pub init_std: f64,
    pub theta_seed: u64,
    pub samples: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub scheme: Scheme,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            block_sizes: vec![16, 48],
            profiles: vec![vec![1.0, 48.0], vec![1.0, 8.0], vec![4.0, 24.0], vec![16.0, 2.0], vec![8.0, 8.0]],
            etas: vec![0.002, 0.005, 0.01],
            opnorms: vec![1.0, 1.0],
            init_std: 1.0,
            theta_seed: 11,
            samples: 100_000,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            scheme: Scheme::BlockGaussian,
        }
    }
}

/// A parsed config file; sections are resolved lazily per command.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub ini: Ini,
    pub base_dir: PathBuf,
}

const EXPERIMENT_KEYS: &[&str] = &[
    "id", "seeds", "steps", "epsilon", "batch_size", "methods", "lr", "lr_mezo", "lr_finetuner", "threshold",
    "final_window", "out", "record_wall_time", "mode",
];
const TASK_KEYS: &[&str] = &[
    "kind", "family", "block_sizes", "ranks", "opnorm_lo", "opnorm_hi", "init_std", "optimum_std", "noise_trace",
    "input", "hidden", "classes", "samples", "separation", "granularity", "sampling", "train_tasks", "train_seed",
    "eval_tasks", "eval_seed",
];
const META_KEYS: &[&str] = &[
    "steps", "eta1", "eta2", "epsilon", "reset_period", "reset_loss_ratio", "batch_size", "hidden", "normalize",
    "init_seed", "seed",
];

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let ini = Ini::parse(text)?;
        const KNOWN: &[&str] = &["experiment", "task", "meta", "finetuner", "features", "stability", "ablation", "bounds"];
        for s in ini.sections() {
            if !KNOWN.contains(&s.name.as_str()) {
                return Err(Error::Config(format!("line {}: unknown section [{}]", s.line, s.name)));
            }
        }
        Ok(Self { ini, base_dir: base_dir.into() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn empty() -> Section {
        Ini::parse("[empty]").expect("static").sections()[0].clone()
    }

    fn section_or_empty(&self, name: &str) -> Section {
        self.ini.section(name).cloned().unwrap_or_else(Self::empty)
    }

    pub fn experiment(&self, default_id: &str) -> Result<ExperimentSection> {
        let s = self.section_or_empty("experiment");
        s.check_keys(EXPERIMENT_KEYS)?;
        let seeds = s.list::<u64>("seeds")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(s.error("seeds", "seed list must not be empty"));
        }
        let methods = match s.str("methods") {
            None => vec![Method::Mezo, Method::FineTuner],
            Some(v) => {
                let mut out = Vec::new();
                for m in split_list(v) {
                    let m = Method::parse(m).ok_or_else(|| s.error("methods", format!("unknown method {m:?}")))?;
                    if out.contains(&m) {
                        return Err(s.error("methods", format!("method {} listed twice", m.as_str())));
                    }
                    out.push(m);
                }
                if out.is_empty() {
                    return Err(s.error("methods", "no methods given"));
                }
                out
            }
        };
        let shared = s.list::<f64>("lr")?;
        let mut lr = Vec::new();
        for m in &methods {
            let key = format!("lr_{}", m.as_str());
            let grid = s.list::<f64>(&key)?.or_else(|| shared.clone()).unwrap_or_else(|| vec![0.01]);
            if grid.is_empty() || grid.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(s.error(&key, "learning rates must be finite and nonnegative"));
            }
            lr.push(grid);
        }
        let steps = s.get_or("steps", 200usize)?;
        let epsilon = s.get_or("epsilon", DEFAULT_EPSILON)?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(s.error("epsilon", "must be > 0"));
        }
        let batch_size = s.get_or("batch_size", 16usize)?;
        if batch_size == 0 {
            return Err(s.error("batch_size", "must be >= 1"));
        }
        let threshold = s.get_or("threshold", 0.5)?;
        let final_window = s.get_or("final_window", 0.1)?;
        if !(final_window > 0.0 && final_window <= 1.0) {
            return Err(s.error("final_window", "must be in (0, 1]"));
        }
        Ok(ExperimentSection {
            id: s.str("id").unwrap_or(default_id).to_string(),
            seeds,
            steps,
            epsilon,
            batch_size,
            methods,
            lr,
            threshold,
            final_window,
            out: s.str("out").map(|p| self.resolve(p)),
            record_wall_time: s.bool_or("record_wall_time", false)?,
        })
    }

    /// `mode` key of `[experiment]` for the finetune command.
    pub fn finetune_mode(&self) -> Result<Method> {
        let s = self.section_or_empty("experiment");
        match s.str("mode") {
            None => Ok(Method::FineTuner),
            Some(v) => Method::parse(v).ok_or_else(|| s.error("mode", format!("unknown mode {v:?}"))),
        }
    }

    pub fn task(&self) -> Result<TaskSection> {
        let s = self.ini.require("task")?;
        s.check_keys(TASK_KEYS)?;
        let kind = match s.require_str("kind")? {
            "quadratic" => TaskKind::Quadratic(quadratic_family(s)?),
            "mlp" => {
                let d = MlpSpec::default();
                let spec = MlpSpec {
                    input: s.get_or("input", d.input)?,
                    hidden: s.get_or("hidden", d.hidden)?,
                    classes: s.get_or("classes", d.classes)?,
                    samples: s.get_or("samples", d.samples)?,
                    separation: s.get_or("separation", d.separation)?,
                };
                let granularity = match s.str("granularity").unwrap_or("block") {
                    "block" => Granularity::Block,
                    "layer" => Granularity::Layer,
                    other => return Err(s.error("granularity", format!("expected block or layer, found {other:?}"))),
                };
                let sampling = match s.str("sampling").unwrap_or("with-replacement") {
                    "with-replacement" => Sampling::WithReplacement,
                    "without-replacement" => Sampling::WithoutReplacement,
                    other => return Err(s.error("sampling", format!("unknown sampling {other:?}"))),
                };
                TaskKind::Mlp { spec, granularity, sampling }
            }
            other => return Err(s.error("kind", format!("expected quadratic or mlp, found {other:?}"))),
        };
        let train_tasks = s.get_or("train_tasks", 8usize)?;
        let eval_tasks = s.get_or("eval_tasks", 1usize)?;
        if train_tasks == 0 || eval_tasks == 0 {
            return Err(Error::Config(format!("line {}: task counts must be >= 1", s.line)));
        }
        Ok(TaskSection {
            kind,
            train_tasks,
            train_seed: s.get_or("train_seed", 1000)?,
            eval_tasks,
            eval_seed: s.get_or("eval_seed", 5000)?,
        })
    }

    pub fn has_meta(&self) -> bool {
        self.ini.section("meta").is_some()
    }

    pub fn meta(&self) -> Result<MetaSection> {
        let s = self.ini.require("meta")?;
        s.check_keys(META_KEYS)?;
        let d = MetaConfig::default();
        let config = MetaConfig {
            epsilon: s.get_or("epsilon", d.epsilon)?,
            eta1: s.get_or("eta1", d.eta1)?,
            eta2: s.get_or("eta2", d.eta2)?,
            steps: s.get_or("steps", d.steps)?,
            reset_period: s.optional_period("reset_period", d.reset_period)?,
            reset_loss_ratio: match s.str("reset_loss_ratio") {
                None | Some("off") => None,
                Some(_) => s.get("reset_loss_ratio")?,
            },
            batch_size: s.get_or("batch_size", d.batch_size)?,
            seed: s.get_or("seed", d.seed)?,
            normalize: s.bool_or("normalize", d.normalize)?,
            features: self.features()?,
        };
        config.validate().map_err(|e| Error::Config(format!("line {}: [meta] {e}", s.line)))?;
        let hidden = s.get_or("hidden", DEFAULT_HIDDEN)?;
        if hidden == 0 {
            return Err(s.error("hidden", "must be >= 1"));
        }
        Ok(MetaSection { config, hidden, init_seed: s.get_or("init_seed", 0)? })
    }

    pub fn features(&self) -> Result<FeatureAffine> {
        let Some(s) = self.ini.section("features") else {
            return Ok(FeatureAffine::IDENTITY);
        };
        s.check_keys(&["shift", "scale"])?;
        let read = |key: &str, default: f64| -> Result<[f64; FEATURES]> {
            match s.list::<f64>(key)? {
                None => Ok([default; FEATURES]),
                Some(v) => v.try_into().map_err(|_| s.error(key, format!("expected {FEATURES} values"))),
            }
        };
        Ok(FeatureAffine { shift: read("shift", 0.0)?, scale: read("scale", 1.0)? })
    }

    pub fn checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(s) = self.ini.section("finetuner") else {
            return Ok(None);
        };
        s.check_keys(&["checkpoint"])?;
        Ok(s.str("checkpoint").map(|p| self.resolve(p)))
    }

    pub fn stability(&self) -> Result<Stability> {
        let s = self.section_or_empty("stability");
        s.check_keys(&["diverge_ratio", "plateau_ratio"])?;
        let d = Stability::default();
        let out = Stability {
            diverge_ratio: s.get_or("diverge_ratio", d.diverge_ratio)?,
            plateau_ratio: s.get_or("plateau_ratio", d.plateau_ratio)?,
        };
        if !(out.plateau_ratio > 0.0 && out.plateau_ratio <= out.diverge_ratio) {
            return Err(Error::Config(format!(
                "line {}: need 0 < plateau_ratio <= diverge_ratio",
                s.line
            )));
        }
        Ok(out)
    }

    pub fn ablation(&self) -> Result<AblationSection> {
        let s = self.ini.require("ablation")?;
        s.check_keys(&["axes"])?;
        let mut axes = Vec::new();
        for a in split_list(s.require_str("axes")?) {
            let axis = match a {
                "reset" => Axis::Reset,
                "normalization" | "normalize" => Axis::Normalization,
                "partition" => Axis::Partition,
                other => return Err(s.error("axes", format!("unknown ablation axis {other:?}"))),
            };
            if axes.contains(&axis) {
                return Err(s.error("axes", format!("axis {a} listed twice")));
            }
            axes.push(axis);
        }
        if axes.is_empty() {
            return Err(s.error("axes", "no axes given"));
        }
        Ok(AblationSection { axes })
    }

    pub fn bounds(&self) -> Result<BoundsSection> {
        let s = self.section_or_empty("bounds");
        s.check_keys(&[
            "block_sizes", "profiles", "etas", "opnorms", "init_std", "theta_seed", "samples", "seed", "epsilon",
            "scheme",
        ])?;
        let d = BoundsSection::default();
        let block_sizes = s.list::<usize>("block_sizes")?.unwrap_or(d.block_sizes);
        if block_sizes.is_empty() || block_sizes.contains(&0) {
            return Err(s.error("block_sizes", "block sizes must be >= 1"));
        }
        let profiles = match s.str("profiles") {
            None => d.profiles,
            Some(v) => split_list(v)
                .map(|p| {
                    let ranks: Vec<f64> = p
                        .split(':')
                        .map(|r| r.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| s.error("profiles", format!("malformed rank profile {p:?}")))?;
                    if ranks.len() != block_sizes.len() {
                        return Err(s.error(
                            "profiles",
                            format!("profile {p:?} has {} ranks for {} blocks", ranks.len(), block_sizes.len()),
                        ));
                    }
                    for (r, &dj) in ranks.iter().zip(&block_sizes) {
                        if !(*r >= 1.0 && *r <= dj as f64) {
                            return Err(s.error("profiles", format!("rank {r} infeasible for block of size {dj}")));
                        }
                    }
                    Ok(ranks)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if profiles.is_empty() {
            return Err(s.error("profiles", "no rank profiles given"));
        }
        let opnorms = s.list::<f64>("opnorms")?.unwrap_or_else(|| vec![1.0; block_sizes.len()]);
        if opnorms.len() != block_sizes.len() || opnorms.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(s.error("opnorms", "need one positive operator norm per block"));
        }
        let etas = s.list::<f64>("etas")?.unwrap_or(d.etas);
        if etas.is_empty() || etas.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(s.error("etas", "need nonnegative step sizes"));
        }
        let scheme = match s.str("scheme") {
            None => d.scheme,
            Some(v) => Scheme::parse(v).ok_or_else(|| s.error("scheme", format!("unknown scheme {v:?}")))?,
        };
        let samples = s.get_or("samples", d.samples)?;
        if samples < 2 {
            return Err(s.error("samples", "need at least 2 samples"));
        }
        Ok(BoundsSection {
            block_sizes,
            profiles,
            etas,
            opnorms,
            init_std: s.get_or("init_std", d.init_std)?,
            theta_seed: s.get_or("theta_seed", d.theta_seed)?,
            samples,
            seed: s.get_or("seed", d.seed)?,
            epsilon: s.get_or("epsilon", d.epsilon)?,
            scheme,
        })
    }
}

fn quadratic_family(s: &Section) -> Result<QuadraticFamily> {
    let mut fam = match s.str("family").unwrap_or("two-rank") {
        "two-rank" => QuadraticFamily::two_rank(),
        "stiff" => QuadraticFamily::stiff(),
        "custom" => QuadraticFamily {
            block_sizes: s
                .list("block_sizes")?
                .ok_or_else(|| s.error("block_sizes", "custom family needs block_sizes"))?,
            ranks: Vec::new(),
            opnorm_range: Vec::new(),
            init_std: Vec::new(),
            optimum_std: 0.0,
            noise_trace: 0.0,
        },
        other => return Err(s.error("family", format!("unknown family {other:?}"))),
    };
    if let Some(v) = s.list("block_sizes")? {
        fam.block_sizes = v;
    }
    let n = fam.block_sizes.len();
    let per_block = |key: &str, current: Vec<f64>| -> Result<Vec<f64>> {
        let v = s.list::<f64>(key)?.unwrap_or(current);
        if v.len() != n {
            return Err(s.error(key, format!("expected {n} values, one per block")));
        }
        Ok(v)
    };
    fam.ranks = per_block("ranks", fam.ranks)?;
    let lo = per_block("opnorm_lo", fam.opnorm_range.iter().map(|r| r.0).collect())?;
    let hi = per_block("opnorm_hi", fam.opnorm_range.iter().map(|r| r.1).collect())?;
    fam.opnorm_range = lo.into_iter().zip(hi).collect();
    fam.init_std = per_block("init_std", fam.init_std)?;
    fam.optimum_std = s.get_or("optimum_std", fam.optimum_std)?;
    fam.noise_trace = s.get_or("noise_trace", fam.noise_trace)?;
    fam.validate().map_err(|e| Error::Config(format!("line {}: [task] {e}", s.line)))?;
    Ok(fam)
}
