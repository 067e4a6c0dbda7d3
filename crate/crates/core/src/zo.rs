//! Two-point zeroth-order fine-tuning with learned per-block scales.
//!
//! Each step computes block features, asks PertNN for raw scales, rescales
//! them to the budget `sum_i d_i s_i^2 = d`, estimates the directional
//! derivative along `u = s * z` with a central difference, and moves
//! `theta <- theta - lr * c * u`. MeZO is the special case `s = 1`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paramspace::{
    block_stats, perturb_in_place, BlockPartition, NoiseSeed, ParamVector, PerturbScales,
};
use crate::pertnn::{FeatureAffine, PertNNInput, PertNNParams};
use crate::testbeds::{Batch, Objective};

pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Runs abort once the loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Salt mixed into the run seed for minibatch sampling, so batches and
/// perturbations never share a stream.
const BATCH_SALT: u64 = 0xb5ad_4ece_da1c_e2a9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mezo,
    FineTuner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// Walk `+eps, -2 eps, +eps` on `theta` itself.
    InPlace,
    /// Copy `theta` before the walk and restore it bit-exactly afterwards.
    Buffered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub seed: u64,
    pub normalize: bool,
    pub perturb: PerturbMode,
    pub features: FeatureAffine,
}

impl ZoConfig {
    pub fn new(mode: Mode, learning_rate: f64, steps: usize, seed: u64) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            learning_rate,
            steps,
            batch_size: 16,
            mode,
            seed,
            normalize: true,
            perturb: PerturbMode::InPlace,
            features: FeatureAffine::IDENTITY,
        }
    }

    /// `learning_rate == 0` is allowed here (a frozen run); the other
    /// constraints are strict.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_seed(&self, step: usize) -> u64 {
        splitmix(self.seed ^ BATCH_SALT ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn noise_seed(&self, step: usize) -> NoiseSeed {
        NoiseSeed::new(self.seed, step as u64)
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub plus: f64,
    pub minus: f64,
}

impl LossPair {
    pub fn coefficient(&self, epsilon: f64) -> f64 {
        (self.plus - self.minus) / (2.0 * epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub losses: LossPair,
    pub scales: Vec<f64>,
    pub coefficient: f64,
}

/// The estimate `g = c * u` kept as its regeneration handle.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsaEstimate {
    pub coefficient: f64,
    pub seed: NoiseSeed,
    pub scales: PerturbScales,
    pub losses: LossPair,
}

impl SpsaEstimate {
    pub fn materialize(&self, partition: &BlockPartition) -> Result<Vec<f64>> {
        let mut g = crate::paramspace::sample_block_noise(partition, &self.scales, self.seed)?;
        g.iter_mut().for_each(|v| *v *= self.coefficient);
        Ok(g)
    }
}

/// `s'_i = s_i * sqrt(d / sum_j d_j s_j^2)`.
pub fn normalize_scales(partition: &BlockPartition, raw: &PerturbScales) -> Result<PerturbScales> {
    raw.check(partition)?;
    for (block, &value) in raw.stds().iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidScale { block, value });
        }
    }
    // work with ratios to the largest scale so equal inputs map to exactly 1
    let top = raw.stds().iter().cloned().fold(0.0, f64::max);
    let ratios: Vec<f64> = raw.stds().iter().map(|s| s / top).collect();
    let budget: f64 = ratios.iter().zip(partition.sizes()).map(|(r, &d)| d as f64 * r * r).sum();
    let factor = (partition.total() as f64 / budget).sqrt();
    PerturbScales::new(ratios.iter().map(|r| r * factor).collect())
}

/// Central difference along `u(seed, scales)` on one batch. The in-place
/// walk leaves `theta` where it started, up to rounding.
pub fn spsa_estimate(
    theta: &mut ParamVector,
    scales: &PerturbScales,
    seed: NoiseSeed,
    epsilon: f64,
    perturb: PerturbMode,
    mut loss_fn: impl FnMut(&[f64]) -> f64,
) -> Result<SpsaEstimate> {
    let saved = match perturb {
        PerturbMode::InPlace => None,
        PerturbMode::Buffered => Some(theta.values().to_vec()),
    };
    perturb_in_place(theta, scales, seed, epsilon)?;
    let plus = loss_fn(theta.values());
    perturb_in_place(theta, scales, seed, -2.0 * epsilon)?;
    let minus = loss_fn(theta.values());
    match saved {
        Some(copy) => theta.copy_from(&copy),
        None => perturb_in_place(theta, scales, seed, epsilon)?,
    }
    if !plus.is_finite() {
        return Err(Error::NonFiniteLoss { sign: "plus", value: plus });
    }
    if !minus.is_finite() {
        return Err(Error::NonFiniteLoss { sign: "minus", value: minus });
    }
    let losses = LossPair { plus, minus };
    Ok(SpsaEstimate {
        coefficient: losses.coefficient(epsilon),
        seed,
        scales: scales.clone(),
        losses,
    })
}

/// Where per-block scales come from.
#[derive(Debug, Clone, Copy)]
pub enum ScalePolicy<'a> {
    /// `s = 1`, i.e. MeZO.
    Unit,
    Learned(&'a PertNNParams),
    /// A fixed allocation, e.g. the bound-optimal one.
    Fixed(&'a PerturbScales),
}

impl<'a> ScalePolicy<'a> {
    pub fn for_mode(mode: Mode, pertnn: Option<&'a PertNNParams>) -> Result<Self> {
        match (mode, pertnn) {
            (Mode::Mezo, _) => Ok(Self::Unit),
            (Mode::FineTuner, Some(p)) => Ok(Self::Learned(p)),
            (Mode::FineTuner, None) => Err(Error::Config("fine-tuner mode needs a PertNN".into())),
        }
    }
}

/// Previous-step information carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub prev_losses: Option<LossPair>,
    pub prev_scales: PerturbScales,
}

impl OptimizerState {
    pub fn new(partition: &BlockPartition) -> Self {
        Self { prev_losses: None, prev_scales: PerturbScales::unit(partition.len()) }
    }
}

/// PertNN inputs for every block at the current `theta`. Without a previous
/// step the unperturbed loss stands in for both perturbed losses.
pub fn block_features(
    theta: &ParamVector,
    state: &OptimizerState,
    current_loss: f64,
    affine: &FeatureAffine,
) -> Result<Vec<PertNNInput>> {
    let losses = state.prev_losses.unwrap_or(LossPair { plus: current_loss, minus: current_loss });
    (0..theta.partition().len())
        .map(|b| {
            let (mean, var) = block_stats(theta, b)?;
            Ok(affine.apply(PertNNInput {
                loss_plus: losses.plus,
                loss_minus: losses.minus,
                prev_scale: state.prev_scales.stds()[b],
                mean,
                var,
            }))
        })
        .collect()
}

/// Raw per-block PertNN outputs.
pub fn raw_scales(pertnn: &PertNNParams, features: &[PertNNInput]) -> Result<PerturbScales> {
    let raw = features
        .iter()
        .enumerate()
        .map(|(b, x)| pertnn.forward(*x, b).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    PerturbScales::new(raw)
}

/// Scales for this step under `policy`.
pub fn step_scales(
    theta: &ParamVector,
    policy: ScalePolicy<'_>,
    state: &OptimizerState,
    current_loss: f64,
    config: &ZoConfig,
) -> Result<PerturbScales> {
    let partition = theta.partition();
    match policy {
        ScalePolicy::Unit => Ok(PerturbScales::unit(partition.len())),
        ScalePolicy::Fixed(s) => {
            s.check(partition)?;
            if config.normalize {
                normalize_scales(partition, s)
            } else {
                Ok(s.clone())
            }
        }
        ScalePolicy::Learned(nn) => {
            nn.check_partition(partition)?;
            let features = block_features(theta, state, current_loss, &config.features)?;
            let raw = raw_scales(nn, &features)?;
            if config.normalize {
                normalize_scales(partition, &raw)
            } else {
                Ok(raw)
            }
        }
    }
}

/// One optimizer step on `batch`; `t` is the 1-based step index.
pub fn step<O: Objective + ?Sized>(
    theta: &mut ParamVector,
    policy: ScalePolicy<'_>,
    state: &mut OptimizerState,
    objective: &O,
    batch: &Batch,
    config: &ZoConfig,
    t: usize,
) -> Result<StepRecord> {
    let loss = objective.loss(theta.values(), batch);
    if !loss.is_finite() {
        return Err(Error::NumericOverflow { context: format!("loss at step {t}") });
    }
    let scales = step_scales(theta, policy, state, loss, config)?;
    let estimate = spsa_estimate(theta, &scales, config.noise_seed(t), config.epsilon, config.perturb, |x| {
        objective.loss(x, batch)
    })?;
    let c = estimate.coefficient;
    if config.learning_rate != 0.0 && c != 0.0 {
        perturb_in_place(theta, &scales, estimate.seed, -config.learning_rate * c)?;
    }
    state.prev_losses = Some(estimate.losses);
    let record = StepRecord {
        step: t,
        loss,
        losses: estimate.losses,
        scales: scales.stds().to_vec(),
        coefficient: c,
    };
    state.prev_scales = scales;
    Ok(record)
}

/// Trajectory of a run, possibly cut short by the divergence guard.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub initial_loss: f64,
    pub final_theta: Vec<f64>,
    pub stopped: Option<Error>,
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.stopped.is_some()
    }

    /// First step whose pre-update loss is at most `fraction * initial`.
    pub fn steps_to_fraction(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.initial_loss;
        self.records.iter().find(|r| r.loss <= target).map(|r| r.step)
    }
}

/// Runs `config.steps` steps from the objective's initial point, recording
/// rather than propagating failures.
pub fn run_trajectory<O: Objective + ?Sized>(
    objective: &O,
    config: &ZoConfig,
    policy: ScalePolicy<'_>,
) -> Result<Trajectory> {
    config.validate()?;
    let partition = Arc::clone(objective.partition());
    let mut theta = ParamVector::new(Arc::clone(&partition), objective.initial_theta())?;
    let mut state = OptimizerState::new(&partition);
    let mut records = Vec::with_capacity(config.steps);
    let mut initial_loss = f64::NAN;
    let mut stopped = None;
    for t in 1..=config.steps {
        let batch = objective.sample_batch(config.batch_size, config.batch_seed(t));
        match step(&mut theta, policy, &mut state, objective, &batch, config, t) {
            Ok(rec) => {
                if t == 1 {
                    initial_loss = rec.loss;
                }
                let limit = DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE);
                let loss = rec.loss;
                records.push(rec);
                if loss > limit {
                    stopped = Some(Error::Divergence { step: t, loss, limit });
                    break;
                }
            }
            Err(e @ (Error::NumericOverflow { .. } | Error::NonFiniteLoss { .. })) => {
                stopped = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if initial_loss.is_nan() {
        let batch = objective.sample_batch(config.batch_size, config.batch_seed(1));
        initial_loss = objective.loss(theta.values(), &batch);
    }
    Ok(Trajectory { records, initial_loss, final_theta: theta.into_values(), stopped })
}

/// Runs the fine-tuning loop, failing with a divergence error if the guard trips.
pub fn run_finetune<O: Objective + ?Sized>(
    objective: &O,
    config: &ZoConfig,
    policy: ScalePolicy<'_>,
) -> Result<Vec<StepRecord>> {
    let traj = run_trajectory(objective, config, policy)?;
    match traj.stopped {
        Some(e) => Err(e),
        None => Ok(traj.records),
    }
}
