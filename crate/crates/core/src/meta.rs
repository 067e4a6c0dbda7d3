//! Learning-to-learn for PertNN.
//!
//! The model follows a first-order SGD trajectory. At every point the trainer
//! evaluates a single ZO update with the current PertNN and differentiates the
//! post-update loss
//!
//! ```text
//! L_zo(w) = L(theta - eta1 * c * u(w)),   u(w) = s'(w) * z,   c = (l+ - l-) / (2 eps)
//! ```
//!
//! with `z` frozen and `c` treated as a constant. The chain runs
//! `dL/du -> dL/ds' -> (budget normalization Jacobian) -> dL/ds -> PertNN`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::paramspace::{sample_block_noise, BlockPartition, NoiseSeed, ParamVector, PerturbScales};
use crate::pertnn::{FeatureAffine, ForwardCache, PertNNParams};
use crate::testbeds::{Batch, Objective};
use crate::zo::{block_features, normalize_scales, splitmix, LossPair, OptimizerState, DIVERGENCE_FACTOR};

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub epsilon: f64,
    /// Model learning rate, used both for the ZO look-ahead and the SGD step.
    pub eta1: f64,
    /// PertNN learning rate.
    pub eta2: f64,
    pub steps: usize,
    /// Restore `theta0` after every `reset_period` outer steps; `None` disables.
    pub reset_period: Option<usize>,
    /// Also reset once the loss drops below `ratio * initial loss`.
    pub reset_loss_ratio: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub normalize: bool,
    pub features: FeatureAffine,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            eta1: 1e-2,
            eta2: 1e-3,
            steps: 500,
            reset_period: Some(25),
            reset_loss_ratio: None,
            batch_size: 16,
            seed: 0,
            normalize: true,
            features: FeatureAffine::IDENTITY,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("eta1", self.eta1)?;
        if !(self.eta2 >= 0.0 && self.eta2.is_finite()) {
            return Err(Error::Config(format!("eta2 must be >= 0, got {}", self.eta2)));
        }
        if self.reset_period == Some(0) {
            return Err(Error::Config("reset period must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-task carry-over between meta-steps.
pub type TaskState = OptimizerState;

/// Result of a single look-ahead ZO update from explicit raw scales.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStep {
    pub scales: PerturbScales,
    pub u: Vec<f64>,
    pub losses: LossPair,
    pub coefficient: f64,
    pub theta1: Vec<f64>,
    pub l_zo: f64,
}

/// `L(theta - eta1 c u)` with `u = normalize(raw) * z` and `c` evaluated at
/// `theta +- eps u` on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn one_step_from_raw<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    raw: &PerturbScales,
    z: &[f64],
    batch: &Batch,
    epsilon: f64,
    eta1: f64,
    normalize: bool,
) -> Result<OneStep> {
    let partition = objective.partition();
    let scales = if normalize { normalize_scales(partition, raw)? } else { raw.clone() };
    let u = scaled_noise(partition, &scales, z);
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&u).map(|(t, v)| t + sign * epsilon * v).collect() };
    let losses = LossPair {
        plus: objective.loss(&shifted(1.0), batch),
        minus: objective.loss(&shifted(-1.0), batch),
    };
    if !(losses.plus.is_finite() && losses.minus.is_finite()) {
        return Err(Error::NonFiniteLoss {
            sign: if losses.plus.is_finite() { "minus" } else { "plus" },
            value: if losses.plus.is_finite() { losses.minus } else { losses.plus },
        });
    }
    let coefficient = losses.coefficient(epsilon);
    let theta1 = look_ahead(theta, &u, eta1 * coefficient);
    let l_zo = objective.loss(&theta1, batch);
    Ok(OneStep { scales, u, losses, coefficient, theta1, l_zo })
}

fn scaled_noise(partition: &BlockPartition, scales: &PerturbScales, z: &[f64]) -> Vec<f64> {
    let mut u = z.to_vec();
    for (b, &s) in scales.stds().iter().enumerate() {
        u[partition.range(b)].iter_mut().for_each(|v| *v *= s);
    }
    u
}

fn look_ahead(theta: &[f64], u: &[f64], step: f64) -> Vec<f64> {
    theta.iter().zip(u).map(|(t, v)| t - step * v).collect()
}

/// A meta-objective evaluation with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct MetaEval {
    pub loss: f64,
    pub raw: PerturbScales,
    pub step: OneStep,
    caches: Vec<ForwardCache>,
}

impl MetaEval {
    pub fn l_zo(&self) -> f64 {
        self.step.l_zo
    }
}

/// Evaluates the meta-objective at the current PertNN weights.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss<O: Objective + ?Sized>(
    objective: &O,
    theta: &ParamVector,
    pertnn: &PertNNParams,
    state: &TaskState,
    batch: &Batch,
    z: &[f64],
    config: &MetaConfig,
) -> Result<MetaEval> {
    pertnn.check_partition(theta.partition())?;
    if z.len() != theta.len() {
        return Err(Error::PartitionMismatch { what: "noise", expected: theta.len(), actual: z.len() });
    }
    let loss = objective.loss(theta.values(), batch);
    let features = block_features(theta, state, loss, &config.features)?;
    let mut raw = Vec::with_capacity(features.len());
    let mut caches = Vec::with_capacity(features.len());
    for (b, x) in features.iter().enumerate() {
        let (s, cache) = pertnn.forward(*x, b)?;
        raw.push(s);
        caches.push(cache);
    }
    let raw = PerturbScales::new(raw)?;
    let step = one_step_from_raw(
        objective,
        theta.values(),
        &raw,
        z,
        batch,
        config.epsilon,
        config.eta1,
        config.normalize,
    )?;
    Ok(MetaEval { loss, raw, step, caches })
}

/// The cut-off objective with `c` supplied rather than measured:
/// `L(theta - eta1 * c * u(raw))`.
#[allow(clippy::too_many_arguments)]
pub fn cutoff_objective<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    raw: &PerturbScales,
    z: &[f64],
    batch: &Batch,
    coefficient: f64,
    eta1: f64,
    normalize: bool,
) -> Result<f64> {
    let partition = objective.partition();
    let scales = if normalize { normalize_scales(partition, raw)? } else { raw.clone() };
    let u = scaled_noise(partition, &scales, z);
    Ok(objective.loss(&look_ahead(theta, &u, eta1 * coefficient), batch))
}

/// `d L_zo / d raw_i` with `c` held constant.
pub fn raw_scale_grad<O: Objective + ?Sized>(
    objective: &O,
    eval: &MetaEval,
    z: &[f64],
    batch: &Batch,
    config: &MetaConfig,
) -> Vec<f64> {
    let partition = objective.partition();
    let mut g1 = vec![0.0; partition.total()];
    objective.loss_grad(&eval.step.theta1, batch, &mut g1);
    let scale = -config.eta1 * eval.step.coefficient;
    // dL/ds'_i
    let outer: Vec<f64> = (0..partition.len())
        .map(|b| scale * partition.range(b).map(|k| g1[k] * z[k]).sum::<f64>())
        .collect();
    if !config.normalize {
        return outer;
    }
    // s'_i = s_i * alpha, alpha = sqrt(d / S), S = sum_j d_j s_j^2
    let raw = eval.raw.stds();
    let budget: f64 = raw.iter().zip(partition.sizes()).map(|(s, &d)| d as f64 * s * s).sum();
    let alpha = (partition.total() as f64 / budget).sqrt();
    let coupling: f64 = outer.iter().zip(raw).map(|(g, s)| g * s).sum();
    (0..partition.len())
        .map(|m| alpha * outer[m] - alpha * partition.size(m) as f64 * raw[m] / budget * coupling)
        .collect()
}

/// Gradient of the cut-off meta-objective with respect to every PertNN weight.
#[allow(clippy::too_many_arguments)]
pub fn meta_grad<O: Objective + ?Sized>(
    objective: &O,
    theta: &ParamVector,
    pertnn: &PertNNParams,
    state: &TaskState,
    batch: &Batch,
    z: &[f64],
    config: &MetaConfig,
) -> Result<(MetaEval, PertNNParams)> {
    let eval = meta_loss(objective, theta, pertnn, state, batch, z, config)?;
    let upstream = raw_scale_grad(objective, &eval, z, batch, config);
    let mut grad = pertnn.zeros_like();
    for (b, cache) in eval.caches.iter().enumerate() {
        let g = pertnn.backward(cache, upstream[b])?;
        *grad.net_mut(b) = g.params;
    }
    if !grad.is_finite() {
        return Err(Error::NumericOverflow { context: "meta-gradient".into() });
    }
    Ok((eval, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStepRecord {
    /// Loss at `theta` before any update.
    pub loss: f64,
    pub l_zo: f64,
    /// One-step loss of the same update with unit scales (MeZO).
    pub unit_l_zo: f64,
    pub coefficient: f64,
    pub scales: Vec<f64>,
}

/// One inner iteration: update PertNN on the look-ahead loss, then take an
/// SGD step on the model with the same batch.
#[allow(clippy::too_many_arguments)]
pub fn meta_step<O: Objective + ?Sized>(
    objective: &O,
    theta: &mut ParamVector,
    pertnn: &mut PertNNParams,
    state: &mut TaskState,
    batch: &Batch,
    z: &[f64],
    config: &MetaConfig,
) -> Result<MetaStepRecord> {
    let (eval, grad) = meta_grad(objective, theta, pertnn, state, batch, z, config)?;
    let unit = one_step_from_raw(
        objective,
        theta.values(),
        &PerturbScales::unit(theta.partition().len()),
        z,
        batch,
        config.epsilon,
        config.eta1,
        config.normalize,
    )?;
    if config.eta2 != 0.0 {
        pertnn.axpy(-config.eta2, &grad);
    }
    let mut g = vec![0.0; theta.len()];
    objective.loss_grad(theta.values(), batch, &mut g);
    for (t, gk) in theta.values_mut().iter_mut().zip(&g) {
        *t -= config.eta1 * gk;
    }
    if theta.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { context: "model SGD step".into() });
    }
    state.prev_losses = Some(eval.step.losses);
    state.prev_scales = eval.step.scales.clone();
    Ok(MetaStepRecord {
        loss: eval.loss,
        l_zo: eval.step.l_zo,
        unit_l_zo: unit.l_zo,
        coefficient: eval.step.coefficient,
        scales: eval.step.scales.stds().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLogRow {
    /// 1-based outer step.
    pub step: usize,
    pub task: usize,
    pub record: MetaStepRecord,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaLog {
    pub rows: Vec<MetaLogRow>,
    /// Outer steps after which `theta` was restored.
    pub resets: Vec<usize>,
}

impl MetaLog {
    pub fn rows_for_task(&self, task: usize) -> impl Iterator<Item = &MetaLogRow> {
        self.rows.iter().filter(move |r| r.task == task)
    }
}

pub fn meta_noise(config: &MetaConfig, partition: &BlockPartition, counter: u64) -> Vec<f64> {
    let seed = NoiseSeed::new(splitmix(config.seed ^ 0x6d65_7461), counter);
    sample_block_noise(partition, &PerturbScales::unit(partition.len()), seed)
        .expect("unit scales always match their partition")
}

/// Meta-trains `pertnn` over `tasks`, which share one model `theta` started
/// from the first task's initial point.
pub fn train<O: Objective>(
    config: &MetaConfig,
    tasks: &[O],
    mut pertnn: PertNNParams,
) -> Result<(PertNNParams, MetaLog)> {
    config.validate()?;
    let first = tasks.first().ok_or_else(|| Error::Config("meta-training needs at least one task".into()))?;
    let partition = Arc::clone(first.partition());
    for t in tasks {
        if t.partition().sizes() != partition.sizes() {
            return Err(Error::Config(format!("task {} has a different block partition", t.name())));
        }
    }
    pertnn.check_partition(&partition)?;
    let theta0 = ParamVector::new(Arc::clone(&partition), first.initial_theta())?;
    let mut theta = theta0.clone();
    let fresh_states = || vec![TaskState::new(&partition); tasks.len()];
    let mut states = fresh_states();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ 0x7368_7566));
    let mut log = MetaLog::default();
    let mut initial_losses: Vec<Option<f64>> = vec![None; tasks.len()];
    let mut counter = 0u64;

    for t in 1..=config.steps {
        order.shuffle(&mut shuffler);
        let mut below_ratio = false;
        for &ti in &order {
            let task = &tasks[ti];
            let batch_seed = splitmix(config.seed ^ (counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            let batch = task.sample_batch(config.batch_size, batch_seed);
            let z = meta_noise(config, &partition, counter);
            counter += 1;
            let rec = meta_step(task, &mut theta, &mut pertnn, &mut states[ti], &batch, &z, config)?;
            let initial = *initial_losses[ti].get_or_insert(rec.loss);
            let limit = DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE);
            if rec.loss > limit {
                return Err(Error::Divergence { step: t, loss: rec.loss, limit });
            }
            if let Some(ratio) = config.reset_loss_ratio {
                below_ratio |= rec.loss < ratio * initial;
            }
            log.rows.push(MetaLogRow { step: t, task: ti, record: rec });
        }
        let periodic = config.reset_period.is_some_and(|p| t % p == 0);
        if periodic || below_ratio {
            theta.copy_from(theta0.values());
            states = fresh_states();
            log.resets.push(t);
        }
    }
    Ok((pertnn, log))
}
