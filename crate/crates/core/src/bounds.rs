//! One-step convergence bounds for two-point ZO-SGD on block-diagonal
//! problems, their bound-optimal per-block scales, and exact or simulated
//! expected one-step loss changes on quadratics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paramspace::{BlockNormals, BlockPartition, NoiseSeed, PerturbScales};
use crate::testbeds::{Objective, QuadraticTask};
use crate::zo::splitmix;

/// Everything the bounds depend on at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub eta: f64,
    pub smoothness: f64,
    pub block_sizes: Vec<usize>,
    pub ranks: Vec<f64>,
    /// `||grad_j L||^2` per block.
    pub grad_norms_sq: Vec<f64>,
    /// Per-block share of the minibatch noise trace.
    pub noise_traces: Vec<f64>,
    pub batch_size: usize,
}

impl BoundInputs {
    /// Inputs for `task` at `theta`. Isotropic gradient noise is split across
    /// blocks in proportion to their size, with `B = 1`.
    pub fn from_task(task: &QuadraticTask, theta: &[f64], eta: f64) -> Result<Self> {
        let partition = task.partition();
        if theta.len() != partition.total() {
            return Err(Error::PartitionMismatch { what: "theta", expected: partition.total(), actual: theta.len() });
        }
        let d = partition.total() as f64;
        let inputs = Self {
            eta,
            smoothness: task.smoothness(),
            block_sizes: partition.sizes().to_vec(),
            ranks: task.effective_ranks(),
            grad_norms_sq: task.block_grad_norms_sq(theta),
            noise_traces: partition.sizes().iter().map(|&s| task.noise_trace() * s as f64 / d).collect(),
            batch_size: 1,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.block_sizes.len();
        if n == 0 || self.block_sizes.contains(&0) {
            return Err(Error::InvalidPartition("bound inputs need nonempty blocks".into()));
        }
        for (what, len) in [
            ("ranks", self.ranks.len()),
            ("gradient norms", self.grad_norms_sq.len()),
            ("noise traces", self.noise_traces.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{what}: expected {n} entries, got {len}")));
            }
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.eta) || !nonneg(self.smoothness) {
            return Err(Error::Config("eta and smoothness must be finite and nonnegative".into()));
        }
        if !self.grad_norms_sq.iter().chain(&self.noise_traces).all(|&v| nonneg(v)) {
            return Err(Error::Config("gradient norms and noise traces must be nonnegative".into()));
        }
        for (j, (&r, &dj)) in self.ranks.iter().zip(&self.block_sizes).enumerate() {
            if !(r >= 1.0 && r <= dj as f64 * (1.0 + 1e-12)) {
                return Err(Error::Config(format!("block {j} rank {r} outside [1, {dj}]")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn max_rank(&self) -> f64 {
        self.ranks.iter().cloned().fold(1.0, f64::max)
    }

    fn noise_term(&self, block: usize) -> f64 {
        self.grad_norms_sq[block] + self.noise_traces[block] / self.batch_size as f64
    }

    /// `a_j` and `b_j` in `sum_j (-a_j x_j + b_j x_j^2)` with `x_j = sigma_j^2`.
    pub fn coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dimension();
        let half = self.eta * self.eta * self.smoothness / 2.0;
        (0..self.block_sizes.len())
            .map(|j| {
                let a = self.eta * self.grad_norms_sq[j];
                let b = half * rank_coefficient(d, self.ranks[j]) * self.noise_term(j);
                (a, b)
            })
            .unzip()
    }
}

/// `(d r + d - 2) / (d + 2) + 1`.
pub fn rank_coefficient(d: usize, r: f64) -> f64 {
    let d = d as f64;
    (d * r + d - 2.0) / (d + 2.0) + 1.0
}

/// Standard bound with the largest block rank as the global rank.
pub fn mezo_bound(inputs: &BoundInputs) -> f64 {
    let g: f64 = inputs.grad_norms_sq.iter().sum();
    let tau: f64 = inputs.noise_traces.iter().sum();
    let coef = rank_coefficient(inputs.dimension(), inputs.max_rank());
    -inputs.eta * g
        + inputs.eta * inputs.eta * inputs.smoothness / 2.0 * coef * (g + tau / inputs.batch_size as f64)
}

/// Per-block terms of the blockwise bound at scales `sigma`.
pub fn blockwise_contributions(inputs: &BoundInputs, sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != inputs.block_sizes.len() {
        return Err(Error::PartitionMismatch {
            what: "scales",
            expected: inputs.block_sizes.len(),
            actual: sigma.len(),
        });
    }
    let (a, b) = inputs.coefficients();
    Ok(sigma
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let x = s * s;
            if x == 0.0 {
                0.0
            } else {
                -a[j] * x + b[j] * x * x
            }
        })
        .collect())
}

pub fn blockwise_bound(inputs: &BoundInputs, sigma: &[f64]) -> Result<f64> {
    Ok(blockwise_contributions(inputs, sigma)?.iter().sum())
}

/// Bound-optimal scales with their Lagrange multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalScales {
    pub scales: PerturbScales,
    pub multiplier: f64,
    pub bound: f64,
}

impl OptimalScales {
    /// Largest stationarity or complementary-slackness violation, scaled by
    /// the largest coefficient.
    pub fn kkt_residual(&self, inputs: &BoundInputs) -> f64 {
        let (a, b) = inputs.coefficients();
        let norm = a.iter().chain(&b).cloned().fold(f64::MIN_POSITIVE, f64::max);
        let mu = self.multiplier;
        self.scales
            .stds()
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                let x = s * s;
                let dj = inputs.block_sizes[j] as f64;
                let r = if x > 0.0 {
                    (-a[j] + 2.0 * b[j] * x + mu * dj).abs()
                } else {
                    (a[j] - mu * dj).max(0.0)
                };
                r / norm
            })
            .fold(0.0, f64::max)
    }
}

/// Minimizes the blockwise bound over `sum_j d_j sigma_j^2 = d`. Blocks whose
/// terms vanish identically get zero scale.
pub fn optimal_scales(inputs: &BoundInputs) -> Result<OptimalScales> {
    inputs.validate()?;
    let (a, b) = inputs.coefficients();
    if b.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateBound("every quartic coefficient is zero".into()));
    }
    let d = inputs.dimension() as f64;
    let sizes: Vec<f64> = inputs.block_sizes.iter().map(|&s| s as f64).collect();
    let x_of = |mu: f64| -> Vec<f64> {
        (0..a.len())
            .map(|j| if b[j] > 0.0 { ((a[j] - mu * sizes[j]) / (2.0 * b[j])).max(0.0) } else { 0.0 })
            .collect()
    };
    let used = |x: &[f64]| -> f64 { x.iter().zip(&sizes).map(|(x, s)| x * s).sum() };

    let mut hi = (0..a.len()).filter(|&j| b[j] > 0.0).map(|j| a[j] / sizes[j]).fold(f64::MIN, f64::max);
    let mut step = hi.abs().max(b.iter().cloned().fold(0.0, f64::max)).max(1e-300);
    let mut lo = hi - step;
    while used(&x_of(lo)) < d {
        step *= 2.0;
        lo = hi - step;
        if !lo.is_finite() {
            return Err(Error::DegenerateBound("multiplier bracket diverged".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if used(&x_of(mid)) >= d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut mu = 0.5 * (lo + hi);

    // Closed form on the active set removes the bisection residue.
    let active: Vec<usize> = x_of(mu).iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(j, _)| j).collect();
    let num: f64 = active.iter().map(|&j| sizes[j] * a[j] / (2.0 * b[j])).sum::<f64>() - d;
    let den: f64 = active.iter().map(|&j| sizes[j] * sizes[j] / (2.0 * b[j])).sum();
    if den > 0.0 {
        let polished = num / den;
        let consistent = (0..a.len()).all(|j| {
            let x = if b[j] > 0.0 { (a[j] - polished * sizes[j]) / (2.0 * b[j]) } else { 0.0 };
            active.contains(&j) == (x > 0.0) || x.abs() <= 1e-14 * d
        });
        if consistent {
            mu = polished;
        }
    }
    let mut x = x_of(mu);
    let total = used(&x);
    if total <= 0.0 {
        return Err(Error::DegenerateBound("no block can carry the budget".into()));
    }
    x.iter_mut().for_each(|v| *v *= d / total);
    let stds: Vec<f64> = x.iter().map(|v| v.sqrt()).collect();
    let bound = blockwise_bound(inputs, &stds)?;
    Ok(OptimalScales { scales: PerturbScales::new_allow_zero(stds)?, multiplier: mu, bound })
}

/// How a step perturbs the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// One Gaussian direction over all blocks, one shared coefficient (the
    /// deployed optimizer).
    JointGaussian,
    /// Each block gets its own Gaussian direction and its own two-point
    /// coefficient.
    BlockGaussian,
    /// As `BlockGaussian` with `u_j = sigma_j sqrt(d_j) z_j / ||z_j||`.
    BlockSphere,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::JointGaussian, Scheme::BlockGaussian, Scheme::BlockSphere];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::JointGaussian => "joint-gaussian",
            Scheme::BlockGaussian => "block-gaussian",
            Scheme::BlockSphere => "block-sphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecreaseMode {
    ClosedForm,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseEstimate {
    pub mean: f64,
    /// Standard error of the mean; absent for closed forms.
    pub stderr: Option<f64>,
}

/// `E[L(theta_{t+1}) - L(theta_t)]` for one ZO-SGD step with scales `sigma`.
pub fn expected_decrease(
    task: &QuadraticTask,
    theta: &[f64],
    sigma: &PerturbScales,
    eta: f64,
    epsilon: f64,
    mode: DecreaseMode,
    scheme: Scheme,
) -> Result<DecreaseEstimate> {
    let partition = task.partition();
    sigma.check(partition)?;
    if theta.len() != partition.total() {
        return Err(Error::PartitionMismatch { what: "theta", expected: partition.total(), actual: theta.len() });
    }
    match mode {
        DecreaseMode::ClosedForm => {
            if task.noise_trace() > 0.0 {
                return Err(Error::Unsupported("closed-form decrease needs a noise-free quadratic".into()));
            }
            Ok(DecreaseEstimate { mean: closed_form(task, theta, sigma, eta, scheme), stderr: None })
        }
        DecreaseMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
            }
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
            }
            Ok(monte_carlo(task, theta, sigma, eta, epsilon, samples, seed, scheme))
        }
    }
}

fn closed_form(task: &QuadraticTask, theta: &[f64], sigma: &PerturbScales, eta: f64, scheme: Scheme) -> f64 {
    let partition = task.partition();
    let g = task.exact_grad(theta);
    let h = task.spectrum();
    let var = |j: usize| sigma.stds()[j] * sigma.stds()[j];
    match scheme {
        Scheme::JointGaussian => {
            let (mut gdg, mut tr_dh, mut gdhdg) = (0.0, 0.0, 0.0);
            for j in 0..partition.len() {
                for k in partition.range(j) {
                    let v = var(j);
                    gdg += v * g[k] * g[k];
                    tr_dh += v * h[k];
                    gdhdg += v * v * h[k] * g[k] * g[k];
                }
            }
            -eta * gdg + eta * eta / 2.0 * (gdg * tr_dh + 2.0 * gdhdg)
        }
        Scheme::BlockGaussian | Scheme::BlockSphere => (0..partition.len())
            .map(|j| {
                let s2 = var(j);
                let r = partition.range(j);
                let gg: f64 = r.clone().map(|k| g[k] * g[k]).sum();
                let tr: f64 = r.clone().map(|k| h[k]).sum();
                let ghg: f64 = r.map(|k| g[k] * h[k] * g[k]).sum();
                let dj = partition.size(j) as f64;
                let shape = if scheme == Scheme::BlockSphere { dj / (dj + 2.0) } else { 1.0 };
                -eta * s2 * gg + eta * eta * s2 * s2 / 2.0 * shape * (gg * tr + 2.0 * ghg)
            })
            .sum(),
    }
}

const SAMPLE_STREAM_SALT: u64 = 0x626f_756e_6473;
const CHUNK: usize = 2048;

#[derive(Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    const EMPTY: Self = Self { n: 0.0, mean: 0.0, m2: 0.0 };

    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Self {
            n,
            mean: self.mean + delta * other.n / n,
            m2: self.m2 + other.m2 + delta * delta * self.n * other.n / n,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn monte_carlo(
    task: &QuadraticTask,
    theta: &[f64],
    sigma: &PerturbScales,
    eta: f64,
    epsilon: f64,
    samples: usize,
    seed: u64,
    scheme: Scheme,
) -> DecreaseEstimate {
    let chunks = samples.div_ceil(CHUNK);
    let per_chunk: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::EMPTY;
            let mut sim = Simulator::new(task, theta);
            for n in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                m.push(sim.one_step(sigma, eta, epsilon, NoiseSeed::new(seed ^ SAMPLE_STREAM_SALT, n as u64), scheme));
            }
            m
        })
        .collect();
    let m = per_chunk.into_iter().fold(Moments::EMPTY, Moments::merge);
    let var = m.m2 / (m.n - 1.0);
    DecreaseEstimate { mean: m.mean, stderr: Some((var / m.n).sqrt()) }
}

/// Reusable buffers for simulated steps from a fixed iterate.
struct Simulator<'a> {
    task: &'a QuadraticTask,
    theta: &'a [f64],
    grad: Vec<f64>,
    u: Vec<f64>,
    probe: Vec<f64>,
}

impl<'a> Simulator<'a> {
    fn new(task: &'a QuadraticTask, theta: &'a [f64]) -> Self {
        let d = theta.len();
        Self { task, theta, grad: task.exact_grad(theta), u: vec![0.0; d], probe: vec![0.0; d] }
    }

    fn two_point(&mut self, epsilon: f64, seed: NoiseSeed) -> f64 {
        let batch = self.task.sample_batch(1, splitmix(seed.seed ^ seed.stream.wrapping_mul(0x9e37_79b9)));
        let mut eval = |sign: f64| {
            for ((p, t), u) in self.probe.iter_mut().zip(self.theta).zip(&self.u) {
                *p = t + sign * epsilon * u;
            }
            self.task.loss(&self.probe, &batch)
        };
        (eval(1.0) - eval(-1.0)) / (2.0 * epsilon)
    }

    /// Exact loss change `delta^T g + 0.5 delta^T H delta` of one sampled step.
    fn one_step(&mut self, sigma: &PerturbScales, eta: f64, epsilon: f64, seed: NoiseSeed, scheme: Scheme) -> f64 {
        let partition: &BlockPartition = self.task.partition();
        let h = self.task.spectrum();
        let mut change = 0.0;
        let mut apply = |u: &[f64], c: f64, range: std::ops::Range<usize>, grad: &[f64]| {
            for k in range {
                let delta = -eta * c * u[k];
                change += delta * grad[k] + 0.5 * h[k] * delta * delta;
            }
        };
        match scheme {
            Scheme::JointGaussian => {
                for (j, &s) in sigma.stds().iter().enumerate() {
                    let mut z = BlockNormals::new(seed, j);
                    partition.range(j).for_each(|k| self.u[k] = s * z.next_normal());
                }
                let c = self.two_point(epsilon, seed);
                apply(&self.u, c, 0..self.u.len(), &self.grad);
            }
            Scheme::BlockGaussian | Scheme::BlockSphere => {
                for (j, &s) in sigma.stds().iter().enumerate() {
                    self.u.iter_mut().for_each(|v| *v = 0.0);
                    let range = partition.range(j);
                    let mut z = BlockNormals::new(seed, j);
                    range.clone().for_each(|k| self.u[k] = z.next_normal());
                    let factor = if scheme == Scheme::BlockSphere {
                        let norm = self.u[range.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        s * (range.len() as f64).sqrt() / norm
                    } else {
                        s
                    };
                    range.clone().for_each(|k| self.u[k] *= factor);
                    let c = self.two_point(epsilon, NoiseSeed::new(seed.seed, seed.stream ^ ((j as u64) << 40)));
                    apply(&self.u, c, range, &self.grad);
                }
            }
        }
        change
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Perturbation law for the soundness check.
    pub scheme: Scheme,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { samples: 100_000, seed: 0, epsilon: 1e-3, scheme: Scheme::BlockGaussian }
    }
}

/// Measured decrease at one scale vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleCheck {
    pub label: &'static str,
    pub scales: Vec<f64>,
    pub bound: f64,
    pub closed_form: Option<f64>,
    pub monte_carlo: DecreaseEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundViolation {
    /// Measured decrease above the blockwise bound by more than 4 standard errors.
    Soundness { label: &'static str, measured: f64, stderr: f64, bound: f64 },
    /// Closed form and simulation disagree by more than 4 standard errors.
    Simulation { label: &'static str, closed_form: f64, measured: f64, stderr: f64 },
    /// Optimal scales did not beat unit scales.
    NotTighter { optimal: f64, unit: f64 },
    /// Unit-scale blockwise bound above the MeZO bound.
    AboveMezo { unit: f64, mezo: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub scheme: Scheme,
    pub mezo_bound: f64,
    pub blockwise_unit: f64,
    pub unit_contributions: Vec<f64>,
    pub blockwise_optimal: f64,
    /// `None` when every scale vector gives the same bound (zero gradient and
    /// noise, or `eta = 0`); the optimal row then reuses unit scales.
    pub optimal: Option<OptimalScales>,
    pub checks: Vec<ScaleCheck>,
    pub violations: Vec<BoundViolation>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn gap(&self) -> f64 {
        self.blockwise_unit - self.blockwise_optimal
    }

    pub fn check(&self, label: &str) -> Option<&ScaleCheck> {
        self.checks.iter().find(|c| c.label == label)
    }
}

fn le_tol(x: f64, y: f64) -> bool {
    x <= y + 1e-12 * x.abs().max(y.abs()).max(f64::MIN_POSITIVE)
}

/// Evaluates both bounds, the optimal scales and the measured decrease at the
/// given, unit and optimal scales. Unit scales are checked once when they are
/// the given ones.
pub fn verify_bound(
    task: &QuadraticTask,
    theta: &[f64],
    scales: &PerturbScales,
    eta: f64,
    options: &VerifyOptions,
) -> Result<BoundReport> {
    let inputs = BoundInputs::from_task(task, theta, eta)?;
    let n = inputs.block_sizes.len();
    let unit = PerturbScales::unit(n);
    let mezo = mezo_bound(&inputs);
    let unit_contributions = blockwise_contributions(&inputs, unit.stds())?;
    let blockwise_unit: f64 = unit_contributions.iter().sum();
    let optimal = match optimal_scales(&inputs) {
        Ok(o) => Some(o),
        Err(Error::DegenerateBound(_)) => None,
        Err(e) => return Err(e),
    };
    let optimal_stds = optimal.as_ref().map_or_else(|| unit.clone(), |o| o.scales.clone());
    let blockwise_optimal = blockwise_bound(&inputs, optimal_stds.stds())?;

    let mut checks = Vec::new();
    let mut violations = Vec::new();
    let mut targets = vec![("given", scales)];
    if scales.stds() != unit.stds() {
        targets.push(("unit", &unit));
    }
    targets.push(("optimal", &optimal_stds));
    for (label, s) in targets {
        let bound = blockwise_bound(&inputs, s.stds())?;
        let closed_form = match expected_decrease(task, theta, s, eta, options.epsilon, DecreaseMode::ClosedForm, options.scheme) {
            Ok(e) => Some(e.mean),
            Err(Error::Unsupported(_)) => None,
            Err(e) => return Err(e),
        };
        let mc = expected_decrease(
            task,
            theta,
            s,
            eta,
            options.epsilon,
            DecreaseMode::MonteCarlo { samples: options.samples, seed: options.seed },
            options.scheme,
        )?;
        let se = mc.stderr.unwrap_or(0.0);
        if mc.mean > bound + 4.0 * se && !le_tol(mc.mean, bound) {
            violations.push(BoundViolation::Soundness { label, measured: mc.mean, stderr: se, bound });
        }
        if let Some(cf) = closed_form {
            if (cf - mc.mean).abs() > 4.0 * se && (cf - mc.mean).abs() > 1e-12 * cf.abs().max(f64::MIN_POSITIVE) {
                violations.push(BoundViolation::Simulation { label, closed_form: cf, measured: mc.mean, stderr: se });
            }
        }
        checks.push(ScaleCheck { label, scales: s.stds().to_vec(), bound, closed_form, monte_carlo: mc });
    }

    let ranks_differ = inputs.ranks.iter().any(|&r| (r - inputs.ranks[0]).abs() > 1e-9);
    let strict_needed = ranks_differ && optimal.is_some();
    if !le_tol(blockwise_optimal, blockwise_unit) || (strict_needed && blockwise_optimal >= blockwise_unit) {
        violations.push(BoundViolation::NotTighter { optimal: blockwise_optimal, unit: blockwise_unit });
    }
    if !le_tol(blockwise_unit, mezo) {
        violations.push(BoundViolation::AboveMezo { unit: blockwise_unit, mezo });
    }
    Ok(BoundReport {
        inputs,
        scheme: options.scheme,
        mezo_bound: mezo,
        blockwise_unit,
        unit_contributions,
        blockwise_optimal,
        optimal,
        checks,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn single(eta: f64, g2: f64, d: usize, r: f64) -> BoundInputs {
        BoundInputs {
            eta,
            smoothness: 1.0,
            block_sizes: vec![d],
            ranks: vec![r],
            grad_norms_sq: vec![g2],
            noise_traces: vec![0.0],
            batch_size: 1,
        }
    }

    #[test]
    fn rank_coefficient_hand_value() {
        assert_eq!(rank_coefficient(4, 1.0), 2.0);
    }

    #[test]
    fn mezo_bound_hand_values() {
        // d = 4, r = 1 gives coefficient 2
        assert!((mezo_bound(&single(0.1, 1.0, 4, 1.0)) + 0.09).abs() < 1e-15);
        assert_eq!(mezo_bound(&single(0.0, 1.0, 4, 1.0)), 0.0);
    }

    #[test]
    fn unconstrained_single_block_minimum() {
        let inputs = single(0.1, 2.0, 4, 1.0);
        let (a, b) = inputs.coefficients();
        let x = a[0] / (2.0 * b[0]);
        let got = blockwise_bound(&inputs, &[x.sqrt()]).unwrap();
        assert!((got + a[0] * a[0] / (4.0 * b[0])).abs() < 1e-15);
    }

    #[test]
    fn symmetric_blocks_give_unit_scales() {
        let inputs = BoundInputs {
            eta: 0.05,
            smoothness: 2.0,
            block_sizes: vec![3, 3, 3],
            ranks: vec![2.0; 3],
            grad_norms_sq: vec![1.5; 3],
            noise_traces: vec![0.0; 3],
            batch_size: 1,
        };
        let o = optimal_scales(&inputs).unwrap();
        for s in o.scales.stds() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_blocks_contribute_nothing() {
        let inputs = BoundInputs {
            eta: 0.1,
            smoothness: 1.0,
            block_sizes: vec![2, 2],
            ranks: vec![1.0, 1.0],
            grad_norms_sq: vec![1.0, 0.0],
            noise_traces: vec![0.0; 2],
            batch_size: 1,
        };
        assert_eq!(blockwise_contributions(&inputs, &[1.0, 0.0]).unwrap()[1], 0.0);
        let o = optimal_scales(&inputs).unwrap();
        assert_eq!(o.scales.stds()[1], 0.0);
        assert!((o.scales.stds()[0] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_when_nothing_moves() {
        assert!(matches!(optimal_scales(&single(0.0, 1.0, 3, 1.0)), Err(Error::DegenerateBound(_))));
    }

    #[test]
    fn isserlis_closed_form_identity_hessian() {
        let d = 5;
        let p = Arc::new(BlockPartition::from_sizes(&[d]).unwrap());
        let mut theta = vec![0.0; d];
        theta[0] = 1.0;
        let task = QuadraticTask::new("q", p, vec![1.0; d], vec![0.0; d], theta.clone()).unwrap();
        let eta = 0.01;
        let e = expected_decrease(&task, &theta, &PerturbScales::unit(1), eta, 1e-3, DecreaseMode::ClosedForm, Scheme::JointGaussian)
            .unwrap();
        let want = -eta + eta * eta * (d as f64 + 2.0) / 2.0;
        assert!((e.mean - want).abs() < 1e-16);
    }

    #[test]
    fn closed_form_rejects_noisy_task() {
        let task = crate::testbeds::make_rank_family(&[2], &[1.0], &[1.0]).unwrap().with_noise_trace(0.5);
        let r = expected_decrease(&task, &[1.0, 1.0], &PerturbScales::unit(1), 0.1, 1e-3, DecreaseMode::ClosedForm, Scheme::JointGaussian);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn monte_carlo_is_thread_count_independent() {
        let task = crate::testbeds::make_rank_family(&[3, 4], &[1.0, 4.0], &[1.0, 0.5]).unwrap();
        let theta = task.initial_theta();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                expected_decrease(
                    &task,
                    &theta,
                    &PerturbScales::unit(2),
                    0.05,
                    1e-3,
                    DecreaseMode::MonteCarlo { samples: 10_000, seed: 3 },
                    Scheme::JointGaussian,
                )
                .unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }
}
