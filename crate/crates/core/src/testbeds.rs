//! Optimization targets with exact gradients: block-diagonal quadratics with
//! prescribed per-block effective ranks, and a one-hidden-layer tanh
//! classifier on Gaussian blobs.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::paramspace::{BlockNormals, BlockPartition, NoiseSeed};

/// Stream id reserved for quadratic minibatch gradient noise.
const GRAD_NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// One minibatch. Dataset tasks read `indices`; the quadratic reads `seed`
/// to regenerate its gradient noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// A loss oracle over a flat, block-partitioned parameter vector.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;
    fn partition(&self) -> &Arc<BlockPartition>;
    fn initial_theta(&self) -> Vec<f64>;
    fn sample_batch(&self, batch_size: usize, seed: u64) -> Batch;
    fn loss(&self, theta: &[f64], batch: &Batch) -> f64;
    /// Writes the gradient into `grad` and returns the loss.
    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> f64;
}

/// `0.5 (theta - opt)^T H (theta - opt)` with diagonal, block-diagonal `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    name: String,
    partition: Arc<BlockPartition>,
    spectrum: Vec<f64>,
    optimum: Vec<f64>,
    initial: Vec<f64>,
    noise_trace: f64,
}

/// Equal-tail spectrum of length `d` with top eigenvalue `opnorm` and
/// `trace / opnorm == rank`.
pub fn rank_spectrum(d: usize, rank: f64, opnorm: f64) -> Result<Vec<f64>> {
    if d == 0 || !(rank >= 1.0 && rank <= d as f64) {
        return Err(Error::Config(format!("rank {rank} infeasible for block of size {d}")));
    }
    if !(opnorm.is_finite() && opnorm > 0.0) {
        return Err(Error::Config(format!("operator norm {opnorm} must be positive")));
    }
    let mut spectrum = vec![opnorm; d];
    if d > 1 {
        let tail = opnorm * (rank - 1.0) / (d - 1) as f64;
        spectrum[1..].iter_mut().for_each(|v| *v = tail);
    }
    Ok(spectrum)
}

/// Quadratic with one equal-tail block per `(size, rank, opnorm)`, optimum at
/// the origin and initial point at all ones.
pub fn make_rank_family(block_sizes: &[usize], ranks: &[f64], opnorms: &[f64]) -> Result<QuadraticTask> {
    if block_sizes.len() != ranks.len() || block_sizes.len() != opnorms.len() {
        return Err(Error::Config("sizes, ranks and opnorms must have equal length".into()));
    }
    let partition = Arc::new(BlockPartition::from_sizes(block_sizes)?);
    let mut spectrum = Vec::with_capacity(partition.total());
    for ((&d, &r), &l) in block_sizes.iter().zip(ranks).zip(opnorms) {
        spectrum.extend(rank_spectrum(d, r, l)?);
    }
    let d = partition.total();
    QuadraticTask::new("quadratic", partition, spectrum, vec![0.0; d], vec![1.0; d])
}

impl QuadraticTask {
    pub fn new(
        name: impl Into<String>,
        partition: Arc<BlockPartition>,
        spectrum: Vec<f64>,
        optimum: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let d = partition.total();
        for (what, v) in [("spectrum", &spectrum), ("optimum", &optimum), ("initial", &initial)] {
            if v.len() != d {
                return Err(Error::PartitionMismatch { what, expected: d, actual: v.len() });
            }
        }
        if spectrum.iter().any(|&l| !(l.is_finite() && l >= 0.0)) {
            return Err(Error::Config("eigenvalues must be finite and nonnegative".into()));
        }
        for b in 0..partition.len() {
            if spectrum[partition.range(b)].iter().all(|&l| l == 0.0) {
                return Err(Error::Config(format!("block {b} has an all-zero spectrum")));
            }
        }
        Ok(Self { name: name.into(), partition, spectrum, optimum, initial, noise_trace: 0.0 })
    }

    /// Additive gradient noise `xi ~ N(0, tau/d I)` per batch, so
    /// `tr Cov(xi) = tau`.
    pub fn with_noise_trace(mut self, tau: f64) -> Self {
        self.noise_trace = tau;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        if initial.len() != self.partition.total() {
            return Err(Error::PartitionMismatch {
                what: "initial",
                expected: self.partition.total(),
                actual: initial.len(),
            });
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn with_optimum(mut self, optimum: Vec<f64>) -> Result<Self> {
        if optimum.len() != self.partition.total() {
            return Err(Error::PartitionMismatch {
                what: "optimum",
                expected: self.partition.total(),
                actual: optimum.len(),
            });
        }
        self.optimum = optimum;
        Ok(self)
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn noise_trace(&self) -> f64 {
        self.noise_trace
    }

    pub fn block_spectrum(&self, block: usize) -> &[f64] {
        &self.spectrum[self.partition.range(block)]
    }

    /// `tr(H_i) / ||H_i||_op` per block.
    pub fn effective_ranks(&self) -> Vec<f64> {
        (0..self.partition.len())
            .map(|b| {
                let s = self.block_spectrum(b);
                s.iter().sum::<f64>() / s.iter().cloned().fold(0.0, f64::max)
            })
            .collect()
    }

    /// Global smoothness, the largest eigenvalue.
    pub fn smoothness(&self) -> f64 {
        self.spectrum.iter().cloned().fold(0.0, f64::max)
    }

    /// Noise-free gradient `H (theta - opt)`.
    pub fn exact_grad(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.optimum)
            .zip(&self.spectrum)
            .map(|((t, o), l)| l * (t - o))
            .collect()
    }

    pub fn exact_loss(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.optimum)
            .zip(&self.spectrum)
            .map(|((t, o), l)| l * (t - o) * (t - o))
            .sum::<f64>()
    }

    /// `||grad_j L||^2` per block at `theta`, noise-free.
    pub fn block_grad_norms_sq(&self, theta: &[f64]) -> Vec<f64> {
        let g = self.exact_grad(theta);
        (0..self.partition.len())
            .map(|b| g[self.partition.range(b)].iter().map(|v| v * v).sum())
            .collect()
    }

    /// Diagnostic stand-in for the maximal per-sample gradient norm: the
    /// deterministic task has a single "sample", so this is `||grad L||`.
    pub fn max_sample_grad_norm(&self, theta: &[f64]) -> f64 {
        self.block_grad_norms_sq(theta).iter().sum::<f64>().sqrt()
    }

    fn noise(&self, batch: &Batch) -> Option<BlockNormals> {
        (self.noise_trace > 0.0)
            .then(|| BlockNormals::new(NoiseSeed::new(batch.seed, GRAD_NOISE_STREAM), 0))
    }
}

impl Objective for QuadraticTask {
    fn name(&self) -> &str {
        &self.name
    }

    fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    fn initial_theta(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn sample_batch(&self, _batch_size: usize, seed: u64) -> Batch {
        Batch { indices: Vec::new(), seed }
    }

    fn loss(&self, theta: &[f64], batch: &Batch) -> f64 {
        let mut noise = self.noise(batch);
        let noise_sd = (self.noise_trace / theta.len() as f64).sqrt();
        let mut total = 0.0;
        for ((t, o), h) in theta.iter().zip(&self.optimum).zip(&self.spectrum) {
            let delta = t - o;
            total += 0.5 * h * delta * delta;
            if let Some(n) = noise.as_mut() {
                total += noise_sd * n.next_normal() * delta;
            }
        }
        total
    }

    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> f64 {
        let mut noise = self.noise(batch);
        let noise_sd = (self.noise_trace / theta.len() as f64).sqrt();
        let mut total = 0.0;
        for k in 0..theta.len() {
            let delta = theta[k] - self.optimum[k];
            total += 0.5 * self.spectrum[k] * delta * delta;
            grad[k] = self.spectrum[k] * delta;
            if let Some(n) = noise.as_mut() {
                let xi = noise_sd * n.next_normal();
                total += xi * delta;
                grad[k] += xi;
            }
        }
        total
    }
}

/// Parameter ranges drawn per task when sampling a quadratic family.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFamily {
    pub block_sizes: Vec<usize>,
    pub ranks: Vec<f64>,
    /// Per block, the top eigenvalue is drawn log-uniformly from this range.
    pub opnorm_range: Vec<(f64, f64)>,
    /// Per block, standard deviation of the initial displacement from the optimum.
    pub init_std: Vec<f64>,
    /// Standard deviation of the optimum's coordinates.
    pub optimum_std: f64,
    pub noise_trace: f64,
}

impl QuadraticFamily {
    /// A rank-1 block that holds most of the initial loss next to a wide
    /// full-rank block that starts almost solved. Tasks share one optimum.
    pub fn two_rank() -> Self {
        Self {
            block_sizes: vec![16, 48],
            ranks: vec![1.0, 48.0],
            opnorm_range: vec![(0.5, 2.0), (0.5, 2.0)],
            init_std: vec![3.0, 0.1],
            optimum_std: 0.0,
            noise_trace: 0.0,
        }
    }

    /// [`two_rank`](Self::two_rank) with a stiff rank-1 block, so the
    /// full-rank block takes over once the rank-1 direction is solved.
    pub fn stiff() -> Self {
        Self {
            opnorm_range: vec![(4.0, 8.0), (0.5, 1.0)],
            ..Self::two_rank()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.block_sizes.len();
        if n == 0 || self.ranks.len() != n || self.opnorm_range.len() != n || self.init_std.len() != n {
            return Err(Error::Config("quadratic family fields must have one entry per block".into()));
        }
        for (b, &(lo, hi)) in self.opnorm_range.iter().enumerate() {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!("block {b}: bad opnorm range ({lo}, {hi})")));
            }
            if self.ranks[b] < 1.0 || self.ranks[b] > self.block_sizes[b] as f64 {
                return Err(Error::Config(format!(
                    "block {b}: rank {} infeasible for size {}",
                    self.ranks[b], self.block_sizes[b]
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> Result<QuadraticTask> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opnorms: Vec<f64> = self
            .opnorm_range
            .iter()
            .map(|&(lo, hi)| if hi > lo { (rng.random_range(lo.ln()..hi.ln())).exp() } else { lo })
            .collect();
        let task = make_rank_family(&self.block_sizes, &self.ranks, &opnorms)?;
        let partition = Arc::clone(task.partition());
        let mut normals = BlockNormals::new(NoiseSeed::new(seed, 1), 0);
        let optimum: Vec<f64> = (0..partition.total()).map(|_| self.optimum_std * normals.next_normal()).collect();
        let mut initial = optimum.clone();
        for b in 0..partition.len() {
            for k in partition.range(b) {
                initial[k] += self.init_std[b] * normals.next_normal();
            }
        }
        Ok(task
            .with_optimum(optimum)?
            .with_initial(initial)?
            .with_noise_trace(self.noise_trace)
            .with_name(format!("quad-{seed}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    WithReplacement,
    WithoutReplacement,
}

/// How the classifier's tensors are grouped into blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One block per tensor: `w1, b1, w2, b2`.
    Block,
    /// One block per layer: `layer1 = (w1, b1)`, `layer2 = (w2, b2)`.
    Layer,
}

/// Softmax cross-entropy classifier `softmax(W2 tanh(W1 x + b1) + b2)`.
///
/// Parameter layout: `W1` (hidden x input, row-major), `b1`, `W2`
/// (classes x hidden), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTask {
    name: String,
    input: usize,
    hidden: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    partition: Arc<BlockPartition>,
    init_seed: u64,
    sampling: Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub samples: usize,
    pub separation: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { input: 8, hidden: 16, classes: 4, samples: 256, separation: 1.5 }
    }
}

impl MlpTask {
    /// Gaussian blobs: class centers `~ N(0, sep^2 I)`, points `center + N(0, I)`.
    pub fn gaussian_blobs(spec: MlpSpec, granularity: Granularity, seed: u64) -> Result<Self> {
        let MlpSpec { input, hidden, classes, samples, separation } = spec;
        if input == 0 || hidden == 0 || classes < 2 || samples == 0 {
            return Err(Error::Config(format!("invalid classifier dimensions {spec:?}")));
        }
        let mut normals = BlockNormals::new(NoiseSeed::new(seed, 2), 0);
        let centers: Vec<f64> = (0..classes * input).map(|_| separation * normals.next_normal()).collect();
        let mut features = Vec::with_capacity(samples * input);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let y = i % classes;
            labels.push(y);
            for j in 0..input {
                features.push(centers[y * input + j] + normals.next_normal());
            }
        }
        Self::from_data(input, hidden, classes, features, labels, granularity, seed)
    }

    pub fn from_data(
        input: usize,
        hidden: usize,
        classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        granularity: Granularity,
        init_seed: u64,
    ) -> Result<Self> {
        if features.len() != labels.len() * input || labels.iter().any(|&y| y >= classes) {
            return Err(Error::Config("dataset shape does not match classifier dimensions".into()));
        }
        let partition = Arc::new(match granularity {
            Granularity::Block => BlockPartition::new([
                ("w1", hidden * input),
                ("b1", hidden),
                ("w2", classes * hidden),
                ("b2", classes),
            ])?,
            Granularity::Layer => BlockPartition::new([
                ("layer1", hidden * input + hidden),
                ("layer2", classes * hidden + classes),
            ])?,
        });
        Ok(Self {
            name: format!("mlp-{init_seed}"),
            input,
            hidden,
            classes,
            features,
            labels,
            partition,
            init_seed,
            sampling: Sampling::WithoutReplacement,
        })
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Same data and layout under the other block grouping.
    pub fn regrouped(&self, granularity: Granularity) -> Result<Self> {
        let mut t = Self::from_data(
            self.input,
            self.hidden,
            self.classes,
            self.features.clone(),
            self.labels.clone(),
            granularity,
            self.init_seed,
        )?;
        t.name = self.name.clone();
        t.sampling = self.sampling;
        Ok(t)
    }

    pub fn full_batch(&self) -> Batch {
        Batch { indices: (0..self.samples()).collect(), seed: 0 }
    }

    /// Cross-entropy of one sample; `scratch` needs `hidden + classes` slots.
    fn sample_loss(&self, theta: &[f64], i: usize, scratch: &mut [f64]) -> f64 {
        let (h, o) = scratch.split_at_mut(self.hidden);
        self.forward(theta, i, h, o);
        log_sum_exp(o) - o[self.labels[i]]
    }

    fn forward(&self, theta: &[f64], i: usize, h: &mut [f64], o: &mut [f64]) {
        let (inp, hid, cls) = (self.input, self.hidden, self.classes);
        let (w1, rest) = theta.split_at(hid * inp);
        let (b1, rest) = rest.split_at(hid);
        let (w2, b2) = rest.split_at(cls * hid);
        let x = &self.features[i * inp..(i + 1) * inp];
        for j in 0..hid {
            let row = &w1[j * inp..(j + 1) * inp];
            h[j] = (b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh();
        }
        for c in 0..cls {
            let row = &w2[c * hid..(c + 1) * hid];
            o[c] = b2[c] + row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Per-sample losses of a batch, in batch order.
    pub fn per_sample_losses(&self, theta: &[f64], batch: &Batch) -> Vec<f64> {
        let mut scratch = vec![0.0; self.hidden + self.classes];
        batch.indices.iter().map(|&i| self.sample_loss(theta, i, &mut scratch)).collect()
    }
}

fn log_sum_exp(o: &[f64]) -> f64 {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + o.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Objective for MlpTask {
    fn name(&self) -> &str {
        &self.name
    }

    fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    fn initial_theta(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        rng.set_stream(3);
        let (inp, hid, cls) = (self.input, self.hidden, self.classes);
        let mut theta = vec![0.0; self.partition.total()];
        let l1 = 1.0 / (inp as f64).sqrt();
        let l2 = 1.0 / (hid as f64).sqrt();
        theta[..hid * inp].iter_mut().for_each(|w| *w = rng.random_range(-l1..l1));
        let w2 = hid * inp + hid;
        theta[w2..w2 + cls * hid].iter_mut().for_each(|w| *w = rng.random_range(-l2..l2));
        theta
    }

    fn sample_batch(&self, batch_size: usize, seed: u64) -> Batch {
        let n = self.samples();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = match self.sampling {
            Sampling::WithReplacement => (0..batch_size).map(|_| rng.random_range(0..n)).collect(),
            Sampling::WithoutReplacement => {
                let mut idx = index::sample(&mut rng, n, batch_size.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        Batch { indices, seed }
    }

    fn loss(&self, theta: &[f64], batch: &Batch) -> f64 {
        let mut scratch = vec![0.0; self.hidden + self.classes];
        let total: f64 = batch.indices.iter().map(|&i| self.sample_loss(theta, i, &mut scratch)).sum();
        total / batch.indices.len() as f64
    }

    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> f64 {
        let (inp, hid, cls) = (self.input, self.hidden, self.classes);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut h = vec![0.0; hid];
        let mut o = vec![0.0; cls];
        let mut dh = vec![0.0; hid];
        let w2_off = hid * inp + hid;
        let b2_off = w2_off + cls * hid;
        let scale = 1.0 / batch.indices.len() as f64;
        let mut total = 0.0;
        for &i in &batch.indices {
            self.forward(theta, i, &mut h, &mut o);
            let lse = log_sum_exp(&o);
            total += lse - o[self.labels[i]];
            dh.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..cls {
                let mut dout = (o[c] - lse).exp();
                if c == self.labels[i] {
                    dout -= 1.0;
                }
                dout *= scale;
                grad[b2_off + c] += dout;
                for j in 0..hid {
                    grad[w2_off + c * hid + j] += dout * h[j];
                    dh[j] += dout * theta[w2_off + c * hid + j];
                }
            }
            let x = &self.features[i * inp..(i + 1) * inp];
            for j in 0..hid {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                grad[hid * inp + j] += da;
                for k in 0..inp {
                    grad[j * inp + k] += da * x[k];
                }
            }
        }
        total * scale
    }
}
