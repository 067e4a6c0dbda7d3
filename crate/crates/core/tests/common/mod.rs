//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoft::meta::{cutoff_objective, meta_grad, MetaConfig};
use zoft::pertnn::{PertNNInput, FEATURES};
use zoft::testbeds::{Granularity, MlpSpec, MlpTask};
use zoft::zo::{block_features, LossPair, OptimizerState};
use zoft::{BlockPartition, NoiseSeed, Objective, ParamVector, PerturbScales, PertNNParams, QuadraticTask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; test inputs only
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// `||a - b||_2 / max(||a||_2, ||b||_2)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` with step `h * max(1, |x_k|)`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            let step = h * orig.abs().max(1.0);
            x[k] = orig + step;
            let plus = f(&x);
            x[k] = orig - step;
            let minus = f(&x);
            x[k] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn random_sizes(rng: &mut impl Rng, max_blocks: usize, max_size: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_blocks);
    (0..n).map(|_| rng.random_range(1..=max_size)).collect()
}

pub fn random_pertnn(rng: &mut impl Rng, partition: &BlockPartition, hidden: usize, spread: f64) -> PertNNParams {
    let mut nn = PertNNParams::init(partition, hidden, NoiseSeed::new(rng.random(), 0)).unwrap();
    for b in 0..nn.len() {
        let net = nn.net_mut(b);
        let flat: Vec<f64> = net.flat().iter().map(|w| w + spread * normal(rng)).collect();
        net.set_flat(&flat);
    }
    nn
}

pub fn random_input(rng: &mut impl Rng) -> PertNNInput {
    PertNNInput {
        loss_plus: rng.random_range(0.1..3.0),
        loss_minus: rng.random_range(0.1..3.0),
        prev_scale: rng.random_range(0.2..2.0),
        mean: rng.random_range(-1.0..1.0),
        var: rng.random_range(0.0..2.0),
    }
}

pub fn random_quadratic(rng: &mut impl Rng) -> QuadraticTask {
    let sizes = random_sizes(rng, 4, 8);
    let d: usize = sizes.iter().sum();
    let partition = Arc::new(BlockPartition::from_sizes(&sizes).unwrap());
    let spectrum: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
    let optimum = normals(rng, d);
    let initial = normals(rng, d);
    let tau = if rng.random_bool(0.5) { rng.random_range(0.0..2.0) } else { 0.0 };
    QuadraticTask::new("q", partition, spectrum, optimum, initial).unwrap().with_noise_trace(tau)
}

pub fn random_mlp(rng: &mut impl Rng) -> MlpTask {
    let spec = MlpSpec {
        input: rng.random_range(2..6),
        hidden: rng.random_range(2..7),
        classes: rng.random_range(2..5),
        samples: rng.random_range(8..40),
        separation: rng.random_range(0.5..2.0),
    };
    let g = if rng.random_bool(0.5) { Granularity::Block } else { Granularity::Layer };
    MlpTask::gaussian_blobs(spec, g, rng.random()).unwrap()
}

/// Analytic vs finite-difference gradient of a randomly drawn objective.
pub fn objective_grad_error<O: Objective>(task: &O, rng: &mut impl Rng) -> f64 {
    let d = task.partition().total();
    let theta: Vec<f64> = task.initial_theta().iter().map(|t| t + 0.5 * normal(rng)).collect();
    let batch = task.sample_batch(rng.random_range(1..8), rng.random());
    let mut g = vec![0.0; d];
    task.loss_grad(&theta, &batch, &mut g);
    let fd = central_diff(&theta, 1e-6, |x| task.loss(x, &batch));
    rel_err(&g, &fd)
}

/// Analytic vs finite-difference PertNN gradients, weights and inputs together.
pub fn pertnn_grad_error(rng: &mut impl Rng) -> f64 {
    let sizes = random_sizes(rng, 3, 4);
    let partition = BlockPartition::from_sizes(&sizes).unwrap();
    let hidden = rng.random_range(1..10);
    let mut nn = random_pertnn(rng, &partition, hidden, 0.5);
    let block = rng.random_range(0..sizes.len());
    let x = random_input(rng);
    let upstream = rng.random_range(-2.0..2.0);
    let (_, cache) = nn.forward(x, block).unwrap();
    let g = nn.backward(&cache, upstream).unwrap();
    let mut analytic = g.params.flat();
    analytic.extend_from_slice(&g.input);

    let w0 = nn.net(block).flat();
    let mut fd = central_diff(&w0, 1e-6, |w| {
        nn.net_mut(block).set_flat(w);
        upstream * nn.forward(x, block).unwrap().0
    });
    nn.net_mut(block).set_flat(&w0);
    let xs = x.to_array();
    fd.extend(central_diff(&xs, 1e-6, |v| {
        let mut arr = [0.0; FEATURES];
        arr.copy_from_slice(v);
        upstream * nn.forward(PertNNInput::from_array(arr), block).unwrap().0
    }));
    rel_err(&analytic, &fd)
}

/// Largest relative error of `meta_grad` against central differences of the
/// cut-off objective on one random small instance.
pub fn meta_grad_error(rng: &mut impl Rng, normalize: bool) -> f64 {
    // a single normalized block has an identically zero meta-gradient
    let task = loop {
        let t = random_quadratic(rng);
        if t.partition().len() >= 2 {
            break t;
        }
    };
    let partition = Arc::clone(task.partition());
    let hidden = rng.random_range(2..6);
    let nn = random_pertnn(rng, &partition, hidden, 0.3);
    let theta = ParamVector::new(Arc::clone(&partition), normals(rng, partition.total())).unwrap();
    let state = OptimizerState {
        prev_losses: Some(LossPair { plus: rng.random_range(0.5..2.0), minus: rng.random_range(0.5..2.0) }),
        prev_scales: PerturbScales::new((0..partition.len()).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap(),
    };
    let batch = task.sample_batch(4, rng.random());
    let z = normals(rng, partition.total());
    let config = MetaConfig { eta1: rng.random_range(0.01..0.2), normalize, ..MetaConfig::default() };
    let (eval, grad) = meta_grad(&task, &theta, &nn, &state, &batch, &z, &config).unwrap();
    let c = eval.step.coefficient;

    let loss = task.loss(theta.values(), &batch);
    let features = block_features(&theta, &state, loss, &config.features).unwrap();
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    let mut probe = nn.clone();
    for b in 0..nn.len() {
        analytic.extend(grad.net(b).flat());
        let w0 = nn.net(b).flat();
        fd.extend(central_diff(&w0, 1e-5, |w| {
            probe.net_mut(b).set_flat(w);
            let raw: Vec<f64> = features.iter().enumerate().map(|(k, x)| probe.forward(*x, k).unwrap().0).collect();
            let raw = PerturbScales::new(raw).unwrap();
            cutoff_objective(&task, theta.values(), &raw, &z, &batch, c, config.eta1, normalize).unwrap()
        }));
        probe.net_mut(b).set_flat(&w0);
    }
    rel_err(&analytic, &fd)
}
