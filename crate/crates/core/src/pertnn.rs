//! PertNN: one small two-layer network per parameter block that maps the
//! block's step statistics to a positive perturbation scale.
//!
//! ```text
//! x      = (loss_plus, loss_minus, prev_scale, mean, var)
//! h      = tanh(W1 x + b1)
//! raw    = softplus(W2 h + b2)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::paramspace::{BlockPartition, NoiseSeed};

pub const FEATURES: usize = 5;
pub const DEFAULT_HIDDEN: usize = 64;
pub const CHECKPOINT_MAGIC: &str = "ZOFT-PERTNN v1";

/// `ln(e - 1)`, the bias for which softplus returns exactly one.
pub const UNIT_OUTPUT_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PertNNInput {
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub prev_scale: f64,
    pub mean: f64,
    pub var: f64,
}

impl PertNNInput {
    pub fn to_array(self) -> [f64; FEATURES] {
        [self.loss_plus, self.loss_minus, self.prev_scale, self.mean, self.var]
    }

    pub fn from_array(x: [f64; FEATURES]) -> Self {
        Self { loss_plus: x[0], loss_minus: x[1], prev_scale: x[2], mean: x[3], var: x[4] }
    }
}

/// Optional per-feature affine map `(x - shift) / scale` applied before the
/// network, for testbeds whose losses are far from unit magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureAffine {
    pub shift: [f64; FEATURES],
    pub scale: [f64; FEATURES],
}

impl FeatureAffine {
    pub const IDENTITY: Self = Self { shift: [0.0; FEATURES], scale: [1.0; FEATURES] };

    pub fn apply(&self, input: PertNNInput) -> PertNNInput {
        let mut x = input.to_array();
        for (j, v) in x.iter_mut().enumerate() {
            *v = (*v - self.shift[j]) / self.scale[j];
        }
        PertNNInput::from_array(x)
    }
}

impl Default for FeatureAffine {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Weights of one block's network. `w1` is row-major `hidden x FEATURES`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl BlockNet {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: vec![0.0; hidden * FEATURES],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// All weights in checkpoint order: W1 rows, b1, W2, b2.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let h = self.hidden();
        let (w1, rest) = flat.split_at(h * FEATURES);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &BlockNet) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += alpha * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += alpha * b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += alpha * b;
        }
        self.b2 += alpha * other.b2;
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(23);
        };
        self.w1.iter().chain(&self.b1).chain(&self.w2).for_each(|&v| mix(v));
        mix(self.b2);
        h
    }

    fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite()) && self.b2.is_finite()
    }
}

/// Per-block networks, one independent weight set per block.
#[derive(Debug, Clone, PartialEq)]
pub struct PertNNParams {
    names: Vec<String>,
    hidden: usize,
    nets: Vec<BlockNet>,
}

/// Activations recorded by [`PertNNParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    block: usize,
    fingerprint: u64,
    x: [f64; FEATURES],
    h: Vec<f64>,
    pre_out: f64,
}

impl ForwardCache {
    pub fn block(&self) -> usize {
        self.block
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardGrads {
    pub params: BlockNet,
    pub input: [f64; FEATURES],
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl PertNNParams {
    /// Zero weights with output bias set so every block returns exactly 1.
    pub fn unit(partition: &BlockPartition, hidden: usize) -> Result<Self> {
        let mut p = Self::zeros(partition, hidden)?;
        for net in &mut p.nets {
            net.b2 = UNIT_OUTPUT_BIAS;
        }
        Ok(p)
    }

    pub fn zeros(partition: &BlockPartition, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("pertnn hidden width must be >= 1".into()));
        }
        Ok(Self {
            names: partition.names().to_vec(),
            hidden,
            nets: (0..partition.len()).map(|_| BlockNet::zeros(hidden)).collect(),
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero hidden bias, output bias
    /// `ln(e - 1)` so a zero input maps to a unit scale.
    pub fn init(partition: &BlockPartition, hidden: usize, seed: NoiseSeed) -> Result<Self> {
        let mut p = Self::unit(partition, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
        rng.set_stream(seed.stream);
        let lim1 = 1.0 / (FEATURES as f64).sqrt();
        let lim2 = 1.0 / (hidden as f64).sqrt();
        for net in &mut p.nets {
            for w in &mut net.w1 {
                *w = rng.random_range(-lim1..lim1);
            }
            for w in &mut net.w2 {
                *w = rng.random_range(-lim2..lim2);
            }
        }
        Ok(p)
    }

    pub fn from_nets(names: Vec<String>, hidden: usize, nets: Vec<BlockNet>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("pertnn hidden width must be >= 1".into()));
        }
        if names.len() != nets.len() {
            return Err(Error::PartitionMismatch {
                what: "pertnn blocks",
                expected: names.len(),
                actual: nets.len(),
            });
        }
        for (i, net) in nets.iter().enumerate() {
            if net.w1.len() != hidden * FEATURES || net.b1.len() != hidden || net.w2.len() != hidden {
                return Err(Error::PertNN { block: i, reason: "inconsistent dimensions".into() });
            }
            if !net.is_finite() {
                return Err(Error::PertNN { block: i, reason: "non-finite weight".into() });
            }
        }
        Ok(Self { names, hidden, nets })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn net(&self, block: usize) -> &BlockNet {
        &self.nets[block]
    }

    pub fn net_mut(&mut self, block: usize) -> &mut BlockNet {
        &mut self.nets[block]
    }

    pub fn nets(&self) -> &[BlockNet] {
        &self.nets
    }

    /// Gradient-shaped zero value.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            hidden: self.hidden,
            nets: self.nets.iter().map(|n| BlockNet::zeros(n.hidden())).collect(),
        }
    }

    /// `self += alpha * other` over every block.
    pub fn axpy(&mut self, alpha: f64, other: &PertNNParams) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            a.axpy(alpha, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(BlockNet::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.nets
            .iter()
            .flat_map(|n| n.flat())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Partition names must match the network's block names one to one.
    pub fn check_partition(&self, partition: &BlockPartition) -> Result<()> {
        if self.names.len() != partition.len() {
            return Err(Error::PartitionMismatch {
                what: "pertnn blocks",
                expected: partition.len(),
                actual: self.names.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: PertNNInput, block: usize) -> Result<(f64, ForwardCache)> {
        let net = self.nets.get(block).ok_or(Error::BlockIndex { index: block, len: self.len() })?;
        let x = input.to_array();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PertNN { block, reason: format!("non-finite input {x:?}") });
        }
        let mut h = vec![0.0; self.hidden];
        let mut pre_out = net.b2;
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &net.w1[j * FEATURES..(j + 1) * FEATURES];
            let a: f64 = net.b1[j] + row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>();
            *hj = a.tanh();
            pre_out += net.w2[j] * *hj;
        }
        let raw = softplus(pre_out);
        if !(raw.is_finite() && raw > 0.0) {
            return Err(Error::PertNN {
                block,
                reason: format!("output {raw} from pre-activation {pre_out}"),
            });
        }
        let cache = ForwardCache { block, fingerprint: net.fingerprint(), x, h, pre_out };
        Ok((raw, cache))
    }

    /// Gradients of `upstream * raw` with respect to the block's weights and
    /// its input features.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Result<BackwardGrads> {
        let net = self.nets.get(cache.block).ok_or(Error::BlockIndex {
            index: cache.block,
            len: self.len(),
        })?;
        if cache.h.len() != self.hidden || net.fingerprint() != cache.fingerprint {
            return Err(Error::StaleCache(format!(
                "block {} weights changed since forward",
                cache.block
            )));
        }
        let mut grads = BlockNet::zeros(self.hidden);
        let mut gx = [0.0; FEATURES];
        let dout = upstream * sigmoid(cache.pre_out);
        grads.b2 = dout;
        for (j, &hj) in cache.h.iter().enumerate() {
            grads.w2[j] = dout * hj;
            let delta = dout * net.w2[j] * (1.0 - hj * hj);
            grads.b1[j] = delta;
            let row = &net.w1[j * FEATURES..(j + 1) * FEATURES];
            for k in 0..FEATURES {
                grads.w1[j * FEATURES + k] = delta * cache.x[k];
                gx[k] += delta * row[k];
            }
        }
        Ok(BackwardGrads { params: grads, input: gx })
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "blocks={} hidden={} features={FEATURES}", self.len(), self.hidden);
        let line = |s: &mut String, vals: &[f64]| {
            let mut first = true;
            for v in vals {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        };
        for (name, net) in self.names.iter().zip(&self.nets) {
            let _ = writeln!(s, "{name}");
            for row in net.w1.chunks(FEATURES) {
                line(&mut s, row);
            }
            line(&mut s, &net.b1);
            line(&mut s, &net.w2);
            line(&mut s, &[net.b2]);
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string())
            .map_err(|e| CheckpointError::Io { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CheckpointError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let magic = lines.next().map(|(_, l)| l).unwrap_or("");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::MagicMismatch {
                expected: CHECKPOINT_MAGIC,
                found: magic.to_string(),
            });
        }
        let (hline, header) = lines
            .next()
            .ok_or(CheckpointError::BadHeader { line: 2, message: "missing dimension line".into() })?;
        let (blocks, hidden) = parse_header(hline, header)?;

        let next_values = |lines: &mut dyn Iterator<Item = (usize, &str)>,
                               expected: usize,
                               found_blocks: usize|
         -> Result<Vec<f64>, CheckpointError> {
            let (ln, l) = lines
                .next()
                .ok_or(CheckpointError::Truncated { declared: blocks, found: found_blocks })?;
            let vals = l
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| CheckpointError::BadNumber { line: ln, token: t.to_string() })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != expected {
                return Err(CheckpointError::DimensionMismatch { line: ln, expected, found: vals.len() });
            }
            Ok(vals)
        };

        let mut names = Vec::with_capacity(blocks);
        let mut nets = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let (_, name) = lines.next().ok_or(CheckpointError::Truncated { declared: blocks, found: b })?;
            let mut net = BlockNet::zeros(hidden);
            for j in 0..hidden {
                let row = next_values(&mut lines, FEATURES, b)?;
                net.w1[j * FEATURES..(j + 1) * FEATURES].copy_from_slice(&row);
            }
            net.b1 = next_values(&mut lines, hidden, b)?;
            net.w2 = next_values(&mut lines, hidden, b)?;
            net.b2 = next_values(&mut lines, 1, b)?[0];
            names.push(name.to_string());
            nets.push(net);
        }
        if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            let _ = l;
            return Err(CheckpointError::TrailingContent { line: ln });
        }
        Ok(Self { names, hidden, nets })
    }
}

fn parse_header(line: usize, header: &str) -> Result<(usize, usize), CheckpointError> {
    let bad = |message: String| CheckpointError::BadHeader { line, message };
    let mut blocks = None;
    let mut hidden = None;
    let mut features = None;
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| bad(format!("field {field:?}")))?;
        let value: usize = value.parse().map_err(|_| bad(format!("value of {key:?}")))?;
        match key {
            "blocks" => blocks = Some(value),
            "hidden" => hidden = Some(value),
            "features" => features = Some(value),
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
    }
    let blocks = blocks.ok_or_else(|| bad("missing blocks".into()))?;
    let hidden = hidden.filter(|&h| h > 0).ok_or_else(|| bad("missing or zero hidden".into()))?;
    match features {
        Some(FEATURES) => {}
        other => return Err(bad(format!("features must be {FEATURES}, got {other:?}"))),
    }
    if blocks == 0 {
        return Err(bad("zero blocks".into()));
    }
    Ok((blocks, hidden))
}
