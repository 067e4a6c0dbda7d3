//! Flat parameter vectors split into named contiguous blocks, and the seeded
//! per-block Gaussian noise used to perturb them.
//!
//! Perturbations are never stored. A [`NoiseSeed`] identifies a noise vector
//! and every pass over the parameters regenerates it coordinate by coordinate
//! from a ChaCha8 stream, so a `+eps, -2 eps, +eps` walk followed by the update
//! touches `theta` in place without a second parameter-sized buffer.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Word offset between consecutive blocks inside one ChaCha stream. Each block
/// may draw up to 2^47 normals before running into its neighbour.
const BLOCK_WORD_STRIDE: u32 = 48;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    names: Vec<String>,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl BlockPartition {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut names = Vec::new();
        let mut sizes = Vec::new();
        let mut offsets = Vec::new();
        let mut seen = HashSet::new();
        let mut total = 0usize;
        for (name, size) in blocks {
            let name = name.into();
            if size == 0 {
                return Err(Error::InvalidPartition(format!("block {name:?} has size 0")));
            }
            if name.contains('\n') || name.trim().is_empty() {
                return Err(Error::InvalidPartition(format!("invalid block name {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidPartition(format!("duplicate block name {name:?}")));
            }
            offsets.push(total);
            total += size;
            names.push(name);
            sizes.push(size);
        }
        if names.is_empty() {
            return Err(Error::InvalidPartition("no blocks".into()));
        }
        Ok(Self { names, sizes, offsets, total })
    }

    /// Blocks named `b0, b1, ...` with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.iter().enumerate().map(|(i, &s)| (format!("b{i}"), s)))
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Total dimension `d`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, block: usize) -> usize {
        self.sizes[block]
    }

    pub fn name(&self, block: usize) -> &str {
        &self.names[block]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn range(&self, block: usize) -> Range<usize> {
        let start = self.offsets[block];
        start..start + self.sizes[block]
    }

    pub fn check_block(&self, block: usize) -> Result<()> {
        if block < self.len() {
            Ok(())
        } else {
            Err(Error::BlockIndex { index: block, len: self.len() })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    partition: Arc<BlockPartition>,
}

impl ParamVector {
    pub fn new(partition: Arc<BlockPartition>, values: Vec<f64>) -> Result<Self> {
        if values.len() != partition.total() {
            return Err(Error::PartitionMismatch {
                what: "parameters",
                expected: partition.total(),
                actual: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { context: format!("parameter {k} is not finite") });
        }
        Ok(Self { values, partition })
    }

    pub fn zeros(partition: Arc<BlockPartition>) -> Self {
        let values = vec![0.0; partition.total()];
        Self { values, partition }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn partition(&self) -> &Arc<BlockPartition> {
        &self.partition
    }

    pub fn block(&self, block: usize) -> &[f64] {
        &self.values[self.partition.range(block)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Overwrite with `other` without reallocating.
    pub fn copy_from(&mut self, other: &[f64]) {
        self.values.copy_from_slice(other);
    }
}

/// Per-block standard deviations. Block `i` is perturbed by `stds[i] * z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbScales {
    stds: Vec<f64>,
}

impl PerturbScales {
    /// Strictly positive, finite scales.
    pub fn new(stds: Vec<f64>) -> Result<Self> {
        for (block, &value) in stds.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidScale { block, value });
            }
        }
        Ok(Self { stds })
    }

    /// Scales that may contain zeros (null-perturbation stubs, inactive blocks
    /// of a bound-optimal allocation). Negative or non-finite values are still
    /// rejected.
    pub fn new_allow_zero(stds: Vec<f64>) -> Result<Self> {
        for (block, &value) in stds.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidScale { block, value });
            }
        }
        Ok(Self { stds })
    }

    pub fn unit(blocks: usize) -> Self {
        Self { stds: vec![1.0; blocks] }
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn len(&self) -> usize {
        self.stds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stds.is_empty()
    }

    /// `sum_i d_i s_i^2`, the expected squared norm of the perturbation.
    pub fn budget(&self, partition: &BlockPartition) -> f64 {
        self.stds
            .iter()
            .zip(partition.sizes())
            .map(|(s, &d)| d as f64 * s * s)
            .sum()
    }

    pub fn check(&self, partition: &BlockPartition) -> Result<()> {
        if self.stds.len() == partition.len() {
            Ok(())
        } else {
            Err(Error::PartitionMismatch {
                what: "block scales",
                expected: partition.len(),
                actual: self.stds.len(),
            })
        }
    }
}

/// Identifies one regenerable noise vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseSeed {
    pub seed: u64,
    pub stream: u64,
}

impl NoiseSeed {
    pub const fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }
}

/// Standard normals for one block, drawn by Box-Muller from a ChaCha8 stream
/// positioned at the block's own word offset.
pub struct BlockNormals {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl BlockNormals {
    pub fn new(seed: NoiseSeed, block: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
        rng.set_stream(seed.stream);
        rng.set_word_pos((block as u128) << BLOCK_WORD_STRIDE);
        Self { rng, spare: None }
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = (self.rng.next_u64() >> 11) as f64 * SCALE;
        let r = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * sin);
        r * cos
    }
}

impl Iterator for BlockNormals {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

/// Visit `(k, u_k)` for every coordinate of the perturbation defined by
/// `(scales, seed)`, without allocating.
pub fn for_each_noise(
    partition: &BlockPartition,
    scales: &PerturbScales,
    seed: NoiseSeed,
    mut visit: impl FnMut(usize, f64),
) -> Result<()> {
    scales.check(partition)?;
    for (block, &std) in scales.stds().iter().enumerate() {
        let mut normals = BlockNormals::new(seed, block);
        for k in partition.range(block) {
            visit(k, std * normals.next_normal());
        }
    }
    Ok(())
}

/// Materialize the perturbation `u` with `u|block i = s_i * z`.
pub fn sample_block_noise(
    partition: &BlockPartition,
    scales: &PerturbScales,
    seed: NoiseSeed,
) -> Result<Vec<f64>> {
    let mut u = vec![0.0; partition.total()];
    for_each_noise(partition, scales, seed, |k, v| u[k] = v)?;
    Ok(u)
}

/// `theta <- theta + step * u(seed, scales)`, regenerating `u` on the fly.
pub fn perturb_in_place(
    theta: &mut ParamVector,
    scales: &PerturbScales,
    seed: NoiseSeed,
    step: f64,
) -> Result<()> {
    let partition = Arc::clone(&theta.partition);
    let values = &mut theta.values;
    let mut overflow = None;
    for_each_noise(&partition, scales, seed, |k, u| {
        let next = values[k] + step * u;
        if !next.is_finite() && overflow.is_none() {
            overflow = Some(k);
        }
        values[k] = next;
    })?;
    match overflow {
        None => Ok(()),
        Some(k) => Err(Error::NumericOverflow {
            context: format!("perturbation of coordinate {k} with step {step}"),
        }),
    }
}

/// Arithmetic mean and population variance of one block.
pub fn block_stats(theta: &ParamVector, block: usize) -> Result<(f64, f64)> {
    theta.partition.check_block(block)?;
    Ok(mean_and_variance(theta.block(block)))
}

pub(crate) fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
