//! Learned per-block perturbation scales for two-point zeroth-order
//! optimization.
//!
//! The crate is organized bottom-up:
//!
//! - [`paramspace`]: block partitions, perturbation scales and seeded noise.
//! - [`pertnn`]: the per-block scale network with analytic gradients.
//! - [`zo`]: the two-point optimizer with MeZO as the unit-scale case.
//! - [`meta`]: learning-to-learn training of the scale network.
//! - [`testbeds`]: quadratic families and a small classifier.
//! - [`bounds`]: one-step convergence bounds and their verification.
//! - [`harness`]: the experiment runner behind the `zoft` binary.

pub mod bounds;
pub mod error;
pub mod harness;
pub mod meta;
pub mod paramspace;
pub mod pertnn;
pub mod testbeds;
pub mod zo;

pub use error::{CheckpointError, Error, Result};
pub use paramspace::{BlockPartition, NoiseSeed, ParamVector, PerturbScales};
pub use pertnn::{PertNNInput, PertNNParams};
pub use testbeds::{Objective, QuadraticTask};
pub use zo::{LossPair, Mode, StepRecord, ZoConfig};
