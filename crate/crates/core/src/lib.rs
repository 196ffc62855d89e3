//! Approximately equivariant conditional neural processes in 1-D, together with
//! the Gibbs-kernel GP benchmark they are trained on and a numerical lab that
//! verifies the operator-approximation constructions behind the fixed-input
//! mechanism.
//!
//! The crate is organised around six areas:
//!
//! - [`tensor`]: a minimal dense f64 tensor engine with reverse-mode
//!   differentiation, the neural building blocks (conv, attention primitives,
//!   normalisation) and the AdamW optimizer.
//! - [`taskgen`]: meta-learning task sampling from a non-stationary Gibbs-kernel
//!   GP, plus the exact GP-posterior oracle.
//! - [`models`]: the CNP model zoo (ConvCNP, EquivCNP, RelaxedConvCNP, TE-TNP,
//!   PT-TE-TNP, TNP) with strict and approximately equivariant variants.
//! - [`training`]: the meta-training loop and ID/OOD evaluation protocol.
//! - [`eqlab`]: finite-rank operator approximation experiments and equivariance
//!   deviation measurements.
//! - [`report`]: config-driven experiment runner, checkpoints, CSV/JSON/SVG
//!   artifact emission.

pub mod eqlab;
pub mod error;
pub mod models;
pub mod report;
pub mod taskgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
