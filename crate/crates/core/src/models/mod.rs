//! The CNP model zoo: strictly equivariant, approximately equivariant
//! (tilde) and non-equivariant conditional neural processes, all emitting
//! factorized Gaussian predictions.

mod common;
mod grid;
mod tokens;

pub use common::{
    gaussian_loglik, mean_loglik_on_tape, softplus_scalar, BankConfig, GaussianPrediction,
    PositionFeatures, LOG_2PI, VAR_FLOOR,
};
pub use grid::{build_grid, DECODER_GROUPS};

use crate::error::Result;
use crate::taskgen::Task;
use crate::tensor::{BoundParams, ParamStore, Tape, VarId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    ConvCnp,
    EquivCnp,
    RelaxedConvCnp,
    TeTnp,
    PtTeTnp,
    Tnp,
}

impl Family {
    pub fn is_grid(self) -> bool {
        matches!(self, Family::ConvCnp | Family::EquivCnp | Family::RelaxedConvCnp)
    }

    pub(crate) fn is_reflection_tied(self) -> bool {
        self == Family::EquivCnp
    }

    pub(crate) fn is_relaxed(self) -> bool {
        self == Family::RelaxedConvCnp
    }

    pub(crate) fn is_vanilla_attention(self) -> bool {
        self == Family::Tnp
    }

    pub(crate) fn is_pseudo_token(self) -> bool {
        self == Family::PtTeTnp
    }
}

/// Dimensions of the grid (convolutional) models.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridDims {
    pub channels: usize,
    pub kernel_size: usize,
    pub layers: usize,
    pub grid_density: f64,
    pub grid_margin: f64,
}

impl Default for GridDims {
    fn default() -> Self {
        GridDims { channels: 32, kernel_size: 9, layers: 6, grid_density: 20.0, grid_margin: 1.0 }
    }
}

/// Dimensions of the token (transformer) models.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TokenDims {
    pub dz: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub layers: usize,
    pub pseudo_tokens: usize,
    /// Hidden width of the μ MLP inside TE attention.
    pub mu_hidden: usize,
}

impl Default for TokenDims {
    fn default() -> Self {
        TokenDims {
            dz: 64,
            heads: 8,
            d_qk: 16,
            d_v: 16,
            layers: 2,
            pseudo_tokens: 64,
            mu_hidden: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub tilde: bool,
    pub grid: GridDims,
    pub token: TokenDims,
    pub bank: BankConfig,
}

impl ModelConfig {
    pub fn new(family: Family, tilde: bool) -> Self {
        let bank = if family.is_grid() {
            BankConfig::raw_default()
        } else {
            BankConfig::fourier_default()
        };
        ModelConfig {
            family,
            tilde,
            grid: GridDims::default(),
            token: TokenDims::default(),
            bank,
        }
    }

    /// Tiny dimensions for finite-difference gradient checks.
    pub fn micro(family: Family, tilde: bool) -> Self {
        let mut cfg = ModelConfig::new(family, tilde);
        cfg.grid = GridDims { channels: 4, kernel_size: 3, layers: 2, grid_density: 4.0, grid_margin: 0.5 };
        cfg.token =
            TokenDims { dz: 8, heads: 2, d_qk: 4, d_v: 4, layers: 2, pseudo_tokens: 4, mu_hidden: 8 };
        cfg.bank.b = 2;
        cfg
    }
}

/// A model: its configuration plus a named parameter store.
#[derive(Clone)]
pub struct ModelInstance {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ModelInstance {
    /// Fresh model with parameters initialized from the given RNG stream.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        if config.family.is_grid() {
            grid::register_params(&config, &mut params, rng)?;
        } else {
            tokens::register_params(&config, &mut params, rng)?;
        }
        Ok(ModelInstance { config, params })
    }

    /// Wrap an existing parameter store (checkpoint loading, counterpart
    /// construction for collapse tests). Parameters the config does not use
    /// are ignored.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Self {
        ModelInstance { config, params }
    }

    /// Raw head output [N_t, 2] on the tape; differentiable w.r.t. all bound
    /// parameters. `bank_on = false` forces the strict path of tilde models.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        x_context: &[f64],
        y_context: &[f64],
        x_target: &[f64],
        bank_on: bool,
    ) -> Result<VarId> {
        if self.config.family.is_grid() {
            grid::forward(&self.config, tape, bound, x_context, y_context, x_target, bank_on)
        } else {
            tokens::forward(&self.config, tape, bound, x_context, y_context, x_target, bank_on)
        }
    }

    /// Plain prediction for a task (no gradient bookkeeping kept around).
    pub fn predict(&self, task: &Task, bank_on: bool) -> Result<GaussianPrediction> {
        self.predict_at(&task.x_context, &task.y_context, &task.x_target, bank_on)
    }

    pub fn predict_at(
        &self,
        x_context: &[f64],
        y_context: &[f64],
        x_target: &[f64],
        bank_on: bool,
    ) -> Result<GaussianPrediction> {
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &self.params);
        let raw = self.forward(&tape, &bound, x_context, y_context, x_target, bank_on)?;
        Ok(GaussianPrediction::from_raw(&tape.value(raw)))
    }

    /// Mean per-point target log likelihood of a task (the training
    /// objective, un-negated).
    pub fn task_loglik(&self, task: &Task, bank_on: bool) -> Result<f64> {
        let pred = self.predict(task, bank_on)?;
        Ok(gaussian_loglik(&pred, &task.y_target))
    }
}
