//! Building blocks shared by the grid and token model families: MLPs on the
//! tape, the fixed-input bank, and the Gaussian prediction head.

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamInit, ParamStore, Tape, Tensor, VarId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LOG_2PI: f64 = 1.8378770664093453;
/// Floor added to the softplus variance; keeps the log-density finite.
pub const VAR_FLOOR: f64 = 1e-6;

/// Factorized Gaussian predictive marginals at the target points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianPrediction {
    /// Convert the raw model head output (mean, pre-softplus variance) to the
    /// actual prediction.
    pub fn from_raw(raw: &Tensor) -> Self {
        let n = raw.rows();
        let mut mean = Vec::with_capacity(n);
        let mut variance = Vec::with_capacity(n);
        for i in 0..n {
            mean.push(raw.get2(i, 0));
            variance.push(softplus_scalar(raw.get2(i, 1)) + VAR_FLOOR);
        }
        GaussianPrediction { mean, variance }
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean per-point Gaussian log density of `y` under a prediction.
pub fn gaussian_loglik(pred: &GaussianPrediction, y: &[f64]) -> f64 {
    assert_eq!(pred.mean.len(), y.len());
    let total: f64 = y
        .iter()
        .zip(pred.mean.iter().zip(&pred.variance))
        .map(|(&yi, (&m, &v))| -0.5 * (LOG_2PI + v.ln() + (yi - m) * (yi - m) / v))
        .sum();
    total / y.len() as f64
}

/// Mean per-point log likelihood on the tape, from the raw head output
/// [N_t, 2] (column 0 mean, column 1 pre-softplus variance).
pub fn mean_loglik_on_tape(tape: &Tape, raw: VarId, y_target: &[f64]) -> Result<VarId> {
    let n = tape.value(raw).rows();
    if n != y_target.len() {
        return Err(Error::shape("mean_loglik", "target length mismatch"));
    }
    let m = tape.slice_cols(raw, 0, 1)?;
    let pre = tape.slice_cols(raw, 1, 2)?;
    let v = tape.add_scalar(tape.softplus(pre)?, VAR_FLOOR)?;
    let y = tape.constant(Tensor::matrix(n, 1, y_target.to_vec())?);
    let d = tape.sub(m, y)?;
    let quad = tape.div(tape.mul(d, d)?, v)?;
    let per_point = tape.add(tape.ln(v)?, quad)?;
    tape.scale(tape.add_scalar(tape.mean_all(per_point)?, LOG_2PI)?, -0.5)
}

// ── MLPs ─────────────────────────────────────────────────────────────

/// Register weights for an MLP with the given layer widths under `prefix`.
pub fn register_mlp(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut ChaCha8Rng) {
    for i in 0..dims.len() - 1 {
        store.register(
            &format!("{prefix}.w{i}"),
            vec![dims[i], dims[i + 1]],
            ParamInit::Glorot { fan_in: dims[i], fan_out: dims[i + 1] },
            rng,
        );
        store.register(
            &format!("{prefix}.b{i}"),
            vec![dims[i + 1]],
            ParamInit::Zeros,
            rng,
        );
    }
}

/// Apply an MLP registered by [`register_mlp`] to a [N, dims[0]] input, with
/// ReLU between layers and a linear final layer.
pub fn mlp(
    tape: &Tape,
    bound: &BoundParams,
    prefix: &str,
    x: VarId,
    n_layers: usize,
) -> Result<VarId> {
    let mut h = x;
    for i in 0..n_layers {
        let w = bound.var(&format!("{prefix}.w{i}"))?;
        let b = bound.var(&format!("{prefix}.b{i}"))?;
        h = tape.add_row(tape.matmul(h, w)?, b)?;
        if i + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

// ── fixed-input bank ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PositionFeatures {
    Raw,
    Fourier { n_coeffs: usize, period: f64 },
}

/// Learnable fixed-input functions t(x) injected into tilde models. The bank
/// is a generator MLP producing `b` basis functions of position, combined by
/// a bias-free linear map so that b = 0 yields exactly zero.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BankConfig {
    pub b: usize,
    pub features: PositionFeatures,
    /// Outside this interval the bank output is forced to exactly zero.
    pub support: [f64; 2],
    pub dropout_prob: f64,
}

impl BankConfig {
    pub fn raw_default() -> Self {
        BankConfig {
            b: 4,
            features: PositionFeatures::Raw,
            support: [-7.0, 7.0],
            dropout_prob: 0.1,
        }
    }

    pub fn fourier_default() -> Self {
        BankConfig {
            b: 4,
            features: PositionFeatures::Fourier { n_coeffs: 4, period: 28.0 },
            support: [-7.0, 7.0],
            dropout_prob: 0.5,
        }
    }

    fn feature_dim(&self) -> usize {
        match self.features {
            PositionFeatures::Raw => 1,
            PositionFeatures::Fourier { n_coeffs, .. } => 2 * n_coeffs,
        }
    }

    fn featurize(&self, xs: &[f64]) -> Tensor {
        match self.features {
            PositionFeatures::Raw => Tensor::matrix(xs.len(), 1, xs.to_vec()).expect("raw feats"),
            PositionFeatures::Fourier { n_coeffs, period } => {
                let mut data = Vec::with_capacity(xs.len() * 2 * n_coeffs);
                for &x in xs {
                    for k in 1..=n_coeffs {
                        let arg = 2.0 * std::f64::consts::PI * k as f64 * x / period;
                        data.push(arg.cos());
                        data.push(arg.sin());
                    }
                }
                Tensor::matrix(xs.len(), 2 * n_coeffs, data).expect("fourier feats")
            }
        }
    }

    /// Register the generator MLP (features -> hidden -> b) and the bias-free
    /// combination matrix (b -> out_dim).
    pub fn register(&self, store: &mut ParamStore, out_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) {
        register_mlp(store, "bank.gen", &[self.feature_dim(), hidden, self.b], rng);
        store.register(
            "bank.proj",
            vec![self.b, out_dim],
            ParamInit::Glorot { fan_in: self.b.max(1), fan_out: out_dim },
            rng,
        );
    }

    /// Evaluate t(x) at the given positions: [N, out_dim], exactly zero
    /// outside the support interval.
    pub fn evaluate(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        xs: &[f64],
    ) -> Result<VarId> {
        let feats = tape.constant(self.featurize(xs));
        let basis = mlp(tape, bound, "bank.gen", feats, 2)?;
        let proj = bound.var("bank.proj")?;
        let out = tape.matmul(basis, proj)?;
        let mask: Vec<f64> = xs
            .iter()
            .map(|&x| if x >= self.support[0] && x <= self.support[1] { 1.0 } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::vector(mask));
        tape.mul_col(out, mask)
    }
}
