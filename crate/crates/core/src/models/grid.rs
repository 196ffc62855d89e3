//! Grid-based CNP family: ConvCNP, EquivCNP (reflection-tied kernels) and
//! RelaxedConvCNP (learned per-position modulation of an otherwise
//! equivariant convolution stack).
//!
//! Pipeline: SetConv encoder onto a uniform grid -> channel lift (+ optional
//! fixed-input bank at the grid points) -> CNN -> multi-lengthscale RBF
//! smoothing back to the target points -> (mean, pre-softplus variance).

use super::common::{mlp, register_mlp};
use super::{GridDims, ModelConfig};
use crate::error::Result;
use crate::tensor::{BoundParams, ParamInit, ParamStore, Tape, Tensor, VarId};
use rand_chacha::ChaCha8Rng;

/// Decoder smoothing lengthscale groups (the head has one mean and one
/// variance channel per group).
pub const DECODER_GROUPS: usize = 5;

/// Uniform grid at `density` points per unit covering all inputs plus a
/// margin. Grid nodes sit at integer multiples of the cell width, so
/// translating the inputs by an integer number of cells translates the grid
/// by exactly that many nodes.
pub fn build_grid(xs: &[f64], dims: &GridDims) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let i0 = ((lo - dims.grid_margin) * dims.grid_density).floor() as i64;
    let i1 = ((hi + dims.grid_margin) * dims.grid_density).ceil() as i64;
    (i0..=i1).map(|i| i as f64 / dims.grid_density).collect()
}

fn ln_exp_m1(y: f64) -> f64 {
    // inverse of softplus
    (y.exp() - 1.0).ln()
}

pub fn register_params(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = &cfg.grid;
    let c = d.channels;
    // encoder RBF lengthscale (pre-softplus), init 2 / density
    store.register("enc.ls_raw", vec![1], ParamInit::Constant(ln_exp_m1(2.0 / d.grid_density)), rng);
    // channel lift from (density, value) to C channels
    register_mlp(store, "lift", &[2, c], rng);
    let half_k = d.kernel_size / 2 + 1;
    for l in 0..d.layers {
        if cfg.family.is_reflection_tied() {
            store.register(
                &format!("conv.{l}.half"),
                vec![c, c, half_k],
                ParamInit::FanIn { fan_in: c * d.kernel_size },
                rng,
            );
        } else {
            store.register(
                &format!("conv.{l}.weight"),
                vec![c, c, d.kernel_size],
                ParamInit::FanIn { fan_in: c * d.kernel_size },
                rng,
            );
        }
        store.register(&format!("conv.{l}.bias"), vec![c], ParamInit::Zeros, rng);
        if cfg.family.is_relaxed() {
            // per-layer modulation MLP over the grid coordinate
            register_mlp(store, &format!("relax.{l}"), &[1, 16, 1], rng);
        }
    }
    // decoder: 1x1 projection to (mean, var) per lengthscale group, then RBF
    // smoothing with softplus-parameterized lengthscales log-spaced over
    // [1, 5] grid cells
    register_mlp(store, "head", &[c, 2 * DECODER_GROUPS], rng);
    let cell = 1.0 / d.grid_density;
    let ls_init: Vec<f64> = (0..DECODER_GROUPS)
        .map(|g| ln_exp_m1(cell * 5.0f64.powf(g as f64 / (DECODER_GROUPS - 1) as f64)))
        .collect();
    store.set("dec.ls_raw", Tensor::vector(ls_init));
    if cfg.tilde {
        cfg.bank.register(store, c, c, rng);
    }
    Ok(())
}

pub fn forward(
    cfg: &ModelConfig,
    tape: &Tape,
    bound: &BoundParams,
    x_context: &[f64],
    y_context: &[f64],
    x_target: &[f64],
    bank_on: bool,
) -> Result<VarId> {
    let d = &cfg.grid;
    let all: Vec<f64> = x_context.iter().chain(x_target).copied().collect();
    let grid = build_grid(&all, d);

    // encoder
    let enc_ls = tape.softplus(bound.var("enc.ls_raw")?)?;
    let h = tape.setconv_raw(enc_ls, &grid, x_context, y_context)?; // [2, T]
    let h = tape.density_normalize(h)?;
    // lift channels: [T, 2] -> [T, C] -> [C, T]
    let h = tape.transpose(h)?;
    let mut h = tape.transpose(mlp(tape, bound, "lift", h, 1)?)?;

    // fixed-input bank injected at the grid points
    if cfg.tilde && bank_on {
        let t = cfg.bank.evaluate(tape, bound, &grid)?; // [T, C]
        h = tape.add(h, tape.transpose(t)?)?;
    }

    // CNN over the grid
    for l in 0..d.layers {
        if cfg.family.is_relaxed() {
            let coords = tape.constant(Tensor::matrix(grid.len(), 1, grid.clone())?);
            let t_l = mlp(tape, bound, &format!("relax.{l}"), coords, 2)?; // [T, 1]
            let gain = tape.add_scalar(tape.reshape(t_l, vec![grid.len()])?, 1.0)?;
            h = tape.mul_row(h, gain)?;
        }
        let kernel = if cfg.family.is_reflection_tied() {
            tape.reflect_kernel(bound.var(&format!("conv.{l}.half"))?)?
        } else {
            bound.var(&format!("conv.{l}.weight"))?
        };
        h = tape.conv1d(h, kernel)?;
        h = tape.add_col(h, bound.var(&format!("conv.{l}.bias"))?)?;
        if l + 1 < d.layers {
            h = tape.relu(h)?;
        }
    }

    // head: per-group (mean, var) channels smoothed to the targets
    let f = tape.transpose(mlp(tape, bound, "head", tape.transpose(h)?, 1)?)?; // [2G, T]
    let dec_ls = tape.softplus(bound.var("dec.ls_raw")?)?;
    let smoothed = tape.kernel_smooth(f, dec_ls, &grid, x_target)?; // [N_t, 2G]
    // sum groups into the two head outputs
    let mut sel = vec![0.0; 2 * DECODER_GROUPS * 2];
    for g in 0..DECODER_GROUPS {
        sel[(2 * g) * 2] = 1.0;
        sel[(2 * g + 1) * 2 + 1] = 1.0;
    }
    let sel = tape.constant(Tensor::matrix(2 * DECODER_GROUPS, 2, sel)?);
    tape.matmul(smoothed, sel)
}
