//! Token-based CNP family: TE-TNP (translation-equivariant transformer),
//! PT-TE-TNP (pseudo-token variant with linear cost in the context size) and
//! the non-equivariant TNP baseline.
//!
//! Translation-equivariant attention computes logits from token content plus
//! an MLP over (content logits, query-key position difference); absolute
//! positions never enter the computation.

use super::common::{mlp, register_mlp};
use super::{ModelConfig, TokenDims};
use crate::error::Result;
use crate::tensor::{BoundParams, ParamInit, ParamStore, Tape, Tensor, VarId};
use rand_chacha::ChaCha8Rng;

fn register_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: &TokenDims,
    te: bool,
    rng: &mut ChaCha8Rng,
) {
    let (dz, h) = (d.dz, d.heads);
    for (name, out) in [("wq", h * d.d_qk), ("wk", h * d.d_qk), ("wv", h * d.d_v)] {
        store.register(
            &format!("{prefix}.{name}"),
            vec![dz, out],
            ParamInit::Glorot { fan_in: dz, fan_out: out },
            rng,
        );
    }
    store.register(
        &format!("{prefix}.wo"),
        vec![h * d.d_v, dz],
        ParamInit::Glorot { fan_in: h * d.d_v, fan_out: dz },
        rng,
    );
    store.register(&format!("{prefix}.bo"), vec![dz], ParamInit::Zeros, rng);
    if te {
        // μ: (H content logits, position difference) -> H logit adjustments
        let m = d.mu_hidden;
        register_mlp(store, &format!("{prefix}.mu"), &[h + 1, m, m, h], rng);
    }
}

/// Multi-head attention. With `positions = Some((xq, xk))` the logits gain the
/// translation-equivariant μ term over position differences; with `None` the
/// attention is vanilla (content logits only).
fn attention(
    tape: &Tape,
    bound: &BoundParams,
    prefix: &str,
    d: &TokenDims,
    zq: VarId,
    zk: VarId,
    positions: Option<(&[f64], &[f64])>,
) -> Result<VarId> {
    let nq = tape.value(zq).rows();
    let nk = tape.value(zk).rows();
    if nk == 0 {
        // no keys: the attention contribution is defined as the zero token
        return Ok(tape.constant(Tensor::matrix(nq, d.dz, vec![0.0; nq * d.dz])?));
    }
    let q = tape.matmul(zq, bound.var(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(zk, bound.var(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(zk, bound.var(&format!("{prefix}.wv"))?)?;
    let scale = 1.0 / (d.d_qk as f64).sqrt();
    let mut content = Vec::with_capacity(d.heads);
    for h in 0..d.heads {
        let qh = tape.slice_cols(q, h * d.d_qk, (h + 1) * d.d_qk)?;
        let kh = tape.slice_cols(k, h * d.d_qk, (h + 1) * d.d_qk)?;
        content.push(tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale)?);
    }
    let logits: Vec<VarId> = if let Some((xq, xk)) = positions {
        // μ sees every head's content logit plus the position difference
        let mut cols: Vec<VarId> = content
            .iter()
            .map(|&c| tape.reshape(c, vec![nq * nk, 1]))
            .collect::<Result<_>>()?;
        let mut diffs = Vec::with_capacity(nq * nk);
        for &xi in xq {
            for &xj in xk {
                diffs.push(xi - xj);
            }
        }
        cols.push(tape.constant(Tensor::matrix(nq * nk, 1, diffs)?));
        let mu_in = tape.concat_cols(&cols)?;
        let mu = mlp(tape, bound, &format!("{prefix}.mu"), mu_in, 3)?; // [nq*nk, H]
        (0..d.heads)
            .map(|h| {
                let adj = tape.reshape(tape.slice_cols(mu, h, h + 1)?, vec![nq, nk])?;
                tape.add(content[h], adj)
            })
            .collect::<Result<_>>()?
    } else {
        content
    };
    let mut heads_out = Vec::with_capacity(d.heads);
    for (h, &lg) in logits.iter().enumerate() {
        let a = tape.softmax_rows(lg)?;
        let vh = tape.slice_cols(v, h * d.d_v, (h + 1) * d.d_v)?;
        heads_out.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&heads_out)?;
    let out = tape.matmul(cat, bound.var(&format!("{prefix}.wo"))?)?;
    tape.add_row(out, bound.var(&format!("{prefix}.bo"))?)
}

fn register_block(store: &mut ParamStore, prefix: &str, d: &TokenDims, te: bool, rng: &mut ChaCha8Rng) {
    register_attention(store, &format!("{prefix}.att"), d, te, rng);
    for ln in ["ln1", "ln2", "lnk"] {
        store.register(&format!("{prefix}.{ln}.gamma"), vec![d.dz], ParamInit::Ones, rng);
        store.register(&format!("{prefix}.{ln}.beta"), vec![d.dz], ParamInit::Zeros, rng);
    }
    register_mlp(store, &format!("{prefix}.ff"), &[d.dz, 2 * d.dz, d.dz], rng);
}

fn layer_norm(tape: &Tape, bound: &BoundParams, prefix: &str, z: VarId) -> Result<VarId> {
    tape.layer_norm_rows(
        z,
        bound.var(&format!("{prefix}.gamma"))?,
        bound.var(&format!("{prefix}.beta"))?,
    )
}

/// Pre-norm residual self-attention block.
fn self_block(
    tape: &Tape,
    bound: &BoundParams,
    prefix: &str,
    d: &TokenDims,
    z: VarId,
    x: Option<&[f64]>,
) -> Result<VarId> {
    let zn = layer_norm(tape, bound, &format!("{prefix}.ln1"), z)?;
    let positions = x.map(|x| (x, x));
    let a = attention(tape, bound, &format!("{prefix}.att"), d, zn, zn, positions)?;
    let z = tape.add(z, a)?;
    let zn = layer_norm(tape, bound, &format!("{prefix}.ln2"), z)?;
    let f = mlp(tape, bound, &format!("{prefix}.ff"), zn, 2)?;
    tape.add(z, f)
}

/// Pre-norm residual cross-attention block (queries attend to keys).
#[allow(clippy::too_many_arguments)]
fn cross_block(
    tape: &Tape,
    bound: &BoundParams,
    prefix: &str,
    d: &TokenDims,
    zq: VarId,
    zk: VarId,
    positions: Option<(&[f64], &[f64])>,
) -> Result<VarId> {
    let qn = layer_norm(tape, bound, &format!("{prefix}.ln1"), zq)?;
    let kn = layer_norm(tape, bound, &format!("{prefix}.lnk"), zk)?;
    let a = attention(tape, bound, &format!("{prefix}.att"), d, qn, kn, positions)?;
    let zq = tape.add(zq, a)?;
    let zn = layer_norm(tape, bound, &format!("{prefix}.ln2"), zq)?;
    let f = mlp(tape, bound, &format!("{prefix}.ff"), zn, 2)?;
    tape.add(zq, f)
}

/// Broadcast a [1, dz] parameter row to n identical token rows.
fn broadcast_token(tape: &Tape, row: VarId, n: usize) -> Result<VarId> {
    let ones = tape.constant(Tensor::matrix(n, 1, vec![1.0; n])?);
    tape.matmul(ones, row)
}

/// Evenly spaced pseudo-token home positions covering the context span.
pub fn pseudo_positions(m: usize) -> Vec<f64> {
    let half = 2.5;
    if m == 1 {
        return vec![0.0];
    }
    (0..m)
        .map(|i| -half + 2.0 * half * i as f64 / (m - 1) as f64)
        .collect()
}

pub fn register_params(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = &cfg.token;
    let te = !cfg.family.is_vanilla_attention();
    let embed_in = if te { 2 } else { 3 };
    register_mlp(store, "embed", &[embed_in, d.dz, d.dz], rng);
    store.register("z0", vec![1, d.dz], ParamInit::Glorot { fan_in: 1, fan_out: d.dz }, rng);
    if cfg.family.is_pseudo_token() {
        store.register(
            "u0",
            vec![d.pseudo_tokens, d.dz],
            ParamInit::Glorot { fan_in: d.pseudo_tokens, fan_out: d.dz },
            rng,
        );
        for l in 0..d.layers {
            register_block(store, &format!("abs.{l}"), d, te, rng);
            register_block(store, &format!("sa.{l}"), d, te, rng);
            register_block(store, &format!("dec.{l}"), d, te, rng);
        }
    } else {
        for l in 0..d.layers {
            register_block(store, &format!("enc.{l}"), d, te, rng);
            register_block(store, &format!("dec.{l}"), d, te, rng);
        }
    }
    register_mlp(store, "decode", &[d.dz, d.dz, 2], rng);
    if cfg.tilde {
        cfg.bank.register(store, d.dz, d.dz, rng);
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
    let d = &cfg.token;
    let n_c = x_context.len();
    let n_t = x_target.len();
    let te = !cfg.family.is_vanilla_attention();

    // context token features: TE models see only (y, flag); the vanilla TNP
    // carries absolute positions in its tokens
    let (ctx_feats, tgt_feats) = if te {
        let ctx: Vec<f64> = y_context.iter().flat_map(|&y| [y, 1.0]).collect();
        (Tensor::matrix(n_c, 2, ctx)?, None)
    } else {
        let ctx: Vec<f64> = x_context
            .iter()
            .zip(y_context)
            .flat_map(|(&x, &y)| [x, y, 1.0])
            .collect();
        let tgt: Vec<f64> = x_target.iter().flat_map(|&x| [x, 0.0, 0.0]).collect();
        (Tensor::matrix(n_c, 3, ctx)?, Some(Tensor::matrix(n_t, 3, tgt)?))
    };
    let mut zc = mlp(tape, bound, "embed", tape.constant(ctx_feats), 2)?;
    let mut zt = match tgt_feats {
        Some(f) => mlp(tape, bound, "embed", tape.constant(f), 2)?,
        None => broadcast_token(tape, bound.var("z0")?, n_t)?,
    };

    // fixed-input bank on the context tokens
    if cfg.tilde && bank_on && !cfg.family.is_pseudo_token() && n_c > 0 {
        let t = cfg.bank.evaluate(tape, bound, x_context)?;
        zc = tape.add(zc, t)?;
    }

    if cfg.family.is_pseudo_token() {
        // pseudo-token positions ride on the context mean so the whole model
        // stays translation-equivariant
        let mean_x = if n_c == 0 {
            0.0
        } else {
            x_context.iter().sum::<f64>() / n_c as f64
        };
        let v: Vec<f64> = pseudo_positions(d.pseudo_tokens).iter().map(|p| p + mean_x).collect();
        let mut u = bound.var("u0")?;
        if cfg.tilde && bank_on {
            let t = cfg.bank.evaluate(tape, bound, &v)?;
            u = tape.add(u, t)?;
        }
        for l in 0..d.layers {
            u = cross_block(
                tape, bound, &format!("abs.{l}"), d, u, zc,
                te.then_some((v.as_slice(), x_context)),
            )?;
            u = self_block(tape, bound, &format!("sa.{l}"), d, u, te.then_some(v.as_slice()))?;
            zt = cross_block(
                tape, bound, &format!("dec.{l}"), d, zt, u,
                te.then_some((x_target, v.as_slice())),
            )?;
        }
    } else {
        for l in 0..d.layers {
            if n_c > 0 {
                zc = self_block(tape, bound, &format!("enc.{l}"), d, zc, te.then_some(x_context))?;
            }
            zt = cross_block(
                tape, bound, &format!("dec.{l}"), d, zt, zc,
                te.then_some((x_target, x_context)),
            )?;
        }
    }
    mlp(tape, bound, "decode", zt, 2)
}
