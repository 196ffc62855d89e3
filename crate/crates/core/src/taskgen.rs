//! Meta-learning task generation from a non-stationary Gibbs-kernel GP, and
//! the exact GP-posterior oracle used as ground truth.
//!
//! The generative process: a lengthscale profile switches between a short and
//! a long lengthscale at a changepoint, with the orientation decided by a
//! per-task Bernoulli draw. Context and target outputs are one joint GP draw
//! plus independent observation noise on every observed value.

use crate::error::{Error, Result};
use crate::tensor::{cholesky, solve_lower, solve_upper, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Read as IoRead, Write as IoWrite};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GibbsProcessConfig {
    pub ell_low: f64,
    pub ell_high: f64,
    pub changepoint: f64,
    pub noise_std: f64,
    pub orientation_prob: f64,
}

impl Default for GibbsProcessConfig {
    fn default() -> Self {
        GibbsProcessConfig {
            ell_low: 0.1,
            ell_high: 4.0,
            changepoint: 0.0,
            noise_std: 0.2,
            orientation_prob: 0.5,
        }
    }
}

impl GibbsProcessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ell_low <= 0.0 || self.ell_high <= 0.0 || self.noise_std <= 0.0 {
            return Err(Error::Config(
                "lengthscales and noise std must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskSamplerConfig {
    pub n_context_max: usize,
    pub n_target: usize,
    /// Length of the interval the context points are drawn from.
    pub context_span: f64,
    /// The target interval is the context interval widened by this margin on
    /// each side.
    pub target_margin: f64,
    pub id_center_range: [f64; 2],
    pub ood_center_range: [f64; 2],
}

impl Default for TaskSamplerConfig {
    fn default() -> Self {
        TaskSamplerConfig {
            n_context_max: 64,
            n_target: 128,
            context_span: 4.0,
            target_margin: 1.0,
            id_center_range: [-7.0, 7.0],
            ood_center_range: [13.0, 27.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Id,
    Ood,
}

/// One meta-learning task: a context set to condition on and a target set to
/// score, drawn jointly from one GP function realisation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Task {
    pub x_context: Vec<f64>,
    pub y_context: Vec<f64>,
    pub x_target: Vec<f64>,
    pub y_target: Vec<f64>,
    /// Orientation of the lengthscale profile (which side is short).
    pub orientation: u8,
    pub mode: Mode,
    pub seed: u64,
}

/// Piecewise-constant lengthscale: one side of the changepoint is short, the
/// other long, with the orientation flipped by `beta`.
pub fn lengthscale_profile(x: f64, beta: u8, cfg: &GibbsProcessConfig) -> f64 {
    let left_is_short = beta == 1;
    if x < cfg.changepoint {
        if left_is_short { cfg.ell_low } else { cfg.ell_high }
    } else if left_is_short {
        cfg.ell_high
    } else {
        cfg.ell_low
    }
}

/// Gibbs kernel: a non-stationary generalisation of the squared exponential,
/// k(x, x') = sqrt(2 l(x) l(x') / (l(x)^2 + l(x')^2)) * exp(-(x-x')^2 / (l(x)^2 + l(x')^2)).
pub fn gibbs_kernel(x: f64, x2: f64, ell: impl Fn(f64) -> f64) -> f64 {
    let (lx, lx2) = (ell(x), ell(x2));
    let s = lx * lx + lx2 * lx2;
    (2.0 * lx * lx2 / s).sqrt() * (-(x - x2) * (x - x2) / s).exp()
}

/// Counter-based RNG stream: independent, reproducible streams keyed by
/// (global seed, purpose label, index).
pub fn stream_rng(global_seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn gram(xs: &[f64], beta: u8, proc_cfg: &GibbsProcessConfig) -> Tensor {
    let n = xs.len();
    let ell = |x: f64| lengthscale_profile(x, beta, proc_cfg);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = gibbs_kernel(xs[i], xs[j], ell);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Tensor::matrix(n, n, k).expect("square gram")
}

/// Draw one task. `task_seed` should come from a dedicated stream index so
/// that equal seeds reproduce the task bitwise.
pub fn sample_task(
    task_seed: u64,
    mode: Mode,
    sampler: &TaskSamplerConfig,
    proc_cfg: &GibbsProcessConfig,
) -> Result<Task> {
    let mut rng = stream_rng(task_seed, "task", 0);
    let beta = if rng.gen_bool(proc_cfg.orientation_prob) { 1 } else { 0 };
    let n_c = rng.gen_range(1..=sampler.n_context_max);
    let range = match mode {
        Mode::Id => sampler.id_center_range,
        Mode::Ood => sampler.ood_center_range,
    };
    let center = rng.gen_range(range[0]..range[1]);
    let half = sampler.context_span / 2.0;
    let (c_lo, c_hi) = (center - half, center + half);
    let (t_lo, t_hi) = (c_lo - sampler.target_margin, c_hi + sampler.target_margin);
    let x_context: Vec<f64> = (0..n_c).map(|_| rng.gen_range(c_lo..c_hi)).collect();
    let x_target: Vec<f64> = (0..sampler.n_target).map(|_| rng.gen_range(t_lo..t_hi)).collect();

    // Joint draw over all inputs for exact consistency between context and
    // target function values.
    let all: Vec<f64> = x_context.iter().chain(&x_target).copied().collect();
    let f = sample_function(&all, beta, proc_cfg, &mut rng)
        .map_err(|e| Error::TaskSampling { seed: task_seed, source: Box::new(e) })?;
    // Observation noise on every observed value, context and target alike.
    let y: Vec<f64> = f
        .iter()
        .map(|&fi| fi + proc_cfg.noise_std * standard_normal(&mut rng))
        .collect();
    Ok(Task {
        x_context,
        y_context: y[..n_c].to_vec(),
        x_target,
        y_target: y[n_c..].to_vec(),
        orientation: beta,
        mode,
        seed: task_seed,
    })
}

/// One noiseless GP function draw at the given inputs.
pub fn sample_function(
    xs: &[f64],
    beta: u8,
    proc_cfg: &GibbsProcessConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = xs.len();
    let k = gram(xs, beta, proc_cfg);
    let l = cholesky(&k, n)?;
    let z: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    let mut f = vec![0.0; n];
    for i in 0..n {
        for j in 0..=i {
            f[i] += l.get2(i, j) * z[j];
        }
    }
    Ok(f)
}

/// A 64-bit sub-seed for stream `(global_seed, purpose, index)`; feed the
/// result to [`sample_task`] or similar.
pub fn derive_seed(global_seed: u64, purpose: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const LOG_2PI: f64 = 1.8378770664093453;

/// Exact GP predictive log-likelihood of the targets given the context, with
/// the orientation known (the generating process's own likelihood). Returns
/// the mean per-point log density.
pub fn gp_posterior_loglik(task: &Task, proc_cfg: &GibbsProcessConfig) -> Result<f64> {
    posterior_loglik_known_beta(task, task.orientation, proc_cfg)
}

/// Per-point predictive means and variances (latent variance, before noise)
/// for a known orientation.
pub fn posterior_moments(
    task: &Task,
    beta: u8,
    proc_cfg: &GibbsProcessConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ell = |x: f64| lengthscale_profile(x, beta, proc_cfg);
    let n_c = task.x_context.len();
    let s2 = proc_cfg.noise_std * proc_cfg.noise_std;
    if n_c == 0 {
        return Ok((vec![0.0; task.x_target.len()], vec![1.0; task.x_target.len()]));
    }
    let mut kcc = gram(&task.x_context, beta, proc_cfg).to_vec();
    for i in 0..n_c {
        kcc[i * n_c + i] += s2;
    }
    let l = cholesky(&Tensor::matrix(n_c, n_c, kcc)?, n_c)?;
    let alpha = solve_upper(&l, &solve_lower(&l, &task.y_context));
    let mut means = Vec::with_capacity(task.x_target.len());
    let mut vars = Vec::with_capacity(task.x_target.len());
    for &xt in &task.x_target {
        let k_tc: Vec<f64> = task.x_context.iter().map(|&xc| gibbs_kernel(xt, xc, ell)).collect();
        let m: f64 = k_tc.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let w = solve_lower(&l, &k_tc);
        let v = 1.0 - w.iter().map(|x| x * x).sum::<f64>();
        means.push(m);
        vars.push(v.max(0.0));
    }
    Ok((means, vars))
}

fn posterior_loglik_known_beta(task: &Task, beta: u8, proc_cfg: &GibbsProcessConfig) -> Result<f64> {
    let (means, vars) = posterior_moments(task, beta, proc_cfg)?;
    let s2 = proc_cfg.noise_std * proc_cfg.noise_std;
    let n_t = task.x_target.len();
    if n_t == 0 {
        return Err(Error::Config("loglik of an empty target set".into()));
    }
    let total: f64 = (0..n_t)
        .map(|i| {
            let v = vars[i] + s2;
            let d = task.y_target[i] - means[i];
            -0.5 * (LOG_2PI + v.ln() + d * d / v)
        })
        .sum();
    Ok(total / n_t as f64)
}

/// Log marginal likelihood of the noisy context under orientation `beta`.
fn context_log_marginal(task: &Task, beta: u8, proc_cfg: &GibbsProcessConfig) -> Result<f64> {
    let n_c = task.x_context.len();
    if n_c == 0 {
        return Ok(0.0);
    }
    let s2 = proc_cfg.noise_std * proc_cfg.noise_std;
    let mut kcc = gram(&task.x_context, beta, proc_cfg).to_vec();
    for i in 0..n_c {
        kcc[i * n_c + i] += s2;
    }
    let l = cholesky(&Tensor::matrix(n_c, n_c, kcc)?, n_c)?;
    let w = solve_lower(&l, &task.y_context);
    let quad: f64 = w.iter().map(|x| x * x).sum();
    let logdet: f64 = (0..n_c).map(|i| l.get2(i, i).ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (n_c as f64 * LOG_2PI + logdet + quad))
}

/// Oracle that treats the orientation as unobserved: posterior-weighted
/// mixture over both orientations, weights proportional to
/// prior(beta) * p(y_context | beta). Mean per-point log density of the
/// per-point predictive mixture.
pub fn gp_posterior_loglik_mixture(task: &Task, proc_cfg: &GibbsProcessConfig) -> Result<f64> {
    let s2 = proc_cfg.noise_std * proc_cfg.noise_std;
    let log_prior = [
        (1.0 - proc_cfg.orientation_prob).ln(),
        proc_cfg.orientation_prob.ln(),
    ];
    let log_ev: Vec<f64> = (0..2u8)
        .map(|b| Ok(context_log_marginal(task, b, proc_cfg)? + log_prior[b as usize]))
        .collect::<Result<_>>()?;
    let log_norm = log_sum_exp(log_ev[0], log_ev[1]);
    let log_w = [log_ev[0] - log_norm, log_ev[1] - log_norm];

    let mut per_beta = Vec::new();
    for b in 0..2u8 {
        per_beta.push(posterior_moments(task, b, proc_cfg)?);
    }
    let n_t = task.x_target.len();
    if n_t == 0 {
        return Err(Error::Config("loglik of an empty target set".into()));
    }
    let mut total = 0.0;
    for i in 0..n_t {
        let mut lp = f64::NEG_INFINITY;
        for b in 0..2 {
            let (means, vars) = &per_beta[b];
            let v = vars[i] + s2;
            let d = task.y_target[i] - means[i];
            let comp = log_w[b] - 0.5 * (LOG_2PI + v.ln() + d * d / v);
            lp = log_sum_exp(lp, comp);
        }
        total += lp;
    }
    Ok(total / n_t as f64)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Stationary squared-exponential GP oracle with a constant lengthscale;
/// used as an independent cross-check on one-sided tasks.
pub fn stationary_se_loglik(task: &Task, ell: f64, noise_std: f64) -> Result<f64> {
    let cfg = GibbsProcessConfig {
        ell_low: ell,
        ell_high: ell,
        noise_std,
        ..Default::default()
    };
    posterior_loglik_known_beta(task, 0, &cfg)
}

/// The evaluation protocol behind the ground-truth table value: score the
/// noisy context observations themselves as targets under the predictive
/// distribution conditioned on the full context.
pub fn context_as_target(task: &Task) -> Task {
    Task {
        x_target: task.x_context.clone(),
        y_target: task.y_context.clone(),
        ..task.clone()
    }
}

/// Hash of a serializable config, embedded in serialized task batches and
/// artifacts so mismatched configs are detectable.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct BatchHeader {
    config_hash: String,
    count: usize,
}

/// JSON-lines serialization: a header line with the config hash, then one
/// task per line.
pub fn write_tasks_jsonl<W: IoWrite>(w: &mut W, tasks: &[Task], cfg_hash: &str) -> Result<()> {
    serde_json::to_writer(&mut *w, &BatchHeader { config_hash: cfg_hash.into(), count: tasks.len() })?;
    writeln!(w)?;
    for t in tasks {
        serde_json::to_writer(&mut *w, t)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(r: R, expect_hash: &str) -> Result<Vec<Task>> {
    let mut lines = r.lines();
    let header: BatchHeader = serde_json::from_str(
        &lines.next().ok_or_else(|| Error::Config("empty task file".into()))??,
    )?;
    if header.config_hash != expect_hash {
        return Err(Error::Config(format!(
            "task batch config hash {} does not match expected {}",
            header.config_hash, expect_hash
        )));
    }
    let mut tasks = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(serde_json::from_str(&line)?);
    }
    Ok(tasks)
}

const BINARY_MAGIC: &[u8; 8] = b"AENPTSK1";

/// Compact columnar binary serialization of a task batch. Layout: magic,
/// config-hash length + bytes, task count, then per task the metadata and
/// little-endian f64 columns.
pub fn write_tasks_binary<W: IoWrite>(w: &mut W, tasks: &[Task], cfg_hash: &str) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(cfg_hash.len() as u32).to_le_bytes())?;
    w.write_all(cfg_hash.as_bytes())?;
    w.write_all(&(tasks.len() as u64).to_le_bytes())?;
    for t in tasks {
        w.write_all(&t.seed.to_le_bytes())?;
        w.write_all(&[t.orientation, matches!(t.mode, Mode::Ood) as u8])?;
        w.write_all(&(t.x_context.len() as u32).to_le_bytes())?;
        w.write_all(&(t.x_target.len() as u32).to_le_bytes())?;
        for col in [&t.x_context, &t.y_context, &t.x_target, &t.y_target] {
            for v in col {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tasks_binary<R: IoRead>(mut r: R, expect_hash: &str) -> Result<Vec<Task>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Config("bad task batch magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let hash_len = u32::from_le_bytes(buf4) as usize;
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash).map_err(|_| Error::Config("bad hash encoding".into()))?;
    if hash != expect_hash {
        return Err(Error::Config(format!(
            "task batch config hash {hash} does not match expected {expect_hash}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf8)?;
        let seed = u64::from_le_bytes(buf8);
        let mut meta = [0u8; 2];
        r.read_exact(&mut meta)?;
        r.read_exact(&mut buf4)?;
        let n_c = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let n_t = u32::from_le_bytes(buf4) as usize;
        let mut read_col = |len: usize| -> Result<Vec<f64>> {
            let mut col = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                col.push(f64::from_le_bytes(b));
            }
            Ok(col)
        };
        let x_context = read_col(n_c)?;
        let y_context = read_col(n_c)?;
        let x_target = read_col(n_t)?;
        let y_target = read_col(n_t)?;
        tasks.push(Task {
            x_context,
            y_context,
            x_target,
            y_target,
            orientation: meta[0],
            mode: if meta[1] == 1 { Mode::Ood } else { Mode::Id },
            seed,
        });
    }
    Ok(tasks)
}
