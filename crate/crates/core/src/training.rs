//! Meta-training loop (mean per-point target log likelihood objective with
//! per-task fixed-input dropout) and the ID/OOD evaluation protocol.

use crate::error::{Error, Result};
use crate::models::{mean_loglik_on_tape, ModelConfig, ModelInstance};
use crate::taskgen::{
    config_hash, context_as_target, derive_seed, sample_task, stream_rng, GibbsProcessConfig,
    Mode, Task, TaskSamplerConfig,
};
use crate::tensor::{AdamWConfig, AdamWState, BoundParams, GradMap, ParamStore, Tape};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub clip_value: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    /// Per-task probability of zeroing the fixed-input bank; `None` uses the
    /// model bank's own default (0.1 for grid models, 0.5 for token models).
    pub dropout_prob: Option<f64>,
    pub seed: u64,
    /// Held-out ID tasks scored after every epoch.
    pub val_tasks: usize,
    /// Stop if the validation log likelihood has not improved for this many
    /// epochs; `None` trains the full budget.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 16,
            clip_value: 0.5,
            weight_decay: 0.01,
            epochs: 30,
            iters_per_epoch: 1000,
            dropout_prob: None,
            seed: 0,
            val_tasks: 2000,
            early_stop_patience: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loglik: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AbortInfo {
    pub epoch: usize,
    pub iter: usize,
    pub task_seed: u64,
    pub message: String,
}

/// Serializable training artifact: everything needed to reproduce or resume.
#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: TaskSamplerConfig,
    pub process: GibbsProcessConfig,
    pub config_hash: String,
    pub epochs_completed: usize,
    pub loss_curve: Vec<LossRow>,
    pub aborted: Option<AbortInfo>,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub optimizer: AdamWState,
}

impl Checkpoint {
    pub fn model_instance(&self) -> Result<ModelInstance> {
        Ok(ModelInstance::with_params(self.model, ParamStore::from_raw(self.params.clone())?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Hash of the full training setup; identical hashes mean bitwise-identical
/// training runs.
pub fn train_setup_hash(
    model: &ModelConfig,
    train: &TrainConfig,
    sampler: &TaskSamplerConfig,
    process: &GibbsProcessConfig,
) -> String {
    config_hash(&(model, train, sampler, process))
}

fn task_loss_and_grads(
    model: &ModelInstance,
    task: &Task,
    bank_on: bool,
) -> Result<(f64, GradMap)> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &model.params);
    let raw = model.forward(&tape, &bound, &task.x_context, &task.y_context, &task.x_target, bank_on)?;
    let ll = mean_loglik_on_tape(&tape, raw, &task.y_target)?;
    let loss = tape.value(ll).data()[0];
    // maximize log likelihood = minimize its negation
    let grads = tape.backward(ll)?;
    let mut acc = GradMap::new();
    bound.accumulate_grads(&grads, &mut acc);
    acc.scale(-1.0);
    Ok((loss, acc))
}

/// Train a fresh model. Deterministic given the config: parameter init, task
/// streams and dropout draws all derive from `train.seed`. On a numerical
/// failure the last-good checkpoint is returned with the offending task seed
/// recorded in `aborted`.
pub fn train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sampler: TaskSamplerConfig,
    process: GibbsProcessConfig,
    mut progress: impl FnMut(&LossRow),
) -> Result<Checkpoint> {
    process.validate()?;
    if train_cfg.batch_size == 0 || train_cfg.iters_per_epoch == 0 {
        return Err(Error::Config("batch size and iters must be positive".into()));
    }
    let mut rng = stream_rng(train_cfg.seed, "init", 0);
    let mut model = ModelInstance::new(model_cfg, &mut rng)?;
    let dropout = train_cfg.dropout_prob.unwrap_or(model_cfg.bank.dropout_prob);
    let adamw_cfg = AdamWConfig {
        lr: train_cfg.lr,
        weight_decay: train_cfg.weight_decay,
        grad_value_clip: train_cfg.clip_value,
        ..Default::default()
    };
    let mut opt = AdamWState::new();
    let hash = train_setup_hash(&model_cfg, &train_cfg, &sampler, &process);

    let mut loss_curve = Vec::new();
    let mut aborted = None;
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut epochs_completed = 0usize;

    'outer: for epoch in 0..train_cfg.epochs {
        let mut epoch_loss = 0.0;
        for iter in 0..train_cfg.iters_per_epoch {
            let base = ((epoch * train_cfg.iters_per_epoch + iter) * train_cfg.batch_size) as u64;
            // parallel gradient computation, fixed-order summation
            let batch: Vec<Result<(u64, f64, GradMap)>> = (0..train_cfg.batch_size as u64)
                .into_par_iter()
                .map(|b| {
                    let task_seed = derive_seed(train_cfg.seed, "train-task", base + b);
                    let task = sample_task(task_seed, Mode::Id, &sampler, &process)?;
                    let bank_on = model_cfg.tilde
                        && !stream_rng(train_cfg.seed, "dropout", base + b).gen_bool(dropout);
                    let (loss, grads) = task_loss_and_grads(&model, &task, bank_on)
                        .map_err(|e| Error::TaskSampling { seed: task_seed, source: Box::new(e) })?;
                    Ok((task_seed, loss, grads))
                })
                .collect();
            let mut total = GradMap::new();
            let mut batch_loss = 0.0;
            for item in batch {
                match item {
                    Ok((_, loss, grads)) => {
                        batch_loss += loss;
                        total.merge(&grads);
                    }
                    Err(e) => {
                        let seed = match &e {
                            Error::TaskSampling { seed, .. } => *seed,
                            _ => 0,
                        };
                        aborted = Some(AbortInfo {
                            epoch,
                            iter,
                            task_seed: seed,
                            message: e.to_string(),
                        });
                        break 'outer;
                    }
                }
            }
            if !total.is_finite() {
                aborted = Some(AbortInfo {
                    epoch,
                    iter,
                    task_seed: 0,
                    message: "non-finite gradient sum".into(),
                });
                break 'outer;
            }
            total.scale(1.0 / train_cfg.batch_size as f64);
            opt.apply(&adamw_cfg, &mut model.params, &total);
            epoch_loss += -batch_loss / train_cfg.batch_size as f64;
        }
        epochs_completed = epoch + 1;
        let val = if train_cfg.val_tasks > 0 {
            Some(
                mean_loglik_over_stream(
                    &model, &sampler, &process, train_cfg.seed, "val", Mode::Id,
                    train_cfg.val_tasks, false,
                )?
                .0,
            )
        } else {
            None
        };
        let row = LossRow {
            epoch,
            train_loss: epoch_loss / train_cfg.iters_per_epoch as f64,
            val_loglik: val,
        };
        progress(&row);
        loss_curve.push(row);
        if let (Some(patience), Some(val)) = (train_cfg.early_stop_patience, val) {
            if val > best_val {
                best_val = val;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    Ok(Checkpoint {
        model: model_cfg,
        train: train_cfg,
        sampler,
        process,
        config_hash: hash,
        epochs_completed,
        loss_curve,
        aborted,
        params: model.params.to_raw(),
        optimizer: opt,
    })
}

/// The named training runs the quantitative acceptance checks compare.
/// Both the batch trainer and the acceptance suite resolve runs through this
/// table so the configurations cannot drift apart.
pub mod presets {
    use super::TrainConfig;
    use crate::models::{Family, ModelConfig};

    pub struct Preset {
        pub name: &'static str,
        pub model: ModelConfig,
        pub train: TrainConfig,
    }

    pub const ACCEPTANCE_SEED: u64 = 100;

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            iters_per_epoch: 1000,
            batch_size: 16,
            seed: ACCEPTANCE_SEED,
            val_tasks: 500,
            early_stop_patience: None,
            ..Default::default()
        }
    }

    pub fn acceptance_presets() -> Vec<Preset> {
        let mut tilde_b1 = ModelConfig::new(Family::ConvCnp, true);
        tilde_b1.bank.b = 1;
        vec![
            Preset { name: "convcnp_t", model: ModelConfig::new(Family::ConvCnp, false), train: train_cfg() },
            Preset { name: "convcnp_tilde_b4", model: ModelConfig::new(Family::ConvCnp, true), train: train_cfg() },
            Preset { name: "convcnp_tilde_b1", model: tilde_b1, train: train_cfg() },
            Preset { name: "tnp", model: ModelConfig::new(Family::Tnp, false), train: train_cfg() },
            Preset { name: "tetnp_t", model: ModelConfig::new(Family::TeTnp, false), train: train_cfg() },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Id,
    Ood,
    ContextAsTarget,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_loglik: f64,
    pub stderr: f64,
    pub mode: EvalMode,
    pub n_tasks: usize,
    pub zero_bank: bool,
    pub model_hash: String,
    pub config_hash: String,
}

fn mean_loglik_over_stream(
    model: &ModelInstance,
    sampler: &TaskSamplerConfig,
    process: &GibbsProcessConfig,
    seed: u64,
    purpose: &str,
    mode: Mode,
    n_tasks: usize,
    ctx_as_target: bool,
) -> Result<(f64, f64)> {
    let logliks: Vec<Result<f64>> = (0..n_tasks as u64)
        .into_par_iter()
        .map(|i| {
            let task = sample_task(derive_seed(seed, purpose, i), mode, sampler, process)?;
            let task = if ctx_as_target { context_as_target(&task) } else { task };
            model.task_loglik(&task, true)
        })
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for ll in &logliks {
        let v = *ll.as_ref().map_err(|e| Error::Numerical(e.to_string()))?;
        sum += v;
        sum_sq += v * v;
    }
    let n = n_tasks as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Hash of the parameter values (order and bits), identifying a trained model.
pub fn model_hash(params: &ParamStore) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, tensor) in params.iter() {
        hasher.update(name.as_bytes());
        for v in tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Evaluate a model over a fresh task stream disjoint from the training
/// streams. `zero_bank` forces the strict path of tilde models.
pub fn evaluate(
    model: &ModelInstance,
    sampler: &TaskSamplerConfig,
    process: &GibbsProcessConfig,
    mode: EvalMode,
    n_tasks: usize,
    zero_bank: bool,
    eval_seed: u64,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    let (purpose, sample_mode, ctx) = match mode {
        EvalMode::Id => ("eval-id", Mode::Id, false),
        EvalMode::Ood => ("eval-ood", Mode::Ood, false),
        EvalMode::ContextAsTarget => ("eval-ctx", Mode::Id, true),
    };
    let logliks: Vec<Result<f64>> = (0..n_tasks as u64)
        .into_par_iter()
        .map(|i| {
            let task = sample_task(derive_seed(eval_seed, purpose, i), sample_mode, sampler, process)?;
            let task = if ctx { context_as_target(&task) } else { task };
            model.task_loglik(&task, !zero_bank)
        })
        .collect();
    let mut vals = Vec::with_capacity(n_tasks);
    for ll in logliks {
        vals.push(ll?);
    }
    let n = n_tasks as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(EvalReport {
        mean_loglik: mean,
        stderr: (var / n).sqrt(),
        mode,
        n_tasks,
        zero_bank,
        model_hash: model_hash(&model.params),
        config_hash: config_hash(&(sampler, process)),
    })
}
