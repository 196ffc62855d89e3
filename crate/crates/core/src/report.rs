//! Config-driven experiment runner: training/evaluation/ablation/operator-lab
//! experiments from a single JSON config with dotted-path overrides,
//! machine-readable CSV/JSON artifacts, deterministic SVG task plots, and an
//! idempotence guard keyed on the config hash.

use crate::eqlab::{run_operator_lab, DeviationNorm};
use crate::models::{GaussianPrediction, ModelConfig, ModelInstance};
use crate::taskgen::{
    config_hash, derive_seed, gp_posterior_loglik_mixture, sample_task, stream_rng,
    GibbsProcessConfig, Mode, Task, TaskSamplerConfig,
};
use crate::training::{evaluate, train, Checkpoint, EvalMode, EvalReport, TrainConfig};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Train,
    Eval,
    AblateB,
    Eqlab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small budgets that run on a laptop in minutes.
    Desk,
    /// The budgets behind the headline numbers.
    Paper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_tasks: usize,
    pub seed: u64,
    /// Also evaluate with the context re-used as targets (the protocol with a
    /// known ground-truth value).
    pub context_as_target: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_tasks: 2000, seed: 7, context_as_target: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub profile: Profile,
    /// Short name used in artifact rows.
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: TaskSamplerConfig,
    pub process: GibbsProcessConfig,
    pub eval: EvalSettings,
    /// Bank sizes visited by the ablate_b experiment.
    pub ablate_b: Vec<usize>,
    /// Existing checkpoint consumed by the eval experiment.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.process.validate()?;
        if self.label.is_empty() {
            return Err(Error::Config("label must be nonempty".into()));
        }
        if self.experiment == Experiment::Eval && self.checkpoint.is_none() {
            return Err(Error::Config("eval experiment needs a checkpoint path".into()));
        }
        if self.experiment == Experiment::AblateB && self.ablate_b.is_empty() {
            return Err(Error::Config("ablate_b experiment needs at least one bank size".into()));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Train,
            profile: Profile::Desk,
            label: "convcnp_tilde".into(),
            model: ModelConfig::new(crate::models::Family::ConvCnp, true),
            train: TrainConfig::default(),
            sampler: TaskSamplerConfig::default(),
            process: GibbsProcessConfig::default(),
            eval: EvalSettings::default(),
            ablate_b: vec![0, 1, 2, 4, 8, 16],
            checkpoint: None,
            output_dir: PathBuf::from("artifacts"),
        }
    }
}

/// Apply `--set path.to.key=value` overrides to a JSON config document.
/// Unknown paths are collected and reported together.
pub fn apply_overrides(doc: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    let mut bad = Vec::new();
    for set in sets {
        let Some((path, raw)) = set.split_once('=') else {
            bad.push(format!("{set} (expected key=value)"));
            continue;
        };
        let pointer = format!("/{}", path.replace('.', "/"));
        match doc.pointer_mut(&pointer) {
            Some(slot) => {
                // accept any JSON scalar/structure, falling back to a string
                *slot = serde_json::from_str(raw)
                    .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            }
            None => bad.push(path.to_string()),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config keys: {}", bad.join(", "))))
    }
}

/// Parse a config document and apply overrides.
pub fn parse_config(text: &str, sets: &[String]) -> Result<ExperimentConfig> {
    let mut doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
    apply_overrides(&mut doc, sets)?;
    let cfg: ExperimentConfig = serde_json::from_value(doc)
        .map_err(|e| Error::Config(format!("config schema error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, sets: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, sets)
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

/// `git describe` of the working tree, or "unknown" outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Provenance stamped into every artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub git: String,
    pub seed: u64,
}

impl Meta {
    fn for_config(cfg: &ExperimentConfig) -> Self {
        Self { config_hash: cfg.hash(), git: git_describe(), seed: cfg.train.seed }
    }

    fn csv_comment(&self) -> String {
        format!("# config_hash={} git={} seed={}\n", self.config_hash, self.git, self.seed)
    }

    fn svg_comment(&self) -> String {
        format!("<!-- config_hash={} git={} seed={} -->\n", self.config_hash, self.git, self.seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: Meta,
    pub experiment: Experiment,
    pub label: String,
    /// "partial" while the experiment runs, "complete" after the last
    /// artifact is written. Timestamps live only here.
    pub status: String,
    pub started_unix: u64,
    pub artifacts: Vec<String>,
}

const SCHEMA_VERSION: u32 = 1;

/// One row of the results table: a model/mode/path combination with its mean
/// per-point log-likelihood and standard error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub mode: String,
    pub zero_bank: bool,
    pub loglik: f64,
    pub stderr: f64,
    pub n_tasks: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsTable {
    pub schema_version: u32,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn new(rows: Vec<ResultRow>) -> Self {
        Self { schema_version: SCHEMA_VERSION, rows }
    }

    pub fn to_csv(&self, meta: &Meta) -> String {
        let mut out = meta.csv_comment();
        out.push_str("model,mode,zero_bank,loglik,stderr,n_tasks\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model, r.mode, r.zero_bank, r.loglik, r.stderr, r.n_tasks
            );
        }
        out
    }
}

fn result_row(label: &str, report: &EvalReport) -> ResultRow {
    let mode = match report.mode {
        EvalMode::Id => "id",
        EvalMode::Ood => "ood",
        EvalMode::ContextAsTarget => "context_as_target",
    };
    ResultRow {
        model: label.to_string(),
        mode: mode.to_string(),
        zero_bank: report.zero_bank,
        loglik: report.mean_loglik,
        stderr: report.stderr,
        n_tasks: report.n_tasks,
    }
}

fn loss_csv(ckpt: &Checkpoint, meta: &Meta) -> String {
    let mut out = meta.csv_comment();
    out.push_str("epoch,train_loss,val_loglik\n");
    for row in &ckpt.loss_curve {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.epoch,
            row.train_loss,
            row.val_loglik.map_or(String::new(), |v| v.to_string())
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

/// Run one experiment end to end. The output directory is keyed on the
/// config hash; a completed run with the same hash is not overwritten unless
/// `force` is set. A failure part-way leaves a MANIFEST with status
/// "partial".
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let meta = Meta::for_config(cfg);
    let dir = cfg.output_dir.join(format!("{}-{}", cfg.label, meta.config_hash));
    let manifest_path = dir.join("MANIFEST.json");
    if manifest_path.exists() && !force {
        let existing: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if existing.status == "complete" && existing.meta.config_hash == meta.config_hash {
            return Err(Error::Config(format!(
                "output {} already holds a completed run for config hash {}; pass --force to overwrite",
                dir.display(),
                meta.config_hash
            )));
        }
    }
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Manifest {
        meta: meta.clone(),
        experiment: cfg.experiment,
        label: cfg.label.clone(),
        status: "partial".into(),
        started_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        artifacts: Vec::new(),
    };
    write_json(&manifest_path, &manifest)?;

    let mut artifacts = Vec::new();
    let mut emit = |manifest: &mut Manifest, path: PathBuf| {
        manifest.artifacts.push(path.file_name().unwrap_or_default().to_string_lossy().into());
        artifacts.push(path);
    };

    match cfg.experiment {
        Experiment::Train => {
            let ckpt = train(cfg.model, cfg.train.clone(), cfg.sampler, cfg.process, |_| {})?;
            let ckpt_path = dir.join("checkpoint.ckpt.json");
            ckpt.save(&ckpt_path)?;
            emit(&mut manifest, ckpt_path);
            let loss_path = dir.join("loss.csv");
            std::fs::write(&loss_path, loss_csv(&ckpt, &meta))?;
            emit(&mut manifest, loss_path);
            if let Some(abort) = &ckpt.aborted {
                write_json(&manifest_path, &manifest)?;
                return Err(Error::Numerical(format!(
                    "training aborted at epoch {} iter {}: {}",
                    abort.epoch, abort.iter, abort.message
                )));
            }
            // plot a fixed evaluation task with the fresh checkpoint
            let model = ckpt.model_instance()?;
            let task = sample_task(
                derive_seed(cfg.eval.seed, "plot", 0),
                Mode::Id,
                &cfg.sampler,
                &cfg.process,
            )?;
            let svg_path = dir.join("task.svg");
            std::fs::write(&svg_path, plot_task(&model, &task, &meta)?)?;
            emit(&mut manifest, svg_path);
        }
        Experiment::Eval => {
            let ckpt_path = cfg.checkpoint.as_ref().expect("validated above");
            let ckpt = Checkpoint::load(ckpt_path)?;
            let model = ckpt.model_instance()?;
            let table = standard_eval_table(&cfg.label, &model, cfg)?;
            let path = dir.join("results.csv");
            std::fs::write(&path, table.to_csv(&meta))?;
            emit(&mut manifest, path);
            let path = dir.join("results.json");
            write_json_with_meta(&path, &meta, &table)?;
            emit(&mut manifest, path);
        }
        Experiment::AblateB => {
            let mut rows = Vec::new();
            for &b in &cfg.ablate_b {
                let mut model_cfg = cfg.model;
                model_cfg.tilde = true;
                model_cfg.bank.b = b;
                let ckpt = train(model_cfg, cfg.train.clone(), cfg.sampler, cfg.process, |_| {})?;
                if let Some(abort) = &ckpt.aborted {
                    write_json(&manifest_path, &manifest)?;
                    return Err(Error::Numerical(format!(
                        "B={b} run aborted at epoch {} iter {}: {}",
                        abort.epoch, abort.iter, abort.message
                    )));
                }
                let ckpt_path = dir.join(format!("b{b}.ckpt.json"));
                ckpt.save(&ckpt_path)?;
                emit(&mut manifest, ckpt_path);
                let model = ckpt.model_instance()?;
                let report = evaluate(
                    &model,
                    &cfg.sampler,
                    &cfg.process,
                    EvalMode::Id,
                    cfg.eval.n_tasks,
                    false,
                    cfg.eval.seed,
                )?;
                rows.push((b, report));
            }
            let mut csv = meta.csv_comment();
            csv.push_str("b,loglik,stderr,n_tasks\n");
            for (b, r) in &rows {
                let _ = writeln!(csv, "{},{},{},{}", b, r.mean_loglik, r.stderr, r.n_tasks);
            }
            let path = dir.join("ablation.csv");
            std::fs::write(&path, csv)?;
            emit(&mut manifest, path);
        }
        Experiment::Eqlab => {
            let (n_max, translations) = match cfg.profile {
                Profile::Desk => (4, 10),
                Profile::Paper => (8, 20),
            };
            let mut rng = stream_rng(cfg.eval.seed, "eqlab", 0);
            let report = run_operator_lab(n_max, translations, &mut rng)?;
            let path = dir.join("eqlab.json");
            write_json_with_meta(&path, &meta, &report)?;
            emit(&mut manifest, path);
            let path = dir.join("eqlab.csv");
            std::fs::write(&path, format!("{}{}", meta.csv_comment(), report.to_csv()))?;
            emit(&mut manifest, path);
            if !report.passed {
                write_json(&manifest_path, &manifest)?;
                return Err(Error::Numerical("operator lab checks failed".into()));
            }
        }
    }

    manifest.status = "complete".into();
    write_json(&manifest_path, &manifest)?;
    artifacts.push(manifest_path);
    Ok(RunOutcome { dir, artifacts })
}

/// The evaluation rows behind the 1-D results table: ID and OOD for the
/// model (both bank paths for tilde models), the mixture GP oracle on the
/// same streams, and optionally the context-as-target protocol.
pub fn standard_eval_table(
    label: &str,
    model: &ModelInstance,
    cfg: &ExperimentConfig,
) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    let mut modes = vec![EvalMode::Id, EvalMode::Ood];
    if cfg.eval.context_as_target {
        modes.push(EvalMode::ContextAsTarget);
    }
    for mode in modes {
        let report =
            evaluate(model, &cfg.sampler, &cfg.process, mode, cfg.eval.n_tasks, false, cfg.eval.seed)?;
        rows.push(result_row(label, &report));
        if model.config.tilde && mode == EvalMode::Id {
            let strict = evaluate(
                model,
                &cfg.sampler,
                &cfg.process,
                mode,
                cfg.eval.n_tasks,
                true,
                cfg.eval.seed,
            )?;
            rows.push(result_row(label, &strict));
        }
    }
    for (mode, purpose, task_mode) in
        [(EvalMode::Id, "eval-id", Mode::Id), (EvalMode::Ood, "eval-ood", Mode::Ood)]
    {
        let mut vals = Vec::with_capacity(cfg.eval.n_tasks);
        for i in 0..cfg.eval.n_tasks as u64 {
            let task =
                sample_task(derive_seed(cfg.eval.seed, purpose, i), task_mode, &cfg.sampler, &cfg.process)?;
            vals.push(gp_posterior_loglik_mixture(&task, &cfg.process)?);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        rows.push(ResultRow {
            model: "gp_oracle".into(),
            mode: match mode {
                EvalMode::Id => "id".into(),
                _ => "ood".into(),
            },
            zero_bank: false,
            loglik: mean,
            stderr: (var / n).sqrt(),
            n_tasks: vals.len(),
        });
    }
    Ok(ResultsTable::new(rows))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_json_with_meta<T: Serialize>(path: &Path, meta: &Meta, value: &T) -> Result<()> {
    let doc = serde_json::json!({ "meta": meta, "data": value });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG task plots
// ---------------------------------------------------------------------------

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const PAD: f64 = 40.0;
const PLOT_POINTS: usize = 200;

/// Deterministic SVG of a task: context points, dotted target-range markers,
/// predictive mean with a ±2σ band, and the strict-path (bank off) overlay.
/// Byte-for-byte reproducible given (checkpoint, task).
pub fn plot_task(model: &ModelInstance, task: &Task, meta: &Meta) -> Result<String> {
    let (xc_lo, xc_hi) = bounds(&task.x_context)
        .or_else(|| bounds(&task.x_target))
        .ok_or_else(|| Error::Config("plot needs at least one point".into()))?;
    // dotted markers at the target range: context interval padded by the
    // target margin
    let range_lo = xc_lo - 1.0;
    let range_hi = xc_hi + 1.0;
    let xs: Vec<f64> = (0..PLOT_POINTS)
        .map(|i| range_lo + (range_hi - range_lo) * i as f64 / (PLOT_POINTS - 1) as f64)
        .collect();
    let with_bank = model.predict_at(&task.x_context, &task.y_context, &xs, true)?;
    let strict = model.predict_at(&task.x_context, &task.y_context, &xs, false)?;

    // data bounds across both predictions and the context points
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for pred in [&with_bank, &strict] {
        for (m, v) in pred.mean.iter().zip(&pred.variance) {
            let s = v.sqrt();
            y_lo = y_lo.min(m - 2.0 * s);
            y_hi = y_hi.max(m + 2.0 * s);
        }
    }
    for &y in &task.y_context {
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !y_lo.is_finite() || !y_hi.is_finite() {
        return Err(Error::Numerical("non-finite values in plot data".into()));
    }
    let y_pad = 0.05 * (y_hi - y_lo).max(1e-9);
    let (y_lo, y_hi) = (y_lo - y_pad, y_hi + y_pad);
    let to_x = |x: f64| PAD + (x - range_lo) / (range_hi - range_lo) * (SVG_W - 2.0 * PAD);
    let to_y = |y: f64| SVG_H - PAD - (y - y_lo) / (y_hi - y_lo) * (SVG_H - 2.0 * PAD);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str(&meta.svg_comment());
    svg.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        SVG_W - 2.0 * PAD,
        SVG_H - 2.0 * PAD
    ));
    // dotted target-range markers
    for xr in [range_lo, range_hi] {
        svg.push_str(&format!(
            "<line x1=\"{0:.3}\" y1=\"{PAD}\" x2=\"{0:.3}\" y2=\"{1:.3}\" stroke=\"#000000\" stroke-width=\"1\" stroke-dasharray=\"3,4\"/>\n",
            to_x(xr),
            SVG_H - PAD
        ));
    }
    // bands then means: strict (red) under approximate (blue)
    for (pred, band, line) in
        [(&strict, "#d6272833", "#d62728"), (&with_bank, "#1f77b433", "#1f77b4")]
    {
        svg.push_str(&band_path(&xs, pred, to_x, to_y, band));
        svg.push_str(&mean_path(&xs, pred, to_x, to_y, line));
    }
    // context points
    for (x, y) in task.x_context.iter().zip(&task.y_context) {
        svg.push_str(&format!(
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"#000000\"/>\n",
            to_x(*x),
            to_y(*y)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

fn band_path(
    xs: &[f64],
    pred: &GaussianPrediction,
    to_x: impl Fn(f64) -> f64,
    to_y: impl Fn(f64) -> f64,
    fill: &str,
) -> String {
    let mut d = String::from("M");
    for (i, (x, (m, v))) in xs.iter().zip(pred.mean.iter().zip(&pred.variance)).enumerate() {
        let _ = write!(d, "{}{:.3},{:.3}", if i == 0 { " " } else { " L " }, to_x(*x), to_y(m + 2.0 * v.sqrt()));
    }
    for (x, (m, v)) in xs.iter().zip(pred.mean.iter().zip(&pred.variance)).rev() {
        let _ = write!(d, " L {:.3},{:.3}", to_x(*x), to_y(m - 2.0 * v.sqrt()));
    }
    d.push_str(" Z");
    format!("<path d=\"{d}\" fill=\"{fill}\" stroke=\"none\"/>\n")
}

fn mean_path(
    xs: &[f64],
    pred: &GaussianPrediction,
    to_x: impl Fn(f64) -> f64,
    to_y: impl Fn(f64) -> f64,
    stroke: &str,
) -> String {
    let mut d = String::from("M");
    for (i, (x, m)) in xs.iter().zip(&pred.mean).enumerate() {
        let _ = write!(d, "{}{:.3},{:.3}", if i == 0 { " " } else { " L " }, to_x(*x), to_y(*m));
    }
    format!("<path d=\"{d}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>\n")
}

/// Measure the equivariance deviation of a tilde checkpoint on a task
/// stream, for the CLI and report consumers.
pub fn deviation_for_checkpoint(
    ckpt: &Checkpoint,
    n_tasks: usize,
    seed: u64,
    norm: DeviationNorm,
) -> Result<crate::eqlab::DeviationReport> {
    let model = ckpt.model_instance()?;
    let tasks: Result<Vec<Task>> = (0..n_tasks as u64)
        .map(|i| sample_task(derive_seed(seed, "deviation", i), Mode::Id, &ckpt.sampler, &ckpt.process))
        .collect();
    crate::eqlab::equivariance_deviation(&model, &tasks?, norm)
}
