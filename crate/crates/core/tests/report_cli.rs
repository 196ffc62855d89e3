//! Report/CLI contracts: config parsing and overrides, the idempotence
//! guard, artifact shapes and provenance stamps, SVG determinism, and the
//! binary's exit codes.

use aenp::models::{Family, ModelConfig, ModelInstance};
use aenp::report::{
    apply_overrides, parse_config, plot_task, run_experiment, standard_eval_table, Experiment,
    ExperimentConfig, Meta, Profile,
};
use aenp::taskgen::{sample_task, stream_rng, Mode, Task};
use std::process::Command;

fn desk_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig::micro(Family::ConvCnp, true);
    cfg.train.epochs = 1;
    cfg.train.iters_per_epoch = 2;
    cfg.train.batch_size = 2;
    cfg.train.val_tasks = 0;
    cfg.eval.n_tasks = 5;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn default_config_roundtrips_and_overrides_apply() {
    let cfg = ExperimentConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    let parsed = parse_config(&text, &[]).unwrap();
    assert_eq!(parsed.hash(), cfg.hash());

    let parsed = parse_config(
        &text,
        &["train.lr=0.001".into(), "model.tilde=false".into(), "label=other".into()],
    )
    .unwrap();
    assert_eq!(parsed.train.lr, 1e-3);
    assert!(!parsed.model.tilde);
    assert_eq!(parsed.label, "other");
    // overrides change the hash
    assert_ne!(parsed.hash(), cfg.hash());
}

#[test]
fn unknown_override_keys_are_listed() {
    let cfg = ExperimentConfig::default();
    let mut doc = serde_json::to_value(&cfg).unwrap();
    let err = apply_overrides(
        &mut doc,
        &["train.nope=1".into(), "bogus.key=2".into(), "train.lr=0.01".into()],
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("train.nope") && msg.contains("bogus.key"), "{msg}");
    assert!(!msg.contains("train.lr"));
}

#[test]
fn schema_error_is_config_error() {
    let text = r#"{"experiment": "train", "unknown_top": 1}"#;
    let err = parse_config(text, &[]).unwrap_err();
    assert!(matches!(err, aenp::Error::Config(_)), "{err}");
}

#[test]
fn eqlab_experiment_emits_artifacts_and_guards_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(tmp.path());
    cfg.experiment = Experiment::Eqlab;
    cfg.profile = Profile::Desk;
    let outcome = run_experiment(&cfg, false).unwrap();
    let json = std::fs::read_to_string(outcome.dir.join("eqlab.json")).unwrap();
    assert!(json.contains("\"meta\"") && json.contains(&cfg.hash()));
    let csv = std::fs::read_to_string(outcome.dir.join("eqlab.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={}", cfg.hash())));
    assert!(csv.contains("operator,n,error,equivariance_residual"));
    let manifest = std::fs::read_to_string(outcome.dir.join("MANIFEST.json")).unwrap();
    assert!(manifest.contains("\"complete\""));

    // identical rerun is refused without --force
    let err = run_experiment(&cfg, false).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    run_experiment(&cfg, true).unwrap();
}

#[test]
fn train_experiment_emits_checkpoint_loss_curve_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(tmp.path());
    cfg.experiment = Experiment::Train;
    let outcome = run_experiment(&cfg, false).unwrap();
    let ckpt =
        aenp::training::Checkpoint::load(&outcome.dir.join("checkpoint.ckpt.json")).unwrap();
    assert_eq!(ckpt.epochs_completed, 1);
    let loss = std::fs::read_to_string(outcome.dir.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loglik");
    assert_eq!(lines.count(), 1); // one epoch
    let svg = std::fs::read_to_string(outcome.dir.join("task.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains(&format!("config_hash={}", cfg.hash())));
}

#[test]
fn eval_experiment_builds_results_table_with_oracle_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(tmp.path());
    cfg.experiment = Experiment::Eval;
    // eval without a checkpoint is a config error
    assert!(matches!(run_experiment(&cfg, false).unwrap_err(), aenp::Error::Config(_)));

    let mut rng = stream_rng(3, "init", 0);
    let model = ModelInstance::new(cfg.model, &mut rng).unwrap();
    let table = standard_eval_table("micro", &model, &cfg).unwrap();
    let models: Vec<&str> = table.rows.iter().map(|r| r.model.as_str()).collect();
    assert!(models.contains(&"micro") && models.contains(&"gp_oracle"));
    // tilde model gets a strict-path ID row
    assert!(table.rows.iter().any(|r| r.model == "micro" && r.mode == "id" && r.zero_bank));
    for row in &table.rows {
        assert!(row.stderr.is_finite() && row.stderr >= 0.0);
        assert!(row.n_tasks > 0);
    }
    let meta = Meta { config_hash: cfg.hash(), git: "test".into(), seed: 0 };
    let csv = table.to_csv(&meta);
    assert!(csv.contains("model,mode,zero_bank,loglik,stderr,n_tasks"));
}

#[test]
fn plot_is_deterministic_and_strict_curves_coincide() {
    let cfg = ModelConfig::micro(Family::ConvCnp, false);
    let mut rng = stream_rng(5, "init", 0);
    let model = ModelInstance::new(cfg, &mut rng).unwrap();
    let task = sample_task(
        42,
        Mode::Id,
        &aenp::taskgen::TaskSamplerConfig::default(),
        &aenp::taskgen::GibbsProcessConfig::default(),
    )
    .unwrap();
    let meta = Meta { config_hash: "abc".into(), git: "test".into(), seed: 42 };
    let a = plot_task(&model, &task, &meta).unwrap();
    let b = plot_task(&model, &task, &meta).unwrap();
    assert_eq!(a, b, "plot bytes must be deterministic");
    // strict model: the bank-on (blue) and bank-off (red) mean paths coincide
    let extract = |color: &str| -> String {
        a.lines()
            .find(|l| l.contains(color) && l.contains("fill=\"none\""))
            .unwrap_or_else(|| panic!("no mean path for {color}"))
            .to_string()
            .replace(color, "")
    };
    assert_eq!(extract("#1f77b4"), extract("#d62728"));
    // dotted target-range markers are present
    assert_eq!(a.matches("stroke-dasharray").count(), 2);
}

#[test]
fn plot_renders_prior_band_for_empty_context() {
    let cfg = ModelConfig::micro(Family::ConvCnp, true);
    let mut rng = stream_rng(6, "init", 0);
    let model = ModelInstance::new(cfg, &mut rng).unwrap();
    let task = Task {
        x_context: vec![],
        y_context: vec![],
        x_target: vec![-1.0, 0.0, 1.0],
        y_target: vec![0.0, 0.0, 0.0],
        orientation: 0,
        mode: Mode::Id,
        seed: 0,
    };
    let meta = Meta { config_hash: "abc".into(), git: "test".into(), seed: 0 };
    let svg = plot_task(&model, &task, &meta).unwrap();
    assert!(svg.contains("<path")); // band + mean rendered
    assert!(!svg.contains("<circle")); // no context points
}

#[test]
fn cli_exit_codes_and_verbs() {
    let bin = env!("CARGO_BIN_EXE_aenp");
    let tmp = tempfile::tempdir().unwrap();

    // config error -> exit 2
    let missing = Command::new(bin)
        .args(["eqlab", "--config", "/nonexistent.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let mut cfg = desk_config(tmp.path());
    cfg.experiment = Experiment::Eqlab;
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    // bad override -> exit 2
    let bad = Command::new(bin)
        .args(["eqlab", "--config"])
        .arg(&cfg_path)
        .args(["--set", "no.such.key=1"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));

    // successful eqlab run -> exit 0
    let ok = Command::new(bin).args(["eqlab", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ok.stderr));

    // rerunning the same config hash without --force -> exit 2
    let rerun = Command::new(bin).args(["eqlab", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(rerun.status.code(), Some(2));

    // train a micro checkpoint, then plot from it -> exit 0 and an SVG
    let mut train_cfg = desk_config(tmp.path());
    train_cfg.experiment = Experiment::Train;
    train_cfg.label = "plotsrc".into();
    let train_path = tmp.path().join("train.json");
    std::fs::write(&train_path, serde_json::to_string_pretty(&train_cfg).unwrap()).unwrap();
    let trained = Command::new(bin).args(["train", "--config"]).arg(&train_path).output().unwrap();
    assert_eq!(
        trained.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&trained.stderr)
    );
    let ckpt = tmp
        .path()
        .join(format!("plotsrc-{}", train_cfg.hash()))
        .join("checkpoint.ckpt.json");
    let svg_out = tmp.path().join("plot.svg");
    let plotted = Command::new(bin)
        .arg("plot")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--task-seed", "7", "--out"])
        .arg(&svg_out)
        .output()
        .unwrap();
    assert_eq!(
        plotted.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&plotted.stderr)
    );
    assert!(std::fs::read_to_string(&svg_out).unwrap().starts_with("<svg"));
}
