//! Train the checkpoint set used by the quantitative acceptance checks.
//! Skips any run whose checkpoint (matching the current setup hash) already
//! exists, so the batch can be resumed after an interruption.
//!
//! Usage: train_acceptance <output-dir>

use aenp::taskgen::{GibbsProcessConfig, TaskSamplerConfig};
use aenp::training::{presets::acceptance_presets, train, train_setup_hash, Checkpoint};
use std::path::PathBuf;
use std::time::Instant;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .expect("usage: train_acceptance <output-dir>")
        .into();
    std::fs::create_dir_all(&out).expect("create output dir");
    let sampler = TaskSamplerConfig::default();
    let process = GibbsProcessConfig::default();
    for preset in acceptance_presets() {
        let hash = train_setup_hash(&preset.model, &preset.train, &sampler, &process);
        let path = out.join(format!("{}.ckpt.json", preset.name));
        if let Ok(existing) = Checkpoint::load(&path) {
            if existing.config_hash == hash && existing.aborted.is_none() {
                println!("{}: checkpoint up to date ({hash}), skipping", preset.name);
                continue;
            }
        }
        println!("{}: training (setup hash {hash})", preset.name);
        let start = Instant::now();
        let name = preset.name;
        let ckpt = train(preset.model, preset.train, sampler, process, |row| {
            println!(
                "{name} epoch {:>2}: train loss {:+.4}, val loglik {}",
                row.epoch,
                row.train_loss,
                row.val_loglik.map_or("-".to_string(), |v| format!("{v:+.4}")),
            );
        })
        .expect("training run failed");
        if let Some(abort) = &ckpt.aborted {
            eprintln!("{name}: ABORTED at epoch {} iter {}: {}", abort.epoch, abort.iter, abort.message);
        }
        ckpt.save(&path).expect("save checkpoint");
        println!(
            "{name}: done in {:.1} min -> {}",
            start.elapsed().as_secs_f64() / 60.0,
            path.display()
        );
    }
}
