//! Measure the micro smoke-run learning curve to freeze the test threshold.

use aenp::models::{Family, ModelConfig};
use aenp::taskgen::{GibbsProcessConfig, TaskSamplerConfig};
use aenp::training::{train, TrainConfig};

fn main() {
    let process = GibbsProcessConfig { ell_low: 1.0, ell_high: 1.0, ..Default::default() };
    let sampler = TaskSamplerConfig { n_context_max: 16, n_target: 24, ..Default::default() };
    for lr in [5e-4, 2e-3, 5e-3] {
        let cfg = ModelConfig::micro(Family::ConvCnp, false);
        let train_cfg = TrainConfig {
            epochs: 4,
            iters_per_epoch: 50,
            batch_size: 4,
            val_tasks: 0,
            seed: 13,
            lr,
            ..Default::default()
        };
        print!("lr {lr}: ");
        train(cfg, train_cfg, sampler, process, |row| {
            print!("{:.3} ", row.train_loss);
        })
        .unwrap();
        println!();
    }
}
