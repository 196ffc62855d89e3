//! Rough per-task cost of a forward+backward pass at desk-scale dimensions.
//! Run with --release to see realistic numbers.

use aenp::models::{mean_loglik_on_tape, Family, ModelConfig, ModelInstance};
use aenp::taskgen::{derive_seed, sample_task, stream_rng, GibbsProcessConfig, Mode, TaskSamplerConfig};
use aenp::tensor::{BoundParams, GradMap, Tape};
use std::time::Instant;

fn main() {
    let sampler = TaskSamplerConfig::default();
    let proc_cfg = GibbsProcessConfig::default();
    let tasks: Vec<_> = (0..24)
        .map(|i| sample_task(derive_seed(1, "bench", i), Mode::Id, &sampler, &proc_cfg).unwrap())
        .collect();
    for family in [Family::ConvCnp, Family::TeTnp, Family::PtTeTnp, Family::Tnp] {
        let mut rng = stream_rng(2, "bench-init", 0);
        let model = ModelInstance::new(ModelConfig::new(family, true), &mut rng).unwrap();
        let start = Instant::now();
        for task in &tasks {
            let tape = Tape::new();
            let bound = BoundParams::bind(&tape, &model.params);
            let raw = model
                .forward(&tape, &bound, &task.x_context, &task.y_context, &task.x_target, true)
                .unwrap();
            let ll = mean_loglik_on_tape(&tape, raw, &task.y_target).unwrap();
            let grads = tape.backward(ll).unwrap();
            let mut acc = GradMap::new();
            bound.accumulate_grads(&grads, &mut acc);
        }
        let per_task = start.elapsed().as_secs_f64() / tasks.len() as f64;
        println!("{family:?}: {:.1} ms per forward+backward", per_task * 1e3);
    }
}
