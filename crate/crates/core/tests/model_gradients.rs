//! Finite-difference gradient checks of the full training objective through
//! micro-sized models, covering every parameter group.

use aenp::models::{mean_loglik_on_tape, Family, ModelConfig, ModelInstance};
use aenp::taskgen::{sample_task, stream_rng, GibbsProcessConfig, Mode, Task, TaskSamplerConfig};
use aenp::tensor::{BoundParams, GradMap, ParamStore, Tape, Tensor};
use rand::Rng;

fn micro_task() -> Task {
    let sampler = TaskSamplerConfig { n_context_max: 6, n_target: 5, ..Default::default() };
    sample_task(414, Mode::Id, &sampler, &GibbsProcessConfig::default()).unwrap()
}

fn loss(model: &ModelInstance, params: &ParamStore, task: &Task) -> f64 {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params);
    let raw = model
        .forward(&tape, &bound, &task.x_context, &task.y_context, &task.x_target, true)
        .unwrap();
    let ll = mean_loglik_on_tape(&tape, raw, &task.y_target).unwrap();
    tape.value(ll).data()[0]
}

fn analytic_grads(model: &ModelInstance, task: &Task) -> GradMap {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &model.params);
    let raw = model
        .forward(&tape, &bound, &task.x_context, &task.y_context, &task.x_target, true)
        .unwrap();
    let ll = mean_loglik_on_tape(&tape, raw, &task.y_target).unwrap();
    let grads = tape.backward(ll).unwrap();
    let mut acc = GradMap::new();
    bound.accumulate_grads(&grads, &mut acc);
    acc
}

fn check_model(family: Family, tilde: bool, seed: u64) {
    let mut rng = stream_rng(seed, "grad-check-init", 0);
    let model = ModelInstance::new(ModelConfig::micro(family, tilde), &mut rng).unwrap();
    let task = micro_task();
    let grads = analytic_grads(&model, &task);
    let eps = 1e-5;
    let mut checked = 0usize;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let base = model.params.get(&name).unwrap().clone();
        let n = base.numel();
        let g = grads.get(&name);
        // probe at most 8 elements per group to keep the runtime sane
        let probes: Vec<usize> = if n <= 8 {
            (0..n).collect()
        } else {
            let mut idx_rng = stream_rng(seed, "grad-check-idx", checked as u64);
            (0..8).map(|_| idx_rng.gen_range(0..n)).collect()
        };
        for i in probes {
            let mut plus = base.to_vec();
            let mut minus = base.to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            let mut p = model.params.clone();
            p.set(&name, base.with_shape_of(plus));
            let fp = loss(&model, &p, &task);
            p.set(&name, base.with_shape_of(minus));
            let fm = loss(&model, &p, &task);
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = g.map(|v| v[i]).unwrap_or(0.0);
            let denom = 1.0f64.max(numeric.abs());
            assert!(
                (analytic - numeric).abs() / denom <= 1e-4,
                "{family:?} param {name}[{i}]: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 20, "{family:?}: too few gradient probes ({checked})");
}

#[test]
fn convcnp_micro_gradients() {
    check_model(Family::ConvCnp, true, 21);
}

#[test]
fn equivcnp_micro_gradients() {
    check_model(Family::EquivCnp, false, 22);
}

#[test]
fn relaxedconvcnp_micro_gradients() {
    check_model(Family::RelaxedConvCnp, false, 23);
}

#[test]
fn tetnp_micro_gradients() {
    check_model(Family::TeTnp, true, 24);
}

#[test]
fn pttetnp_micro_gradients() {
    check_model(Family::PtTeTnp, false, 25);
}

#[test]
fn tnp_micro_gradients() {
    check_model(Family::Tnp, false, 26);
}

/// Helper mirroring Tensor::new with the original shape.
trait WithShape {
    fn with_shape_of(&self, data: Vec<f64>) -> Tensor;
}

impl WithShape for Tensor {
    fn with_shape_of(&self, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape().to_vec(), data).unwrap()
    }
}
