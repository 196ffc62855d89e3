//! The acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line. Criteria 1-5 and 11 are property-based or exact-oracle
//! checks with no training. Criteria 6-10 consume the trained checkpoints in
//! runs/ (produced by the `train_acceptance` example); when a checkpoint is
//! missing or stale the loader retrains it with the identical deterministic
//! configuration, so the numbers cannot be satisfied by anything but a real
//! training run.
//!
//! All tolerances are pinned in the constants below.

use aenp::eqlab::{
    epsilon_equivariance_check, equivariance_deviation, operator_norm, prop4_check,
    run_operator_lab, thm2_construct, DeviationNorm, FourierSpace, HolderOperator, LinearOperator,
};
use aenp::models::{mean_loglik_on_tape, Family, GaussianPrediction, ModelConfig, ModelInstance};
use aenp::taskgen::{
    context_as_target, derive_seed, gibbs_kernel, gp_posterior_loglik, lengthscale_profile,
    sample_function, sample_task, stationary_se_loglik, stream_rng, GibbsProcessConfig, Mode, Task,
    TaskSamplerConfig,
};
use aenp::tensor::{cholesky, BoundParams, GradMap, Tape, Tensor};
use aenp::training::{
    evaluate, presets::acceptance_presets, train, train_setup_hash, Checkpoint, EvalMode,
};
use rand::Rng;
use std::path::PathBuf;
use std::sync::Mutex;

// ---------------------------------------------------------------------------
// Pinned tolerances
// ---------------------------------------------------------------------------

const EQUIVARIANCE_TOL: f64 = 1e-7; // criterion 1
const GRAD_REL_TOL: f64 = 1e-4; // criterion 3
const ONE_SIDED_TOL: f64 = 1e-10; // criterion 4
const THM2_SV_TOL: f64 = 1e-10; // criterion 5
const LAB_EQUIV_TOL: f64 = 1e-12; // criterion 5
const EPS_BOUND_SLACK: f64 = 1e-6; // criterion 6
const ID_GAP_MIN: f64 = 0.03; // criterion 7
const OOD_GAP_MAX: f64 = 0.05; // criterion 7
const OOD_FLOOR: f64 = -0.7; // criterion 7
const TNP_OOD_CEILING: f64 = -1.0; // criterion 8
const B_GAIN_FRACTION: f64 = 0.6; // criterion 9
const DELTA_RANGE: (f64, f64) = (0.02, 0.30); // criterion 10
const GROUND_TRUTH: f64 = 0.2806; // criterion 11
const GROUND_TRUTH_TOL: f64 = 0.01; // criterion 11
const GROUND_TRUTH_TASKS: u64 = 50_000; // criterion 11

const EVAL_SEED: u64 = 500;
const EVAL_TASKS_ID: usize = 4000;
const EVAL_TASKS_OOD: usize = 3000;

fn verdict(criterion: u32, ok: bool, detail: &str) {
    // one pass/fail line per criterion (visible with --nocapture and in
    // failure output)
    println!("ACCEPTANCE {criterion:02} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {criterion} failed: {detail}");
}

fn default_tasks(purpose: &str, n: u64, mode: Mode) -> Vec<Task> {
    let sampler = TaskSamplerConfig::default();
    let process = GibbsProcessConfig::default();
    (0..n)
        .map(|i| sample_task(derive_seed(999, purpose, i), mode, &sampler, &process).unwrap())
        .collect()
}

fn shifted(task: &Task, delta: f64) -> Task {
    Task {
        x_context: task.x_context.iter().map(|x| x + delta).collect(),
        x_target: task.x_target.iter().map(|x| x + delta).collect(),
        ..task.clone()
    }
}

fn max_pred_diff(a: &GaussianPrediction, b: &GaussianPrediction) -> f64 {
    a.mean
        .iter()
        .zip(&b.mean)
        .chain(a.variance.iter().zip(&b.variance))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Strict equivariance of the full-size equivariant families
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_strict_equivariance() {
    // integer multiples of the 0.05 grid cell so grid models shift exactly
    let shifts = [-5.0, -1.3, 2.7];
    let tasks = default_tasks("acc-equiv", 50, Mode::Id);
    let mut worst = 0.0f64;
    for family in [Family::ConvCnp, Family::EquivCnp, Family::TeTnp, Family::PtTeTnp] {
        let mut rng = stream_rng(601, "acc-init", family as u64);
        let model = ModelInstance::new(ModelConfig::new(family, false), &mut rng).unwrap();
        for task in &tasks {
            let base = model.predict(task, false).unwrap();
            for &delta in &shifts {
                let moved = model.predict(&shifted(task, delta), false).unwrap();
                worst = worst.max(max_pred_diff(&base, &moved));
            }
        }
    }
    // EquivCNP additionally commutes with reflection (2c a cell multiple)
    let mut rng = stream_rng(602, "acc-init", 0);
    let equiv = ModelInstance::new(ModelConfig::new(Family::EquivCnp, false), &mut rng).unwrap();
    let c = 1.3;
    let mut worst_refl = 0.0f64;
    for task in tasks.iter().take(50) {
        let reflected = Task {
            x_context: task.x_context.iter().map(|x| 2.0 * c - x).collect(),
            x_target: task.x_target.iter().map(|x| 2.0 * c - x).collect(),
            ..task.clone()
        };
        let a = equiv.predict(task, false).unwrap();
        let b = equiv.predict(&reflected, false).unwrap();
        worst_refl = worst_refl.max(max_pred_diff(&a, &b));
    }
    verdict(
        1,
        worst <= EQUIVARIANCE_TOL && worst_refl <= EQUIVARIANCE_TOL,
        &format!(
            "shift residual {worst:.2e}, reflection residual {worst_refl:.2e} (tol {EQUIVARIANCE_TOL:.0e})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Tilde collapse and relaxed-zero identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_tilde_collapse() {
    let tasks = default_tasks("acc-collapse", 50, Mode::Id);
    let mut exact = true;
    for family in [Family::ConvCnp, Family::EquivCnp, Family::TeTnp, Family::PtTeTnp] {
        let mut rng = stream_rng(603, "acc-init", family as u64);
        let tilde = ModelInstance::new(ModelConfig::new(family, true), &mut rng).unwrap();
        let mut strict_cfg = tilde.config;
        strict_cfg.tilde = false;
        let strict = ModelInstance::with_params(strict_cfg, tilde.params.clone());
        for task in &tasks {
            let a = tilde.predict(task, false).unwrap();
            let b = strict.predict(task, false).unwrap();
            exact &= a.mean == b.mean && a.variance == b.variance;
        }
    }
    // RelaxedConvCNP with zero modulation equals ConvCNP(T) exactly
    let mut rng = stream_rng(604, "acc-init", 0);
    let relaxed =
        ModelInstance::new(ModelConfig::new(Family::RelaxedConvCnp, false), &mut rng).unwrap();
    let mut params = relaxed.params.clone();
    let names: Vec<String> =
        params.names().filter(|n| n.starts_with("relax.")).map(str::to_string).collect();
    for name in names {
        let shape = params.get(&name).unwrap().shape().to_vec();
        params.set(&name, Tensor::zeros(shape));
    }
    let relaxed = ModelInstance::with_params(relaxed.config, params.clone());
    let plain = ModelInstance::with_params(ModelConfig::new(Family::ConvCnp, false), params);
    let mut relaxed_exact = true;
    for task in tasks.iter().take(50) {
        let a = relaxed.predict(task, false).unwrap();
        let b = plain.predict(task, false).unwrap();
        relaxed_exact &= a.mean == b.mean && a.variance == b.variance;
    }
    verdict(
        2,
        exact && relaxed_exact,
        &format!("bank-zero collapse exact: {exact}, relaxed t_l=0 identity exact: {relaxed_exact}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient checks on micro TE-TNP and micro ConvCNP
// ---------------------------------------------------------------------------

fn grad_check(family: Family, seed: u64) -> (usize, f64) {
    // seeds chosen away from ReLU/softplus kinks, where central differences
    // are meaningless; nondifferentiable points are measure-zero
    let mut rng = stream_rng(seed, "grad-check-init", 0);
    let model = ModelInstance::new(ModelConfig::micro(family, true), &mut rng).unwrap();
    let sampler = TaskSamplerConfig { n_context_max: 6, n_target: 5, ..Default::default() };
    let task = sample_task(414, Mode::Id, &sampler, &GibbsProcessConfig::default()).unwrap();

    let loss = |params: &aenp::tensor::ParamStore| -> f64 {
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, params);
        let raw = model
            .forward(&tape, &bound, &task.x_context, &task.y_context, &task.x_target, true)
            .unwrap();
        let ll = mean_loglik_on_tape(&tape, raw, &task.y_target).unwrap();
        tape.value(ll).data()[0]
    };
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &model.params);
    let raw = model
        .forward(&tape, &bound, &task.x_context, &task.y_context, &task.x_target, true)
        .unwrap();
    let ll = mean_loglik_on_tape(&tape, raw, &task.y_target).unwrap();
    let grads = tape.backward(ll).unwrap();
    let mut analytic = GradMap::new();
    bound.accumulate_grads(&grads, &mut analytic);

    let eps = 1e-5;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let base = model.params.get(&name).unwrap().clone();
        let n = base.numel();
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
            p.set(&name, Tensor::new(base.shape().to_vec(), plus).unwrap());
            let fp = loss(&p);
            p.set(&name, Tensor::new(base.shape().to_vec(), minus).unwrap());
            let fm = loss(&p);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.get(&name).map(|v| v[i]).unwrap_or(0.0);
            worst = worst.max((a - numeric).abs() / 1.0f64.max(numeric.abs()));
            checked += 1;
        }
    }
    (checked, worst)
}

#[test]
fn criterion_03_gradient_checks() {
    let (n1, w1) = grad_check(Family::TeTnp, 24);
    let (n2, w2) = grad_check(Family::ConvCnp, 21);
    let worst = w1.max(w2);
    verdict(
        3,
        worst <= GRAD_REL_TOL && n1 > 20 && n2 > 20,
        &format!("{} probes, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:.0e})", n1 + n2),
    );
}

// ---------------------------------------------------------------------------
// 4. Gibbs oracle: PSD grams, stationary reduction, sampling statistics
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_gibbs_oracle() {
    let process = GibbsProcessConfig::default();
    let mut rng = stream_rng(613, "acc-gram", 0);

    // 200 random input sets: grams symmetric and PSD (Cholesky succeeds)
    let mut grams_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(2..24);
        let beta = u8::from(rng.gen_bool(0.5));
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let ell = |x: f64| lengthscale_profile(x, beta, &process);
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] = gibbs_kernel(xs[i], xs[j], ell);
            }
        }
        for i in 0..n {
            for j in 0..i {
                grams_ok &= gram[i * n + j] == gram[j * n + i];
            }
            // tiny diagonal noise keeps near-duplicate inputs full-rank,
            // matching the sampler's own usage
            gram[i * n + i] += 1e-9;
        }
        grams_ok &= cholesky(&Tensor::new(vec![n, n], gram).unwrap(), n).is_ok();
    }

    // one-sided tasks match the stationary-SE oracle
    let sampler = TaskSamplerConfig::default();
    let mut one_sided_worst = 0.0f64;
    let mut tried = 0;
    let mut i = 0u64;
    while tried < 25 {
        let task = sample_task(derive_seed(999, "acc-onesided", i), Mode::Id, &sampler, &process)
            .unwrap();
        i += 1;
        let all = task.x_context.iter().chain(&task.x_target);
        let (mut neg, mut pos) = (false, false);
        for &x in all {
            neg |= x < process.changepoint;
            pos |= x >= process.changepoint;
        }
        if neg && pos {
            continue; // straddles the changepoint
        }
        tried += 1;
        let ell = if pos == (task.orientation == 1) { process.ell_high } else { process.ell_low };
        let exact = gp_posterior_loglik(&task, &process).unwrap();
        let se = stationary_se_loglik(&task, ell, process.noise_std).unwrap();
        one_sided_worst = one_sided_worst.max((exact - se).abs());
    }

    // empirical covariance matches the kernel within 3 standard errors
    let xs = [-2.0, -0.5, 0.4, 1.8];
    let n_draws = 4000usize;
    let mut draws = Vec::with_capacity(n_draws);
    for d in 0..n_draws {
        let mut draw_rng = stream_rng(614, "acc-cov", d as u64);
        draws.push(sample_function(&xs, 1, &process, &mut draw_rng).unwrap());
    }
    let mut cov_ok = true;
    let ell = |x: f64| lengthscale_profile(x, 1, &process);
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            let mean_i = draws.iter().map(|d| d[i]).sum::<f64>() / n_draws as f64;
            let mean_j = draws.iter().map(|d| d[j]).sum::<f64>() / n_draws as f64;
            let cov = draws
                .iter()
                .map(|d| (d[i] - mean_i) * (d[j] - mean_j))
                .sum::<f64>()
                / (n_draws - 1) as f64;
            let expect = gibbs_kernel(xs[i], xs[j], ell);
            // standard error of a Gaussian covariance estimate
            let var_ii = gibbs_kernel(xs[i], xs[i], ell);
            let var_jj = gibbs_kernel(xs[j], xs[j], ell);
            let se = ((var_ii * var_jj + expect * expect) / n_draws as f64).sqrt();
            cov_ok &= (cov - expect).abs() <= 3.0 * se;
        }
    }

    verdict(
        4,
        grams_ok && one_sided_worst <= ONE_SIDED_TOL && cov_ok,
        &format!(
            "200 PSD grams: {grams_ok}, one-sided worst {one_sided_worst:.2e} (tol {ONE_SIDED_TOL:.0e}), covariance within 3 SE: {cov_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Operator lab
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_operator_lab() {
    let space = FourierSpace::new(4);
    let d = space.dim();

    // thm2 error equals the top singular value of the residual, measured on
    // an independently materialised E_n matrix (E_n == P_n T by the proof)
    let mut sv_worst = 0.0f64;
    let mut monotone = true;
    let op = LinearOperator::diagonal(space, |i| 0.5f64.powi(i as i32 + 1));
    let mut previous = f64::INFINITY;
    for n in 1..=d {
        let spec = thm2_construct(&op, n).unwrap();
        let mut en = nalgebra::DMatrix::zeros(d, d);
        for (tau, e) in spec.taus.iter().zip(&spec.basis) {
            en += e * tau.transpose();
        }
        let independent = operator_norm(&(&op.matrix - en));
        sv_worst = sv_worst.max((independent - spec.error).abs());
        monotone &= spec.error <= previous + 1e-15;
        previous = spec.error;
    }

    // prop4 identity control stalls at exactly 1
    let identity = LinearOperator::diagonal(space, |_| 1.0);
    let ns: Vec<usize> = (1..d).collect();
    let stalls = prop4_check(&identity, &ns)
        .unwrap()
        .iter()
        .all(|row| (row.error - 1.0).abs() < 1e-12);

    // full battery: equivariance residuals and the thm3 bound
    let mut rng = stream_rng(615, "acc-lab", 0);
    let report = run_operator_lab(4, 20, &mut rng).unwrap();
    let equiv_worst = report
        .rows
        .iter()
        .map(|r| r.equivariance_residual)
        .fold(0.0, f64::max);
    let thm3_ok = report.thm3.sup_error <= report.thm3.bound;
    // and a Hölder (non-identity) operator in two lattice dimensions
    let holder = HolderOperator::soft_scale(space, 0.5);
    let spec = aenp::eqlab::thm3_construct(&holder, 2, 1.0, 0.3).unwrap();
    let check = aenp::eqlab::thm3_bound_check(&holder, &spec, 500, &mut rng).unwrap();

    verdict(
        5,
        sv_worst <= THM2_SV_TOL
            && monotone
            && stalls
            && report.passed
            && thm3_ok
            && check.passed
            && equiv_worst <= LAB_EQUIV_TOL,
        &format!(
            "thm2 SV match {sv_worst:.2e} (tol {THM2_SV_TOL:.0e}), monotone {monotone}, identity stalls {stalls}, thm3 sup {:.3} <= bound {:.3}, lab equivariance {equiv_worst:.2e} (tol {LAB_EQUIV_TOL:.0e})",
            report.thm3.sup_error, report.thm3.bound
        ),
    );
}

// ---------------------------------------------------------------------------
// Trained checkpoints for criteria 6-10
// ---------------------------------------------------------------------------

fn runs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../runs")
}

static CHECKPOINT_LOCK: Mutex<()> = Mutex::new(());

/// Load a named preset checkpoint, retraining it (deterministically, same
/// seed and budget) if the cache is missing or does not match the preset.
fn preset_checkpoint(name: &str) -> Checkpoint {
    let _guard = CHECKPOINT_LOCK.lock().unwrap();
    let preset = acceptance_presets()
        .into_iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("unknown preset {name}"));
    let sampler = TaskSamplerConfig::default();
    let process = GibbsProcessConfig::default();
    let expect = train_setup_hash(&preset.model, &preset.train, &sampler, &process);
    let path = runs_dir().join(format!("{name}.ckpt.json"));
    if let Ok(ckpt) = Checkpoint::load(&path) {
        if ckpt.config_hash == expect
            && ckpt.aborted.is_none()
            && ckpt.epochs_completed == preset.train.epochs
        {
            return ckpt;
        }
        eprintln!("checkpoint {name} is stale (hash/budget mismatch); retraining");
    } else {
        eprintln!("checkpoint {name} missing; retraining (this takes hours)");
    }
    let ckpt = train(preset.model, preset.train, sampler, process, |_| {}).unwrap();
    assert!(ckpt.aborted.is_none(), "preset {name} training aborted: {:?}", ckpt.aborted);
    std::fs::create_dir_all(runs_dir()).unwrap();
    ckpt.save(&path).unwrap();
    ckpt
}

fn eval_preset(ckpt: &Checkpoint, mode: EvalMode, n_tasks: usize) -> f64 {
    let model = ckpt.model_instance().unwrap();
    evaluate(&model, &ckpt.sampler, &ckpt.process, mode, n_tasks, false, EVAL_SEED)
        .unwrap()
        .mean_loglik
}

// ---------------------------------------------------------------------------
// 6. Appendix D bound on a trained tilde checkpoint
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_appendix_d_bound() {
    let ckpt = preset_checkpoint("convcnp_tilde_b4");
    let model = ckpt.model_instance().unwrap();
    let tasks = default_tasks("acc-epsilon", 500, Mode::Id);
    // integer multiples of the 0.05 grid cell
    let shifts = [-3.0, -1.5, 0.6, 1.2, 2.4];
    let report = epsilon_equivariance_check(&model, &tasks, &shifts, 64).unwrap();
    verdict(
        6,
        report.worst_residual <= 2.0 * report.epsilon_hat + EPS_BOUND_SLACK,
        &format!(
            "500 tasks x 5 shifts: worst residual {:.4} <= 2*eps_hat + slack = {:.4} (eps_hat {:.4})",
            report.worst_residual, report.bound, report.epsilon_hat
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. ConvCNP strict vs tilde orderings
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_convcnp_orderings() {
    let strict = preset_checkpoint("convcnp_t");
    let tilde = preset_checkpoint("convcnp_tilde_b4");
    assert_eq!(strict.train.seed, tilde.train.seed, "identical seeds required");
    assert!(strict.train.epochs >= 30 && strict.train.iters_per_epoch >= 1000);
    assert_eq!(strict.train.batch_size, 16);

    let id_strict = eval_preset(&strict, EvalMode::Id, EVAL_TASKS_ID);
    let id_tilde = eval_preset(&tilde, EvalMode::Id, EVAL_TASKS_ID);
    let ood_strict = eval_preset(&strict, EvalMode::Ood, EVAL_TASKS_OOD);
    let ood_tilde = eval_preset(&tilde, EvalMode::Ood, EVAL_TASKS_OOD);

    let id_gap_ok = id_tilde >= id_strict + ID_GAP_MIN;
    let ood_close = (ood_tilde - ood_strict).abs() <= OOD_GAP_MAX;
    let ood_floor_ok = ood_strict >= OOD_FLOOR && ood_tilde >= OOD_FLOOR;
    verdict(
        7,
        id_gap_ok && ood_close && ood_floor_ok,
        &format!(
            "ID tilde {id_tilde:.4} vs strict {id_strict:.4} (gap >= {ID_GAP_MIN}), OOD tilde {ood_tilde:.4} vs strict {ood_strict:.4} (|gap| <= {OOD_GAP_MAX}, floor {OOD_FLOOR})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Non-equivariant TNP fails OOD but fits ID
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_tnp_generalization_failure() {
    let tnp = preset_checkpoint("tnp");
    let tetnp = preset_checkpoint("tetnp_t");
    let tnp_ood = eval_preset(&tnp, EvalMode::Ood, EVAL_TASKS_OOD);
    let tnp_id = eval_preset(&tnp, EvalMode::Id, EVAL_TASKS_ID);
    let tetnp_id = eval_preset(&tetnp, EvalMode::Id, EVAL_TASKS_ID);
    verdict(
        8,
        tnp_ood <= TNP_OOD_CEILING && tnp_id >= tetnp_id,
        &format!(
            "TNP OOD {tnp_ood:.4} (<= {TNP_OOD_CEILING}), TNP ID {tnp_id:.4} >= TE-TNP ID {tetnp_id:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Fixed-input count ablation: most of the gain comes from B=0 -> 1
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_bank_size_ablation() {
    // ConvCNP(T~, B=0) trains identically to ConvCNP(T): the empty bank
    // contributes exactly zero and receives no gradient, so the strict run
    // provides the B=0 point
    let b0 = eval_preset(&preset_checkpoint("convcnp_t"), EvalMode::Id, EVAL_TASKS_ID);
    let b1 = eval_preset(&preset_checkpoint("convcnp_tilde_b1"), EvalMode::Id, EVAL_TASKS_ID);
    let b4 = eval_preset(&preset_checkpoint("convcnp_tilde_b4"), EvalMode::Id, EVAL_TASKS_ID);
    let total = b4 - b0;
    let first = b1 - b0;
    verdict(
        9,
        total > 0.0 && first >= B_GAIN_FRACTION * total,
        &format!(
            "ID loglik B=0 {b0:.4}, B=1 {b1:.4}, B=4 {b4:.4}; first-step gain {first:.4} vs {B_GAIN_FRACTION} * total {total:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Equivariance deviation of the trained tilde model
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_equivariance_deviation() {
    let ckpt = preset_checkpoint("convcnp_tilde_b4");
    let model = ckpt.model_instance().unwrap();
    let tasks = default_tasks("acc-deviation", 500, Mode::Id);
    let report = equivariance_deviation(&model, &tasks, DeviationNorm::L1).unwrap();
    let ok = report.delta > 0.0 && report.delta >= DELTA_RANGE.0 && report.delta <= DELTA_RANGE.1;
    verdict(
        10,
        ok,
        &format!(
            "delta_equiv(L1) = {:.4} +- {:.4} over {} tasks (band [{}, {}], {} of {} points excluded)",
            report.delta,
            report.stderr,
            report.n_tasks,
            DELTA_RANGE.0,
            DELTA_RANGE.1,
            report.excluded_points,
            report.total_points
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Ground-truth context-as-target reproduction
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_ground_truth_context_as_target() {
    let sampler = TaskSamplerConfig::default();
    let process = GibbsProcessConfig::default();
    let mut sum = 0.0;
    for i in 0..GROUND_TRUTH_TASKS {
        let task =
            sample_task(derive_seed(2024, "acc-gt", i), Mode::Id, &sampler, &process).unwrap();
        sum += gp_posterior_loglik(&context_as_target(&task), &process).unwrap();
    }
    let mean = sum / GROUND_TRUTH_TASKS as f64;
    verdict(
        11,
        (mean - GROUND_TRUTH).abs() <= GROUND_TRUTH_TOL,
        &format!(
            "context-as-target oracle mean over {GROUND_TRUTH_TASKS} tasks = {mean:.4} (target {GROUND_TRUTH} +- {GROUND_TRUTH_TOL})"
        ),
    );
}
