//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (run with `cargo test -p kfgrad --test acceptance -- --nocapture` to see
//! them).
//!
//! 1. Every analytic gradient matches the central finite-difference oracle
//!    entrywise (1e-5 relative, 1e-8 absolute floor) on 40 random instances.
//! 2. The backward pass agrees with forward sensitivities to 1e-8.
//! 3. The hand-computed one-step scalar fixture comes out exact.
//! 4. Algebraic tape identities hold on every step of every instance, and
//!    all returned matrix gradients are exactly symmetric.
//! 5. The square-root-form maximum-likelihood fit recovers the seeded
//!    measurement covariance (3 seeds, non-increasing loss after burn-in).
//! 6. A full R-gradient via the backward pass outruns forward sensitivity,
//!    with the gap widening as the state dimension grows.
//! 7. The backward pass spends a step-count-independent number of
//!    multiplies per step and no per-step factorizations.

use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kfgrad::bench::{run_benchmark, BenchMethod};
use kfgrad::filter::{check_identities, run_filter, FilterModel, FilterTape};
use kfgrad::loss::{LossSpec, MseLoss, NllLoss};
use kfgrad::optimizer::{fit, FitConfig, FitTarget};
use kfgrad::sensitivity::{forward_sensitivity, full_gradient_forward, ParamSelector, ParamTarget};
use kfgrad::sim::{model_from_sim, simulate, simulate_model, SimConfig};
use kfgrad::{
    backward, counter, fd_factor_gradient, fd_gradient, sqrt_factor_grad, CovParam, FdConfig,
    GradientSet, Mat64,
};

const FD_REL_TOL: f64 = 1e-5;
const FD_ABS_FLOOR: f64 = 1e-8;

/// Criteria run one at a time: criterion 6 measures wall time and must not
/// share the CPU with the finite-difference sweeps of the other tests.
static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn entry_ok(analytic: f64, oracle: f64) -> bool {
    (analytic - oracle).abs() <= FD_ABS_FLOOR.max(FD_REL_TOL * analytic.abs().max(oracle.abs()))
}

fn rel_fro(a: &Mat64, b: &Mat64) -> f64 {
    let denom = a.norm_fro().max(b.norm_fro()).max(1e-300);
    (a - b).norm_fro() / denom
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat64 {
    Mat64::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn rand_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat64 {
    let g = rand_mat(rng, n, n, scale.sqrt());
    let mut a = &g * &g.transpose();
    let shift = scale * (0.3 + 0.1 * n as f64);
    for i in 0..n {
        a[(i, i)] += shift;
    }
    a
}

struct Instance {
    label: String,
    model: FilterModel<f64>,
    ys: Vec<Mat64>,
    spec: Box<dyn LossSpec<f64>>,
}

/// Deterministic rotation over d x m x N x loss combinations.
fn make_instance(idx: usize) -> Instance {
    let dims = [1usize, 2, 3, 6];
    let meas = [1usize, 2, 3];
    let lens = [5usize, 50];
    let d = dims[idx % dims.len()];
    let m = meas[(idx / dims.len()) % meas.len()];
    let n = lens[(idx / (dims.len() * meas.len())) % lens.len()];
    let use_mse = idx % 2 == 1;
    let with_input = idx % 3 == 0;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + idx as u64);
    let mut f = rand_mat(&mut rng, d, d, 0.3 / (d as f64).sqrt());
    for i in 0..d {
        f[(i, i)] += 0.6;
    }
    let mut model = FilterModel::time_invariant(
        f,
        rand_mat(&mut rng, m, d, 1.0),
        rand_spd(&mut rng, d, 0.4),
        rand_spd(&mut rng, m, 1.0),
        rand_spd(&mut rng, d, 0.6),
        rand_mat(&mut rng, d, 1, 1.0),
    )
    .unwrap();
    if with_input {
        let p = 1 + idx % 2;
        let b = rand_mat(&mut rng, d, p, 0.5);
        let u = (0..n).map(|_| rand_mat(&mut rng, p, 1, 1.0)).collect();
        model = model.with_input(b, u).unwrap();
    }
    let (states, ys) = simulate_model(&model, n, 0xdead + idx as u64).unwrap();
    let spec: Box<dyn LossSpec<f64>> = if use_mse {
        let weight_diag: Vec<f64> = (0..d).map(|_| 0.3 + rng.random::<f64>()).collect();
        Box::new(MseLoss::new(states, Mat64::diag(&weight_diag)).unwrap())
    } else {
        Box::new(NllLoss)
    };
    Instance {
        label: format!(
            "#{idx} d={d} m={m} N={n} loss={} input={}",
            if use_mse { "mse" } else { "nll" },
            with_input
        ),
        model,
        ys,
        spec,
    }
}

fn check_set_against_fd(inst: &Instance, gs: &GradientSet<f64>, errors: &mut Vec<String>) {
    let cfg = FdConfig::default();
    let model = &inst.model;
    let ys = &inst.ys;
    let spec = inst.spec.as_ref();
    let d = model.state_dim();
    let m = model.meas_dim();
    let n = ys.len();
    let mut push = |ok: bool, what: String, a: f64, o: f64| {
        if !ok {
            errors.push(format!(
                "{}: {what}: analytic {a:.10e} vs fd {o:.10e}",
                inst.label
            ));
        }
    };

    for i in 0..d {
        for j in i..d {
            let sel = ParamSelector::sym_pair(ParamTarget::P0, i, j);
            let mut fd = fd_gradient(model, ys, spec, &sel, &cfg).unwrap();
            if i != j {
                fd /= 2.0;
            }
            push(entry_ok(gs.dp0[(i, j)], fd), format!("dP0[{i}{j}]"), gs.dp0[(i, j)], fd);

            let selq = ParamSelector::sym_pair(ParamTarget::Q, i, j);
            let mut fdq = fd_gradient(model, ys, spec, &selq, &cfg).unwrap();
            if i != j {
                fdq /= 2.0;
            }
            push(
                entry_ok(gs.dq_static[(i, j)], fdq),
                format!("dQ[{i}{j}]"),
                gs.dq_static[(i, j)],
                fdq,
            );
        }
        let sel = ParamSelector::x0(i);
        let fd = fd_gradient(model, ys, spec, &sel, &cfg).unwrap();
        push(entry_ok(gs.dx0[i], fd), format!("dx0[{i}]"), gs.dx0[i], fd);
    }
    for i in 0..m {
        for j in i..m {
            let sel = ParamSelector::sym_pair(ParamTarget::R, i, j);
            let mut fd = fd_gradient(model, ys, spec, &sel, &cfg).unwrap();
            if i != j {
                fd /= 2.0;
            }
            push(
                entry_ok(gs.dr_static[(i, j)], fd),
                format!("dR[{i}{j}]"),
                gs.dr_static[(i, j)],
                fd,
            );
        }
    }
    // Per-step noise gradients and measurement gradients, every step.
    for step in 0..n {
        for i in 0..d {
            for j in i..d {
                let sel = ParamSelector::sym_pair_at_step(ParamTarget::Q, i, j, step);
                let mut fd = fd_gradient(model, ys, spec, &sel, &cfg).unwrap();
                if i != j {
                    fd /= 2.0;
                }
                push(
                    entry_ok(gs.dq_steps[step][(i, j)], fd),
                    format!("dQ_{step}[{i}{j}]"),
                    gs.dq_steps[step][(i, j)],
                    fd,
                );
            }
        }
        for i in 0..m {
            for j in i..m {
                let sel = ParamSelector::sym_pair_at_step(ParamTarget::R, i, j, step);
                let mut fd = fd_gradient(model, ys, spec, &sel, &cfg).unwrap();
                if i != j {
                    fd /= 2.0;
                }
                push(
                    entry_ok(gs.dr_steps[step][(i, j)], fd),
                    format!("dR_{step}[{i}{j}]"),
                    gs.dr_steps[step][(i, j)],
                    fd,
                );
            }
            let sel = ParamSelector::y(step, i);
            let fd = fd_gradient(model, ys, spec, &sel, &cfg).unwrap();
            push(
                entry_ok(gs.dy[step][i], fd),
                format!("dy_{step}[{i}]"),
                gs.dy[step][i],
                fd,
            );
        }
    }
    // Square-root-factor gradients through the factor-perturbation oracle.
    for (cov, grad, base) in [
        (CovParam::RStatic, &gs.dr_static, model.r.as_static().unwrap()),
        (CovParam::QStatic, &gs.dq_static, model.q.as_static().unwrap()),
        (CovParam::P0, &gs.dp0, &model.p0),
    ] {
        let l = base.cholesky().unwrap().lower().clone();
        let analytic = sqrt_factor_grad(grad, &l).unwrap();
        for i in 0..l.rows() {
            for j in 0..=i {
                let fd = fd_factor_gradient(model, ys, spec, cov, (i, j), &cfg).unwrap();
                push(
                    entry_ok(analytic[(i, j)], fd),
                    format!("dL({cov:?})[{i}{j}]"),
                    analytic[(i, j)],
                    fd,
                );
            }
        }
    }
}

#[test]
fn criterion_1_gradient_exactness_vs_fd_oracle() {
    let _gate = serial();
    let start = Instant::now();
    let mut errors = Vec::new();
    for idx in 0..40 {
        let inst = make_instance(idx);
        let tape = run_filter(&inst.model, &inst.ys).unwrap();
        let gs = backward(&tape, inst.spec.as_ref()).unwrap();
        drop(tape);
        check_set_against_fd(&inst, &gs, &mut errors);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = errors.is_empty() && elapsed < 60.0;
    println!(
        "[acceptance] criterion 1 (gradient exactness vs FD oracle, 40 instances, {elapsed:.1}s): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    for e in errors.iter().take(20) {
        println!("  mismatch: {e}");
    }
    assert!(errors.is_empty(), "{} gradient entries disagree with FD", errors.len());
    assert!(elapsed < 60.0, "criterion 1 exceeded its 60 s budget: {elapsed:.1}s");
}

#[test]
fn criterion_2_forward_backward_equivalence() {
    let _gate = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for idx in 0..10 {
        let dims = [1usize, 2, 3, 4];
        let meas = [1usize, 2];
        let lens = [5usize, 20, 50];
        let d = dims[idx % 4];
        let m = meas[idx % 2];
        let n = lens[idx % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0xf0f0 + idx as u64);
        let mut f = rand_mat(&mut rng, d, d, 0.3 / (d as f64).sqrt());
        for i in 0..d {
            f[(i, i)] += 0.6;
        }
        let model = FilterModel::time_invariant(
            f,
            rand_mat(&mut rng, m, d, 1.0),
            rand_spd(&mut rng, d, 0.4),
            rand_spd(&mut rng, m, 1.0),
            rand_spd(&mut rng, d, 0.6),
            rand_mat(&mut rng, d, 1, 1.0),
        )
        .unwrap();
        let (_, ys) = simulate_model(&model, n, 0xbeef + idx as u64).unwrap();

        let tape = run_filter(&model, &ys).unwrap();
        let gs = backward(&tape, &NllLoss).unwrap();
        drop(tape);
        for (target, analytic) in [
            (ParamTarget::P0, &gs.dp0),
            (ParamTarget::Q, &gs.dq_static),
            (ParamTarget::R, &gs.dr_static),
        ] {
            let fwd = full_gradient_forward(&model, &ys, &NllLoss, target).unwrap();
            let rel = rel_fro(analytic, &fwd);
            worst = worst.max(rel);
            if rel > 1e-8 {
                errors.push(format!("instance {idx} {target:?}: rel {rel:.3e}"));
            }
        }
        for i in 0..d {
            let v = forward_sensitivity(&model, &ys, &NllLoss, &ParamSelector::x0(i)).unwrap();
            let a = gs.dx0[i];
            let rel = (a - v).abs() / a.abs().max(v.abs()).max(1e-12);
            worst = worst.max(rel);
            if rel > 1e-8 {
                errors.push(format!("instance {idx} dx0[{i}]: rel {rel:.3e}"));
            }
        }
        for step in [0, n / 2, n - 1] {
            for i in 0..m {
                let v = forward_sensitivity(&model, &ys, &NllLoss, &ParamSelector::y(step, i))
                    .unwrap();
                let a = gs.dy[step][i];
                let rel = (a - v).abs() / a.abs().max(v.abs()).max(1e-12);
                worst = worst.max(rel);
                if rel > 1e-8 {
                    errors.push(format!("instance {idx} dy_{step}[{i}]: rel {rel:.3e}"));
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = errors.is_empty() && elapsed < 60.0;
    println!(
        "[acceptance] criterion 2 (forward/backward equivalence, worst rel {worst:.2e}, {elapsed:.1}s): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(errors.is_empty(), "{errors:?}");
    assert!(elapsed < 60.0);
}

#[test]
fn criterion_3_hand_computed_fixture() {
    let _gate = serial();
    let model = FilterModel::time_invariant(
        Mat64::identity(1),
        Mat64::identity(1),
        Mat64::zeros(1, 1),
        Mat64::identity(1),
        Mat64::identity(1),
        Mat64::zeros(1, 1),
    )
    .unwrap();
    let ys = vec![Mat64::vec(&[2.0]).unwrap()];
    let tape = run_filter(&model, &ys).unwrap();
    let gs = backward(&tape, &NllLoss).unwrap();
    let checks = [
        ("dR", gs.dr_static[0], -0.5),
        ("dP0", gs.dp0[0], -0.5),
        ("dy1", gs.dy[0][0], 2.0),
        ("dx0", gs.dx0[0], -2.0),
    ];
    let pass = checks.iter().all(|(_, got, want)| (got - want).abs() < 1e-14);
    println!(
        "[acceptance] criterion 3 (hand-computed 1-step fixture): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    for (name, got, want) in checks {
        assert!(
            (got - want).abs() < 1e-14,
            "{name}: got {got:.17}, want {want}"
        );
    }
}

fn identity_worsts(tape: &FilterTape<'_, f64>) -> (f64, f64, f64) {
    let rep = check_identities(tape).unwrap();
    assert!(rep.covariances_psd, "covariance lost positive semi-definiteness");
    (rep.woodbury, rep.information_form, rep.alternate_gain)
}

#[test]
fn criterion_4_algebraic_identities_on_tapes() {
    let _gate = serial();
    let mut worst_wood: f64 = 0.0;
    let mut worst_info: f64 = 0.0;
    let mut worst_gain: f64 = 0.0;
    let mut asym_exact = true;

    for idx in 0..40 {
        let inst = make_instance(idx);
        let tape = run_filter(&inst.model, &inst.ys).unwrap();
        let (w, i, g) = identity_worsts(&tape);
        worst_wood = worst_wood.max(w);
        worst_info = worst_info.max(i);
        worst_gain = worst_gain.max(g);
        let gs = backward(&tape, inst.spec.as_ref()).unwrap();
        asym_exact &= gs.dp0.asymmetry() == 0.0;
        asym_exact &= gs.dq_steps.iter().all(|m| m.asymmetry() == 0.0);
        asym_exact &= gs.dr_steps.iter().all(|m| m.asymmetry() == 0.0);
        asym_exact &= gs.dq_static.asymmetry() == 0.0 && gs.dr_static.asymmetry() == 0.0;
    }
    // The seeded experiment's tape as well.
    let cfg = SimConfig::<f64>::default();
    let traj = simulate(&cfg).unwrap();
    let model = model_from_sim(&cfg, cfg.r_true.clone(), traj.inputs.clone()).unwrap();
    let tape = run_filter(&model, &traj.measurements).unwrap();
    let (w, i, g) = identity_worsts(&tape);
    worst_wood = worst_wood.max(w);
    worst_info = worst_info.max(i);
    worst_gain = worst_gain.max(g);

    let pass = worst_wood <= 1e-9 && worst_info <= 1e-8 && worst_gain <= 1e-9 && asym_exact;
    println!(
        "[acceptance] criterion 4 (tape identities: woodbury {worst_wood:.2e}, info {worst_info:.2e}, gain {worst_gain:.2e}, exact symmetry {asym_exact}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(worst_wood <= 1e-9, "woodbury {worst_wood:.3e}");
    assert!(worst_info <= 1e-8, "information form {worst_info:.3e}");
    assert!(worst_gain <= 1e-9, "alternate gain {worst_gain:.3e}");
    assert!(asym_exact, "a matrix gradient is not exactly symmetric");
}

#[test]
fn criterion_5_experiment_reproduction() {
    let _gate = serial();
    let start = Instant::now();
    let mut failures = Vec::new();
    for seed in [101u64, 202, 303] {
        let mut cfg = SimConfig::<f64>::default();
        cfg.seed = seed;
        let traj = simulate(&cfg).unwrap();

        // Init factor: 2·sqrt(mean diagonal of R_true)·I, i.e. 4x the true
        // scale on the covariance.
        let m = cfg.axes;
        let r_scale =
            (0..m).map(|i| cfg.r_true[(i, i)]).sum::<f64>() / m as f64;
        let init_l = Mat64::identity(m).scale((4.0 * r_scale).sqrt());
        let r_init = (&init_l * &init_l.transpose()).symmetrize().unwrap();
        let model = model_from_sim(&cfg, r_init, traj.inputs.clone()).unwrap();

        let mut fit_cfg = FitConfig::new(vec![FitTarget::R]);
        fit_cfg.alpha = 0.005;
        fit_cfg.max_iters = 150;
        fit_cfg.init_factors.r = Some(init_l);
        let report = fit(&model, &traj.measurements, &NllLoss, &fit_cfg).unwrap();

        for k in 3..report.loss_history.len() - 1 {
            let (a, b) = (report.loss_history[k], report.loss_history[k + 1]);
            if b > a + 1e-9 * a.abs().max(1.0) {
                failures.push(format!(
                    "seed {seed}: loss increased at iteration {k}: {a} -> {b}"
                ));
                break;
            }
        }
        let final_r = &report.final_covariances[0].1;
        let rel = rel_fro(final_r, &cfg.r_true);
        if rel > 0.15 {
            failures.push(format!("seed {seed}: final R off by {rel:.3} relative"));
        }
    }

    // Gradient-descent trajectory cross-check: two iterations driven by the
    // finite-difference factor gradient land on the same factor.
    {
        let mut cfg = SimConfig::<f64>::default();
        cfg.seed = 101;
        let traj = simulate(&cfg).unwrap();
        let m = cfg.axes;
        let r_scale = (0..m).map(|i| cfg.r_true[(i, i)]).sum::<f64>() / m as f64;
        let init_l = Mat64::identity(m).scale((4.0 * r_scale).sqrt());

        let mut l_fd = init_l.clone();
        let fd_cfg = FdConfig::default();
        for _ in 0..2 {
            let r = (&l_fd * &l_fd.transpose()).symmetrize().unwrap();
            let model = model_from_sim(&cfg, r, traj.inputs.clone()).unwrap();
            let mut g = Mat64::zeros(m, m);
            for i in 0..m {
                for j in 0..=i {
                    g[(i, j)] = fd_factor_gradient(
                        &model,
                        &traj.measurements,
                        &NllLoss,
                        CovParam::RStatic,
                        (i, j),
                        &fd_cfg,
                    )
                    .unwrap();
                }
            }
            l_fd = (&l_fd - &g.scale(0.005)).clone();
        }

        let r_init = (&init_l * &init_l.transpose()).symmetrize().unwrap();
        let model = model_from_sim(&cfg, r_init, traj.inputs.clone()).unwrap();
        let mut fit_cfg = FitConfig::new(vec![FitTarget::R]);
        fit_cfg.alpha = 0.005;
        fit_cfg.max_iters = 2;
        fit_cfg.init_factors.r = Some(init_l);
        let report = fit(&model, &traj.measurements, &NllLoss, &fit_cfg).unwrap();
        let l_bwd = &report.final_factors[0].1;
        let rel = rel_fro(l_bwd, &l_fd);
        if rel > 1e-5 {
            failures.push(format!(
                "FD-driven descent diverges from backward-driven descent: {rel:.2e}"
            ));
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 300.0;
    println!(
        "[acceptance] criterion 5 (seeded covariance-fitting experiment, 3 seeds, {elapsed:.1}s): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(failures.is_empty(), "{failures:?}");
    assert!(elapsed < 300.0, "criterion 5 exceeded its 5 min budget");
}

#[test]
fn criterion_6_performance_backward_vs_sensitivity() {
    let _gate = serial();
    let dims = [2usize, 4, 6, 8];
    let methods = [BenchMethod::Backward, BenchMethod::Sensitivity];
    let measure = || run_benchmark(&dims, 1440, 9, &methods, 17).unwrap();
    let wall_ratios = |report: &kfgrad::bench::BenchReport| -> Vec<f64> {
        dims.iter()
            .map(|&d| report.ratio_vs_backward(BenchMethod::Sensitivity, d).unwrap())
            .collect()
    };
    let monotone = |r: &[f64]| r.windows(2).all(|w| w[1] > w[0]);

    let mut report = measure();
    let mut ratios = wall_ratios(&report);
    if !monotone(&ratios) {
        // One clean re-measure: a multi-second CPU steal on a shared runner
        // can sink a whole cell; the verdict uses the second reading as-is.
        report = measure();
        ratios = wall_ratios(&report);
    }
    println!("{}", report.to_csv_string());

    // The multiply counter gives the deterministic cost ratio behind the
    // wall-clock one; the complexity gap must show in both.
    let mult_ratios: Vec<f64> = dims
        .iter()
        .map(|&d| {
            let get = |m: BenchMethod| {
                report
                    .rows
                    .iter()
                    .find(|r| r.method == m && r.d == d)
                    .unwrap()
                    .multiplies as f64
            };
            get(BenchMethod::Sensitivity) / get(BenchMethod::Backward)
        })
        .collect();
    let backward_d6_ms = report
        .rows
        .iter()
        .find(|r| r.method == BenchMethod::Backward && r.d == 6)
        .unwrap()
        .median_wall_ms;

    let wall_monotone = monotone(&ratios);
    let mult_monotone = monotone(&mult_ratios);
    let floor_ok = ratios[2] >= 10.0;
    let subsecond = backward_d6_ms < 1000.0;
    let pass = wall_monotone && mult_monotone && floor_ok && subsecond;
    println!(
        "[acceptance] criterion 6 (performance: wall ratios {:?}, multiply ratios {:?}, backward d=6 {backward_d6_ms:.2} ms): {}",
        ratios.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>(),
        mult_ratios.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>(),
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(subsecond, "backward R-gradient at d=6 took {backward_d6_ms:.1} ms");
    assert!(
        mult_monotone,
        "sensitivity/backward multiply ratio must grow with dimension: {mult_ratios:?}"
    );
    assert!(
        wall_monotone,
        "sensitivity/backward wall ratio must grow with dimension: {ratios:?}"
    );
    assert!(
        floor_ok,
        "sensitivity/backward wall ratio at d=6 is {:.2}, below the 10x floor",
        ratios[2]
    );
}

#[test]
fn criterion_7_operation_count_audit() {
    let _gate = serial();
    let d = 6usize;
    let mut results = Vec::new();
    for n_steps in [100usize, 1000] {
        let (model, ys) = kfgrad::bench::bench_instance(d, n_steps, 23).unwrap();
        let tape = run_filter(&model, &ys).unwrap();
        counter::reset();
        let gs = backward(&tape, &NllLoss).unwrap();
        let mults = counter::multiplies();
        let facts = counter::factorizations();
        std::hint::black_box(gs);
        let c = mults as f64 / (n_steps as f64 * (d * d * d) as f64);
        results.push((n_steps, c, facts));
    }
    let (_, c100, f100) = results[0];
    let (_, c1000, f1000) = results[1];
    let drift = (c100 - c1000).abs() / c100;
    let pass = drift <= 0.02 && f100 <= 1 && f1000 <= 1 && c100 < 25.0;
    println!(
        "[acceptance] criterion 7 (multiply audit: C(100)={c100:.2}, C(1000)={c1000:.2}, drift {drift:.4}, factorizations {f100}/{f1000}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(
        f100 <= 1 && f1000 <= 1,
        "backward pass must not factorize per step ({f100}, {f1000})"
    );
    assert!(
        drift <= 0.02,
        "multiplies per step drift with N: C(100)={c100:.3}, C(1000)={c1000:.3}"
    );
    assert!(c100 < 25.0, "per-step multiply constant too large: {c100:.1}");
}
