//! Acceptance suite: every criterion pinned at its stated tolerance,
//! one pass/fail line per criterion (run with `--nocapture` to see them
//! all).
//!
//! Several criteria examine the same trajectories; those are computed
//! once and shared through `OnceLock`.

use nonholo::brackets::{flannery, poisson, Observable, TranspositionField};
use nonholo::dynamics::{observable_rate, self_consistent_f, solve_multipliers, MethodKind};
use nonholo::expr::{eval, eval_derivs, Bindings};
use nonholo::integrate::{IntegratorOpts, Scheme};
use nonholo::model::{legendre_invert, momenta, ConfigState, PhaseState};
use nonholo::scenarios::{ScenarioConfig, BUILTIN_NAMES};
use nonholo::sim::{run, RunMethod, RunOutput};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::OnceLock;

const TOL_RUN: f64 = 1e-10;

fn opts(samples: usize) -> IntegratorOpts {
    IntegratorOpts {
        scheme: Scheme::Dp45 {
            rel_tol: TOL_RUN,
            abs_tol: TOL_RUN * 1e-2,
        },
        samples,
        drift_abort: Some(1e-2),
        ..Default::default()
    }
}

struct SphereRuns {
    cfg: ScenarioConfig,
    oracle: RunOutput,
    flannery: RunOutput,
    dirac: RunOutput,
}

fn sphere_runs() -> &'static SphereRuns {
    static RUNS: OnceLock<SphereRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = ScenarioConfig::builtin("rolling-sphere").expect("builtin");
        let o = opts(401);
        SphereRuns {
            oracle: run(&cfg, RunMethod::Oracle, 2.0, &o).expect("oracle run"),
            flannery: run(&cfg, RunMethod::Phase(MethodKind::Flannery), 2.0, &o)
                .expect("flannery run"),
            dirac: run(&cfg, RunMethod::Phase(MethodKind::Dirac), 2.0, &o).expect("dirac run"),
            cfg,
        }
    })
}

struct PendulumRuns {
    dirac: RunOutput,
    flannery: RunOutput,
}

fn pendulum_runs() -> &'static PendulumRuns {
    static RUNS: OnceLock<PendulumRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = ScenarioConfig::builtin("rod-pendulum").expect("builtin");
        let o = opts(1001);
        PendulumRuns {
            dirac: run(&cfg, RunMethod::Phase(MethodKind::Dirac), 10.0, &o).expect("dirac run"),
            flannery: run(&cfg, RunMethod::Phase(MethodKind::Flannery), 10.0, &o)
                .expect("flannery run"),
        }
    })
}

fn flannery_oracle_deviation() -> f64 {
    let runs = sphere_runs();
    let mut dev: f64 = 0.0;
    for i in 0..runs.flannery.len() {
        for c in 0..5 {
            dev = dev.max((runs.flannery.q(i)[c] - runs.oracle.q(i)[c]).abs());
        }
    }
    dev
}

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "{} {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{criterion}: {detail}");
}

/// Gimbal-safe random extended phase states around a scenario's initial
/// point.
fn random_states(cfg: &ScenarioConfig, rng: &mut StdRng, count: usize) -> Vec<PhaseState> {
    let s0 = cfg.initial_phase_state().expect("initial state");
    (0..count)
        .map(|_| {
            PhaseState::new(
                0.0,
                s0.q.iter().map(|v| v + rng.gen_range(-0.4..0.4)).collect(),
                s0.p.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect(),
                s0.lam.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect(),
                s0.plam.iter().map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
        })
        .collect()
}

#[test]
fn a1_rolling_sphere_closed_form() {
    let runs = sphere_runs();
    // samples are uniform on [0, 2]; index 200 is t = 1
    let x1 = runs.flannery.q(200)[0];
    let x2 = runs.flannery.q(400)[0];
    let e1 = (x1 - 1.75).abs();
    let e2 = (x2 - 7.0).abs();
    report(
        "A1 rolling-sphere closed form",
        e1 < 1e-3 && e2 < 1e-3,
        &format!("|x(1) - 1.75| = {e1:.2e}, |x(2) - 7.0| = {e2:.2e} (tolerance 1e-3)"),
    );
}

#[test]
fn a2_vertical_spin_constancy() {
    let runs = sphere_runs();
    let mut worst: f64 = 0.0;
    for i in 0..runs.flannery.len() {
        let qd = runs
            .flannery
            .velocities(&runs.cfg, i)
            .expect("velocities at sample");
        let theta = runs.flannery.q(i)[2];
        let omega_z = qd[3] + qd[4] * theta.cos();
        worst = worst.max((omega_z - 2.5).abs());
    }
    report(
        "A2 vertical-axis spin constancy",
        worst < 1e-6,
        &format!("max |omega_z - 2.5| = {worst:.2e} (tolerance 1e-6)"),
    );
}

#[test]
fn a3_oracle_equivalence() {
    let dev = flannery_oracle_deviation();
    report(
        "A3 oracle equivalence",
        dev < 1e-5,
        &format!("max per-coordinate |q_flannery - q_oracle| = {dev:.2e} (tolerance 1e-5)"),
    );
}

#[test]
fn a4_dirac_breakdown() {
    let runs = sphere_runs();
    let flannery_dev = flannery_oracle_deviation();
    let mut dirac_dev: f64 = 0.0;
    for i in 0..runs.dirac.len() {
        for c in 0..5 {
            dirac_dev = dirac_dev.max((runs.dirac.q(i)[c] - runs.oracle.q(i)[c]).abs());
        }
    }
    let phi_err = (runs.dirac.q(400)[3] - 5.0).abs();
    let ratio_ok = dirac_dev > 100.0 * flannery_dev;
    let phi_ok = phi_err > 100.0 * 1e-5;
    report(
        "A4 Dirac-method breakdown",
        ratio_ok && phi_ok,
        &format!(
            "dirac deviation {dirac_dev:.2e} vs flannery {flannery_dev:.2e} (need 100x), |phi(2) - 5.0| = {phi_err:.2e} (need > 1e-3)"
        ),
    );
}

#[test]
fn a5_holonomic_degeneration() {
    let runs = pendulum_runs();
    let mut f_norm: f64 = 0.0;
    let mut traj_diff: f64 = 0.0;
    let mut g_max: f64 = 0.0;
    for i in 0..runs.dirac.len() {
        f_norm = f_norm.max(runs.dirac.trajectory.diag[i].f_norm);
        f_norm = f_norm.max(runs.flannery.trajectory.diag[i].f_norm);
        for c in 0..2 {
            traj_diff = traj_diff.max((runs.dirac.q(i)[c] - runs.flannery.q(i)[c]).abs());
        }
        for g in &runs.dirac.trajectory.diag[i].g {
            g_max = g_max.max(g.abs());
        }
    }
    g_max = g_max.max(runs.dirac.trajectory.stats.max_g_inf);
    let drift = runs.dirac.energy_drift();
    report(
        "A5 holonomic degeneration",
        f_norm < 1e-14 && traj_diff < 1e-9 && g_max < 1e-8 && drift < 1e-6,
        &format!(
            "||f|| = {f_norm:.2e} (<1e-14), |q_dirac - q_flannery| = {traj_diff:.2e} (<1e-9), |g| = {g_max:.2e} (<1e-8, no projection), energy drift {drift:.2e} (<1e-6)"
        ),
    );
}

#[test]
fn a6_integrable_degeneration() {
    let cfg = ScenarioConfig::builtin("constant-velocity").expect("builtin");
    let out = run(&cfg, RunMethod::Phase(MethodKind::Flannery), 2.0, &opts(41)).expect("run");
    let mut worst: f64 = 0.0;
    for i in 0..out.len() {
        let s = out.phase_state(&cfg, i).expect("state");
        let qd = out.velocities(&cfg, i).expect("velocities");
        let cs = ConfigState::new(s.t, s.q.clone(), qd);
        let (tf, _, _) =
            self_consistent_f(&cfg.spec, &cs, &s.p, &s.lam, MethodKind::Flannery).expect("field");
        let rep = solve_multipliers(&cfg.spec, s.t, &s.q, &s.p, MethodKind::Flannery, &s.lam)
            .expect("solve");
        worst = worst
            .max(tf.g.norm_inf())
            .max(tf.f.norm_inf())
            .max(rep.lam[0].abs())
            .max(rep.u[0].abs());
    }
    report(
        "A6 integrable degeneration",
        worst < 1e-14,
        &format!("max of ||G||, ||f||, |lam|, |u| along the run = {worst:.2e} (tolerance 1e-14)"),
    );
}

#[test]
fn a7_bracket_property_suite() {
    let mut rng = StdRng::seed_from_u64(0xACCE_0007);
    let mut worst_antisym: f64 = 0.0;
    let mut worst_canon: f64 = 0.0;
    let mut worst_deficit: f64 = 0.0;
    let mut worst_f0: f64 = 0.0;
    let mut worst_hh: f64 = 0.0;
    for name in BUILTIN_NAMES {
        let cfg = ScenarioConfig::builtin(name).expect("builtin");
        let spec = &cfg.spec;
        let (n, m) = (spec.n(), spec.m());
        let zero_tf = TranspositionField::zero(n, m);
        for s in random_states(&cfg, &mut rng, 100) {
            // random polynomial observables over the extended phase point
            let mut names: Vec<String> = spec.coords().to_vec();
            names.extend(spec.momentum_names().iter().cloned());
            names.extend(spec.multiplier_names().iter().cloned());
            names.extend(spec.multiplier_momentum_names().iter().cloned());
            let rand_obs = |rng: &mut StdRng| {
                let mut terms = Vec::new();
                for _ in 0..3 {
                    let a = &names[rng.gen_range(0..names.len())];
                    let b = &names[rng.gen_range(0..names.len())];
                    let c = (rng.gen_range(-20..20) as f64) / 10.0;
                    terms.push(format!("{c}*{a}*{b}"));
                }
                Observable::parse(spec, &terms.join(" + ")).expect("observable")
            };
            let x = rand_obs(&mut rng);
            let y = rand_obs(&mut rng);

            // Poisson antisymmetry
            let pb_xy = poisson(&x, &y, spec, &s).expect("bracket");
            let pb_yx = poisson(&y, &x, spec, &s).expect("bracket");
            worst_antisym = worst_antisym.max((pb_xy + pb_yx).abs());

            // canonical pairs
            for i in 0..n {
                for j in 0..n {
                    let qi = Observable::parse(spec, &spec.coords()[i]).expect("obs");
                    let pj = Observable::parse(spec, &spec.momentum_names()[j]).expect("obs");
                    let expect = if i == j { 1.0 } else { 0.0 };
                    worst_canon = worst_canon
                        .max((poisson(&qi, &pj, spec, &s).expect("bracket") - expect).abs());
                }
            }

            // reduction at f = 0
            let fb0 = flannery(&x, &y, spec, &s, &zero_tf).expect("bracket");
            worst_f0 = worst_f0.max((fb0 - pb_xy).abs());

            if m > 0 {
                // the flow's transposition field at this state
                let rep = solve_multipliers(spec, s.t, &s.q, &s.p, MethodKind::Flannery, &s.lam)
                    .expect("solve");
                let solved =
                    PhaseState::new(s.t, s.q.clone(), s.p.clone(), rep.lam.clone(), s.plam.clone());
                let qd = legendre_invert(spec, s.t, &s.q, &s.p, &solved.lam, &vec![0.0; n])
                    .expect("legendre");
                let cs = ConfigState::new(s.t, s.q.clone(), qd);
                let (tf, _, _) =
                    self_consistent_f(spec, &cs, &s.p, &solved.lam, MethodKind::Flannery)
                        .expect("field");

                // antisymmetry-deficit identity
                let fb_xy = flannery(&x, &y, spec, &solved, &tf).expect("bracket");
                let fb_yx = flannery(&y, &x, spec, &solved, &tf).expect("bracket");
                let gx = x.phase_gradient(spec, &solved).expect("gradient");
                let gy = y.phase_gradient(spec, &solved).expect("gradient");
                let pf = tf.f.tmul_vec(&solved.p);
                let deficit: f64 = (0..n).map(|i| (gx.dp[i] + gy.dp[i]) * pf[i]).sum();
                worst_deficit = worst_deficit.max((fb_xy + fb_yx - deficit).abs());

                // {H, H}_FB = sum_i H_p_i (p f)_i
                let rate = observable_rate(
                    &Observable::Hamiltonian,
                    spec,
                    &solved,
                    MethodKind::Flannery,
                )
                .expect("rate");
                let hg = nonholo::model::grad_hamiltonian(spec, &solved).expect("gradient");
                let expect: f64 = (0..n).map(|i| hg.dp[i] * pf[i]).sum();
                worst_hh = worst_hh.max((rate - expect).abs());
            }
        }
    }
    report(
        "A7 bracket property suite",
        worst_antisym < 1e-12
            && worst_canon < 1e-15
            && worst_deficit < 1e-10
            && worst_f0 < 1e-14
            && worst_hh < 1e-9,
        &format!(
            "antisymmetry {worst_antisym:.2e} (<1e-12), canonical {worst_canon:.2e} (<1e-15), deficit {worst_deficit:.2e} (<1e-10), f=0 reduction {worst_f0:.2e} (<1e-14), self-bracket {worst_hh:.2e} (<1e-9)"
        ),
    );
}

#[test]
fn a8_transposition_algebra() {
    let cfg = ScenarioConfig::builtin("twist-toy").expect("builtin");
    let mut rng = StdRng::seed_from_u64(0xACCE_0008);
    let mut worst: f64 = 0.0;
    for s in random_states(&cfg, &mut rng, 100) {
        let qd = legendre_invert(&cfg.spec, s.t, &s.q, &s.p, &s.lam, &[0.0, 0.0, 0.0])
            .expect("legendre");
        let cs = ConfigState::new(s.t, s.q.clone(), qd);
        let (tf, _, _) =
            self_consistent_f(&cfg.spec, &cs, &s.p, &s.lam, MethodKind::Flannery).expect("field");
        worst = worst.max(tf.residual);
    }

    // worked pseudoinverse example
    let a = nonholo::linalg::Mat::from_rows(vec![vec![-5.0, 1.0, 0.0]]);
    let g = nonholo::linalg::Mat::from_rows(vec![vec![-2.0, 0.0, 1.0]]);
    let tf = nonholo::brackets::solve_f(a, g);
    let expect = [
        [10.0 / 26.0, 0.0, -5.0 / 26.0],
        [-2.0 / 26.0, 0.0, 1.0 / 26.0],
        [0.0, 0.0, 0.0],
    ];
    let mut worked: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worked = worked.max((tf.f[(i, j)] - expect[i][j]).abs());
        }
    }
    report(
        "A8 transposition algebra",
        worst < 1e-10 && worked < 1e-14,
        &format!(
            "max ||A f - G|| over 100 twist-toy states = {worst:.2e} (<1e-10), worked example deviation {worked:.2e} (<1e-14)"
        ),
    );
}

#[test]
fn a9_derivative_engine() {
    let mut rng = StdRng::seed_from_u64(0xACCE_0009);
    let mut worst_grad: f64 = 0.0;
    let mut worst_hess: f64 = 0.0;
    let mut worst_roundtrip: f64 = 0.0;
    let h = 1e-6;
    for name in BUILTIN_NAMES {
        let cfg = ScenarioConfig::builtin(name).expect("builtin");
        let spec = &cfg.spec;
        let s0 = cfg.initial_phase_state().expect("initial");
        let mut vars: Vec<String> = spec.coords().to_vec();
        vars.extend(spec.velocity_names().iter().cloned());
        vars.push("t".into());
        let var_refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();

        let mut exprs = vec![spec.lagrangian().clone()];
        exprs.extend(spec.constraints().iter().cloned());

        for _ in 0..100 {
            let mut b = Bindings::new();
            for (i, c) in spec.coords().iter().enumerate() {
                b.set(c, s0.q[i] + rng.gen_range(-0.4..0.4)).expect("bind");
            }
            for v in spec.velocity_names() {
                b.set(v, rng.gen_range(-2.0..2.0)).expect("bind");
            }
            b.set("t", rng.gen_range(0.0..2.0)).expect("bind");
            for (pname, pval) in spec.params() {
                b.set(pname, *pval).expect("bind");
            }

            for e in &exprs {
                let d = eval_derivs(e, &b, &var_refs, 2).expect("derivs");
                let hess = d.hessian.as_ref().expect("hessian");
                for (i, vi) in var_refs.iter().enumerate() {
                    // gradient against value differences
                    let shift = |delta: f64| {
                        let mut bb = Bindings::new();
                        for (nm, vv) in b.entries() {
                            let dv = if nm == vi { delta } else { 0.0 };
                            bb.set(nm, vv + dv).expect("bind");
                        }
                        eval(e, &bb).expect("eval")
                    };
                    let fd = (shift(h) - shift(-h)) / (2.0 * h);
                    worst_grad = worst_grad
                        .max((d.gradient[i] - fd).abs() / (1.0 + fd.abs()));

                    // Hessian row against gradient differences
                    let shift_grad = |delta: f64| {
                        let mut bb = Bindings::new();
                        for (nm, vv) in b.entries() {
                            let dv = if nm == vi { delta } else { 0.0 };
                            bb.set(nm, vv + dv).expect("bind");
                        }
                        eval_derivs(e, &bb, &var_refs, 1).expect("derivs").gradient
                    };
                    let gp = shift_grad(h);
                    let gm = shift_grad(-h);
                    for j in 0..var_refs.len() {
                        let fd = (gp[j] - gm[j]) / (2.0 * h);
                        worst_hess =
                            worst_hess.max((hess[i][j] - fd).abs() / (1.0 + fd.abs()));
                    }
                }
            }

            // Legendre roundtrip at the same sampled point
            let q: Vec<f64> = spec
                .coords()
                .iter()
                .map(|c| b.get(c).expect("bound"))
                .collect();
            let qd: Vec<f64> = spec
                .velocity_names()
                .iter()
                .map(|v| b.get(v).expect("bound"))
                .collect();
            let lam: Vec<f64> = (0..spec.m()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cs = ConfigState::new(0.0, q.clone(), qd.clone());
            let p = momenta(spec, &cs, &lam).expect("momenta");
            let back =
                legendre_invert(spec, 0.0, &q, &p, &lam, &vec![0.0; spec.n()]).expect("invert");
            for i in 0..spec.n() {
                worst_roundtrip = worst_roundtrip.max((back[i] - qd[i]).abs());
            }
        }
    }
    report(
        "A9 derivative engine",
        worst_grad < 1e-5 && worst_hess < 1e-5 && worst_roundtrip < 1e-10,
        &format!(
            "gradient vs differences {worst_grad:.2e} (<1e-5), Hessian vs differences {worst_hess:.2e} (<1e-5), Legendre roundtrip {worst_roundtrip:.2e} (<1e-10)"
        ),
    );
}

#[test]
fn a10_rate_consistency() {
    let cases = [
        ("rolling-sphere", MethodKind::Flannery, 2.0),
        ("twist-toy", MethodKind::Flannery, 2.0),
        ("rod-pendulum", MethodKind::Dirac, 2.0),
    ];
    let mut worst_rate: f64 = 0.0;
    let mut worst_plam: f64 = 0.0;
    for (name, method, t_end) in cases {
        let cfg = ScenarioConfig::builtin(name).expect("builtin");
        let out = run(&cfg, RunMethod::Phase(method), t_end, &opts(4001)).expect("run");
        worst_plam = worst_plam.max(out.trajectory.stats.max_plam_inf);
        let spec = &cfg.spec;
        let (n, m) = (spec.n(), spec.m());

        let mut observables: Vec<(Observable, Box<dyn Fn(usize) -> f64>)> = Vec::new();
        for c in 0..n {
            let obs = Observable::parse(spec, &spec.coords()[c]).expect("obs");
            let out_ref = &out;
            observables.push((obs, Box::new(move |i| out_ref.q(i)[c])));
        }
        for c in 0..n {
            let obs = Observable::parse(spec, &spec.momentum_names()[c]).expect("obs");
            let out_ref = &out;
            observables.push((obs, Box::new(move |i| out_ref.second_block(i)[c])));
        }
        for k in 0..m {
            let out_ref = &out;
            observables.push((
                Observable::Constraint(k),
                Box::new(move |i| out_ref.trajectory.diag[i].g[k]),
            ));
        }

        // fourth-order central differences on the uniform sample grid
        let dt = out.time(1) - out.time(0);
        let stride = 50;
        for i in (stride..out.len() - stride).step_by(stride) {
            let s = out.phase_state(&cfg, i).expect("state");
            for (obs, value_at) in &observables {
                let rate = observable_rate(obs, spec, &s, method).expect("rate");
                let fd = (8.0 * (value_at(i + 1) - value_at(i - 1))
                    - (value_at(i + 2) - value_at(i - 2)))
                    / (12.0 * dt);
                let err = (rate - fd).abs() / (1.0 + fd.abs());
                worst_rate = worst_rate.max(err);
            }
        }
    }
    report(
        "A10 rate consistency",
        worst_rate < 1e-6 && worst_plam < 1e-10,
        &format!(
            "bracket rate vs trajectory differences {worst_rate:.2e} (<1e-6), max |plam| {worst_plam:.2e} (<1e-10)"
        ),
    );
}
