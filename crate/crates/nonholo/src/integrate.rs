//! Time stepping for any state-derivative function, with per-step
//! diagnostics, dense output, and optional post-step stabilization.
//!
//! Two schemes: classical fixed-step RK4 (kept for convergence studies)
//! and Dormand-Prince 5(4) with PI step-size control, the workhorse for
//! these non-stiff flows. Dense output is cubic Hermite on the accepted
//! steps, sampled at a uniform user-chosen grid.

use crate::dynamics::{solve_flow, MethodKind};
use crate::error::{Error, Result};
use crate::linalg::{lstsq_min_norm, vec_norm_inf, Mat};
use crate::model::{
    adjoint_blocks, constraint_blocks, legendre_invert_generic, PhaseState, SystemSpec,
};

pub const STEP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Classical fixed-step fourth-order Runge-Kutta.
    Rk4 { dt: f64 },
    /// Dormand-Prince 5(4) adaptive with PI control.
    Dp45 { rel_tol: f64, abs_tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stabilization {
    None,
    /// Post-step minimum-norm momentum correction (see [`project`]).
    Projection,
}

#[derive(Debug, Clone)]
pub struct IntegratorOpts {
    pub scheme: Scheme,
    pub max_steps: usize,
    /// Abort when max |g_k| at a step end exceeds this.
    pub drift_abort: Option<f64>,
    /// Number of dense-output sample points (uniform in time, endpoints
    /// included).
    pub samples: usize,
    pub stabilization: Stabilization,
}

impl Default for IntegratorOpts {
    fn default() -> Self {
        IntegratorOpts {
            scheme: Scheme::Dp45 {
                rel_tol: 1e-10,
                abs_tol: 1e-12,
            },
            max_steps: 2_000_000,
            drift_abort: Some(1e-3),
            samples: 400,
            stabilization: Stabilization::None,
        }
    }
}

/// Diagnostics evaluated at one time/state pair.
#[derive(Debug, Clone)]
pub struct StepDiag {
    pub t: f64,
    /// Step size of the covering accepted step.
    pub h: f64,
    /// Constraint residuals.
    pub g: Vec<f64>,
    pub lam: Vec<f64>,
    pub plam_inf: f64,
    /// Physical (unadjoined) energy.
    pub energy: f64,
    /// Adjoined Hamiltonian; absent for configuration-space flows.
    pub h_tilde: Option<f64>,
    pub newton_iters: u32,
    /// Max |f| of the transposition tensor at this state.
    pub f_norm: f64,
    /// ||A f - G||_inf at this state.
    pub f_residual: f64,
}

/// A state-derivative function with its diagnostics and stabilization
/// hooks. Implementations own whatever warm-start caches they need; one
/// integration is sequential, distinct integrations share nothing.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()>;

    fn diagnostics(&mut self, t: f64, y: &[f64]) -> Result<StepDiag>;

    /// In-place stabilization after an accepted step.
    fn stabilize(&mut self, _t: f64, _y: &mut [f64]) -> Result<()> {
        Ok(())
    }
}

/// Aggregates over the whole integration.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
    pub max_g_inf: f64,
    pub max_plam_inf: f64,
}

/// Time-ordered samples with aligned diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diag: Vec<StepDiag>,
    pub stats: RunStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Cubic Hermite interpolant on one step; fourth-order accurate in the
/// step size.
fn hermite(theta: f64, h: f64, y0: &[f64], f0: &[f64], y1: &[f64], f1: &[f64]) -> Vec<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let c_y0 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let c_f0 = h * (t3 - 2.0 * t2 + theta);
    let c_y1 = -2.0 * t3 + 3.0 * t2;
    let c_f1 = h * (t3 - t2);
    (0..y0.len())
        .map(|i| c_y0 * y0[i] + c_f0 * f0[i] + c_y1 * y1[i] + c_f1 * f1[i])
        .collect()
}

/// Continuous extension over one accepted step.
enum StepInterp<'a> {
    /// Cubic Hermite on the step endpoints (used by RK4).
    Hermite {
        y0: &'a [f64],
        f0: &'a [f64],
        y1: &'a [f64],
        f1: &'a [f64],
    },
    /// Degree-4 Dormand-Prince continuation polynomial (O(h^5) accurate).
    Dense5 { rcont: &'a [Vec<f64>; 5] },
}

impl StepInterp<'_> {
    fn at(&self, theta: f64, h: f64) -> Vec<f64> {
        match self {
            StepInterp::Hermite { y0, f0, y1, f1 } => hermite(theta, h, y0, f0, y1, f1),
            StepInterp::Dense5 { rcont } => {
                let theta1 = 1.0 - theta;
                (0..rcont[0].len())
                    .map(|i| {
                        rcont[0][i]
                            + theta
                                * (rcont[1][i]
                                    + theta1
                                        * (rcont[2][i]
                                            + theta * (rcont[3][i] + theta1 * rcont[4][i])))
                    })
                    .collect()
            }
        }
    }
}

struct SampleSink {
    times: Vec<f64>,
    next: usize,
    states: Vec<Vec<f64>>,
    diag_times: Vec<f64>,
    step_h: Vec<f64>,
}

impl SampleSink {
    fn new(t0: f64, t_end: f64, samples: usize) -> SampleSink {
        let samples = samples.max(2);
        let times: Vec<f64> = (0..samples)
            .map(|i| t0 + (t_end - t0) * i as f64 / (samples - 1) as f64)
            .collect();
        SampleSink {
            times,
            next: 0,
            states: Vec::with_capacity(samples),
            diag_times: Vec::with_capacity(samples),
            step_h: Vec::with_capacity(samples),
        }
    }

    /// Emit all samples falling inside the accepted step `[t0, t1]`.
    fn drain(&mut self, t0: f64, t1: f64, interp: &StepInterp<'_>) {
        let h = t1 - t0;
        while self.next < self.times.len() {
            let ts = self.times[self.next];
            if ts > t1 + 1e-14 * t1.abs().max(1.0) {
                break;
            }
            let theta = if h > 0.0 { ((ts - t0) / h).clamp(0.0, 1.0) } else { 0.0 };
            self.states.push(interp.at(theta, h));
            self.diag_times.push(ts);
            self.step_h.push(h);
            self.next += 1;
        }
    }
}

fn check_finite(_t: f64, y: &[f64]) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NoConvergence {
            context: "integrate",
            iters: 0,
            residual: f64::NAN,
        })
    }
}

/// Integrate `system` from `(t0, y0)` to `t_end`.
pub fn integrate(
    system: &mut dyn OdeSystem,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &IntegratorOpts,
) -> Result<Trajectory> {
    assert!(t_end > t0, "t_end must exceed t0");
    let dim = system.dim();
    assert_eq!(y0.len(), dim);

    let mut stats = RunStats::default();
    let mut sink = SampleSink::new(t0, t_end, opts.samples);

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f = vec![0.0; dim];
    system.eval(t, &y, &mut f)?;
    stats.rhs_evals += 1;

    let post_step = |system: &mut dyn OdeSystem,
                         stats: &mut RunStats,
                         t: f64,
                         y: &[f64]|
     -> Result<()> {
        let diag = system.diagnostics(t, y)?;
        let g_inf = vec_norm_inf(&diag.g);
        stats.max_g_inf = stats.max_g_inf.max(g_inf);
        stats.max_plam_inf = stats.max_plam_inf.max(diag.plam_inf);
        if let Some(threshold) = opts.drift_abort {
            if g_inf > threshold {
                return Err(Error::DriftAbort {
                    t,
                    residual: g_inf,
                    threshold,
                });
            }
        }
        Ok(())
    };

    match opts.scheme {
        Scheme::Rk4 { dt } => {
            assert!(dt > 0.0, "dt must be positive");
            while t < t_end - 1e-14 * t_end.abs().max(1.0) {
                if stats.steps_accepted >= opts.max_steps {
                    return Err(Error::MaxStepsExceeded { t });
                }
                let h = dt.min(t_end - t);
                let y1 = rk4_step(system, t, &y, &f, h, &mut stats)?;
                let t1 = t + h;
                check_finite(t1, &y1)?;
                let mut y1 = y1;
                if opts.stabilization == Stabilization::Projection {
                    system.stabilize(t1, &mut y1)?;
                }
                let mut f1 = vec![0.0; dim];
                system.eval(t1, &y1, &mut f1)?;
                stats.rhs_evals += 1;
                sink.drain(
                    t,
                    t1,
                    &StepInterp::Hermite {
                        y0: &y,
                        f0: &f,
                        y1: &y1,
                        f1: &f1,
                    },
                );
                post_step(system, &mut stats, t1, &y1)?;
                stats.steps_accepted += 1;
                t = t1;
                y = y1;
                f = f1;
            }
        }
        Scheme::Dp45 { rel_tol, abs_tol } => {
            assert!(rel_tol > 0.0 && abs_tol > 0.0, "tolerances must be positive");
            let mut h = initial_step(system, t, &y, &f, t_end, rel_tol, abs_tol, &mut stats)?;
            let mut facold: f64 = 1e-4;
            const BETA: f64 = 0.04;
            const EXPO1: f64 = 0.2 - BETA * 0.75;
            const SAFE: f64 = 0.9;
            const FACL: f64 = 0.2;
            const FACR: f64 = 10.0;

            while t < t_end - 1e-14 * t_end.abs().max(1.0) {
                if stats.steps_accepted + stats.steps_rejected >= opts.max_steps {
                    return Err(Error::MaxStepsExceeded { t });
                }
                if h < STEP_FLOOR {
                    return Err(Error::StepUnderflow { t });
                }
                h = h.min(t_end - t);

                let (y1, f1, err, rcont) =
                    dp45_step(system, t, &y, &f, h, rel_tol, abs_tol, &mut stats)?;

                let fac11 = err.powf(EXPO1);
                if err <= 1.0 {
                    let t1 = t + h;
                    check_finite(t1, &y1)?;
                    let mut y1 = y1;
                    let mut f1 = f1;
                    if opts.stabilization == Stabilization::Projection {
                        system.stabilize(t1, &mut y1)?;
                        system.eval(t1, &y1, &mut f1)?;
                        stats.rhs_evals += 1;
                        // a projected step invalidates the continuation
                        // polynomial; fall back to endpoint Hermite
                        sink.drain(
                            t,
                            t1,
                            &StepInterp::Hermite {
                                y0: &y,
                                f0: &f,
                                y1: &y1,
                                f1: &f1,
                            },
                        );
                    } else {
                        sink.drain(t, t1, &StepInterp::Dense5 { rcont: &rcont });
                    }
                    post_step(system, &mut stats, t1, &y1)?;
                    stats.steps_accepted += 1;
                    let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FACR, 1.0 / FACL);
                    facold = err.max(1e-4);
                    t = t1;
                    y = y1;
                    f = f1;
                    h /= fac;
                } else {
                    stats.steps_rejected += 1;
                    h /= (fac11 / SAFE).min(1.0 / FACL);
                }
            }
        }
    }

    // diagnostics on the sampled grid
    let mut diag = Vec::with_capacity(sink.states.len());
    for i in 0..sink.states.len() {
        let mut d = system.diagnostics(sink.diag_times[i], &sink.states[i])?;
        d.h = sink.step_h[i];
        diag.push(d);
    }
    Ok(Trajectory {
        times: sink.diag_times,
        states: sink.states,
        diag,
        stats,
    })
}

fn rk4_step(
    system: &mut dyn OdeSystem,
    t: f64,
    y: &[f64],
    f0: &[f64],
    h: f64,
    stats: &mut RunStats,
) -> Result<Vec<f64>> {
    let dim = y.len();
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let stage = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        (0..dim).map(|i| y[i] + c * h * k[i]).collect()
    };
    system.eval(t + 0.5 * h, &stage(y, f0, 0.5), &mut k2)?;
    system.eval(t + 0.5 * h, &stage(y, &k2, 0.5), &mut k3)?;
    system.eval(t + h, &stage(y, &k3, 1.0), &mut k4)?;
    stats.rhs_evals += 3;
    Ok((0..dim)
        .map(|i| y[i] + h / 6.0 * (f0[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Dormand-Prince 5(4) step: returns (y5, f(t+h, y5), scaled error
/// norm, continuation coefficients). FSAL: the returned derivative is
/// the seventh stage.
#[allow(clippy::too_many_arguments)]
fn dp45_step(
    system: &mut dyn OdeSystem,
    t: f64,
    y: &[f64],
    k1: &[f64],
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    stats: &mut RunStats,
) -> Result<(Vec<f64>, Vec<f64>, f64, [Vec<f64>; 5])> {
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const A71: f64 = 35.0 / 384.0;
    const A73: f64 = 500.0 / 1113.0;
    const A74: f64 = 125.0 / 192.0;
    const A75: f64 = -2187.0 / 6784.0;
    const A76: f64 = 11.0 / 84.0;
    // embedded 4th-order weights
    const B1: f64 = 5179.0 / 57600.0;
    const B3: f64 = 7571.0 / 16695.0;
    const B4: f64 = 393.0 / 640.0;
    const B5: f64 = -92097.0 / 339200.0;
    const B6: f64 = 187.0 / 2100.0;
    const B7: f64 = 1.0 / 40.0;
    // dense-output weights of the degree-4 continuation polynomial
    const D1: f64 = -12715105075.0 / 11282082432.0;
    const D3: f64 = 87487479700.0 / 32700410799.0;
    const D4: f64 = -10690763975.0 / 1880347072.0;
    const D5: f64 = 701980252875.0 / 199316789632.0;
    const D6: f64 = -1453857185.0 / 822651844.0;
    const D7: f64 = 69997945.0 / 29380423.0;

    let dim = y.len();
    let comb = |coeffs: &[(f64, &[f64])]| -> Vec<f64> {
        (0..dim)
            .map(|i| {
                let mut acc = y[i];
                for (c, k) in coeffs {
                    acc += h * c * k[i];
                }
                acc
            })
            .collect()
    };

    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut k5 = vec![0.0; dim];
    let mut k6 = vec![0.0; dim];
    let mut k7 = vec![0.0; dim];

    system.eval(t + h / 5.0, &comb(&[(A21, k1)]), &mut k2)?;
    system.eval(t + 3.0 * h / 10.0, &comb(&[(A31, k1), (A32, &k2)]), &mut k3)?;
    system.eval(
        t + 4.0 * h / 5.0,
        &comb(&[(A41, k1), (A42, &k2), (A43, &k3)]),
        &mut k4,
    )?;
    system.eval(
        t + 8.0 * h / 9.0,
        &comb(&[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        &mut k5,
    )?;
    system.eval(
        t + h,
        &comb(&[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        &mut k6,
    )?;
    let y5 = comb(&[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
    system.eval(t + h, &y5, &mut k7)?;
    stats.rhs_evals += 6;

    let mut err_acc = 0.0;
    for i in 0..dim {
        let y4_i = y[i]
            + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i] + B7 * k7[i]);
        let sc = abs_tol + rel_tol * y[i].abs().max(y5[i].abs());
        let e = (y5[i] - y4_i) / sc;
        err_acc += e * e;
    }
    let err = (err_acc / dim as f64).sqrt();

    let mut rcont = [
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
        vec![0.0; dim],
    ];
    for i in 0..dim {
        let ydiff = y5[i] - y[i];
        let bspl = h * k1[i] - ydiff;
        rcont[0][i] = y[i];
        rcont[1][i] = ydiff;
        rcont[2][i] = bspl;
        rcont[3][i] = ydiff - h * k7[i] - bspl;
        rcont[4][i] = h
            * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
    }
    Ok((y5, k7, err, rcont))
}

/// Starting step size for the adaptive scheme (Hairer's `hinit`).
#[allow(clippy::too_many_arguments)]
fn initial_step(
    system: &mut dyn OdeSystem,
    t: f64,
    y: &[f64],
    f0: &[f64],
    t_end: f64,
    rel_tol: f64,
    abs_tol: f64,
    stats: &mut RunStats,
) -> Result<f64> {
    let dim = y.len();
    let sc: Vec<f64> = (0..dim).map(|i| abs_tol + rel_tol * y[i].abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / dim as f64).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / dim as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(t_end - t);
    let y1: Vec<f64> = (0..dim).map(|i| y[i] + h0 * f0[i]).collect();
    let mut f1 = vec![0.0; dim];
    system.eval(t + h0, &y1, &mut f1)?;
    stats.rhs_evals += 1;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / dim as f64)
        .sqrt()
        / h0;
    let d_max = d1.max(d2);
    let h1 = if d_max <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d_max).powf(0.2)
    };
    Ok(h1.min(100.0 * h0).min(t_end - t))
}

/// Post-step stabilization: minimum-norm Newton correction of the
/// momenta restoring the momentum-sensitive constraint levels, with `q`
/// unchanged. For velocity-dependent constraints that level is the
/// phase-space constraint itself, which the multiplier solve already
/// pins at every evaluation; for holonomic constraints it is the hidden
/// velocity-level `g_dot = dg/dq . q_dot + dg/dt = 0`. Position-level
/// residuals of holonomic constraints are untouchable without moving
/// `q`; states outside the basin (position residual above `1e-3`) are
/// rejected.
pub fn project(spec: &SystemSpec, s: &PhaseState, method: MethodKind) -> Result<PhaseState> {
    let n = spec.n();
    let m = spec.m();
    if m == 0 {
        return Ok(s.clone());
    }
    let holonomic: Vec<usize> = {
        let vels = spec.velocity_names();
        (0..m)
            .filter(|&k| {
                let vars = spec.constraints()[k].free_vars();
                !vels.iter().any(|v| vars.contains(v))
            })
            .collect()
    };

    let mut p = s.p.clone();
    let zeros = vec![0.0; n];
    let mut lam = s.lam.clone();

    // basin check on the position-level residuals
    let (qd0, _) = legendre_invert_generic(spec, s.t, &s.q, &p, &lam, &zeros)?;
    let g0 = crate::model::constraint_values(spec, s.t, &s.q, &qd0)?;
    for &k in &holonomic {
        if g0[k].abs() > 1e-3 {
            return Err(Error::NoConvergence {
                context: "project",
                iters: 0,
                residual: g0[k].abs(),
            });
        }
    }

    if !holonomic.is_empty() {
        let mut prev_norm = f64::INFINITY;
        for iter in 0..crate::model::NEWTON_MAX_ITERS {
            let flow = solve_flow(spec, method, s.t, &s.q, &p, &lam, &zeros, false)?;
            lam = flow.lam.clone();
            let qd = flow.qd.clone();
            // residuals: g_dot for each holonomic constraint
            let mut r = Vec::with_capacity(holonomic.len());
            for &k in &holonomic {
                let cb = constraint_blocks(spec, k, s.t, &s.q, &qd)?;
                let mut gdot = cb.dt;
                for i in 0..n {
                    gdot += cb.dq[i] * qd[i];
                }
                r.push(gdot);
            }
            let r_norm = vec_norm_inf(&r);
            if r_norm < 1e-12 {
                break;
            }
            if r_norm > prev_norm * (1.0 + 1e-9) || iter == crate::model::NEWTON_MAX_ITERS - 1 {
                return Err(Error::NoConvergence {
                    context: "project",
                    iters: iter,
                    residual: r_norm,
                });
            }
            prev_norm = r_norm;
            // Jacobian rows d g_dot / dp = (dg/dq) W^-1
            let blocks = adjoint_blocks(spec, s.t, &s.q, &qd, &lam)?;
            let mut jac = Mat::zeros(holonomic.len(), n);
            for (row, &k) in holonomic.iter().enumerate() {
                let cb = constraint_blocks(spec, k, s.t, &s.q, &qd)?;
                let x = blocks
                    .w
                    .solve_vec(&cb.dq)
                    .map_err(|_| Error::DegenerateLegendre { cond: f64::INFINITY })?;
                for j in 0..n {
                    jac[(row, j)] = x[j];
                }
            }
            let delta = lstsq_min_norm(&jac, &r);
            for j in 0..n {
                p[j] -= delta[j];
            }
        }
    }

    // re-solve the multipliers at the corrected momenta
    let flow = solve_flow(spec, method, s.t, &s.q, &p, &lam, &zeros, false)?;
    Ok(PhaseState::new(
        s.t,
        s.q.clone(),
        p,
        flow.lam,
        s.plam.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// q_dot = p, p_dot = 0 with p fixed through the state vector.
    struct LinearFlow;

    impl OdeSystem for LinearFlow {
        fn dim(&self) -> usize {
            2
        }

        fn eval(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
            dydt[0] = y[1];
            dydt[1] = 0.0;
            Ok(())
        }

        fn diagnostics(&mut self, t: f64, y: &[f64]) -> Result<StepDiag> {
            Ok(StepDiag {
                t,
                h: 0.0,
                g: vec![],
                lam: vec![],
                plam_inf: 0.0,
                energy: 0.5 * y[1] * y[1],
                h_tilde: None,
                newton_iters: 0,
                f_norm: 0.0,
                f_residual: 0.0,
            })
        }
    }

    struct Oscillator;

    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }

        fn eval(&mut self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
            dydt[0] = y[1];
            dydt[1] = -y[0];
            Ok(())
        }

        fn diagnostics(&mut self, t: f64, y: &[f64]) -> Result<StepDiag> {
            Ok(StepDiag {
                t,
                h: 0.0,
                g: vec![],
                lam: vec![],
                plam_inf: 0.0,
                energy: 0.5 * (y[0] * y[0] + y[1] * y[1]),
                h_tilde: None,
                newton_iters: 0,
                f_norm: 0.0,
                f_residual: 0.0,
            })
        }
    }

    #[test]
    fn linear_flow_is_exact() {
        let opts = IntegratorOpts {
            scheme: Scheme::Dp45 {
                rel_tol: 1e-12,
                abs_tol: 1e-14,
            },
            ..Default::default()
        };
        let traj = integrate(&mut LinearFlow, 0.0, &[0.0, 3.0], 2.0, &opts).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last[0] - 6.0).abs() < 1e-11, "q(2) = {}", last[0]);
        assert_eq!(traj.times.len(), 400);
        assert!((traj.times[0] - 0.0).abs() < 1e-15);
        assert!((traj.times[399] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn oscillator_energy_drift_is_tiny() {
        let opts = IntegratorOpts {
            scheme: Scheme::Dp45 {
                rel_tol: 1e-10,
                abs_tol: 1e-12,
            },
            samples: 1000,
            ..Default::default()
        };
        let t_end = 10.0 * 2.0 * std::f64::consts::PI;
        let traj = integrate(&mut Oscillator, 0.0, &[1.0, 0.0], t_end, &opts).unwrap();
        let e0 = traj.diag[0].energy;
        for d in &traj.diag {
            assert!((d.energy - e0).abs() / e0 < 1e-8);
        }
        // closed form: y = cos(t)
        let last = traj.states.last().unwrap();
        assert!((last[0] - t_end.cos()).abs() < 1e-7);
    }

    #[test]
    fn rk4_global_error_scales_as_dt4() {
        // against the adaptive reference on the oscillator
        let reference = {
            let opts = IntegratorOpts {
                scheme: Scheme::Dp45 {
                    rel_tol: 1e-13,
                    abs_tol: 1e-14,
                },
                samples: 2,
                ..Default::default()
            };
            let traj = integrate(&mut Oscillator, 0.0, &[1.0, 0.0], 2.0, &opts).unwrap();
            traj.states.last().unwrap().clone()
        };
        let run = |dt: f64| -> f64 {
            let opts = IntegratorOpts {
                scheme: Scheme::Rk4 { dt },
                samples: 2,
                ..Default::default()
            };
            let traj = integrate(&mut Oscillator, 0.0, &[1.0, 0.0], 2.0, &opts).unwrap();
            let last = traj.states.last().unwrap();
            ((last[0] - reference[0]).powi(2) + (last[1] - reference[1]).powi(2)).sqrt()
        };
        let e1 = run(1e-2);
        let e2 = run(5e-3);
        let e3 = run(2.5e-3);
        let r12 = e1 / e2;
        let r23 = e2 / e3;
        assert!(r12 > 8.0 && r12 < 32.0, "ratio {r12}");
        assert!(r23 > 8.0 && r23 < 32.0, "ratio {r23}");
    }

    /// A flow whose reported constraint residual grows linearly in time.
    struct Drifter;

    impl OdeSystem for Drifter {
        fn dim(&self) -> usize {
            1
        }

        fn eval(&mut self, _t: f64, _y: &[f64], dydt: &mut [f64]) -> Result<()> {
            dydt[0] = 1.0;
            Ok(())
        }

        fn diagnostics(&mut self, t: f64, _y: &[f64]) -> Result<StepDiag> {
            Ok(StepDiag {
                t,
                h: 0.0,
                g: vec![t],
                lam: vec![],
                plam_inf: 0.0,
                energy: 0.0,
                h_tilde: None,
                newton_iters: 0,
                f_norm: 0.0,
                f_residual: 0.0,
            })
        }
    }

    #[test]
    fn drift_abort_fires() {
        let opts = IntegratorOpts {
            scheme: Scheme::Rk4 { dt: 0.1 },
            drift_abort: Some(1e-3),
            samples: 2,
            ..Default::default()
        };
        match integrate(&mut Drifter, 0.0, &[0.0], 2.0, &opts) {
            Err(Error::DriftAbort { residual, .. }) => assert!(residual > 1e-3),
            other => panic!("expected DriftAbort, got {other:?}"),
        }
    }

    #[test]
    fn max_steps_is_enforced() {
        let opts = IntegratorOpts {
            scheme: Scheme::Rk4 { dt: 1e-6 },
            max_steps: 10,
            drift_abort: None,
            samples: 2,
            ..Default::default()
        };
        match integrate(&mut LinearFlow, 0.0, &[0.0, 1.0], 1.0, &opts) {
            Err(Error::MaxStepsExceeded { .. }) => {}
            other => panic!("expected MaxStepsExceeded, got {other:?}"),
        }
    }
}
