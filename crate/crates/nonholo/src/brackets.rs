//! Generalized-transposition data and bracket evaluation.
//!
//! For constraints `g_k(q, q_dot, t)` the admissible variations obey
//! `A (dq_dot - d/dt dq) = G dq` with `A_kj = dg_k/dq_dot_j` and
//! `G_kj = d/dt(dg_k/dq_dot_j) - dg_k/dq_j`. The tensor `f` relating
//! `dq_dot_j - d/dt dq_j = f_ji dq_i` is pinned here as the Moore-Penrose
//! minimum-norm solution of `A f = G`, which degenerates to exactly zero
//! for holonomic (`A = 0`) and integrable (`G = 0`) constraints.
//!
//! Brackets act on observables of the extended phase point
//! `(q, p, lam, plam, t)`. The Poisson bracket is canonical on both the
//! coordinate and multiplier sectors; the generalized bracket adds the
//! `p_j f_ji` correction to the coordinate sector and is not
//! antisymmetric when `f != 0`.

use crate::error::{Error, Result};
use crate::expr::{self, grad_indexed, Expr, Real};
use crate::linalg::{pseudo_inverse, Mat};
use crate::model::{
    adjoint_blocks, constraint_blocks, grad_hamiltonian_with_guess, hamiltonian_with_guess,
    legendre_invert_generic, ConfigState, PhaseState, SystemSpec,
};

/// Transposition data at one state: the velocity Jacobian `A`, the matrix
/// `G`, the solved tensor `f`, and the achieved residual `||A f - G||_inf`.
///
/// When `A` has full row rank the solve is exact and the residual sits at
/// rounding level; rank deficiency shows up in the residual, never as an
/// error.
#[derive(Debug, Clone)]
pub struct TranspositionField {
    pub a: Mat<f64>,
    pub g: Mat<f64>,
    pub f: Mat<f64>,
    pub residual: f64,
}

impl TranspositionField {
    /// Minimum-norm least-squares resolution `f = A^+ G`.
    pub fn solve(a: Mat<f64>, g: Mat<f64>) -> TranspositionField {
        let f = pseudo_inverse(&a).matmul(&g);
        let residual = a.matmul(&f).sub(&g).norm_inf();
        TranspositionField { a, g, f, residual }
    }

    /// The `f = 0` field of an unconstrained or holonomic system.
    pub fn zero(n: usize, m: usize) -> TranspositionField {
        TranspositionField {
            a: Mat::zeros(m, n),
            g: Mat::zeros(m, n),
            f: Mat::zeros(n, n),
            residual: 0.0,
        }
    }

    pub fn f_is_zero(&self, tol: f64) -> bool {
        self.f.norm_inf() <= tol
    }
}

/// `A_kj = dg_k/dq_dot_j` at a configuration point.
pub fn velocity_jacobian(spec: &SystemSpec, cs: &ConfigState) -> Result<Mat<f64>> {
    velocity_jacobian_generic(spec, cs.t, &cs.q, &cs.qd)
}

pub(crate) fn velocity_jacobian_generic<T: Real>(
    spec: &SystemSpec,
    t: T,
    q: &[T],
    qd: &[T],
) -> Result<Mat<T>> {
    let (n, m) = (spec.n(), spec.m());
    let mut a = Mat::zeros(m, n);
    let lam = vec![T::zero(); m];
    let values = spec.config_values(t, q, qd, &lam);
    let wrt: Vec<usize> = (n..2 * n).collect();
    for k in 0..m {
        let (_, grad) = grad_indexed(
            &spec.constraints()[k],
            spec.config_names(),
            &values,
            &wrt,
        )?;
        for j in 0..n {
            a[(k, j)] = grad[j];
        }
    }
    Ok(a)
}

/// `G_kj = d/dt(dg_k/dq_dot_j) - dg_k/dq_j`, with the total derivative
/// expanded along the supplied accelerations:
/// `d/dt(dg/dq_dot_j) = d2g/dq dq_dot_j . q_dot + d2g/dq_dot dq_dot_j . q_ddot + d2g/dt dq_dot_j`.
pub fn gkj_matrix(spec: &SystemSpec, cs: &ConfigState, qdd: &[f64]) -> Result<Mat<f64>> {
    gkj_matrix_generic(spec, cs.t, &cs.q, &cs.qd, qdd)
}

pub(crate) fn gkj_matrix_generic<T: Real>(
    spec: &SystemSpec,
    t: T,
    q: &[T],
    qd: &[T],
    qdd: &[T],
) -> Result<Mat<T>> {
    let (n, m) = (spec.n(), spec.m());
    let mut g = Mat::zeros(m, n);
    for k in 0..m {
        let blocks = constraint_blocks(spec, k, t, q, qd)?;
        for j in 0..n {
            let mut total = blocks.hqd_t[j] - blocks.dq[j];
            for i in 0..n {
                total = total + blocks.hq_qd[i][j] * qd[i] + blocks.hqd_qd[i][j] * qdd[i];
            }
            g[(k, j)] = total;
        }
    }
    Ok(g)
}

/// Spec operation: minimum-norm `f` with `A f = G` in the least-squares
/// sense (see [`TranspositionField::solve`]).
pub fn solve_f(a: Mat<f64>, g: Mat<f64>) -> TranspositionField {
    TranspositionField::solve(a, g)
}

/// Gradient of an observable with respect to the extended phase point.
#[derive(Debug, Clone)]
pub struct PhaseGradient {
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
    pub dlam: Vec<f64>,
    pub dplam: Vec<f64>,
    /// explicit time derivative (not used by the brackets themselves)
    pub dt: f64,
}

/// A differentiable scalar on extended phase space.
///
/// `Expr` observables are the declarative surface (anything over
/// `q, p, lam_k, plam_k, t` and the system parameters). `Hamiltonian` and
/// `Constraint` name the two built-in observables whose evaluation runs
/// through the inverse Legendre map; keeping them symbolic here lets
/// bracket-based rates use exact derivatives instead of differencing.
#[derive(Debug, Clone)]
pub enum Observable {
    Expr(Expr),
    Hamiltonian,
    /// `g_k(q, q_dot(q, p, lam), t)`, zero-based index.
    Constraint(usize),
}

impl Observable {
    /// Parse an expression observable and check its free variables
    /// against the system's phase names and parameters.
    pub fn parse(spec: &SystemSpec, source: &str) -> Result<Observable> {
        let e = expr::parse(source)?;
        for var in e.free_vars() {
            let known = spec.phase_names().iter().any(|n| *n == var);
            if !known {
                return Err(Error::InvalidSystem(format!(
                    "observable references `{var}`, not a phase variable or parameter"
                )));
            }
        }
        Ok(Observable::Expr(e))
    }

    pub fn value(&self, spec: &SystemSpec, s: &PhaseState) -> Result<f64> {
        match self {
            Observable::Expr(e) => {
                let values = spec.phase_values(s.t, &s.q, &s.p, &s.lam, &s.plam);
                expr::eval_generic(
                    e,
                    &expr::SplitEnv {
                        names: spec.phase_names(),
                        values: &values,
                    },
                )
            }
            Observable::Hamiltonian => {
                hamiltonian_with_guess(spec, s, &vec![0.0; spec.n()])
            }
            Observable::Constraint(k) => {
                let (qd, _) = legendre_invert_generic(
                    spec,
                    s.t,
                    &s.q,
                    &s.p,
                    &s.lam,
                    &vec![0.0; spec.n()],
                )?;
                let g = crate::model::constraint_values(spec, s.t, &s.q, &qd)?;
                Ok(g[*k])
            }
        }
    }

    /// Exact phase gradient.
    ///
    /// For `Hamiltonian` the multiplier-velocity slot `dplam` is zero
    /// here; the dynamics layer substitutes the solved `u` when building
    /// bracket rates, matching the formal substitution of undetermined
    /// multiplier velocities into the Hamiltonian.
    pub fn phase_gradient(&self, spec: &SystemSpec, s: &PhaseState) -> Result<PhaseGradient> {
        let (n, m) = (spec.n(), spec.m());
        match self {
            Observable::Expr(e) => {
                let values = spec.phase_values(s.t, &s.q, &s.p, &s.lam, &s.plam);
                let wrt: Vec<usize> = (0..2 * n + 2 * m + 1).collect();
                let (_, grad) = grad_indexed(e, spec.phase_names(), &values, &wrt)?;
                Ok(PhaseGradient {
                    dq: grad[..n].to_vec(),
                    dp: grad[n..2 * n].to_vec(),
                    dlam: grad[2 * n..2 * n + m].to_vec(),
                    dplam: grad[2 * n + m..2 * n + 2 * m].to_vec(),
                    dt: grad[2 * n + 2 * m],
                })
            }
            Observable::Hamiltonian => {
                let g = grad_hamiltonian_with_guess(spec, s, &vec![0.0; n])?;
                Ok(PhaseGradient {
                    dq: g.dq,
                    dp: g.dp,
                    dlam: g.dlam,
                    dplam: vec![0.0; m],
                    dt: g.dt,
                })
            }
            Observable::Constraint(k) => constraint_phase_gradient(spec, s, *k),
        }
    }
}

/// Chain-rule gradient of `g_k(q, q_dot(q, p, lam, t), t)` through the
/// inverse Legendre map: with `p = dL_adj/dq_dot` held,
/// `dq_dot = W^-1 (dp - B dq + A^T dlam - (d2L_adj/dq_dot dt) dt)`.
fn constraint_phase_gradient(spec: &SystemSpec, s: &PhaseState, k: usize) -> Result<PhaseGradient> {
    let (n, m) = (spec.n(), spec.m());
    let (qd, _) = legendre_invert_generic(spec, s.t, &s.q, &s.p, &s.lam, &vec![0.0; n])?;
    let blocks = adjoint_blocks(spec, s.t, &s.q, &qd, &s.lam)?;
    let gk = constraint_blocks(spec, k, s.t, &s.q, &qd)?;
    let a = velocity_jacobian_generic(spec, s.t, &s.q, &qd)?;

    // row vector A_k W^-1 via solving W^T x = A_k^T (W symmetric)
    let ak: Vec<f64> = (0..n).map(|j| gk.dqd[j]).collect();
    let akw = blocks
        .w
        .solve_vec(&ak)
        .map_err(|_| Error::DegenerateLegendre { cond: f64::INFINITY })?;

    let mut dq = vec![0.0; n];
    for j in 0..n {
        let mut chain = 0.0;
        for i in 0..n {
            chain += akw[i] * blocks.b[(i, j)];
        }
        dq[j] = gk.dq[j] - chain;
    }
    let dp = akw.clone();
    let mut dlam = vec![0.0; m];
    for l in 0..m {
        let mut acc = 0.0;
        for i in 0..n {
            acc += akw[i] * a[(l, i)];
        }
        dlam[l] = acc;
    }
    let mut dt = gk.dt;
    for i in 0..n {
        dt -= akw[i] * blocks.dqd_dt[i];
    }
    Ok(PhaseGradient {
        dq,
        dp,
        dlam,
        dplam: vec![0.0; m],
        dt,
    })
}

/// Extended Poisson bracket of two gradients:
/// `sum_i (Xq_i Yp_i - Xp_i Yq_i) + sum_k (Xlam_k Yplam_k - Xplam_k Ylam_k)`.
pub fn poisson_grads(x: &PhaseGradient, y: &PhaseGradient) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.dq.len() {
        acc += x.dq[i] * y.dp[i] - x.dp[i] * y.dq[i];
    }
    for k in 0..x.dlam.len() {
        acc += x.dlam[k] * y.dplam[k] - x.dplam[k] * y.dlam[k];
    }
    acc
}

/// Generalized bracket: the coordinate sector picks up `p_j f_ji`,
/// `sum_i [Xq_i Yp_i - Xp_i (Yq_i - p_j f_ji)]`, the multiplier sector is
/// canonical.
pub fn flannery_grads(x: &PhaseGradient, y: &PhaseGradient, p: &[f64], f: &Mat<f64>) -> f64 {
    let pf = f.tmul_vec(p); // (p^T f)_i = sum_j p_j f_ji
    let mut acc = 0.0;
    for i in 0..x.dq.len() {
        acc += x.dq[i] * y.dp[i] - x.dp[i] * (y.dq[i] - pf[i]);
    }
    for k in 0..x.dlam.len() {
        acc += x.dlam[k] * y.dplam[k] - x.dplam[k] * y.dlam[k];
    }
    acc
}

/// Extended Poisson bracket `{X, Y}` at a state.
pub fn poisson(
    x: &Observable,
    y: &Observable,
    spec: &SystemSpec,
    s: &PhaseState,
) -> Result<f64> {
    let gx = x.phase_gradient(spec, s)?;
    let gy = y.phase_gradient(spec, s)?;
    Ok(poisson_grads(&gx, &gy))
}

/// Generalized bracket `{X, Y}` at a state under the supplied
/// transposition field.
pub fn flannery(
    x: &Observable,
    y: &Observable,
    spec: &SystemSpec,
    s: &PhaseState,
    tf: &TranspositionField,
) -> Result<f64> {
    let gx = x.phase_gradient(spec, s)?;
    let gy = y.phase_gradient(spec, s)?;
    Ok(flannery_grads(&gx, &gy, &s.p, &tf.f))
}

/// Poisson bracket of two expression observables over a generic scalar,
/// used to nest brackets (e.g. Jacobi-identity checks) with exact
/// derivatives.
pub fn poisson_expr_generic<T: Real>(
    spec: &SystemSpec,
    x: &Expr,
    y: &Expr,
    t: T,
    q: &[T],
    p: &[T],
    lam: &[T],
    plam: &[T],
) -> Result<T> {
    let (n, m) = (spec.n(), spec.m());
    let values = spec.phase_values(t, q, p, lam, plam);
    let wrt: Vec<usize> = (0..2 * n + 2 * m).collect();
    let (_, gx) = grad_indexed(x, spec.phase_names(), &values, &wrt)?;
    let (_, gy) = grad_indexed(y, spec.phase_names(), &values, &wrt)?;
    let mut acc = T::zero();
    for i in 0..n {
        acc = acc + gx[i] * gy[n + i] - gx[n + i] * gy[i];
    }
    for k in 0..m {
        acc = acc + gx[2 * n + k] * gy[2 * n + m + k] - gx[2 * n + m + k] * gy[2 * n + k];
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy3() -> SystemSpec {
        // free Lagrangian, one non-integrable velocity constraint
        SystemSpec::new(
            "twist",
            &["q1", "q2", "q3"],
            &[],
            "0.5*(q1_dot^2 + q2_dot^2 + q3_dot^2)",
            &["q2_dot - q3*q1_dot"],
        )
        .unwrap()
    }

    fn pendulum() -> SystemSpec {
        SystemSpec::new(
            "pendulum",
            &["x", "y"],
            &[("m", 1.0), ("l", 1.0), ("g_e", 9.8)],
            "0.5*m*(x_dot^2 + y_dot^2) - m*g_e*y",
            &["x^2 + y^2 - l^2"],
        )
        .unwrap()
    }

    #[test]
    fn velocity_jacobian_examples() {
        // holonomic: no velocity dependence
        let pend = pendulum();
        let cs = ConfigState::new(0.0, vec![0.6, 0.8], vec![0.1, 0.2]);
        let a = velocity_jacobian(&pend, &cs).unwrap();
        assert_eq!(a.norm_inf(), 0.0);

        // g = q2_dot - q3 q1_dot at q3 = 5
        let toy = toy3();
        let cs = ConfigState::new(0.0, vec![0.0, 0.0, 5.0], vec![1.0, 5.0, 2.0]);
        let a = velocity_jacobian(&toy, &cs).unwrap();
        assert_eq!(a.row(0), &[-5.0, 1.0, 0.0]);
    }

    #[test]
    fn gkj_examples() {
        // integrable g = q_dot - c: all second partials and dg/dq vanish
        let line = SystemSpec::new("line", &["x"], &[("c", 3.0)], "0.5*x_dot^2", &["x_dot - c"])
            .unwrap();
        let cs = ConfigState::new(0.0, vec![0.0], vec![3.0]);
        let g = gkj_matrix(&line, &cs, &[0.7]).unwrap();
        assert_eq!(g.norm_inf(), 0.0);

        // twist toy at q_dot = (1, *, 2): G = (-2, 0, 1)
        let toy = toy3();
        let cs = ConfigState::new(0.0, vec![0.0, 0.0, 5.0], vec![1.0, 5.0, 2.0]);
        let g = gkj_matrix(&toy, &cs, &[0.0, 0.0, 0.0]).unwrap();
        assert!((g[(0, 0)] - -2.0).abs() < 1e-14);
        assert!(g[(0, 1)].abs() < 1e-14);
        assert!((g[(0, 2)] - 1.0).abs() < 1e-14);

        // holonomic pendulum at (0.6, 0.8): G = -dg/dq = (-1.2, -1.6)
        let pend = pendulum();
        let cs = ConfigState::new(0.0, vec![0.6, 0.8], vec![0.0, 0.0]);
        let g = gkj_matrix(&pend, &cs, &[0.0, 0.0]).unwrap();
        assert!((g[(0, 0)] - -1.2).abs() < 1e-14);
        assert!((g[(0, 1)] - -1.6).abs() < 1e-14);
    }

    #[test]
    fn solve_f_worked_example() {
        let a = Mat::from_rows(vec![vec![-5.0, 1.0, 0.0]]);
        let g = Mat::from_rows(vec![vec![-2.0, 0.0, 1.0]]);
        let tf = solve_f(a, g);
        let expect = [
            [10.0 / 26.0, 0.0, -5.0 / 26.0],
            [-2.0 / 26.0, 0.0, 1.0 / 26.0],
            [0.0, 0.0, 0.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (tf.f[(i, j)] - expect[i][j]).abs() < 1e-14,
                    "f[{i}][{j}] = {}",
                    tf.f[(i, j)]
                );
            }
        }
        assert!(tf.residual < 1e-14);
    }

    #[test]
    fn solve_f_degenerations() {
        // A = 0 (holonomic): A^+ = 0 so f = 0
        let tf = solve_f(Mat::zeros(1, 3), Mat::from_rows(vec![vec![1.0, 2.0, 3.0]]));
        assert_eq!(tf.f.norm_inf(), 0.0);
        // G = 0 (integrable): f = 0
        let tf = solve_f(Mat::from_rows(vec![vec![-5.0, 1.0, 0.0]]), Mat::zeros(1, 3));
        assert_eq!(tf.f.norm_inf(), 0.0);
        assert_eq!(tf.residual, 0.0);
    }

    fn two_coord_state() -> (SystemSpec, PhaseState) {
        let spec = SystemSpec::new(
            "two",
            &["x", "y"],
            &[],
            "0.5*(x_dot^2 + y_dot^2)",
            &["x_dot - y_dot"],
        )
        .unwrap();
        let s = PhaseState::new(
            0.3,
            vec![2.0, -1.0],
            vec![0.5, 1.5],
            vec![0.25],
            vec![0.1],
        );
        (spec, s)
    }

    #[test]
    fn canonical_pairs() {
        let (spec, s) = two_coord_state();
        let q1 = Observable::parse(&spec, "x").unwrap();
        let p1 = Observable::parse(&spec, "p_x").unwrap();
        let p2 = Observable::parse(&spec, "p_y").unwrap();
        assert_eq!(poisson(&q1, &p1, &spec, &s).unwrap(), 1.0);
        assert_eq!(poisson(&q1, &p2, &spec, &s).unwrap(), 0.0);
        let lam = Observable::parse(&spec, "lam_1").unwrap();
        let plam = Observable::parse(&spec, "plam_1").unwrap();
        assert_eq!(poisson(&lam, &plam, &spec, &s).unwrap(), 1.0);

        // {q p, q} = -q
        let qp = Observable::parse(&spec, "x*p_x").unwrap();
        assert_eq!(poisson(&qp, &q1, &spec, &s).unwrap(), -2.0);
    }

    #[test]
    fn flannery_reduces_to_poisson_when_f_vanishes() {
        let (spec, s) = two_coord_state();
        let tf = TranspositionField::zero(2, 1);
        let x = Observable::parse(&spec, "x^2*p_y + sin(y)*lam_1").unwrap();
        let y = Observable::parse(&spec, "p_x*p_y - x*plam_1").unwrap();
        let pb = poisson(&x, &y, &spec, &s).unwrap();
        let fb = flannery(&x, &y, &spec, &s, &tf).unwrap();
        assert!((pb - fb).abs() < 1e-15);
    }

    #[test]
    fn flannery_worked_examples() {
        // n = 1, f = 0.5, p = 2: {p, q}_FB = -1 + p f = 0
        let spec = SystemSpec::new("one", &["x"], &[], "0.5*x_dot^2", &[]).unwrap();
        let s = PhaseState::new(0.0, vec![1.0], vec![2.0], vec![], vec![]);
        let mut f = Mat::zeros(1, 1);
        f[(0, 0)] = 0.5;
        let tf = TranspositionField {
            a: Mat::zeros(0, 1),
            g: Mat::zeros(0, 1),
            f,
            residual: 0.0,
        };
        let q = Observable::parse(&spec, "x").unwrap();
        let p = Observable::parse(&spec, "p_x").unwrap();
        assert_eq!(flannery(&p, &q, &spec, &s, &tf).unwrap(), 0.0);
        // {q, p}_FB = 1 for any f: X = q has no p-dependence
        assert_eq!(flannery(&q, &p, &spec, &s, &tf).unwrap(), 1.0);
    }

    #[test]
    fn antisymmetry_and_deficit() {
        let (spec, s) = two_coord_state();
        let x = Observable::parse(&spec, "x*p_y^2 + cos(x)*lam_1").unwrap();
        let y = Observable::parse(&spec, "y*p_x + plam_1^2").unwrap();
        let pb_xy = poisson(&x, &y, &spec, &s).unwrap();
        let pb_yx = poisson(&y, &x, &spec, &s).unwrap();
        assert!((pb_xy + pb_yx).abs() < 1e-13);

        // deficit identity: {X,Y}_FB + {Y,X}_FB = sum_i (Xp_i + Yp_i)(p f)_i
        let mut f = Mat::zeros(2, 2);
        f[(0, 0)] = 0.3;
        f[(0, 1)] = -0.7;
        f[(1, 0)] = 0.2;
        f[(1, 1)] = 1.1;
        let tf = TranspositionField {
            a: Mat::zeros(1, 2),
            g: Mat::zeros(1, 2),
            f: f.clone(),
            residual: 0.0,
        };
        let fb_xy = flannery(&x, &y, &spec, &s, &tf).unwrap();
        let fb_yx = flannery(&y, &x, &spec, &s, &tf).unwrap();
        let gx = x.phase_gradient(&spec, &s).unwrap();
        let gy = y.phase_gradient(&spec, &s).unwrap();
        let pf = f.tmul_vec(&s.p);
        let expect: f64 = (0..2).map(|i| (gx.dp[i] + gy.dp[i]) * pf[i]).sum();
        assert!((fb_xy + fb_yx - expect).abs() < 1e-13);
    }

    #[test]
    fn constraint_observable_gradient_matches_fd() {
        let (spec, s) = two_coord_state();
        let obs = Observable::Constraint(0);
        let grad = obs.phase_gradient(&spec, &s).unwrap();
        let h = 1e-6;
        let value = |s: &PhaseState| obs.value(&spec, s).unwrap();
        for i in 0..2 {
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus.p[i] += h;
            minus.p[i] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            assert!((grad.dp[i] - fd).abs() < 1e-6, "dp[{i}]");
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus.q[i] += h;
            minus.q[i] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            assert!((grad.dq[i] - fd).abs() < 1e-6, "dq[{i}]");
        }
        let mut plus = s.clone();
        let mut minus = s.clone();
        plus.lam[0] += h;
        minus.lam[0] -= h;
        let fd = (value(&plus) - value(&minus)) / (2.0 * h);
        assert!((grad.dlam[0] - fd).abs() < 1e-6);
    }
}
