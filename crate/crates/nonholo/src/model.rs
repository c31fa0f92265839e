//! System definition and the passage to phase space.
//!
//! A system is declared in configuration terms: coordinates `q`, a
//! Lagrangian `L(q, q_dot, t)` and equality constraints `g_k(q, q_dot, t)`.
//! Adjoining the constraints with multipliers gives
//! `L_adj = L - sum_k lam_k g_k`; momenta are `p_i = dL_adj/dq_dot_i` and
//! the adjoined Hamiltonian `H = q_dot . p - L_adj` with `q_dot` recovered
//! by a Newton inversion of the momentum map.
//!
//! Naming convention, one flat namespace for every expression context:
//! a coordinate `x` has velocity `x_dot` and momentum `p_x`; multipliers
//! are `lam_1..lam_m` with formal momenta `plam_1..plam_m`; `t` is
//! reserved.

use crate::error::{Error, Result};
use crate::expr::{self, eval_generic, grad_indexed, hess_indexed, Expr, Real, SplitEnv};
use crate::linalg::{condition, Mat};

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: u32 = 50;
/// Velocity Hessians with condition estimates beyond this are degenerate.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Declarative problem: coordinates, parameters, Lagrangian, constraints.
///
/// Immutable after construction; operations are pure functions of their
/// arguments, so a spec can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    name: String,
    coords: Vec<String>,
    vels: Vec<String>,
    moms: Vec<String>,
    lams: Vec<String>,
    plams: Vec<String>,
    params: Vec<(String, f64)>,
    lagrangian: Expr,
    constraints: Vec<Expr>,
    /// L - sum_k lam_k g_k
    adjoined: Expr,
    /// Name table for configuration-side evaluation:
    /// [coords | vels | t | lams | params]
    config_names: Vec<String>,
    /// Name table for phase-side (observable) evaluation:
    /// [coords | moms | lams | plams | t | params]
    phase_names: Vec<String>,
}

fn is_ident(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

impl SystemSpec {
    pub fn new(
        name: &str,
        coords: &[&str],
        params: &[(&str, f64)],
        lagrangian: &str,
        constraints: &[&str],
    ) -> Result<SystemSpec> {
        let lagrangian = expr::parse(lagrangian)?;
        let parsed: Result<Vec<Expr>> = constraints.iter().map(|s| expr::parse(s)).collect();
        Self::from_parts(
            name,
            coords.iter().map(|s| s.to_string()).collect(),
            params.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
            lagrangian,
            parsed?,
        )
    }

    pub fn from_parts(
        name: &str,
        coords: Vec<String>,
        params: Vec<(String, f64)>,
        lagrangian: Expr,
        constraints: Vec<Expr>,
    ) -> Result<SystemSpec> {
        let n = coords.len();
        let m = constraints.len();
        if n == 0 {
            return Err(Error::InvalidSystem("at least one coordinate".into()));
        }
        if m > n {
            return Err(Error::InvalidSystem(format!(
                "constraint count {m} exceeds coordinate count {n}"
            )));
        }

        let vels: Vec<String> = coords.iter().map(|c| format!("{c}_dot")).collect();
        let moms: Vec<String> = coords.iter().map(|c| format!("p_{c}")).collect();
        let lams: Vec<String> = (1..=m).map(|k| format!("lam_{k}")).collect();
        let plams: Vec<String> = (1..=m).map(|k| format!("plam_{k}")).collect();

        let mut seen: Vec<&str> = vec!["t", "pi"];
        let param_names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        for name in coords
            .iter()
            .chain(&vels)
            .chain(&moms)
            .chain(&lams)
            .chain(&plams)
            .map(|s| s.as_str())
            .chain(param_names.iter().copied())
        {
            if !is_ident(name) {
                return Err(Error::InvalidSystem(format!("`{name}` is not a valid name")));
            }
            if seen.contains(&name) {
                return Err(Error::InvalidSystem(format!(
                    "name `{name}` collides with another declared or derived name"
                )));
            }
            seen.push(name);
        }

        let mut allowed: Vec<&str> = vec!["t"];
        allowed.extend(coords.iter().map(|s| s.as_str()));
        allowed.extend(vels.iter().map(|s| s.as_str()));
        allowed.extend(param_names.iter().copied());
        for (what, e) in std::iter::once(("lagrangian", &lagrangian))
            .chain(constraints.iter().enumerate().map(|(k, g)| {
                // constraint index is 1-based in messages
                let _ = k;
                ("constraint", g)
            }))
        {
            for var in e.free_vars() {
                if !allowed.contains(&var.as_str()) {
                    return Err(Error::InvalidSystem(format!(
                        "{what} references undeclared variable `{var}`"
                    )));
                }
            }
        }

        // adjoined Lagrangian as a plain tree: L - (lam_1*g_1 + ...)
        let mut adjoined = lagrangian.clone();
        for (k, g) in constraints.iter().enumerate() {
            let term = Expr::Bin(
                expr::BinOp::Mul,
                Box::new(Expr::Var(lams[k].clone())),
                Box::new(g.clone()),
            );
            adjoined = Expr::Bin(expr::BinOp::Sub, Box::new(adjoined), Box::new(term));
        }

        let mut config_names: Vec<String> = Vec::new();
        config_names.extend(coords.iter().cloned());
        config_names.extend(vels.iter().cloned());
        config_names.push("t".into());
        config_names.extend(lams.iter().cloned());
        config_names.extend(params.iter().map(|(n, _)| n.clone()));

        let mut phase_names: Vec<String> = Vec::new();
        phase_names.extend(coords.iter().cloned());
        phase_names.extend(moms.iter().cloned());
        phase_names.extend(lams.iter().cloned());
        phase_names.extend(plams.iter().cloned());
        phase_names.push("t".into());
        phase_names.extend(params.iter().map(|(n, _)| n.clone()));

        Ok(SystemSpec {
            name: name.to_string(),
            coords,
            vels,
            moms,
            lams,
            plams,
            params,
            lagrangian,
            constraints,
            adjoined,
            config_names,
            phase_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn velocity_names(&self) -> &[String] {
        &self.vels
    }

    pub fn momentum_names(&self) -> &[String] {
        &self.moms
    }

    pub fn multiplier_names(&self) -> &[String] {
        &self.lams
    }

    pub fn multiplier_momentum_names(&self) -> &[String] {
        &self.plams
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn lagrangian(&self) -> &Expr {
        &self.lagrangian
    }

    pub fn constraints(&self) -> &[Expr] {
        &self.constraints
    }

    pub(crate) fn phase_names(&self) -> &[String] {
        &self.phase_names
    }

    pub(crate) fn config_names(&self) -> &[String] {
        &self.config_names
    }

    /// Values aligned with the configuration name table.
    pub(crate) fn config_values<T: Real>(&self, t: T, q: &[T], qd: &[T], lam: &[T]) -> Vec<T> {
        debug_assert_eq!(q.len(), self.n());
        debug_assert_eq!(qd.len(), self.n());
        debug_assert_eq!(lam.len(), self.m());
        let mut vals = Vec::with_capacity(self.config_names.len());
        vals.extend_from_slice(q);
        vals.extend_from_slice(qd);
        vals.push(t);
        vals.extend_from_slice(lam);
        vals.extend(self.params.iter().map(|(_, v)| T::from_f64(*v)));
        vals
    }

    /// Values aligned with the phase name table.
    pub(crate) fn phase_values<T: Real>(
        &self,
        t: T,
        q: &[T],
        p: &[T],
        lam: &[T],
        plam: &[T],
    ) -> Vec<T> {
        let mut vals = Vec::with_capacity(self.phase_names.len());
        vals.extend_from_slice(q);
        vals.extend_from_slice(p);
        vals.extend_from_slice(lam);
        vals.extend_from_slice(plam);
        vals.push(t);
        vals.extend(self.params.iter().map(|(_, v)| T::from_f64(*v)));
        vals
    }

    fn vel_indices(&self) -> Vec<usize> {
        (self.n()..2 * self.n()).collect()
    }

    /// Indices of [vels | coords | t] in the configuration table, the
    /// ordering used by `AdjointBlocks`.
    fn adjoint_wrt(&self) -> Vec<usize> {
        let n = self.n();
        let mut wrt: Vec<usize> = (n..2 * n).collect();
        wrt.extend(0..n);
        wrt.push(2 * n);
        wrt
    }
}

/// Extended phase-space point `(t, q, p, lam, plam)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub lam: Vec<f64>,
    pub plam: Vec<f64>,
}

impl PhaseState {
    pub fn new(t: f64, q: Vec<f64>, p: Vec<f64>, lam: Vec<f64>, plam: Vec<f64>) -> PhaseState {
        PhaseState { t, q, p, lam, plam }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self
                .q
                .iter()
                .chain(&self.p)
                .chain(&self.lam)
                .chain(&self.plam)
                .all(|v| v.is_finite())
    }
}

/// Configuration-space point `(t, q, q_dot)` used by the reference
/// dynamics and by constraint evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigState {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl ConfigState {
    pub fn new(t: f64, q: Vec<f64>, qd: Vec<f64>) -> ConfigState {
        ConfigState { t, q, qd }
    }
}

/// First and second derivatives of the adjoined Lagrangian at one
/// configuration point, the raw material for the Legendre transform and
/// the consistency machinery.
pub(crate) struct AdjointBlocks<T> {
    /// dL_adj/dq
    pub dq: Vec<T>,
    /// dL_adj/dq_dot (the momenta)
    pub dqd: Vec<T>,
    /// dL_adj/dt
    pub dt: T,
    /// d2L_adj/dq_dot dq_dot (velocity Hessian / constrained mass matrix)
    pub w: Mat<T>,
    /// d2L_adj/dq_dot dq, rows over q_dot_i, cols over q_j
    pub b: Mat<T>,
    /// d2L_adj/dq_dot dt
    pub dqd_dt: Vec<T>,
}

pub(crate) fn adjoint_blocks<T: Real>(
    spec: &SystemSpec,
    t: T,
    q: &[T],
    qd: &[T],
    lam: &[T],
) -> Result<AdjointBlocks<T>> {
    let n = spec.n();
    let values = spec.config_values(t, q, qd, lam);
    let wrt = spec.adjoint_wrt();
    let (_, grad, hess) = hess_indexed(&spec.adjoined, &spec.config_names, &values, &wrt)?;
    // layout of wrt: [vels(0..n) | coords(n..2n) | t(2n)]
    let mut w = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, n);
    let mut dqd_dt = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] = hess[i][j];
            b[(i, j)] = hess[i][n + j];
        }
        dqd_dt[i] = hess[i][2 * n];
    }
    Ok(AdjointBlocks {
        dq: grad[n..2 * n].to_vec(),
        dqd: grad[..n].to_vec(),
        dt: grad[2 * n],
        w,
        b,
        dqd_dt,
    })
}

/// Value and derivatives of one constraint at a configuration point.
pub(crate) struct ConstraintBlocks<T> {
    pub value: T,
    pub dq: Vec<T>,
    pub dqd: Vec<T>,
    pub dt: T,
    /// d2g/dq dq
    pub hqq: Vec<Vec<T>>,
    /// d2g/dq dq_dot, rows over q_i, cols over q_dot_j
    pub hq_qd: Vec<Vec<T>>,
    /// d2g/dq_dot dq_dot
    pub hqd_qd: Vec<Vec<T>>,
    /// d2g/dq dt
    pub hq_t: Vec<T>,
    /// d2g/dq_dot dt
    pub hqd_t: Vec<T>,
    pub htt: T,
}

pub(crate) fn constraint_blocks<T: Real>(
    spec: &SystemSpec,
    index: usize,
    t: T,
    q: &[T],
    qd: &[T],
) -> Result<ConstraintBlocks<T>> {
    let n = spec.n();
    let lam = vec![T::zero(); spec.m()];
    let values = spec.config_values(t, q, qd, &lam);
    // wrt layout: [coords(0..n) | vels(n..2n) | t(2n)]
    let mut wrt: Vec<usize> = (0..2 * n).collect();
    wrt.push(2 * n);
    let (value, grad, hess) =
        hess_indexed(&spec.constraints[index], &spec.config_names, &values, &wrt)?;
    let pick = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> Vec<Vec<T>> {
        rows.map(|i| cols.clone().map(|j| hess[i][j]).collect())
            .collect()
    };
    Ok(ConstraintBlocks {
        value,
        dq: grad[..n].to_vec(),
        dqd: grad[n..2 * n].to_vec(),
        dt: grad[2 * n],
        hqq: pick(0..n, 0..n),
        hq_qd: pick(0..n, n..2 * n),
        hqd_qd: pick(n..2 * n, n..2 * n),
        hq_t: (0..n).map(|i| hess[i][2 * n]).collect(),
        hqd_t: (n..2 * n).map(|i| hess[i][2 * n]).collect(),
        htt: hess[2 * n][2 * n],
    })
}

/// Constraint values `g_k(q, q_dot, t)`.
pub fn constraint_values<T: Real>(spec: &SystemSpec, t: T, q: &[T], qd: &[T]) -> Result<Vec<T>> {
    let lam = vec![T::zero(); spec.m()];
    let values = spec.config_values(t, q, qd, &lam);
    spec.constraints
        .iter()
        .map(|g| {
            eval_generic(
                g,
                &SplitEnv {
                    names: &spec.config_names,
                    values: &values,
                },
            )
        })
        .collect()
}

/// Adjoined Lagrangian `L - sum_k lam_k g_k` at a configuration point.
pub fn adjoined_lagrangian(spec: &SystemSpec, cs: &ConfigState, lam: &[f64]) -> Result<f64> {
    let values = spec.config_values(cs.t, &cs.q, &cs.qd, lam);
    eval_generic(
        &spec.adjoined,
        &SplitEnv {
            names: &spec.config_names,
            values: &values,
        },
    )
}

/// Plain (unadjoined) Lagrangian value.
pub fn lagrangian_value(spec: &SystemSpec, cs: &ConfigState) -> Result<f64> {
    let lam = vec![0.0; spec.m()];
    let values = spec.config_values(cs.t, &cs.q, &cs.qd, &lam);
    eval_generic(
        &spec.lagrangian,
        &SplitEnv {
            names: &spec.config_names,
            values: &values,
        },
    )
}

/// Momenta `p_i = dL_adj/dq_dot_i`.
pub fn momenta(spec: &SystemSpec, cs: &ConfigState, lam: &[f64]) -> Result<Vec<f64>> {
    momenta_generic(spec, cs.t, &cs.q, &cs.qd, lam)
}

pub(crate) fn momenta_generic<T: Real>(
    spec: &SystemSpec,
    t: T,
    q: &[T],
    qd: &[T],
    lam: &[T],
) -> Result<Vec<T>> {
    let values = spec.config_values(t, q, qd, lam);
    let (_, grad) = grad_indexed(
        &spec.adjoined,
        &spec.config_names,
        &values,
        &spec.vel_indices(),
    )?;
    Ok(grad)
}

/// Invert the momentum map: find `q_dot` with `momenta(q, q_dot, lam) = p`.
///
/// Newton iteration with the velocity Hessian as Jacobian, warm-started
/// from `guess` (callers on a trajectory pass the previous step's
/// velocities; cold starts use zeros). After the residual converges two
/// polish steps run so that dual-number callers get exact derivatives of
/// the solved map.
pub fn legendre_invert(
    spec: &SystemSpec,
    t: f64,
    q: &[f64],
    p: &[f64],
    lam: &[f64],
    guess: &[f64],
) -> Result<Vec<f64>> {
    let (qd, _) = legendre_invert_generic(spec, t, q, p, lam, guess)?;
    Ok(qd)
}

pub(crate) fn legendre_invert_generic<T: Real>(
    spec: &SystemSpec,
    t: T,
    q: &[T],
    p: &[T],
    lam: &[T],
    guess: &[f64],
) -> Result<(Vec<T>, u32)> {
    let n = spec.n();
    let mut qd: Vec<T> = guess.iter().map(|v| T::from_f64(*v)).collect();
    let mut iters = 0u32;
    let mut polish_left = 2u32;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    loop {
        let blocks = adjoint_blocks(spec, t, q, &qd, lam)?;
        let f: Vec<T> = (0..n).map(|i| blocks.dqd[i] - p[i]).collect();
        if !converged {
            residual = f.iter().map(|v| v.value().abs()).fold(0.0, f64::max);
            if !residual.is_finite() {
                return Err(Error::NoConvergence {
                    context: "legendre_invert",
                    iters,
                    residual,
                });
            }
            if residual < NEWTON_TOL {
                converged = true;
            }
        }
        if converged && polish_left == 0 {
            return Ok((qd, iters));
        }
        if !converged && iters >= NEWTON_MAX_ITERS {
            return Err(Error::NoConvergence {
                context: "legendre_invert",
                iters,
                residual,
            });
        }
        let w_real = blocks.w.map_value();
        let cond = condition(&w_real);
        if cond > CONDITION_LIMIT {
            return Err(Error::DegenerateLegendre { cond });
        }
        let step = blocks.w.solve_vec(&f).map_err(|_| Error::DegenerateLegendre {
            cond: f64::INFINITY,
        })?;
        for i in 0..n {
            qd[i] = qd[i] - step[i];
        }
        if converged {
            polish_left -= 1;
        } else {
            iters += 1;
        }
    }
}

/// Adjoined Hamiltonian `H = q_dot . p - L_adj` with `q_dot` recovered
/// from `(q, p, lam)` by `legendre_invert` (cold start).
///
/// The formal `u . plam` term is not represented: trajectories keep
/// `plam = 0` and the multiplier-velocity effect is realized in the
/// dynamics module instead.
pub fn hamiltonian(spec: &SystemSpec, s: &PhaseState) -> Result<f64> {
    let zero = vec![0.0; spec.n()];
    hamiltonian_with_guess(spec, s, &zero)
}

pub(crate) fn hamiltonian_with_guess(
    spec: &SystemSpec,
    s: &PhaseState,
    guess: &[f64],
) -> Result<f64> {
    let (qd, _) = legendre_invert_generic(spec, s.t, &s.q, &s.p, &s.lam, guess)?;
    let cs = ConfigState::new(s.t, s.q.clone(), qd.clone());
    let l_adj = adjoined_lagrangian(spec, &cs, &s.lam)?;
    Ok(qd.iter().zip(&s.p).map(|(v, p)| v * p).sum::<f64>() - l_adj)
}

/// Partials of the adjoined Hamiltonian at fixed remaining variables.
#[derive(Debug, Clone)]
pub struct HamiltonianGradient {
    /// dH/dq
    pub dq: Vec<f64>,
    /// dH/dp (the recovered velocities)
    pub dp: Vec<f64>,
    /// dH/dlam (the constraint values, by the envelope identity)
    pub dlam: Vec<f64>,
    /// dH/dt (explicit)
    pub dt: f64,
}

/// Exact envelope-form gradient: with the Legendre solve converged,
/// `dH = q_dot . dp - (dL_adj/dq) . dq + g . dlam - (dL_adj/dt) dt`,
/// so no differentiation through the Newton iteration is needed.
pub fn grad_hamiltonian(spec: &SystemSpec, s: &PhaseState) -> Result<HamiltonianGradient> {
    let zero = vec![0.0; spec.n()];
    grad_hamiltonian_with_guess(spec, s, &zero)
}

pub(crate) fn grad_hamiltonian_with_guess(
    spec: &SystemSpec,
    s: &PhaseState,
    guess: &[f64],
) -> Result<HamiltonianGradient> {
    let (qd, _) = legendre_invert_generic(spec, s.t, &s.q, &s.p, &s.lam, guess)?;
    let blocks = adjoint_blocks(spec, s.t, &s.q, &qd, &s.lam)?;
    let g = constraint_values(spec, s.t, &s.q, &qd)?;
    Ok(HamiltonianGradient {
        dq: blocks.dq.iter().map(|v| -v).collect(),
        dp: qd,
        dlam: g,
        dt: -blocks.dt,
    })
}

/// Physical (unadjoined) energy `q_dot . dL/dq_dot - L` at a
/// configuration point.
pub fn energy(spec: &SystemSpec, cs: &ConfigState) -> Result<f64> {
    let lam = vec![0.0; spec.m()];
    let values = spec.config_values(cs.t, &cs.q, &cs.qd, &lam);
    let (l, grad) = grad_indexed(
        &spec.lagrangian,
        &spec.config_names,
        &values,
        &spec.vel_indices(),
    )?;
    Ok(grad.iter().zip(&cs.qd).map(|(dl, v)| dl * v).sum::<f64>() - l)
}
