//! Reference configuration-space dynamics.
//!
//! An independent code path (no brackets, no phase-space Legendre
//! machinery) implementing the accepted equations of motion for
//! constrained systems: `d/dt dL/dq_dot - dL/dq = mu^k dg_k/dq_dot`
//! (constraint forces along the velocity gradients, the Chetaev rule),
//! closed by differentiating each constraint until accelerations appear.
//! For holonomic constraints the force direction falls back to `dg/dq`,
//! the acceleration coefficient at the `g_ddot` level.

use crate::error::{Error, Result};
use crate::integrate::{OdeSystem, StepDiag};
use crate::linalg::{condition, Mat};
use crate::model::{
    adjoint_blocks, constraint_blocks, constraint_values, energy, lagrangian_value, ConfigState,
    ConstraintBlocks, SystemSpec, CONDITION_LIMIT,
};

/// Accelerations and constraint-force multipliers from one solve.
#[derive(Debug, Clone)]
pub struct OracleRhs {
    pub qdd: Vec<f64>,
    pub mu: Vec<f64>,
    /// Residual of the assembled linear system.
    pub residual: f64,
}

/// Assemble and solve the `(n+m) x (n+m)` system
///
/// ```text
/// [ M   -R^T ] [qdd]   [ dL/dq - B q_dot - d2L/dq_dot dt ]
/// [ R    0   ] [mu ] = [ -(velocity-gradient terms)       ]
/// ```
///
/// where row `R_k` is `dg_k/dq_dot` for velocity-dependent constraints
/// and `dg_k/dq` for holonomic ones.
pub fn lda_rhs(spec: &SystemSpec, cs: &ConfigState) -> Result<OracleRhs> {
    let n = spec.n();
    let m = spec.m();
    let zero_lam = vec![0.0; m];
    let blocks = adjoint_blocks(spec, cs.t, &cs.q, &cs.qd, &zero_lam)?;
    let mass_cond = condition(&blocks.w.map_value());
    if mass_cond > CONDITION_LIMIT {
        return Err(Error::SingularMass);
    }

    let cons: Vec<ConstraintBlocks<f64>> = (0..m)
        .map(|k| constraint_blocks(spec, k, cs.t, &cs.q, &cs.qd))
        .collect::<Result<_>>()?;

    let dim = n + m;
    let mut lhs = Mat::zeros(dim, dim);
    let mut rhs = vec![0.0; dim];
    for i in 0..n {
        for j in 0..n {
            lhs[(i, j)] = blocks.w[(i, j)];
        }
        let mut b_qd = 0.0;
        for j in 0..n {
            b_qd += blocks.b[(i, j)] * cs.qd[j];
        }
        rhs[i] = blocks.dq[i] - b_qd - blocks.dqd_dt[i];
    }
    for (k, cb) in cons.iter().enumerate() {
        let velocity_dependent = cb.dqd.iter().any(|v| *v != 0.0);
        if velocity_dependent {
            // g_dot = dg/dq . qd + dg/dq_dot . qdd + dg/dt = 0
            for j in 0..n {
                lhs[(n + k, j)] = cb.dqd[j];
                lhs[(j, n + k)] = -cb.dqd[j];
            }
            let mut conv = cb.dt;
            for j in 0..n {
                conv += cb.dq[j] * cs.qd[j];
            }
            rhs[n + k] = -conv;
        } else {
            // g_ddot = qd' (d2g/dq dq) qd + dg/dq . qdd + 2 (d2g/dq dt) . qd + d2g/dt2 = 0
            for j in 0..n {
                lhs[(n + k, j)] = cb.dq[j];
                lhs[(j, n + k)] = -cb.dq[j];
            }
            let mut conv = cb.htt;
            for i in 0..n {
                conv += 2.0 * cb.hq_t[i] * cs.qd[i];
                for j in 0..n {
                    conv += cb.hqq[i][j] * cs.qd[i] * cs.qd[j];
                }
            }
            rhs[n + k] = -conv;
        }
    }

    let sol = lhs.solve_vec(&rhs).map_err(|_| Error::SingularConstraintBlock)?;
    let check = lhs.mul_vec(&sol);
    let residual = check
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(OracleRhs {
        qdd: sol[..n].to_vec(),
        mu: sol[n..].to_vec(),
        residual,
    })
}

/// Closed-form motion of a uniform sphere rolling without slipping down
/// an incline: `x(t) = (5/14) g sin(alpha) t^2`, constant vertical-axis
/// spin.
pub fn rolling_sphere_analytic(t: f64, g_e: f64, alpha: f64, omega_z0: f64) -> (f64, f64, f64) {
    let accel = 5.0 / 7.0 * g_e * alpha.sin();
    (0.5 * accel * t * t, accel * t, omega_z0)
}

/// Configuration-space flow `y = [q | q_dot]` for the integrator.
pub struct ConfigFlow<'a> {
    spec: &'a SystemSpec,
}

impl<'a> ConfigFlow<'a> {
    pub fn new(spec: &'a SystemSpec) -> ConfigFlow<'a> {
        ConfigFlow { spec }
    }

    pub fn pack(cs: &ConfigState) -> Vec<f64> {
        let mut y = cs.q.clone();
        y.extend_from_slice(&cs.qd);
        y
    }

    pub fn unpack(&self, t: f64, y: &[f64]) -> ConfigState {
        let n = self.spec.n();
        ConfigState::new(t, y[..n].to_vec(), y[n..2 * n].to_vec())
    }
}

impl OdeSystem for ConfigFlow<'_> {
    fn dim(&self) -> usize {
        2 * self.spec.n()
    }

    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
        let n = self.spec.n();
        let cs = self.unpack(t, y);
        let out = lda_rhs(self.spec, &cs)?;
        dydt[..n].copy_from_slice(&cs.qd);
        dydt[n..2 * n].copy_from_slice(&out.qdd);
        Ok(())
    }

    fn diagnostics(&mut self, t: f64, y: &[f64]) -> Result<StepDiag> {
        let cs = self.unpack(t, y);
        let g = constraint_values(self.spec, cs.t, &cs.q, &cs.qd)?;
        let out = lda_rhs(self.spec, &cs)?;
        Ok(StepDiag {
            t,
            h: 0.0,
            g,
            lam: out.mu,
            plam_inf: 0.0,
            energy: energy(self.spec, &cs)?,
            h_tilde: None,
            newton_iters: 0,
            f_norm: 0.0,
            f_residual: 0.0,
        })
    }
}

/// The Lagrangian value at a configuration state (re-exported here for
/// report writers that treat the oracle uniformly with the phase flows).
pub fn oracle_lagrangian(spec: &SystemSpec, cs: &ConfigState) -> Result<f64> {
    lagrangian_value(spec, cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate, IntegratorOpts, Scheme};
    use crate::linalg::vec_norm_inf;

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
    fn free_particle_has_zero_acceleration() {
        let spec = SystemSpec::new("free", &["x"], &[], "0.5*x_dot^2", &[]).unwrap();
        let cs = ConfigState::new(0.0, vec![0.2], vec![3.0]);
        let out = lda_rhs(&spec, &cs).unwrap();
        assert_eq!(out.qdd, vec![0.0]);
        assert!(out.residual < 1e-12);
    }

    #[test]
    fn pendulum_static_balance() {
        // at the bottom, at rest: qdd = 0; with the Chetaev sign
        // convention (force = +mu dg/dq) the multiplier is -4.9
        let spec = pendulum();
        let cs = ConfigState::new(0.0, vec![0.0, -1.0], vec![0.0, 0.0]);
        let out = lda_rhs(&spec, &cs).unwrap();
        assert!(vec_norm_inf(&out.qdd) < 1e-12);
        assert!((out.mu[0] - (-4.9)).abs() < 1e-12, "mu = {}", out.mu[0]);
        assert!(out.residual < 1e-10);
    }

    #[test]
    fn analytic_sphere_values() {
        let alpha = std::f64::consts::PI / 6.0;
        let (x0, v0, w0) = rolling_sphere_analytic(0.0, 9.8, alpha, 2.5);
        assert_eq!((x0, v0, w0), (0.0, 0.0, 2.5));
        let (x1, _, _) = rolling_sphere_analytic(1.0, 9.8, alpha, 2.5);
        assert!((x1 - 1.75).abs() < 1e-12);
        let (x2, _, w2) = rolling_sphere_analytic(2.0, 9.8, alpha, 2.5);
        assert!((x2 - 7.0).abs() < 1e-12);
        assert_eq!(w2, 2.5);
    }

    #[test]
    fn pendulum_small_oscillation_period() {
        // amplitude 1e-3 rad: period within 1e-5 relative of 2 pi sqrt(l/g)
        let spec = pendulum();
        let theta0: f64 = 1e-3;
        let q0 = vec![theta0.sin(), -theta0.cos()];
        let cs = ConfigState::new(0.0, q0, vec![0.0, 0.0]);
        let y0 = ConfigFlow::pack(&cs);
        let expected = 2.0 * std::f64::consts::PI * (1.0_f64 / 9.8).sqrt();
        let opts = IntegratorOpts {
            scheme: Scheme::Dp45 {
                rel_tol: 1e-11,
                abs_tol: 1e-13,
            },
            samples: 60_000,
            drift_abort: None,
            ..Default::default()
        };
        let mut flow = ConfigFlow::new(&spec);
        let traj = integrate(&mut flow, 0.0, &y0, 1.2 * expected, &opts).unwrap();
        // x starts at its maximum, so x_dot (state index 2) runs negative
        // over the first half period, positive over the second, and
        // crosses + to - exactly at the full period.
        let mut period = None;
        for w in 1..traj.len() {
            let xd_prev = traj.states[w - 1][2];
            let xd = traj.states[w][2];
            if traj.times[w] > 0.75 * expected && xd_prev > 0.0 && xd <= 0.0 {
                let f = xd_prev / (xd_prev - xd);
                period = Some(traj.times[w - 1] + f * (traj.times[w] - traj.times[w - 1]));
                break;
            }
        }
        let period = period.expect("period crossing found");
        assert!(
            (period - expected).abs() / expected < 1e-5,
            "period {period} vs {expected}"
        );
    }
}
