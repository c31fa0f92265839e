//! High-level runs: scenario in, sampled trajectory and report out.
//!
//! This is the surface the CLI, the C ABI, and the acceptance suite all
//! drive. A run integrates one scenario under one method (`oracle`,
//! `dirac`, or `flannery`) and yields uniform samples with aligned
//! diagnostics, plus a serializable report.

use crate::brackets::Observable;
use crate::dynamics::{MethodKind, PhaseFlow};
use crate::error::{Error, Result};
use crate::integrate::{integrate, IntegratorOpts, Scheme, Stabilization, Trajectory};
use crate::model::{legendre_invert, momenta, ConfigState, PhaseState};
use crate::oracle::ConfigFlow;
use crate::scenarios::ScenarioConfig;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;

/// What to integrate: the reference configuration-space dynamics or one
/// of the phase-space methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMethod {
    Oracle,
    Phase(MethodKind),
}

impl std::str::FromStr for RunMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<RunMethod> {
        match s {
            "oracle" => Ok(RunMethod::Oracle),
            "dirac" => Ok(RunMethod::Phase(MethodKind::Dirac)),
            "flannery" => Ok(RunMethod::Phase(MethodKind::Flannery)),
            other => Err(Error::InvalidSystem(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for RunMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMethod::Oracle => f.write_str("oracle"),
            RunMethod::Phase(m) => write!(f, "{m}"),
        }
    }
}

/// A finished run: sampled states plus everything needed to interpret
/// them.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: String,
    pub method: RunMethod,
    pub n: usize,
    pub m: usize,
    pub trajectory: Trajectory,
    pub coord_names: Vec<String>,
    pub wall_time_s: f64,
}

impl RunOutput {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.trajectory.times[i]
    }

    /// Coordinates at sample `i` (both kinds of run store them first).
    pub fn q(&self, i: usize) -> &[f64] {
        &self.trajectory.states[i][..self.n]
    }

    /// Second state block: momenta for phase runs, velocities for the
    /// oracle.
    pub fn second_block(&self, i: usize) -> &[f64] {
        &self.trajectory.states[i][self.n..2 * self.n]
    }

    /// Multipliers at sample `i` (`lam` for phase runs, `mu` for the
    /// oracle).
    pub fn multipliers(&self, i: usize) -> &[f64] {
        &self.trajectory.diag[i].lam
    }

    /// Velocities at sample `i`: stored for oracle runs, recovered via
    /// the Legendre inversion for phase runs.
    pub fn velocities(&self, cfg: &ScenarioConfig, i: usize) -> Result<Vec<f64>> {
        match self.method {
            RunMethod::Oracle => Ok(self.second_block(i).to_vec()),
            RunMethod::Phase(_) => legendre_invert(
                &cfg.spec,
                self.time(i),
                self.q(i),
                self.second_block(i),
                self.multipliers(i),
                &vec![0.0; self.n],
            ),
        }
    }

    /// Phase state at sample `i`. For oracle runs the momenta are the
    /// unadjoined `dL/dq_dot` and the multiplier slots carry `mu`.
    pub fn phase_state(&self, cfg: &ScenarioConfig, i: usize) -> Result<PhaseState> {
        let t = self.time(i);
        match self.method {
            RunMethod::Phase(_) => Ok(PhaseState::new(
                t,
                self.q(i).to_vec(),
                self.second_block(i).to_vec(),
                self.multipliers(i).to_vec(),
                self.trajectory.states[i][2 * self.n..2 * self.n + self.m].to_vec(),
            )),
            RunMethod::Oracle => {
                let cs = ConfigState::new(t, self.q(i).to_vec(), self.second_block(i).to_vec());
                let p = momenta(&cfg.spec, &cs, &vec![0.0; self.m])?;
                Ok(PhaseState::new(
                    t,
                    cs.q,
                    p,
                    self.multipliers(i).to_vec(),
                    vec![0.0; self.m],
                ))
            }
        }
    }

    /// One CSV row: `t, q.., p.., lam.., g.., energy, H`. For oracle
    /// runs the `p` columns carry `dL/dq_dot`, the `lam` columns `mu`,
    /// and `H` repeats the physical energy.
    pub fn row(&self, cfg: &ScenarioConfig, i: usize) -> Result<Vec<f64>> {
        let d = &self.trajectory.diag[i];
        let mut row = Vec::with_capacity(1 + 2 * self.n + 2 * self.m + 2);
        row.push(self.time(i));
        row.extend_from_slice(self.q(i));
        match self.method {
            RunMethod::Phase(_) => row.extend_from_slice(self.second_block(i)),
            RunMethod::Oracle => {
                let cs =
                    ConfigState::new(self.time(i), self.q(i).to_vec(), self.second_block(i).to_vec());
                row.extend(momenta(&cfg.spec, &cs, &vec![0.0; self.m])?);
            }
        }
        row.extend_from_slice(self.multipliers(i));
        row.extend_from_slice(&d.g);
        row.push(d.energy);
        row.push(d.h_tilde.unwrap_or(d.energy));
        Ok(row)
    }

    /// Relative energy drift over the samples.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.trajectory.diag[0].energy;
        let scale = e0.abs().max(1.0);
        self.trajectory
            .diag
            .iter()
            .map(|d| (d.energy - e0).abs() / scale)
            .fold(0.0, f64::max)
    }
}

/// Integrate `cfg` under `method` from 0 to `t_end`.
pub fn run(
    cfg: &ScenarioConfig,
    method: RunMethod,
    t_end: f64,
    opts: &IntegratorOpts,
) -> Result<RunOutput> {
    let start = std::time::Instant::now();
    let trajectory = match method {
        RunMethod::Oracle => {
            let cs = cfg.initial_config_state()?;
            let y0 = ConfigFlow::pack(&cs);
            let mut flow = ConfigFlow::new(&cfg.spec);
            integrate(&mut flow, 0.0, &y0, t_end, opts)?
        }
        RunMethod::Phase(kind) => {
            let s0 = cfg.initial_phase_state()?;
            let y0 = PhaseFlow::pack(&s0);
            let mut flow = PhaseFlow::new(&cfg.spec, kind);
            integrate(&mut flow, 0.0, &y0, t_end, opts)?
        }
    };
    Ok(RunOutput {
        scenario: cfg.spec.name().to_string(),
        method,
        n: cfg.spec.n(),
        m: cfg.spec.m(),
        trajectory,
        coord_names: cfg.spec.coords().to_vec(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// CSV header: `t,q:<name>..,p:<name>..,lam:<k>..,g:<k>..,energy,H`,
/// plus one `obs:<expr>` column per requested observable.
pub fn csv_header(cfg: &ScenarioConfig, observables: &[String]) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend(cfg.spec.coords().iter().map(|c| format!("q:{c}")));
    cols.extend(cfg.spec.coords().iter().map(|c| format!("p:{c}")));
    cols.extend((1..=cfg.spec.m()).map(|k| format!("lam:{k}")));
    cols.extend((1..=cfg.spec.m()).map(|k| format!("g:{k}")));
    cols.push("energy".into());
    cols.push("H".into());
    cols.extend(observables.iter().map(|o| format!("obs:{o}")));
    cols.join(",")
}

/// Write the sampled trajectory as CSV with 17 significant digits, LF
/// line endings. Identical inputs produce byte-identical files.
pub fn write_csv<W: Write>(
    out: &mut W,
    cfg: &ScenarioConfig,
    run: &RunOutput,
    observables: &[String],
) -> Result<()> {
    let parsed: Result<Vec<Observable>> = observables
        .iter()
        .map(|src| Observable::parse(&cfg.spec, src))
        .collect();
    let parsed = parsed?;
    let io_err = |e: std::io::Error| Error::Schema {
        pointer: String::new(),
        detail: format!("write failed: {e}"),
    };
    writeln!(out, "{}", csv_header(cfg, observables)).map_err(io_err)?;
    for i in 0..run.len() {
        let mut row = run.row(cfg, i)?;
        if !parsed.is_empty() {
            let s = run.phase_state(cfg, i)?;
            for obs in &parsed {
                row.push(obs.value(&cfg.spec, &s)?);
            }
        }
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(io_err)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegratorReport {
    pub scheme: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    pub samples: usize,
    pub stabilization: String,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
}

/// Run summary printed by the CLI as JSON; deterministic for fixed
/// inputs apart from the wall time.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub method: String,
    pub t_end: f64,
    pub integrator: IntegratorReport,
    pub wall_time_s: f64,
    pub final_state: BTreeMap<String, f64>,
    pub max_constraint_residual: f64,
    pub max_abs_plam: f64,
    pub energy_drift_rel: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
}

pub fn build_report(
    cfg: &ScenarioConfig,
    run: &RunOutput,
    opts: &IntegratorOpts,
    t_end: f64,
    csv_path: Option<String>,
) -> RunReport {
    let (scheme, dt, rel_tol, abs_tol) = match opts.scheme {
        Scheme::Rk4 { dt } => ("rk4".to_string(), Some(dt), None, None),
        Scheme::Dp45 { rel_tol, abs_tol } => {
            ("dp45".to_string(), None, Some(rel_tol), Some(abs_tol))
        }
    };
    let mut final_state = BTreeMap::new();
    let last = run.len() - 1;
    for (i, c) in cfg.spec.coords().iter().enumerate() {
        final_state.insert(format!("q:{c}"), run.q(last)[i]);
        final_state.insert(format!("p:{c}"), run.second_block(last)[i]);
    }
    for (k, v) in run.multipliers(last).iter().enumerate() {
        final_state.insert(format!("lam:{}", k + 1), *v);
    }
    RunReport {
        scenario: run.scenario.clone(),
        method: run.method.to_string(),
        t_end,
        integrator: IntegratorReport {
            scheme,
            dt,
            rel_tol,
            abs_tol,
            samples: opts.samples,
            stabilization: match opts.stabilization {
                Stabilization::None => "none".into(),
                Stabilization::Projection => "projection".into(),
            },
            steps_accepted: run.trajectory.stats.steps_accepted,
            steps_rejected: run.trajectory.stats.steps_rejected,
            rhs_evals: run.trajectory.stats.rhs_evals,
        },
        wall_time_s: run.wall_time_s,
        final_state,
        max_constraint_residual: run.trajectory.stats.max_g_inf,
        max_abs_plam: run.trajectory.stats.max_plam_inf,
        energy_drift_rel: run.energy_drift(),
        csv_path,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_particle_run() {
        let cfg = ScenarioConfig::builtin("free-particle").unwrap();
        let opts = IntegratorOpts {
            samples: 11,
            ..Default::default()
        };
        let out = run(&cfg, RunMethod::Phase(MethodKind::Dirac), 2.0, &opts).unwrap();
        assert_eq!(out.len(), 11);
        assert!((out.q(10)[0] - 6.0).abs() < 1e-10);
        let header = csv_header(&cfg, &[]);
        assert_eq!(header, "t,q:x,p:x,energy,H");
    }

    #[test]
    fn oracle_and_phase_agree_on_free_particle() {
        let cfg = ScenarioConfig::builtin("free-particle").unwrap();
        let opts = IntegratorOpts {
            samples: 5,
            ..Default::default()
        };
        let a = run(&cfg, RunMethod::Oracle, 1.0, &opts).unwrap();
        let b = run(&cfg, RunMethod::Phase(MethodKind::Flannery), 1.0, &opts).unwrap();
        for i in 0..5 {
            assert!((a.q(i)[0] - b.q(i)[0]).abs() < 1e-10);
        }
    }
}
