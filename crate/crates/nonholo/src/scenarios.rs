//! Built-in scenario catalog and JSON scenario ingestion.
//!
//! A scenario is a system plus consistent initial data. Files are UTF-8
//! JSON with fields `{"name", "coordinates", "parameters", "lagrangian",
//! "constraints", "initial"}` (optional `"observables"`), all values SI;
//! `initial` keys are coordinate names and `<coord>_dot` names.

use crate::dynamics::{check_initial_multipliers, solve_multipliers, MethodKind};
use crate::error::{Error, Result};
use crate::model::{constraint_values, momenta, ConfigState, PhaseState, SystemSpec};
use serde_json::Value;

/// Tolerance for the constraint residuals of loaded initial data.
pub const LOAD_CONSTRAINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub spec: SystemSpec,
    /// Values for every coordinate and every velocity at `t = 0`.
    pub initial: Vec<(String, f64)>,
    /// Requested output observable expressions (may be empty).
    pub observables: Vec<String>,
}

pub const BUILTIN_NAMES: [&str; 5] = [
    "rolling-sphere",
    "rod-pendulum",
    "free-particle",
    "constant-velocity",
    "twist-toy",
];

impl ScenarioConfig {
    /// Fully parameterized built-in scenarios.
    ///
    /// `rolling-sphere`: a 1 kg uniform sphere of radius 1 m rolling
    /// without slipping down a slope of angle pi/6 under g = 9.8 m/s^2,
    /// Euler angles in the z-x-z body-rate convention with theta_0 =
    /// pi/2 (away from the gimbal singularity, so the vertical-axis spin
    /// rate starts as phi_dot = 2.5 1/s). `rod-pendulum`: unit rigid rod
    /// released at rest from pi/4. The remaining three are unit-test
    /// systems.
    pub fn builtin(name: &str) -> Result<ScenarioConfig> {
        use std::f64::consts::{FRAC_1_SQRT_2, PI};
        let cfg = match name {
            "rolling-sphere" => {
                let omega_x = "(theta_dot*cos(phi) + psi_dot*sin(theta)*sin(phi))";
                let omega_y = "(theta_dot*sin(phi) - psi_dot*sin(theta)*cos(phi))";
                let omega_z = "(phi_dot + psi_dot*cos(theta))";
                let lagrangian = format!(
                    "0.5*M*(x_dot^2 + y_dot^2) + 0.5*I*({omega_x}^2 + {omega_y}^2 + {omega_z}^2) \
                     + M*g_e*sin(alpha)*x"
                );
                ScenarioConfig {
                    spec: SystemSpec::new(
                        "rolling-sphere",
                        &["x", "y", "theta", "phi", "psi"],
                        &[
                            ("M", 1.0),
                            ("r", 1.0),
                            ("g_e", 9.8),
                            ("alpha", PI / 6.0),
                            ("I", 0.4),
                        ],
                        &lagrangian,
                        &[
                            &format!("x_dot - r*{omega_y}"),
                            &format!("y_dot + r*{omega_x}"),
                        ],
                    )?,
                    initial: vec![
                        ("x".into(), 0.0),
                        ("y".into(), 0.0),
                        ("theta".into(), PI / 2.0),
                        ("phi".into(), 0.0),
                        ("psi".into(), 0.0),
                        ("x_dot".into(), 0.0),
                        ("y_dot".into(), 0.0),
                        ("theta_dot".into(), 0.0),
                        ("phi_dot".into(), 2.5),
                        ("psi_dot".into(), 0.0),
                    ],
                    observables: Vec::new(),
                }
            }
            "rod-pendulum" => ScenarioConfig {
                spec: SystemSpec::new(
                    "rod-pendulum",
                    &["x", "y"],
                    &[("m", 1.0), ("l", 1.0), ("g_e", 9.8)],
                    "0.5*m*(x_dot^2 + y_dot^2) - m*g_e*y",
                    &["x^2 + y^2 - l^2"],
                )?,
                initial: vec![
                    ("x".into(), FRAC_1_SQRT_2),
                    ("y".into(), -FRAC_1_SQRT_2),
                    ("x_dot".into(), 0.0),
                    ("y_dot".into(), 0.0),
                ],
                observables: Vec::new(),
            },
            "free-particle" => ScenarioConfig {
                spec: SystemSpec::new("free-particle", &["x"], &[], "0.5*x_dot^2", &[])?,
                initial: vec![("x".into(), 0.0), ("x_dot".into(), 3.0)],
                observables: Vec::new(),
            },
            "constant-velocity" => ScenarioConfig {
                spec: SystemSpec::new(
                    "constant-velocity",
                    &["x"],
                    &[("c", 3.0)],
                    "0.5*x_dot^2",
                    &["x_dot - c"],
                )?,
                initial: vec![("x".into(), 0.0), ("x_dot".into(), 3.0)],
                observables: Vec::new(),
            },
            "twist-toy" => ScenarioConfig {
                spec: SystemSpec::new(
                    "twist-toy",
                    &["q1", "q2", "q3"],
                    &[],
                    "0.5*(q1_dot^2 + q2_dot^2 + q3_dot^2)",
                    &["q2_dot - q3*q1_dot"],
                )?,
                initial: vec![
                    ("q1".into(), 0.0),
                    ("q2".into(), 0.0),
                    ("q3".into(), 0.5),
                    ("q1_dot".into(), 1.0),
                    ("q2_dot".into(), 0.5),
                    ("q3_dot".into(), 2.0),
                ],
                observables: Vec::new(),
            },
            other => return Err(Error::UnknownScenario(other.into())),
        };
        cfg.validate(1e-12)?;
        Ok(cfg)
    }

    /// Load a scenario file, either a built-in name or a path to JSON.
    pub fn load(path: &std::path::Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Schema {
            pointer: "".into(),
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<ScenarioConfig> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Schema {
            pointer: "".into(),
            detail: format!("invalid JSON: {e}"),
        })?;
        let obj = root.as_object().ok_or_else(|| Error::Schema {
            pointer: "".into(),
            detail: "top level must be an object".into(),
        })?;

        const KNOWN: [&str; 7] = [
            "name",
            "coordinates",
            "parameters",
            "lagrangian",
            "constraints",
            "initial",
            "observables",
        ];
        for key in obj.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Schema {
                    pointer: format!("/{key}"),
                    detail: "unknown key".into(),
                });
            }
        }
        let require = |key: &str| -> Result<&Value> {
            obj.get(key).ok_or_else(|| Error::Schema {
                pointer: format!("/{key}"),
                detail: "missing required key".into(),
            })
        };
        let as_str = |key: &str, v: &Value| -> Result<String> {
            v.as_str().map(str::to_owned).ok_or_else(|| Error::Schema {
                pointer: format!("/{key}"),
                detail: "expected a string".into(),
            })
        };

        let name = as_str("name", require("name")?)?;

        let coords_val = require("coordinates")?;
        let coords_arr = coords_val.as_array().ok_or_else(|| Error::Schema {
            pointer: "/coordinates".into(),
            detail: "expected an array of strings".into(),
        })?;
        let mut coords = Vec::with_capacity(coords_arr.len());
        for (i, v) in coords_arr.iter().enumerate() {
            coords.push(v.as_str().map(str::to_owned).ok_or_else(|| Error::Schema {
                pointer: format!("/coordinates/{i}"),
                detail: "expected a string".into(),
            })?);
        }

        let params_val = require("parameters")?;
        let params_obj = params_val.as_object().ok_or_else(|| Error::Schema {
            pointer: "/parameters".into(),
            detail: "expected an object of numbers".into(),
        })?;
        let mut params = Vec::with_capacity(params_obj.len());
        for (k, v) in params_obj {
            let num = v.as_f64().ok_or_else(|| Error::Schema {
                pointer: format!("/parameters/{k}"),
                detail: "expected a number".into(),
            })?;
            params.push((k.clone(), num));
        }

        let lagrangian_src = as_str("lagrangian", require("lagrangian")?)?;

        let cons_val = require("constraints")?;
        let cons_arr = cons_val.as_array().ok_or_else(|| Error::Schema {
            pointer: "/constraints".into(),
            detail: "expected an array of strings".into(),
        })?;
        let mut constraint_srcs = Vec::with_capacity(cons_arr.len());
        for (i, v) in cons_arr.iter().enumerate() {
            constraint_srcs.push(v.as_str().map(str::to_owned).ok_or_else(|| {
                Error::Schema {
                    pointer: format!("/constraints/{i}"),
                    detail: "expected a string".into(),
                }
            })?);
        }

        let initial_val = require("initial")?;
        let initial_obj = initial_val.as_object().ok_or_else(|| Error::Schema {
            pointer: "/initial".into(),
            detail: "expected an object of numbers".into(),
        })?;
        let mut initial = Vec::with_capacity(initial_obj.len());
        for (k, v) in initial_obj {
            let num = v.as_f64().ok_or_else(|| Error::Schema {
                pointer: format!("/initial/{k}"),
                detail: "expected a number".into(),
            })?;
            initial.push((k.clone(), num));
        }

        let mut observables = Vec::new();
        if let Some(v) = obj.get("observables") {
            let arr = v.as_array().ok_or_else(|| Error::Schema {
                pointer: "/observables".into(),
                detail: "expected an array of strings".into(),
            })?;
            for (i, o) in arr.iter().enumerate() {
                observables.push(o.as_str().map(str::to_owned).ok_or_else(|| {
                    Error::Schema {
                        pointer: format!("/observables/{i}"),
                        detail: "expected a string".into(),
                    }
                })?);
            }
        }

        let lagrangian = crate::expr::parse(&lagrangian_src)?;
        let constraints: Result<Vec<_>> =
            constraint_srcs.iter().map(|s| crate::expr::parse(s)).collect();
        let spec = SystemSpec::from_parts(&name, coords, params, lagrangian, constraints?)?;
        let cfg = ScenarioConfig {
            spec,
            initial,
            observables,
        };
        cfg.validate(LOAD_CONSTRAINT_TOL)?;
        Ok(cfg)
    }

    /// Serialize to the scenario-file JSON schema. Loading the result
    /// reproduces the system (expression text included).
    pub fn to_json(&self) -> String {
        let mut root = serde_json::Map::new();
        root.insert("name".into(), Value::String(self.spec.name().into()));
        root.insert(
            "coordinates".into(),
            Value::Array(
                self.spec
                    .coords()
                    .iter()
                    .map(|c| Value::String(c.clone()))
                    .collect(),
            ),
        );
        let mut params = serde_json::Map::new();
        for (k, v) in self.spec.params() {
            params.insert(k.clone(), serde_json::json!(v));
        }
        root.insert("parameters".into(), Value::Object(params));
        root.insert(
            "lagrangian".into(),
            Value::String(self.spec.lagrangian().to_string()),
        );
        root.insert(
            "constraints".into(),
            Value::Array(
                self.spec
                    .constraints()
                    .iter()
                    .map(|g| Value::String(g.to_string()))
                    .collect(),
            ),
        );
        let mut initial = serde_json::Map::new();
        for (k, v) in &self.initial {
            initial.insert(k.clone(), serde_json::json!(v));
        }
        root.insert("initial".into(), Value::Object(initial));
        if !self.observables.is_empty() {
            root.insert(
                "observables".into(),
                Value::Array(
                    self.observables
                        .iter()
                        .map(|o| Value::String(o.clone()))
                        .collect(),
                ),
            );
        }
        serde_json::to_string_pretty(&Value::Object(root)).expect("serializable")
    }

    fn initial_lookup(&self, name: &str) -> Result<f64> {
        self.initial
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Schema {
                pointer: format!("/initial/{name}"),
                detail: "missing initial value".into(),
            })
    }

    /// Configuration state at `t = 0`.
    pub fn initial_config_state(&self) -> Result<ConfigState> {
        let q: Result<Vec<f64>> = self
            .spec
            .coords()
            .iter()
            .map(|c| self.initial_lookup(c))
            .collect();
        let qd: Result<Vec<f64>> = self
            .spec
            .velocity_names()
            .iter()
            .map(|v| self.initial_lookup(v))
            .collect();
        Ok(ConfigState::new(0.0, q?, qd?))
    }

    /// Bridge the configuration initial data into phase space:
    /// `lam = 0`, `p = dL/dq_dot`, `plam = 0`, then a consistency
    /// re-solve, which must return vanishing multipliers for every
    /// velocity-level (depth-0) constraint and fills in the physical
    /// initial multipliers of holonomic ones.
    pub fn initial_phase_state(&self) -> Result<PhaseState> {
        let cs = self.initial_config_state()?;
        let m = self.spec.m();
        let lam0 = vec![0.0; m];
        let p = momenta(&self.spec, &cs, &lam0)?;
        let report = solve_multipliers(
            &self.spec,
            cs.t,
            &cs.q,
            &p,
            MethodKind::Flannery,
            &lam0,
        )?;
        check_initial_multipliers(&report, 1e-10)?;
        Ok(PhaseState::new(cs.t, cs.q, p, report.lam, vec![0.0; m]))
    }

    /// Check the initial data: every coordinate and velocity bound, no
    /// strays, constraints satisfied, and for holonomic constraints the
    /// hidden velocity level too.
    fn validate(&self, tol: f64) -> Result<()> {
        for (key, _) in &self.initial {
            let known = self.spec.coords().iter().any(|c| c == key)
                || self.spec.velocity_names().iter().any(|v| v == key);
            if !known {
                return Err(Error::Schema {
                    pointer: format!("/initial/{key}"),
                    detail: "not a coordinate or velocity".into(),
                });
            }
        }
        let cs = self.initial_config_state()?;
        let g = constraint_values(&self.spec, cs.t, &cs.q, &cs.qd)?;
        for (k, gk) in g.iter().enumerate() {
            if gk.abs() > tol {
                return Err(Error::ConstraintViolated {
                    detail: format!(
                        "initial data violates constraint {}: g = {gk:.3e}",
                        k + 1
                    ),
                });
            }
        }
        // hidden velocity level of holonomic constraints
        let vels = self.spec.velocity_names();
        for (k, gexpr) in self.spec.constraints().iter().enumerate() {
            let vars = gexpr.free_vars();
            if vels.iter().any(|v| vars.contains(v)) {
                continue;
            }
            let blocks = crate::model::constraint_blocks(&self.spec, k, cs.t, &cs.q, &cs.qd)?;
            let mut gdot = blocks.dt;
            for i in 0..self.spec.n() {
                gdot += blocks.dq[i] * cs.qd[i];
            }
            if gdot.abs() > 1e-8 {
                return Err(Error::ConstraintViolated {
                    detail: format!(
                        "initial velocities violate the derivative of holonomic constraint {}: g_dot = {gdot:.3e}",
                        k + 1
                    ),
                });
            }
        }
        for src in &self.observables {
            crate::brackets::Observable::parse(&self.spec, src)?;
        }
        Ok(())
    }
}
