//! Scenario files.
//!
//! TOML with `[geometry]`, `[[routes]]`, `[limits]`, `[safety]`, `[solver]`,
//! optional `[output]` and a list of `[[arrivals]]`. Units are SI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Cardinal, GeometryError, IntersectionGeometry, Maneuver, Route};
use crate::lowlevel::{JunctionRule, Limits, DEFAULT_ARC_CAP};
use crate::trajectory::SafetyParams;
use crate::upperlevel::{DEFAULT_EPSILON, DEFAULT_HORIZON};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub id: String,
    pub origin: Cardinal,
    pub maneuver: Maneuver,
    #[serde(default)]
    pub entry_lane: usize,
    #[serde(default)]
    pub exit_lane: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSpec {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Speed cap at merging-zone entry for turning vehicles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_entry: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySpec {
    pub xi: f64,
    pub rho: f64,
    pub dbar: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_horizon() -> f64 {
    DEFAULT_HORIZON
}
fn default_dt() -> f64 {
    0.01
}
fn default_arc_cap() -> usize {
    DEFAULT_ARC_CAP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt_output: f64,
    #[serde(default = "default_arc_cap")]
    pub arc_cap: usize,
    #[serde(default)]
    pub junction_rule: JunctionRuleSpec,
    /// Accept control bounds binding at entry.
    #[serde(default)]
    pub relax_initial_activity: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            dt_output: 0.01,
            arc_cap: DEFAULT_ARC_CAP,
            junction_rule: JunctionRuleSpec::MinCost,
            relax_initial_activity: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionRuleSpec {
    #[default]
    MinCost,
    HamiltonianJump,
}

impl From<JunctionRuleSpec> for JunctionRule {
    fn from(r: JunctionRuleSpec) -> Self {
        match r {
            JunctionRuleSpec::MinCost => JunctionRule::MinCost,
            JunctionRuleSpec::HamiltonianJump => JunctionRule::HamiltonianJump,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arrival {
    pub cav_id: u32,
    pub route: String,
    pub t0: f64,
    pub v0: f64,
    /// Fixed exit time; skips the exit-time optimization for this CAV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub geometry: IntersectionGeometry,
    pub routes: Vec<RouteSpec>,
    pub limits: LimitsSpec,
    pub safety: SafetySpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    pub arrivals: Vec<Arrival>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, trying `path.toml` when the bare path does not exist.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let resolved = if path.exists() {
            path.to_path_buf()
        } else {
            let mut p = path.as_os_str().to_owned();
            p.push(".toml");
            PathBuf::from(p)
        };
        let text = std::fs::read_to_string(&resolved).map_err(|source| ConfigError::Io {
            path: resolved.clone(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn limits(&self) -> Limits {
        Limits {
            u_min: self.limits.u_min,
            u_max: self.limits.u_max,
            v_min: self.limits.v_min,
            v_max: self.limits.v_max,
        }
    }

    pub fn safety_params(&self) -> SafetyParams {
        SafetyParams {
            xi: self.safety.xi,
            rho: self.safety.rho,
            dbar: self.safety.dbar,
        }
    }

    pub fn build_routes(&self) -> Result<Vec<Route>, ConfigError> {
        self.routes
            .iter()
            .map(|r| {
                Route::new(
                    r.id.clone(),
                    &self.geometry,
                    r.origin,
                    r.maneuver,
                    r.entry_lane,
                    r.exit_lane,
                )
                .map_err(ConfigError::from)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.geometry.validate()?;
        self.build_routes()?;
        let l = &self.limits;
        if !(l.u_min < 0.0 && l.u_max > 0.0) {
            return bad("limits: need u_min < 0 < u_max".into());
        }
        if !(l.v_min > 0.0 && l.v_min <= l.v_max) {
            return bad("limits: need 0 < v_min <= v_max".into());
        }
        if let Some(ve) = l.v_entry {
            if !(ve > 0.0 && ve <= l.v_max) {
                return bad("limits.v_entry must lie in (0, v_max]".into());
            }
        }
        let s = &self.safety;
        if !(s.xi > 0.0 && s.rho > 0.0 && s.dbar >= 0.0 && s.epsilon > 0.0) {
            return bad("safety: need xi > 0, rho > 0, dbar >= 0, epsilon > 0".into());
        }
        if !(self.solver.horizon > 0.0 && self.solver.dt_output > 0.0) {
            return bad("solver: horizon and dt_output must be positive".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.routes {
            if !ids.insert(r.id.as_str()) {
                return bad(format!("duplicate route id {}", r.id));
            }
        }
        let mut cavs = std::collections::BTreeSet::new();
        for (i, a) in self.arrivals.iter().enumerate() {
            if !ids.contains(a.route.as_str()) {
                return bad(format!("arrival {}: unknown route {}", a.cav_id, a.route));
            }
            if !cavs.insert(a.cav_id) {
                return bad(format!("duplicate cav_id {}", a.cav_id));
            }
            if a.v0 < l.v_min || a.v0 > l.v_max {
                return bad(format!("arrival {}: v0 outside [v_min, v_max]", a.cav_id));
            }
            if let Some(tf) = a.exit_time {
                if !(tf > a.t0) {
                    return bad(format!("arrival {}: exit_time must exceed t0", a.cav_id));
                }
            }
            if i > 0 {
                let p = &self.arrivals[i - 1];
                if a.t0 < p.t0 || (a.t0 == p.t0 && a.cav_id < p.cav_id) {
                    return bad(format!(
                        "arrivals must be sorted by t0 then cav_id (at cav {})",
                        a.cav_id
                    ));
                }
            }
        }
        Ok(())
    }
}
