//! Scenario runner.
//!
//! Arrivals are admitted one at a time in entry order. Each CAV solves for its
//! earliest exit time against the live protocol, then for its energy-optimal
//! motion at that exit time, and commits. Afterwards every committed pair is
//! re-checked on a fine grid.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::geometry::Route;
use crate::lowlevel::{
    first_violation, piece_arcs, solve_unconstrained, BoundaryData, LowLevelError, SolveOptions,
};
use crate::numeric::golden_min;
use crate::protocol::{CavRecord, CrossingProtocol, ProtocolError, SafetySource, SourceKind};
use crate::trajectory::{ArcKind, Obstacle, PiecewiseTrajectory, SafetyParams};
use crate::upperlevel::{
    select_fallback_tf, solve_over_candidates, UpperParams, UpperProblem, UpperSolution,
};

/// Slack below this counts as a violation.
pub const VIOLATION_TOL: f64 = 1e-6;
/// Grid used by the safety check.
pub const VERIFY_DT: f64 = 0.01;
const FALLBACK_STEP: f64 = 0.1;
const FALLBACK_MAX_STEP: f64 = 1.0;
const WINDOW_PASSES: usize = 3;

pub type Scenario = Config;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("cav {cav}: {reason}")]
    Unsolvable { cav: u32, reason: String },
    #[error("writing {path}: {reason}")]
    Output { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Commitment {
    /// Exit time from the upper level.
    Upper,
    /// Exit time fixed in the scenario.
    Prescribed,
    /// Upper level failed; earliest exit that the low level could realize.
    Fallback,
}

#[derive(Clone, Debug)]
pub struct CavOutcome {
    pub cav_id: u32,
    pub requested_route: String,
    pub route: String,
    pub t0: f64,
    pub v0: f64,
    pub tf: f64,
    pub commitment: Commitment,
    pub upper: Option<UpperSolution>,
    pub trajectory: Arc<PiecewiseTrajectory>,
    pub energy: f64,
    /// Terminal position error of RK4 integration of the committed control.
    pub integration_error: f64,
}

impl CavOutcome {
    pub fn arcs(&self) -> Vec<ArcKind> {
        self.trajectory.kinds()
    }

    /// Committed from the upper level as one unconstrained arc with every
    /// margin strictly negative.
    pub fn no_gap(&self) -> bool {
        self.upper.as_ref().is_some_and(|u| u.values.feasible())
            && self.arcs() == [ArcKind::Unconstrained]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairMargin {
    pub follower: u32,
    pub leader: u32,
    pub label: String,
    pub lateral: bool,
    pub min_slack: f64,
    pub time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SafetyReport {
    pub min_rear_end: Option<f64>,
    pub min_lateral: Option<f64>,
    pub pairs: Vec<PairMargin>,
    pub violations: Vec<PairMargin>,
}

impl SafetyReport {
    pub fn certified(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub cavs: Vec<CavOutcome>,
    pub protocol: CrossingProtocol,
    pub safety: SafetyReport,
    pub mean_travel_time: f64,
    pub total_energy: f64,
}

fn upper_params(cfg: &Config) -> UpperParams {
    UpperParams {
        limits: cfg.limits(),
        safety: cfg.safety_params(),
        epsilon: cfg.safety.epsilon,
        horizon: cfg.solver.horizon,
        v_entry: cfg.limits.v_entry,
    }
}

fn solve_options(cfg: &Config) -> SolveOptions {
    SolveOptions {
        arc_cap: cfg.solver.arc_cap,
        junction_rule: cfg.solver.junction_rule.into(),
    }
}

fn boundary(cfg: &Config, route: &Route, t0: f64, v0: f64, tf: f64, s0: f64) -> BoundaryData {
    let v_entry = if route.is_turn() { cfg.limits.v_entry } else { None };
    BoundaryData {
        t0,
        tf,
        p0: 0.0,
        pf: route.total_length,
        v0,
        s0,
        limits: cfg.limits(),
        safety: cfg.safety_params(),
        v_entry,
        merge_position: v_entry.map(|_| route.merge_entry),
        relax_initial: cfg.solver.relax_initial_activity,
    }
}

/// The source for the vehicle directly ahead in the entry lane, if any.
fn entry_predecessor<'a>(sources: &'a [SafetySource], route: &Route) -> Option<&'a SafetySource> {
    let lane = route.entry_lane();
    sources
        .iter()
        .rev()
        .find(|s| s.kind == SourceKind::RearEnd { lane } && s.positions.0 <= 0.0)
}

fn windows_close(a: &[Obstacle], b: &[Obstacle]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x.window.0 - y.window.0).abs() < 1e-6 && (x.window.1 - y.window.1).abs() < 1e-6)
}

/// Low-level solve at a fixed exit time. Constraint windows depend on the
/// solution, so the solve is repeated until they settle.
pub fn solve_low(
    cfg: &Config,
    protocol: &CrossingProtocol,
    route: &Route,
    t0: f64,
    v0: f64,
    tf: f64,
) -> Result<PiecewiseTrajectory, LowLevelError> {
    let sources = protocol
        .safety_sources(&route.id)
        .map_err(|e| LowLevelError::Invalid(e.to_string()))?;
    let s0 = entry_predecessor(&sources, route)
        .map(|s| cfg.safety.xi * (s.leader.state_extended(t0).p + s.offset))
        .unwrap_or(f64::INFINITY);
    let bd = boundary(cfg, route, t0, v0, tf, s0);
    let opts = solve_options(cfg);
    let guess = solve_unconstrained(&bd)?.trajectory();
    let mut obstacles: Vec<Obstacle> = sources.iter().map(|s| s.obstacle(&guess)).collect();
    let mut traj = piece_arcs(&bd, &obstacles, &opts)?;
    for _ in 0..WINDOW_PASSES {
        let next: Vec<Obstacle> = sources.iter().map(|s| s.obstacle(&traj)).collect();
        if windows_close(&obstacles, &next) {
            return Ok(traj);
        }
        obstacles = next;
        traj = piece_arcs(&bd, &obstacles, &opts)?;
    }
    let settled: Vec<Obstacle> = sources.iter().map(|s| s.obstacle(&traj)).collect();
    match first_violation(&traj, &bd, &settled) {
        None => Ok(traj),
        Some(v) => Err(LowLevelError::Infeasible {
            tf,
            reason: format!("constraint windows did not settle ({:?} at {:.3})", v.kind, v.time),
        }),
    }
}

struct Admission {
    route: Route,
    tf: f64,
    commitment: Commitment,
    upper: Option<UpperSolution>,
    trajectory: PiecewiseTrajectory,
}

/// Necessary condition at the exit: every leader whose constraint is still
/// active then must be far enough ahead even at the lowest speed.
fn exit_gap_possible(cfg: &Config, sources: &[SafetySource], route: &Route, tf: f64) -> bool {
    let s = cfg.safety_params();
    let pf = route.total_length;
    sources.iter().all(|src| {
        if src.positions.1 < pf {
            return true;
        }
        s.xi * (src.leader.state_extended(tf).p + src.offset - pf) - s.dbar - s.rho * cfg.limits.v_min
            >= -VIOLATION_TOL
    })
}

/// Earliest realizable exit time at or after `start`, to within
/// `FALLBACK_STEP`. Steps grow geometrically until a solve succeeds, then the
/// last bracket is bisected; realizability is assumed to persist once reached.
fn fallback(
    cfg: &Config,
    protocol: &CrossingProtocol,
    route: &Route,
    t0: f64,
    v0: f64,
    start: f64,
) -> Result<(f64, PiecewiseTrajectory), String> {
    let end = t0 + cfg.solver.horizon;
    let sources = protocol.safety_sources(&route.id).map_err(|e| e.to_string())?;
    let mut last = String::from("horizon exhausted");
    let attempt = |tf: f64, last: &mut String| -> Option<PiecewiseTrajectory> {
        if !protocol.exit_time_allowed(route.exit_lane(), tf)
            || !exit_gap_possible(cfg, &sources, route, tf)
        {
            return None;
        }
        match solve_low(cfg, protocol, route, t0, v0, tf) {
            Ok(traj) => Some(traj),
            Err(e) => {
                *last = e.to_string();
                None
            }
        }
    };
    let mut lo = start - FALLBACK_STEP;
    let mut step = FALLBACK_STEP;
    let mut tf = start;
    let (mut hi, mut best) = loop {
        if tf > end {
            return Err(last);
        }
        if let Some(traj) = attempt(tf, &mut last) {
            break (tf, traj);
        }
        lo = tf;
        tf += step;
        step = (2.0 * step).min(FALLBACK_MAX_STEP);
    };
    while hi - lo > FALLBACK_STEP + 1e-9 {
        let mid = 0.5 * (lo + hi);
        match attempt(mid, &mut last) {
            Some(traj) => {
                hi = mid;
                best = traj;
            }
            None => lo = mid,
        }
    }
    Ok((hi, best))
}

fn admit(
    cfg: &Config,
    protocol: &CrossingProtocol,
    cav_id: u32,
    route_id: &str,
    t0: f64,
    v0: f64,
    exit_time: Option<f64>,
) -> Result<Admission, SimError> {
    let unsolvable = |reason: String| SimError::Unsolvable { cav: cav_id, reason };
    let route = protocol
        .route(route_id)
        .ok_or_else(|| ProtocolError::UnknownRoute(route_id.to_string()))?
        .clone();
    if let Some(tf) = exit_time {
        let trajectory =
            solve_low(cfg, protocol, &route, t0, v0, tf).map_err(|e| unsolvable(e.to_string()))?;
        return Ok(Admission {
            route,
            tf,
            commitment: Commitment::Prescribed,
            upper: None,
            trajectory,
        });
    }
    let params = upper_params(cfg);
    if let Ok((problem, sol)) = solve_over_candidates(protocol, cav_id, route_id, t0, v0, &params) {
        let chosen = protocol
            .route(&problem.route)
            .expect("candidate route exists")
            .clone();
        if let Ok(trajectory) = solve_low(cfg, protocol, &chosen, t0, v0, sol.tf) {
            return Ok(Admission {
                route: chosen,
                tf: sol.tf,
                commitment: Commitment::Upper,
                upper: Some(sol),
                trajectory,
            });
        }
        let (tf, trajectory) =
            fallback(cfg, protocol, &chosen, t0, v0, sol.tf + FALLBACK_STEP).map_err(unsolvable)?;
        return Ok(Admission {
            route: chosen,
            tf,
            commitment: Commitment::Fallback,
            upper: None,
            trajectory,
        });
    }
    let problem = UpperProblem::assemble(protocol, cav_id, &route, t0, v0, &params)
        .map_err(|e| unsolvable(e.to_string()))?;
    let start = select_fallback_tf(&problem, protocol).map_err(|e| unsolvable(e.to_string()))?;
    let (tf, trajectory) = fallback(cfg, protocol, &route, t0, v0, start).map_err(unsolvable)?;
    Ok(Admission {
        route,
        tf,
        commitment: Commitment::Fallback,
        upper: None,
        trajectory,
    })
}

pub fn run(scenario: &Scenario) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let routes = scenario.build_routes()?;
    let mut protocol = CrossingProtocol::new(scenario.geometry.clone(), routes, scenario.safety.rho);
    let mut arrivals = scenario.arrivals.clone();
    arrivals.sort_by(|a, b| a.t0.total_cmp(&b.t0).then(a.cav_id.cmp(&b.cav_id)));
    let mut cavs = Vec::with_capacity(arrivals.len());
    for a in &arrivals {
        // Every registered CAV entered no later than this one, so the live
        // record is already the snapshot at a.t0.
        let adm = admit(scenario, &protocol, a.cav_id, &a.route, a.t0, a.v0, a.exit_time)?;
        let trajectory = Arc::new(adm.trajectory);
        let phi = adm.upper.as_ref().map(|u| u.phi);
        protocol.register(CavRecord::new(a.cav_id, &adm.route, phi, trajectory.clone()))?;
        let integration_error = integration_error(&trajectory);
        cavs.push(CavOutcome {
            cav_id: a.cav_id,
            requested_route: a.route.clone(),
            route: adm.route.id.clone(),
            t0: a.t0,
            v0: a.v0,
            tf: adm.tf,
            commitment: adm.commitment,
            upper: adm.upper,
            energy: trajectory.energy_cost(),
            trajectory,
            integration_error,
        });
    }
    let safety = verify_safety(&cavs, scenario)?;
    let n = cavs.len().max(1) as f64;
    Ok(SimResult {
        mean_travel_time: cavs.iter().map(|c| c.tf - c.t0).sum::<f64>() / n,
        total_energy: cavs.iter().map(|c| c.energy).sum(),
        cavs,
        protocol,
        safety,
    })
}

fn min_slack(
    obs: &Obstacle,
    me: &PiecewiseTrajectory,
    s: &SafetyParams,
) -> Option<(f64, f64)> {
    let lo = obs.window.0.max(me.t0());
    let hi = obs.window.1.min(me.tf());
    if hi < lo {
        return None;
    }
    let slack = |t: f64| {
        let m = me.state_extended(t);
        s.xi * (obs.state(t).p - m.p) - s.dbar - s.rho * m.v
    };
    let n = ((hi - lo) / VERIFY_DT).ceil().max(1.0) as usize;
    let step = (hi - lo) / n as f64;
    let mut best = (lo, slack(lo));
    for k in 1..=n {
        let t = if k == n { hi } else { lo + k as f64 * step };
        let v = slack(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    let a = (best.0 - step).max(lo);
    let b = (best.0 + step).min(hi);
    if b > a {
        let refined = golden_min(slack, a, b, 1e-10);
        if refined.1 < best.1 {
            best = refined;
        }
    }
    Some(best)
}

/// Re-derives every CAV's constraints from the committed record and finds the
/// smallest slack of each one.
pub fn verify_safety(cavs: &[CavOutcome], scenario: &Scenario) -> Result<SafetyReport, SimError> {
    let routes = scenario.build_routes()?;
    let mut proto = CrossingProtocol::new(scenario.geometry.clone(), routes, scenario.safety.rho);
    let s = scenario.safety_params();
    let mut report = SafetyReport::default();
    for c in cavs {
        for src in proto.safety_sources(&c.route)? {
            let obs = src.obstacle(&c.trajectory);
            let Some((time, value)) = min_slack(&obs, &c.trajectory, &s) else {
                continue;
            };
            let lateral = src.kind == SourceKind::Lateral;
            let slot = if lateral {
                &mut report.min_lateral
            } else {
                &mut report.min_rear_end
            };
            *slot = Some(slot.map_or(value, |m: f64| m.min(value)));
            let pm = PairMargin {
                follower: c.cav_id,
                leader: src.leader_id,
                label: src.label(),
                lateral,
                min_slack: value,
                time,
            };
            if value < -VIOLATION_TOL {
                report.violations.push(pm.clone());
            }
            report.pairs.push(pm);
        }
        let route = proto
            .route(&c.route)
            .ok_or_else(|| ProtocolError::UnknownRoute(c.route.clone()))?;
        let rec = CavRecord::new(c.cav_id, route, None, c.trajectory.clone());
        proto.records.push(rec);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynState {
    pub t: f64,
    pub p: f64,
    pub v: f64,
    /// Gap to the leader; stays put without one.
    pub s: f64,
}

/// RK4 on `ṗ = v, v̇ = u, ṡ = ξ(v_k − v)`. The last step is shortened to land
/// on the end of the span.
pub fn integrate_dynamics(
    u: impl Fn(f64) -> f64,
    x0: DynState,
    end: f64,
    dt: f64,
    leader_speed: Option<&dyn Fn(f64) -> f64>,
    xi: f64,
) -> Vec<DynState> {
    let rhs = |t: f64, v: f64| {
        let sd = leader_speed.map_or(0.0, |vk| xi * (vk(t) - v));
        (v, u(t), sd)
    };
    let mut x = x0;
    let mut out = vec![x];
    while x.t < end - 1e-12 {
        let h = dt.min(end - x.t);
        let (p1, v1, s1) = rhs(x.t, x.v);
        let (p2, v2, s2) = rhs(x.t + 0.5 * h, x.v + 0.5 * h * v1);
        let (p3, v3, s3) = rhs(x.t + 0.5 * h, x.v + 0.5 * h * v2);
        let (p4, v4, s4) = rhs(x.t + h, x.v + h * v3);
        x = DynState {
            t: x.t + h,
            p: x.p + h / 6.0 * (p1 + 2.0 * p2 + 2.0 * p3 + p4),
            v: x.v + h / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4),
            s: x.s + h / 6.0 * (s1 + 2.0 * s2 + 2.0 * s3 + s4),
        };
        out.push(x);
    }
    out
}

/// Integrates the committed control arc by arc and compares the end position
/// with the analytic one.
fn integration_error(traj: &PiecewiseTrajectory) -> f64 {
    let first = traj.arcs[0].state(traj.t0());
    let mut x = DynState {
        t: traj.t0(),
        p: first.p,
        v: first.v,
        s: 0.0,
    };
    for arc in &traj.arcs {
        if arc.end <= arc.start {
            continue;
        }
        let hist = integrate_dynamics(|t| arc.state(t).u, x, arc.end, 1e-3, None, 1.0);
        x = *hist.last().expect("nonempty history");
    }
    let end = traj.arcs[traj.arcs.len() - 1].state(traj.tf()).p;
    (x.p - end).abs()
}

// ---------------------------------------------------------------------------
// Output

pub const CSV_HEADER: [&str; 7] = ["cav_id", "t", "p", "v", "u", "s", "arc"];

/// Rows of `cav_<id>.csv`: grid `t0 + k·dt` plus the exit time.
pub fn sample_rows(cav: &CavOutcome, sources: &[SafetySource], route: &Route, xi: f64, dt: f64) -> Vec<[String; 7]> {
    let pred = entry_predecessor(sources, route);
    let traj = &cav.trajectory;
    let (t0, tf) = (traj.t0(), traj.tf());
    let n = ((tf - t0) / dt + 1e-9).floor() as usize;
    let mut times: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * dt).collect();
    if tf - times[times.len() - 1] > 1e-9 {
        times.push(tf);
    }
    times
        .into_iter()
        .map(|t| {
            let st = traj.evaluate(t.min(tf)).expect("sample inside span");
            let gap = pred.map_or_else(
                || "inf".to_string(),
                |s| format!("{:.9}", xi * (s.leader.state_extended(t).p + s.offset - st.p)),
            );
            [
                cav.cav_id.to_string(),
                format!("{t:.6}"),
                format!("{:.9}", st.p),
                format!("{:.9}", st.v),
                format!("{:.9}", st.u),
                gap,
                traj.arc_at(t).kind.label().to_string(),
            ]
        })
        .collect()
}

#[derive(Serialize)]
struct CavSummary<'a> {
    cav_id: u32,
    requested_route: &'a str,
    route: &'a str,
    t0: f64,
    v0: f64,
    tf: f64,
    travel_time: f64,
    energy: f64,
    commitment: Commitment,
    arcs: Vec<&'static str>,
    no_gap: bool,
    max_margin: Option<f64>,
    integration_error: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    cavs: usize,
    certified: bool,
    mean_travel_time: f64,
    total_energy: f64,
    cav: Vec<CavSummary<'a>>,
}

#[derive(Serialize)]
struct Solutions<'a> {
    solution: Vec<&'a UpperSolution>,
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Output {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("report serializes")
}

fn write_text(path: &Path, text: &str) -> Result<(), SimError> {
    fs::write(path, text).map_err(|e| out_err(path, e))
}

/// Writes `cav_<id>.csv` for each CAV plus `summary.toml`,
/// `safety_report.toml`, `solutions.toml` and `protocol.toml`.
pub fn write_outputs(result: &SimResult, scenario: &Scenario, dir: &Path, dt: f64) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let routes = scenario.build_routes()?;
    let mut proto = CrossingProtocol::new(scenario.geometry.clone(), routes, scenario.safety.rho);
    for c in &result.cavs {
        let route = proto
            .route(&c.route)
            .ok_or_else(|| ProtocolError::UnknownRoute(c.route.clone()))?
            .clone();
        let sources = proto.safety_sources(&c.route)?;
        let path = dir.join(format!("cav_{}.csv", c.cav_id));
        let mut w = csv::Writer::from_path(&path).map_err(|e| out_err(&path, e))?;
        w.write_record(CSV_HEADER).map_err(|e| out_err(&path, e))?;
        for row in sample_rows(c, &sources, &route, scenario.safety.xi, dt) {
            w.write_record(&row).map_err(|e| out_err(&path, e))?;
        }
        w.flush().map_err(|e| out_err(&path, e))?;
        proto
            .records
            .push(CavRecord::new(c.cav_id, &route, None, c.trajectory.clone()));
    }
    let summary = Summary {
        cavs: result.cavs.len(),
        certified: result.safety.certified(),
        mean_travel_time: result.mean_travel_time,
        total_energy: result.total_energy,
        cav: result
            .cavs
            .iter()
            .map(|c| CavSummary {
                cav_id: c.cav_id,
                requested_route: &c.requested_route,
                route: &c.route,
                t0: c.t0,
                v0: c.v0,
                tf: c.tf,
                travel_time: c.tf - c.t0,
                energy: c.energy,
                commitment: c.commitment,
                arcs: c.arcs().into_iter().map(ArcKind::label).collect(),
                no_gap: c.no_gap(),
                max_margin: c.upper.as_ref().map(|u| u.values.worst()),
                integration_error: c.integration_error,
            })
            .collect(),
    };
    write_text(&dir.join("summary.toml"), &to_toml(&summary))?;
    write_text(&dir.join("safety_report.toml"), &to_toml(&result.safety))?;
    let sols = Solutions {
        solution: result.cavs.iter().filter_map(|c| c.upper.as_ref()).collect(),
    };
    write_text(&dir.join("solutions.toml"), &to_toml(&sols))?;
    write_text(&dir.join("protocol.toml"), &result.protocol.dump())?;
    Ok(())
}
