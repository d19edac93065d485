//! Energy-optimal control to a fixed exit time.
//!
//! The unconstrained optimum has affine control vanishing at `t_f`. When it
//! violates a constraint, constrained arcs are pieced in and the switching times
//! re-solved, following the first violation until the trajectory is feasible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{brent, golden_min, scan_min, Cubic};
use crate::trajectory::{
    ArcKind, ArcLaw, ArcSegment, FollowLaw, Junction, JunctionKind, LeaderPiece, Obstacle,
    PiecewiseTrajectory, SafetyParams, State,
};

pub const U_TOL: f64 = 1e-7;
pub const V_TOL: f64 = 1e-7;
pub const GAP_TOL: f64 = 1e-6;
const TEMPLATE_GAP_TOL: f64 = 1e-9;
/// Sampling step for constraint checks on non-polynomial arcs.
const SAMPLE_STEP: f64 = 0.02;
pub const DEFAULT_ARC_CAP: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub t0: f64,
    pub tf: f64,
    pub p0: f64,
    pub pf: f64,
    pub v0: f64,
    /// Initial gap to the predecessor; infinite when there is none.
    pub s0: f64,
    pub limits: Limits,
    pub safety: SafetyParams,
    /// Turn entry speed cap and the route position where it applies.
    pub v_entry: Option<f64>,
    pub merge_position: Option<f64>,
    /// Accept control bounds already binding at `t0`.
    pub relax_initial: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum LowLevelError {
    #[error("invalid boundary data: {0}")]
    Invalid(String),
    #[error("singular boundary system (t_f = t_0)")]
    Singular,
    #[error("constraint {0:?} already binding at t_0")]
    InitialActivity(ConstraintKind),
    #[error("no feasible arc sequence for t_f = {tf}: {reason}")]
    Infeasible { tf: f64, reason: String },
    #[error("no tangency point in the span")]
    NoTangency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    UMin,
    UMax,
    VMin,
    VMax,
    VEntry,
    /// Safe distance to the obstacle with this index.
    Safety(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub time: f64,
    pub kind: ConstraintKind,
}

/// Which rule fixes the time of a safety corner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum JunctionRule {
    /// Corner time minimizing the total cost among feasible corners.
    #[default]
    MinCost,
    /// Corner time from the Hamiltonian corner condition.
    HamiltonianJump,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub arc_cap: usize,
    pub junction_rule: JunctionRule,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            arc_cap: DEFAULT_ARC_CAP,
            junction_rule: JunctionRule::MinCost,
        }
    }
}

impl BoundaryData {
    pub fn validate(&self) -> Result<(), LowLevelError> {
        let bad = |m: &str| Err(LowLevelError::Invalid(m.to_string()));
        let l = &self.limits;
        if !(self.tf > self.t0) {
            return if self.tf == self.t0 {
                Err(LowLevelError::Singular)
            } else {
                bad("t_f must exceed t_0")
            };
        }
        if !(l.u_min < 0.0 && l.u_max > 0.0) {
            return bad("need u_min < 0 < u_max");
        }
        if !(l.v_min > 0.0 && l.v_min <= l.v_max) {
            return bad("need 0 < v_min <= v_max");
        }
        if self.v0 < l.v_min - V_TOL || self.v0 > l.v_max + V_TOL {
            return bad("v_0 outside [v_min, v_max]");
        }
        let s = &self.safety;
        if !(s.xi > 0.0 && s.rho > 0.0 && s.dbar >= 0.0) {
            return bad("need xi > 0, rho > 0, dbar >= 0");
        }
        if !(self.pf > self.p0) {
            return bad("p_f must exceed p_0");
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.tf - self.t0
    }
}

pub fn safety_arc_control(xi: f64, rho: f64, v_k: f64, v_i: f64) -> f64 {
    xi * (v_k - v_i) / rho
}

/// Unconstrained arc in absolute-time coefficients:
/// `u = a t + c`, `v = a t²/2 + c t + d`, `p = a t³/6 + c t²/2 + d t + e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnconstrainedArc {
    pub a: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// The same polynomial around `t_start`.
    pub local: Cubic,
}

impl UnconstrainedArc {
    fn from_local(local: Cubic, t_start: f64, t_end: f64) -> Self {
        let t0 = local.t_ref;
        let (p0, v0, u0, a) = (local.c[0], local.c[1], 2.0 * local.c[2], 6.0 * local.c[3]);
        let c = u0 - a * t0;
        let d = v0 - a * t0 * t0 / 2.0 - c * t0;
        let e = p0 - a * t0.powi(3) / 6.0 - c * t0 * t0 / 2.0 - d * t0;
        Self {
            a,
            c,
            d,
            e,
            t_start,
            t_end,
            local,
        }
    }

    pub fn segment(&self) -> ArcSegment {
        ArcSegment::poly(ArcKind::Unconstrained, self.t_start, self.t_end, self.local)
    }

    pub fn trajectory(&self) -> PiecewiseTrajectory {
        PiecewiseTrajectory::single(self.segment())
    }
}

/// The 4×4 boundary system `{p(t0)=p0, v(t0)=v0, p(tf)=pf, u(tf)=0}` in closed form.
pub fn solve_unconstrained(bd: &BoundaryData) -> Result<UnconstrainedArc, LowLevelError> {
    let d = bd.duration();
    if d == 0.0 {
        return Err(LowLevelError::Singular);
    }
    if !(d > 0.0) {
        return Err(LowLevelError::Invalid("t_f must exceed t_0".into()));
    }
    let x = bd.pf - bd.p0;
    let a = 3.0 * (bd.v0 * d - x) / d.powi(3);
    let local = Cubic::from_state(bd.t0, bd.p0, bd.v0, -a * d, a);
    Ok(UnconstrainedArc::from_local(local, bd.t0, bd.tf))
}

// ---------------------------------------------------------------------------
// Violation scanning

/// Earliest `t` in `[a, b]` where `f(t) > level`, for a cubic `f`.
fn earliest_exceed_cubic(f: &Cubic, a: f64, b: f64, level: f64) -> Option<f64> {
    if f.value(a) > level {
        return Some(a);
    }
    if f.max_on(a, b).1 <= level {
        return None;
    }
    let shifted = f.add_constant(-level);
    let roots = shifted.roots_in(a, b);
    for (i, r) in roots.iter().enumerate() {
        let next = roots.get(i + 1).copied().unwrap_or(b);
        if f.value(0.5 * (r + next)) > level {
            return Some(*r);
        }
    }
    Some(b)
}

/// Same for a general function, by dense sampling plus bisection.
fn earliest_exceed_sampled<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, level: f64) -> Option<f64> {
    let fa = f(a);
    if fa > level {
        return Some(a);
    }
    let n = (((b - a) / SAMPLE_STEP).ceil() as usize).clamp(16, 20_000);
    let h = (b - a) / n as f64;
    let (mut best_t, mut best) = (a, fa);
    let mut prev = a;
    for k in 1..=n {
        let t = a + h * k as f64;
        let v = f(t);
        if v > level {
            return brent(|x| f(x) - level, prev, t, 1e-12).or(Some(t));
        }
        if v > best {
            best = v;
            best_t = t;
        }
        prev = t;
    }
    // Guard against a narrow excursion between samples near the sampled maximum.
    let lo = (best_t - h).max(a);
    let hi = (best_t + h).min(b);
    let (tm, vm) = golden_min(|x| -f(x), lo, hi, 1e-10);
    if -vm > level {
        return brent(|x| f(x) - level, lo, tm, 1e-12).or(Some(tm));
    }
    None
}

/// Gap slack `ξ(L − p) − δ̄ − ρ v` of a follower cubic against a leader cubic.
pub fn slack_cubic(leader: &Cubic, follower: &Cubic, s: &SafetyParams) -> Cubic {
    leader
        .scale(s.xi)
        .add_scaled(follower, -s.xi)
        .add_scaled(&follower.derivative(), -s.rho)
        .add_constant(-s.dbar)
}

pub fn gap_slack(obstacle: &Obstacle, me: State, t: f64, s: &SafetyParams) -> f64 {
    s.xi * (obstacle.state(t).p - me.p) - s.dbar - s.rho * me.v
}

/// Earliest time at which any control, speed, entry-cap or safety constraint is
/// violated beyond solver tolerance.
pub fn first_violation(
    traj: &PiecewiseTrajectory,
    bd: &BoundaryData,
    obstacles: &[Obstacle],
) -> Option<Violation> {
    let mut best: Option<Violation> = None;
    let mut note = |time: f64, kind: ConstraintKind| {
        if best.is_none_or(|b| time < b.time - 1e-12) {
            best = Some(Violation { time, kind });
        }
    };
    let l = &bd.limits;
    for arc in &traj.arcs {
        let (a, b) = (arc.start, arc.end);
        if b <= a {
            continue;
        }
        match &arc.law {
            ArcLaw::Poly(c) => {
                let v = c.derivative();
                let u = v.derivative();
                if let Some(t) = earliest_exceed_cubic(&u, a, b, l.u_max + U_TOL) {
                    note(t, ConstraintKind::UMax);
                }
                if let Some(t) = earliest_exceed_cubic(&u.scale(-1.0), a, b, -l.u_min + U_TOL) {
                    note(t, ConstraintKind::UMin);
                }
                if let Some(t) = earliest_exceed_cubic(&v, a, b, l.v_max + V_TOL) {
                    note(t, ConstraintKind::VMax);
                }
                if let Some(t) = earliest_exceed_cubic(&v.scale(-1.0), a, b, -l.v_min + V_TOL) {
                    note(t, ConstraintKind::VMin);
                }
            }
            ArcLaw::Follow(f) => {
                let checks: [(ConstraintKind, Box<dyn Fn(f64) -> f64>, f64); 4] = [
                    (ConstraintKind::UMax, Box::new(|t| f.state(t).u), l.u_max + U_TOL),
                    (ConstraintKind::UMin, Box::new(|t| -f.state(t).u), -l.u_min + U_TOL),
                    (ConstraintKind::VMax, Box::new(|t| f.state(t).v), l.v_max + V_TOL),
                    (ConstraintKind::VMin, Box::new(|t| -f.state(t).v), -l.v_min + V_TOL),
                ];
                for (kind, g, level) in checks {
                    if let Some(t) = earliest_exceed_sampled(g, a, b, level) {
                        note(t, kind);
                    }
                }
            }
        }
    }
    if let (Some(cap), Some(pm)) = (bd.v_entry, bd.merge_position) {
        if pm > bd.p0 && pm < bd.pf {
            let tm = traj.time_at_position(pm);
            if traj.state_extended(tm).v > cap + V_TOL {
                note(tm, ConstraintKind::VEntry);
            }
        }
    }
    for (j, obs) in obstacles.iter().enumerate() {
        if let Some(t) = first_gap_violation(traj, obs, &bd.safety) {
            note(t, ConstraintKind::Safety(j));
        }
    }
    best
}

/// Earliest time the safe distance to `obs` is violated.
pub fn first_gap_violation(
    traj: &PiecewiseTrajectory,
    obs: &Obstacle,
    s: &SafetyParams,
) -> Option<f64> {
    gap_violation_beyond(traj, obs, s, GAP_TOL)
}

fn gap_violation_beyond(
    traj: &PiecewiseTrajectory,
    obs: &Obstacle,
    s: &SafetyParams,
    tol: f64,
) -> Option<f64> {
    let lo = obs.window.0.max(traj.t0());
    let hi = obs.window.1.min(traj.tf());
    if hi < lo {
        return None;
    }
    for arc in &traj.arcs {
        let a = arc.start.max(lo);
        let b = arc.end.min(hi);
        if b < a || (b == a && arc.end > arc.start && a != lo) {
            continue;
        }
        for piece in obs.pieces(a, b.max(a)) {
            let (pa, pb) = piece.span();
            let (pa, pb) = (pa.max(a), pb.min(b));
            if pb < pa {
                continue;
            }
            let hit = match (&piece, &arc.law) {
                (LeaderPiece::Poly { p: q, .. }, ArcLaw::Poly(c)) => {
                    let slack = slack_cubic(q, c, s);
                    earliest_exceed_cubic(&slack.scale(-1.0), pa, pb, tol)
                }
                _ => earliest_exceed_sampled(
                    |t| -gap_slack(obs, arc.state(t), t, s),
                    pa,
                    pb,
                    tol,
                ),
            };
            if hit.is_some() {
                return hit;
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Trajectory construction helpers

struct Builder {
    t: f64,
    p: f64,
    v: f64,
    arcs: Vec<ArcSegment>,
    junctions: Vec<Junction>,
}

impl Builder {
    fn new(t: f64, p: f64, v: f64) -> Self {
        Self {
            t,
            p,
            v,
            arcs: Vec::new(),
            junctions: Vec::new(),
        }
    }

    fn last_u(&self) -> Option<f64> {
        self.arcs.last().map(|a| a.state(a.end).u)
    }

    /// Appends a polynomial arc with control `u + jerk·(t − start)`.
    fn poly(&mut self, kind: ArcKind, end: f64, u: f64, jerk: f64) {
        let c = Cubic::from_state(self.t, self.p, self.v, u, jerk);
        self.arcs.push(ArcSegment::poly(kind, self.t, end, c));
        self.t = end;
        self.p = c.value(end);
        self.v = c.d1(end);
    }

    fn follow(&mut self, law: FollowLaw, end: f64) {
        let s = law.state(end);
        self.arcs.push(ArcSegment {
            kind: ArcKind::SafetyFollow,
            start: self.t,
            end,
            law: ArcLaw::Follow(Box::new(law)),
        });
        self.t = end;
        self.p = s.p;
        self.v = s.v;
    }

    fn junction(&mut self, kind: JunctionKind, u_left: f64, u_right: f64) {
        self.junctions
            .push(Junction::plain(self.t, kind, u_left, u_right));
    }

    fn finish(self) -> PiecewiseTrajectory {
        // Drop zero-length arcs but keep junction records.
        let mut arcs: Vec<ArcSegment> = self
            .arcs
            .into_iter()
            .filter(|a| a.end > a.start)
            .collect();
        if arcs.is_empty() {
            panic!("trajectory without positive-length arcs");
        }
        // Glue numerically-coincident endpoints.
        for i in 1..arcs.len() {
            let prev_end = arcs[i - 1].end;
            arcs[i].start = prev_end;
        }
        PiecewiseTrajectory {
            arcs,
            junctions: self.junctions,
        }
    }
}

// ---------------------------------------------------------------------------
// Control/speed bound families: [bound?] → unconstrained → [speed bound?]

/// Arc sequences with monotone control of one sign: an optional saturated
/// control arc, an affine arc, and an optional speed-bound arc up to `t_f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundFamily {
    /// +1 accelerating (u_max / v_max), −1 decelerating (u_min / v_min).
    pub sign: f64,
    pub control_arc: bool,
    pub speed_arc: bool,
}

fn bound_values(bd: &BoundaryData, sign: f64) -> (f64, f64) {
    if sign > 0.0 {
        (bd.limits.u_max, bd.limits.v_max)
    } else {
        (bd.limits.u_min, bd.limits.v_min)
    }
}

fn build_bound(bd: &BoundaryData, fam: BoundFamily, ta: f64) -> Option<PiecewiseTrajectory> {
    let (ub, vb) = bound_values(bd, fam.sign);
    let (ukind, vkind) = if fam.sign > 0.0 {
        (ArcKind::UMax, ArcKind::VMax)
    } else {
        (ArcKind::UMin, ArcKind::VMin)
    };
    let mut b = Builder::new(bd.t0, bd.p0, bd.v0);
    if fam.control_arc {
        if ta > bd.t0 {
            b.poly(ukind, ta, ub, 0.0);
        }
    }
    let u_start = if fam.control_arc { ub } else { f64::NAN };
    match (fam.control_arc, fam.speed_arc) {
        (true, false) => {
            let tau = bd.tf - b.t;
            if tau <= 0.0 {
                return None;
            }
            if ta > bd.t0 {
                b.junction(JunctionKind::ControlBoundExit, ub, ub);
            }
            b.poly(ArcKind::Unconstrained, bd.tf, u_start, -u_start / tau);
        }
        (true, true) => {
            let t1 = b.t + 2.0 * (vb - b.v) / ub;
            if !(t1 >= b.t && t1 <= bd.tf + 1e-12) {
                return None;
            }
            if ta > bd.t0 {
                b.junction(JunctionKind::ControlBoundExit, ub, ub);
            }
            let tau = t1 - b.t;
            if tau > 0.0 {
                b.poly(ArcKind::Unconstrained, t1, ub, -ub / tau);
            }
            b.junction(JunctionKind::SpeedEntry, 0.0, 0.0);
            b.poly(vkind, bd.tf.max(t1), 0.0, 0.0);
            b.v = vb;
        }
        (false, true) => {
            // Closed form: T = 3(v_b D − X)/(v_b − v0).
            let d = bd.duration();
            let x = bd.pf - bd.p0;
            let t = 3.0 * (vb * d - x) / (vb - bd.v0);
            if !(t > 0.0 && t <= d + 1e-12) || (vb - bd.v0).abs() < 1e-15 {
                return None;
            }
            let a = 2.0 * (bd.v0 - vb) / (t * t);
            let t1 = bd.t0 + t;
            b.poly(ArcKind::Unconstrained, t1, -a * t, a);
            let u_left = b.last_u().unwrap_or(0.0);
            b.junction(JunctionKind::SpeedEntry, u_left, 0.0);
            // Pin the plateau exactly at the bound.
            let c = Cubic::new(t1, [b.p, vb, 0.0, 0.0]);
            b.arcs.push(ArcSegment::poly(vkind, t1, bd.tf, c));
            b.t = bd.tf;
        }
        (false, false) => {
            let unc = solve_unconstrained(bd).ok()?;
            return Some(unc.trajectory());
        }
    }
    Some(b.finish())
}

fn terminal_position(traj: &PiecewiseTrajectory) -> f64 {
    let last = &traj.arcs[traj.arcs.len() - 1];
    last.state(last.end).p
}

/// Solves a bound family for `p(t_f) = p_f`.
pub fn solve_bound_family(
    bd: &BoundaryData,
    fam: BoundFamily,
) -> Result<PiecewiseTrajectory, LowLevelError> {
    let infeasible = |r: &str| LowLevelError::Infeasible {
        tf: bd.tf,
        reason: r.to_string(),
    };
    if !fam.control_arc {
        return build_bound(bd, fam, bd.t0).ok_or_else(|| infeasible("speed arc has no entry time"));
    }
    let (ub, vb) = bound_values(bd, fam.sign);
    let ta_max = if fam.speed_arc {
        // Saturated until the speed bound is reached directly.
        (bd.t0 + (vb - bd.v0) / ub).min(bd.tf)
    } else {
        bd.tf
    };
    if ta_max < bd.t0 {
        return Err(infeasible("speed bound already passed"));
    }
    let resid = |ta: f64| match build_bound(bd, fam, ta) {
        Some(tr) => terminal_position(&tr) - bd.pf,
        None => f64::NAN,
    };
    // With a speed arc, the affine arc must reach the bound before t_f.
    let lo = if fam.speed_arc {
        (bd.t0 + 2.0 * (vb - bd.v0) / ub - bd.duration()).max(bd.t0)
    } else {
        bd.t0
    };
    let hi = ta_max - 1e-12 * (1.0 + ta_max.abs());
    let ta = brent(resid, lo, hi, 1e-13).ok_or_else(|| infeasible("no saturation length matches p_f"))?;
    build_bound(bd, fam, ta).ok_or_else(|| infeasible("degenerate saturation arc"))
}

/// Speed-bound arc following an affine arc, terminal at `t_f`.
pub fn solve_speed_arc(
    kind: ArcKind,
    bd: &BoundaryData,
) -> Result<PiecewiseTrajectory, LowLevelError> {
    match kind {
        ArcKind::VMax => solve_bound_family(
            bd,
            BoundFamily {
                sign: 1.0,
                control_arc: false,
                speed_arc: true,
            },
        ),
        ArcKind::VMin => {
            // Boundary that forces constant minimum speed.
            let d = bd.duration();
            if (bd.v0 - bd.limits.v_min).abs() < 1e-12
                && (bd.pf - bd.p0 - bd.limits.v_min * d).abs() < 1e-9
            {
                let c = Cubic::new(bd.t0, [bd.p0, bd.limits.v_min, 0.0, 0.0]);
                return Ok(PiecewiseTrajectory::single(ArcSegment::poly(
                    ArcKind::VMin,
                    bd.t0,
                    bd.tf,
                    c,
                )));
            }
            solve_bound_family(
                bd,
                BoundFamily {
                    sign: -1.0,
                    control_arc: false,
                    speed_arc: true,
                },
            )
        }
        ArcKind::VEntryCap => solve_entry_cap(bd),
        other => Err(LowLevelError::Invalid(format!(
            "{other:?} is not a speed arc"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Turn entry cap: [affine → cap at v_entry until merge entry → affine]

fn build_entry_cap(bd: &BoundaryData, t1: f64) -> Option<PiecewiseTrajectory> {
    let cap = bd.v_entry?;
    let pm = bd.merge_position?;
    let tau = t1 - bd.t0;
    if tau <= 0.0 {
        return None;
    }
    let a = 2.0 * (bd.v0 - cap) / (tau * tau);
    let mut b = Builder::new(bd.t0, bd.p0, bd.v0);
    b.poly(ArcKind::Unconstrained, t1, -a * tau, a);
    if b.p > pm + 1e-9 {
        return None;
    }
    let tm = t1 + (pm - b.p) / cap;
    if tm >= bd.tf {
        return None;
    }
    b.junction(JunctionKind::SpeedEntry, 0.0, 0.0);
    let c = Cubic::new(t1, [b.p, cap, 0.0, 0.0]);
    b.arcs.push(ArcSegment::poly(ArcKind::VEntryCap, t1, tm, c));
    b.t = tm;
    b.p = pm;
    b.v = cap;
    let rest = bd.tf - tm;
    // p(tf) = pm + cap·τ + w τ²/3 for u falling linearly from w to 0.
    let w = 3.0 * (bd.pf - pm - cap * rest) / (rest * rest);
    b.junction(JunctionKind::EntryCapExit, 0.0, w);
    b.poly(ArcKind::Unconstrained, bd.tf, w, -w / rest);
    Some(b.finish())
}

fn solve_entry_cap(bd: &BoundaryData) -> Result<PiecewiseTrajectory, LowLevelError> {
    let pm = bd.merge_position.ok_or(LowLevelError::Invalid("no merge position".into()))?;
    let cap = bd.v_entry.ok_or(LowLevelError::Invalid("no entry cap".into()))?;
    let _ = (pm, cap);
    let cost = |t1: f64| match build_entry_cap(bd, t1) {
        Some(tr) if first_violation(&tr, bd, &[]).is_none() => tr.energy_cost(),
        _ => f64::INFINITY,
    };
    let (t1, _) = scan_min(cost, bd.t0 + 1e-6 * bd.duration(), bd.tf, 200, 1e-9).ok_or(
        LowLevelError::Infeasible {
            tf: bd.tf,
            reason: "no entry-cap junction is feasible".into(),
        },
    )?;
    build_entry_cap(bd, t1).ok_or(LowLevelError::Infeasible {
        tf: bd.tf,
        reason: "entry-cap rebuild failed".into(),
    })
}

// ---------------------------------------------------------------------------
// Safety arcs

/// Continuation after the safety constraint becomes active at `t1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SafetyTail {
    /// Corner: control jumps to the tangency value and decays linearly to 0.
    Corner,
    /// Follow until `t2`, then an affine arc to `t_f`.
    FollowThenFree,
    /// Follow until `t_f`.
    FollowToEnd,
    /// Follow until the control reaches `u_min`, then saturate.
    FollowThenUMin,
    /// Follow, saturate at `u_min`, then hold `v_min`.
    FollowThenUMinVMin,
    /// Follow until the speed reaches `v_min`, then hold it.
    FollowThenVMin,
}

/// First time on `[a, b]` where `g` drops to `level` or below.
fn first_drop<F: Fn(f64) -> f64>(g: F, a: f64, b: f64, level: f64) -> Option<f64> {
    earliest_exceed_sampled(|t| level - g(t), a, b, 0.0)
}

fn safety_junction(
    t1: f64,
    u_left: f64,
    slope_left: f64,
    u_right: f64,
    slope_right: f64,
    v_rel: f64,
    s: &SafetyParams,
) -> Junction {
    let pi = (u_right - u_left) / s.rho;
    Junction {
        time: t1,
        kind: JunctionKind::SafetyEntry,
        u_left,
        u_right,
        tangency: 0.0,
        pi,
        costate_jump: [pi * s.xi, pi * s.rho, -pi],
        hamiltonian_residual: 0.5 * u_right * u_right
            - 0.5 * u_left * u_left
            - 2.0 * pi * s.xi * v_rel,
        slope_residual: (slope_left - slope_right) - 2.0 * pi * s.xi,
    }
}

fn build_safety(
    bd: &BoundaryData,
    obs: &Obstacle,
    tail: SafetyTail,
    a: f64,
    c: f64,
    t1: f64,
    t2: f64,
) -> Option<PiecewiseTrajectory> {
    let s = bd.safety;
    let l = bd.limits;
    let mut b = Builder::new(bd.t0, bd.p0, bd.v0);
    if t1 > bd.t0 {
        b.poly(ArcKind::Unconstrained, t1, c, a);
    }
    let u_left = c + a * (t1 - bd.t0);
    let lead = obs.state(t1);
    let n1 = gap_slack(obs, State { p: b.p, v: b.v, u: u_left }, t1, &s);
    let v_rel = lead.v - b.v;
    let tf = bd.tf;
    let follow_end = match tail {
        SafetyTail::Corner => t1,
        SafetyTail::FollowThenFree => t2.clamp(t1, tf),
        _ => tf,
    };
    let law = FollowLaw::build(obs.clone(), s, t1, b.p, follow_end.max(t1));
    let u_plus = safety_arc_control(s.xi, s.rho, lead.v, b.v);
    let slope_right;
    match tail {
        SafetyTail::Corner => {
            let tau = tf - t1;
            if tau <= 0.0 {
                return None;
            }
            slope_right = -u_plus / tau;
            let mut j = safety_junction(t1, u_left, a, u_plus, slope_right, v_rel, &s);
            j.tangency = n1;
            b.junctions.push(j);
            b.poly(ArcKind::Unconstrained, tf, u_plus, -u_plus / tau);
        }
        _ => {
            let h = 1e-6;
            let us = law.state(t1).u;
            let end_probe = (t1 + h).min(follow_end);
            slope_right = if end_probe > t1 {
                (law.state(end_probe).u - us) / (end_probe - t1)
            } else {
                0.0
            };
            let mut j = safety_junction(t1, u_left, a, us, slope_right, v_rel, &s);
            j.tangency = n1;
            b.junctions.push(j);
            let end = match tail {
                SafetyTail::FollowThenUMin | SafetyTail::FollowThenUMinVMin => {
                    first_drop(|t| law.state(t).u, t1, tf, l.u_min)?
                }
                SafetyTail::FollowThenVMin => first_drop(|t| law.state(t).v, t1, tf, l.v_min)?,
                _ => follow_end,
            };
            let law = if end < follow_end {
                FollowLaw::build(obs.clone(), s, t1, b.p, end)
            } else {
                law
            };
            let u_end = law.state(end).u;
            b.follow(law, end);
            match tail {
                SafetyTail::FollowThenFree => {
                    let tau = tf - end;
                    if tau > 0.0 {
                        b.junction(JunctionKind::SafetyExit, u_end, u_end);
                        b.poly(ArcKind::Unconstrained, tf, u_end, -u_end / tau);
                    }
                }
                SafetyTail::FollowThenUMin => {
                    b.junction(JunctionKind::ControlBoundEntry, u_end, l.u_min);
                    b.poly(ArcKind::UMin, tf, l.u_min, 0.0);
                }
                SafetyTail::FollowThenUMinVMin => {
                    b.junction(JunctionKind::ControlBoundEntry, u_end, l.u_min);
                    let t3 = end + (l.v_min - b.v) / l.u_min;
                    if !(t3 >= end && t3 <= tf) {
                        return None;
                    }
                    b.poly(ArcKind::UMin, t3, l.u_min, 0.0);
                    b.junction(JunctionKind::SpeedEntry, l.u_min, 0.0);
                    let c = Cubic::new(t3, [b.p, l.v_min, 0.0, 0.0]);
                    b.arcs.push(ArcSegment::poly(ArcKind::VMin, t3, tf, c));
                    b.t = tf;
                }
                SafetyTail::FollowThenVMin => {
                    b.junction(JunctionKind::SpeedEntry, u_end, 0.0);
                    let c = Cubic::new(end, [b.p, l.v_min, 0.0, 0.0]);
                    b.arcs.push(ArcSegment::poly(ArcKind::VMin, end, tf, c));
                    b.t = tf;
                }
                _ => {}
            }
        }
    }
    Some(b.finish())
}

/// Residuals `(N(t1), p(tf) − pf)` of a safety template.
fn safety_residuals(
    bd: &BoundaryData,
    obs: &Obstacle,
    tail: SafetyTail,
    a: f64,
    c: f64,
    t1: f64,
    t2: f64,
) -> Option<([f64; 2], PiecewiseTrajectory)> {
    let traj = build_safety(bd, obs, tail, a, c, t1, t2)?;
    let n1 = traj
        .junctions
        .iter()
        .find(|j| j.kind == JunctionKind::SafetyEntry)
        .map(|j| j.tangency)?;
    Some(([n1, terminal_position(&traj) - bd.pf], traj))
}

/// Solves the two tangency/terminal conditions for the first-arc control
/// `u = c + a (t − t0)` with the junction times held fixed.
fn solve_safety_template(
    bd: &BoundaryData,
    obs: &Obstacle,
    tail: SafetyTail,
    t1: f64,
    t2: f64,
    guess: (f64, f64),
) -> Option<PiecewiseTrajectory> {
    let (mut a, mut c) = guess;
    let scale = 1.0 + bd.pf.abs();
    for _ in 0..40 {
        let (r, traj) = safety_residuals(bd, obs, tail, a, c, t1, t2)?;
        if r[0].abs() < 1e-10 * scale && r[1].abs() < 1e-10 * scale {
            return Some(traj);
        }
        let ha = 1e-6 * (1.0 + a.abs());
        let hc = 1e-6 * (1.0 + c.abs());
        let (ra, _) = safety_residuals(bd, obs, tail, a + ha, c, t1, t2)?;
        let (rc, _) = safety_residuals(bd, obs, tail, a, c + hc, t1, t2)?;
        let j = [
            [(ra[0] - r[0]) / ha, (rc[0] - r[0]) / hc],
            [(ra[1] - r[1]) / ha, (rc[1] - r[1]) / hc],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let da = (r[0] * j[1][1] - r[1] * j[0][1]) / det;
        let dc = (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        a -= da;
        c -= dc;
        if !a.is_finite() || !c.is_finite() {
            return None;
        }
    }
    None
}

fn feasible_cost(
    traj: Option<PiecewiseTrajectory>,
    bd: &BoundaryData,
    obstacles: &[Obstacle],
) -> Option<(f64, PiecewiseTrajectory)> {
    let traj = traj?;
    if first_violation(&traj, bd, obstacles).is_some() {
        return None;
    }
    // Junction times are optimized for cost, which pushes the gap against
    // whatever tolerance it is checked with. Hold templates to a tight one so
    // the slack left for later checks stays intact.
    if obstacles
        .iter()
        .any(|o| gap_violation_beyond(&traj, o, &bd.safety, TEMPLATE_GAP_TOL).is_some())
    {
        return None;
    }
    Some((traj.energy_cost(), traj))
}

fn unconstrained_guess(bd: &BoundaryData) -> (f64, f64) {
    let d = bd.duration();
    let a = 3.0 * (bd.v0 * d - (bd.pf - bd.p0)) / d.powi(3);
    (a, -a * d)
}

/// Best feasible trajectory of one safety template, optimizing the free
/// junction times for energy.
pub fn best_safety_template(
    bd: &BoundaryData,
    obstacles: &[Obstacle],
    j: usize,
    tail: SafetyTail,
    rule: JunctionRule,
) -> Option<PiecewiseTrajectory> {
    let obs = &obstacles[j];
    let guess = unconstrained_guess(bd);
    let lo = bd.t0.max(obs.window.0);
    let hi = bd.tf.min(obs.window.1);
    if hi <= lo {
        return None;
    }
    let eval = |t1: f64, t2: f64| {
        feasible_cost(solve_safety_template(bd, obs, tail, t1, t2, guess), bd, obstacles)
    };
    match tail {
        SafetyTail::FollowThenFree => {
            // Two free junction times: coarse grid, then coordinate refinement.
            let n1 = 40;
            let n2 = 16;
            let mut best: Option<(f64, f64, f64)> = None;
            for i in 0..n1 {
                let t1 = lo + (hi - lo) * (i as f64 + 0.5) / n1 as f64;
                for k in 1..=n2 {
                    let t2 = t1 + (bd.tf - t1) * k as f64 / (n2 + 1) as f64;
                    if let Some((cst, _)) = eval(t1, t2) {
                        if best.is_none_or(|b| cst < b.2) {
                            best = Some((t1, t2, cst));
                        }
                    }
                }
            }
            let (mut t1, mut t2, mut cst) = best?;
            let mut w1 = (hi - lo) / n1 as f64;
            let mut w2 = (bd.tf - t1) / (n2 + 1) as f64;
            for _ in 0..6 {
                let f1 = |x: f64| eval(x, t2.max(x)).map_or(f64::INFINITY, |r| r.0);
                if let Some((x, fx)) = scan_min(f1, (t1 - w1).max(lo), (t1 + w1).min(hi), 8, 1e-10) {
                    if fx < cst {
                        t1 = x;
                        cst = fx;
                    }
                }
                let f2 = |y: f64| eval(t1, y).map_or(f64::INFINITY, |r| r.0);
                if let Some((y, fy)) =
                    scan_min(f2, (t2 - w2).max(t1), (t2 + w2).min(bd.tf), 8, 1e-10)
                {
                    if fy < cst {
                        t2 = y;
                        cst = fy;
                    }
                }
                w1 *= 0.4;
                w2 *= 0.4;
            }
            eval(t1, t2).map(|r| r.1)
        }
        SafetyTail::Corner if rule == JunctionRule::HamiltonianJump => {
            let resid = |t1: f64| {
                solve_safety_template(bd, obs, tail, t1, t1, guess)
                    .and_then(|tr| tr.junctions.first().map(|j| j.u_left - 3.0 * j.u_right))
                    .unwrap_or(f64::NAN)
            };
            let n = 400;
            let mut best: Option<(f64, PiecewiseTrajectory)> = None;
            let mut prev: Option<(f64, f64)> = None;
            for i in 0..=n {
                let t = lo + (hi - lo) * (i as f64 + 0.5) / (n as f64 + 1.0);
                let r = resid(t);
                if let Some((tp, rp)) = prev {
                    if r.is_finite() && rp.is_finite() && r * rp <= 0.0 {
                        if let Some(root) = brent(resid, tp, t, 1e-13) {
                            if let Some((cst, tr)) = eval(root, root) {
                                if best.as_ref().is_none_or(|b| cst < b.0) {
                                    best = Some((cst, tr));
                                }
                            }
                        }
                    }
                }
                prev = Some((t, r));
            }
            best.map(|b| b.1)
        }
        _ => {
            let f = |t1: f64| eval(t1, t1).map_or(f64::INFINITY, |r| r.0);
            let (t1, _) = scan_min(f, lo, hi - 1e-9 * (hi - lo), 160, 1e-10)?;
            eval(t1, t1).map(|r| r.1)
        }
    }
}

/// Safe-distance arc entered at the tangency point nearest `entry_guess`,
/// followed to `t_f`.
pub fn solve_safety_arc(
    entry_guess: f64,
    bd: &BoundaryData,
    obstacle: &Obstacle,
) -> Result<(ArcSegment, Junction), LowLevelError> {
    let obstacles = std::slice::from_ref(obstacle);
    let guess = unconstrained_guess(bd);
    let lo = bd.t0.max(obstacle.window.0);
    let hi = bd.tf.min(obstacle.window.1);
    if hi <= lo {
        return Err(LowLevelError::NoTangency);
    }
    let mut candidates = Vec::new();
    let n = 200;
    for i in 0..=n {
        let t1 = lo + (hi - lo) * i as f64 / n as f64;
        if let Some(tr) = solve_safety_template(bd, obstacle, SafetyTail::FollowToEnd, t1, t1, guess) {
            if first_violation(&tr, bd, obstacles).is_none() {
                candidates.push((t1, tr));
            }
        }
    }
    let (_, tr) = candidates
        .into_iter()
        .min_by(|x, y| (x.0 - entry_guess).abs().total_cmp(&(y.0 - entry_guess).abs()))
        .ok_or(LowLevelError::NoTangency)?;
    let arc = tr
        .arcs
        .iter()
        .find(|a| a.kind == ArcKind::SafetyFollow)
        .cloned()
        .ok_or(LowLevelError::NoTangency)?;
    let junction = tr.junctions[0].clone();
    Ok((arc, junction))
}

/// Case-1 continuations after a safety arc against a decelerating leader,
/// trying saturation only, saturation then minimum speed, then minimum speed.
pub fn solve_umin_chain(
    bd: &BoundaryData,
    obstacles: &[Obstacle],
    j: usize,
) -> Result<PiecewiseTrajectory, LowLevelError> {
    for tail in [
        SafetyTail::FollowThenUMin,
        SafetyTail::FollowThenUMinVMin,
        SafetyTail::FollowThenVMin,
    ] {
        if let Some(tr) = best_safety_template(bd, obstacles, j, tail, JunctionRule::MinCost) {
            return Ok(tr);
        }
    }
    Err(LowLevelError::Infeasible {
        tf: bd.tf,
        reason: "no subcase of the decelerating-leader chain is consistent".into(),
    })
}

fn safety_families(
    bd: &BoundaryData,
    obstacles: &[Obstacle],
    j: usize,
    opts: &SolveOptions,
) -> Result<PiecewiseTrajectory, LowLevelError> {
    if let Some(tr) = best_safety_template(bd, obstacles, j, SafetyTail::Corner, opts.junction_rule) {
        return Ok(tr);
    }
    let mut best: Option<(f64, PiecewiseTrajectory)> = None;
    for tail in [SafetyTail::FollowThenFree, SafetyTail::FollowToEnd] {
        if let Some(tr) = best_safety_template(bd, obstacles, j, tail, opts.junction_rule) {
            let c = tr.energy_cost();
            if best.as_ref().is_none_or(|b| c < b.0) {
                best = Some((c, tr));
            }
        }
    }
    if let Some((_, tr)) = best {
        return Ok(tr);
    }
    solve_umin_chain(bd, obstacles, j)
}

/// Arc piecing: start unconstrained and add the arc matching the
/// first violated constraint until the trajectory is feasible.
pub fn piece_arcs(
    bd: &BoundaryData,
    obstacles: &[Obstacle],
    opts: &SolveOptions,
) -> Result<PiecewiseTrajectory, LowLevelError> {
    bd.validate()?;
    let infeasible = |r: String| LowLevelError::Infeasible { tf: bd.tf, reason: r };
    let mut traj = solve_unconstrained(bd)?.trajectory();
    let mut family = BoundFamily {
        sign: 0.0,
        control_arc: false,
        speed_arc: false,
    };
    for _ in 0..opts.arc_cap + 2 {
        let Some(viol) = first_violation(&traj, bd, obstacles) else {
            if traj.arcs.len() > opts.arc_cap {
                return Err(infeasible(format!("more than {} arcs", opts.arc_cap)));
            }
            return Ok(traj);
        };
        let sign = match viol.kind {
            ConstraintKind::UMax | ConstraintKind::VMax => 1.0,
            ConstraintKind::UMin | ConstraintKind::VMin => -1.0,
            ConstraintKind::VEntry => {
                if family.control_arc || family.speed_arc {
                    return Err(infeasible("entry cap combined with bound arcs".into()));
                }
                traj = solve_entry_cap(bd)?;
                continue;
            }
            ConstraintKind::Safety(j) => {
                if family.control_arc || family.speed_arc {
                    return Err(infeasible("safety arc combined with bound arcs".into()));
                }
                return safety_families(bd, obstacles, j, opts);
            }
        };
        if family.sign != 0.0 && family.sign != sign {
            return Err(infeasible("both upper and lower bounds binding".into()));
        }
        family.sign = sign;
        match viol.kind {
            ConstraintKind::UMax | ConstraintKind::UMin => {
                if !bd.relax_initial && viol.time <= bd.t0 + 1e-9 {
                    return Err(LowLevelError::InitialActivity(viol.kind));
                }
                if family.control_arc {
                    return Err(infeasible("control bound persists".into()));
                }
                family.control_arc = true;
            }
            _ => {
                if family.speed_arc {
                    return Err(infeasible("speed bound persists".into()));
                }
                family.speed_arc = true;
            }
        }
        traj = solve_bound_family(bd, family)?;
    }
    Err(infeasible("arc piecing did not converge".into()))
}

/// Structural checks on speed-bound arcs: control is continuous where a bound
/// activates, `v_min` is reached with `u < 0` increasing and `v_max` with
/// `u > 0` decreasing, and the bound then holds to `t_f` unless a
/// safety-following arc takes over. Returns one message per failure.
pub fn audit_speed_arcs(traj: &PiecewiseTrajectory) -> Vec<String> {
    let mut out = Vec::new();
    for (i, arc) in traj.arcs.iter().enumerate() {
        let sign = match arc.kind {
            ArcKind::VMin => -1.0,
            ArcKind::VMax => 1.0,
            _ => continue,
        };
        let name = arc.kind.label();
        if let Some(next) = traj.arcs.get(i + 1) {
            if next.kind != ArcKind::SafetyFollow {
                out.push(format!("{name} arc at {:.6} released into {}", arc.start, next.kind.label()));
            }
        }
        if i == 0 {
            continue;
        }
        match traj.junctions.iter().find(|j| (j.time - arc.start).abs() < 1e-9) {
            Some(j) if (j.u_left - j.u_right).abs() >= 1e-9 => out.push(format!(
                "{name} entry at {:.6}: control jumps {:.3e}",
                j.time,
                j.u_left - j.u_right
            )),
            Some(_) => {}
            None => out.push(format!("{name} entry at {:.6} has no junction", arc.start)),
        }
        let prev = &traj.arcs[i - 1];
        let h = (0.25 * (prev.end - prev.start)).min(1e-3);
        let (u1, u2) = (prev.state(arc.start - 2.0 * h).u, prev.state(arc.start - h).u);
        // Approaching v_max: u > 0 and falling. Approaching v_min: mirror image.
        if !(sign * u2 > 0.0 && sign * (u2 - u1) < 0.0) {
            out.push(format!(
                "{name} entered at {:.6} from u = {u2:.3e} moving by {:.3e}",
                arc.start,
                u2 - u1
            ));
        }
    }
    out
}

pub fn energy_cost(traj: &PiecewiseTrajectory) -> f64 {
    traj.energy_cost()
}

/// State and (when a predecessor is given) gap at `t`.
pub fn evaluate(
    traj: &PiecewiseTrajectory,
    t: f64,
    predecessor: Option<&Obstacle>,
    xi: f64,
) -> Result<(State, Option<f64>), crate::trajectory::OutOfSpan> {
    let s = traj.evaluate(t)?;
    let gap = predecessor.map(|o| xi * (o.state(t).p - s.p));
    Ok((s, gap))
}
