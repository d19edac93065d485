//! Minimum exit time with a cubic position profile.
//!
//! Given `t_f`, the boundary conditions fix the cubic completely, so the
//! search is one-dimensional: the earliest `t_f` whose cubic keeps every
//! speed, control, gap and entry-cap margin strictly negative and whose exit
//! time is free on the exit lane.

use std::f64::consts::PI;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::Route;
use crate::lowlevel::{slack_cubic, Limits};
use crate::numeric::{brent, golden_min, Cubic};
use crate::protocol::{CrossingProtocol, ProtocolError, SafetySource, SourceKind};
use crate::trajectory::{
    ArcKind, ArcSegment, LeaderPiece, Obstacle, PiecewiseTrajectory, SafetyParams,
};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 120.0;
const SCAN_STEP: f64 = 0.05;
const BISECT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum UpperError {
    #[error("cubic coefficient is zero")]
    DegenerateCubic,
    #[error("ω₂ is zero")]
    DegenerateOmega,
    #[error("Cardano discriminant {0} is not positive")]
    Discriminant(f64),
    #[error("no feasible exit time within the horizon")]
    Infeasible,
    #[error("horizon exhausted while looking for a free exit time")]
    HorizonExhausted,
    #[error("no strictly feasible point for the duality check")]
    NoSlaterPoint,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// `p(t) = φ₃t³ + φ₂t² + φ₁t + φ₀` in absolute time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Phi {
    pub p3: f64,
    pub p2: f64,
    pub p1: f64,
    pub p0: f64,
}

/// Depressed-cubic parameters: `x³ + ω₀x + ω₁ + ω₂p = 0`, `t = x + ω₃`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Omega {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Phi {
    pub fn new(p3: f64, p2: f64, p1: f64, p0: f64) -> Self {
        Self { p3, p2, p1, p0 }
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.p3, self.p2, self.p1, self.p0]
    }

    /// Cubic solving `p(t0)=p0, v(t0)=v0, p(tf)=pf, u(tf)=0`.
    pub fn from_boundary(t0: f64, p0: f64, v0: f64, tf: f64, pf: f64) -> Self {
        let d = tf - t0;
        let a = 3.0 * (v0 * d - (pf - p0)) / d.powi(3);
        let c = Cubic::from_state(t0, p0, v0, -a * d, a).rebase(0.0);
        Self::new(c.c[3], c.c[2], c.c[1], c.c[0])
    }

    pub fn cubic(&self) -> Cubic {
        Cubic::new(0.0, [self.p0, self.p1, self.p2, self.p3])
    }

    pub fn position(&self, t: f64) -> f64 {
        ((self.p3 * t + self.p2) * t + self.p1) * t + self.p0
    }

    pub fn speed(&self, t: f64) -> f64 {
        (3.0 * self.p3 * t + 2.0 * self.p2) * t + self.p1
    }

    pub fn control(&self, t: f64) -> f64 {
        6.0 * self.p3 * t + 2.0 * self.p2
    }

    /// The same motion as a one-arc trajectory on `[t0, tf]`.
    pub fn trajectory(&self, t0: f64, tf: f64) -> PiecewiseTrajectory {
        PiecewiseTrajectory::single(ArcSegment::poly(
            ArcKind::Unconstrained,
            t0,
            tf,
            self.cubic().rebase(t0),
        ))
    }

    /// Time at position `p` on `[t0, tf]`: Cardano when it applies, bracketing
    /// otherwise, then a Newton polish on the forward cubic.
    pub fn time_at(&self, p: f64, span: (f64, f64)) -> f64 {
        let mut t = match phi_to_omega(self).and_then(|w| time_at_position(&w, p)) {
            Ok(t) if t >= span.0 - 1e-6 && t <= span.1 + 1e-6 => t,
            _ => bracket_time(self, p, span),
        };
        for _ in 0..3 {
            let v = self.speed(t);
            if v.abs() < 1e-12 {
                break;
            }
            let step = (self.position(t) - p) / v;
            t -= step;
            if step.abs() < 1e-15 * (1.0 + t.abs()) {
                break;
            }
        }
        t
    }
}

fn bracket_time(phi: &Phi, p: f64, span: (f64, f64)) -> f64 {
    let f = |t: f64| phi.position(t) - p;
    let (mut lo, mut hi) = span;
    // Widen at the ends assuming motion continues forward.
    let width = (hi - lo).max(1.0);
    for _ in 0..60 {
        if f(lo) <= 0.0 {
            break;
        }
        lo -= width;
    }
    for _ in 0..60 {
        if f(hi) >= 0.0 {
            break;
        }
        hi += width;
    }
    brent(f, lo, hi, 1e-14).unwrap_or(span.1)
}

pub fn phi_to_omega(phi: &Phi) -> Result<Omega, UpperError> {
    if phi.p3 == 0.0 {
        return Err(UpperError::DegenerateCubic);
    }
    let r2 = phi.p2 / phi.p3;
    let r1 = phi.p1 / phi.p3;
    let r0 = phi.p0 / phi.p3;
    Ok(Omega {
        w0: r1 - r2 * r2 / 3.0,
        w1: 2.0 * r2.powi(3) / 27.0 - r1 * r2 / 3.0 + r0,
        w2: -1.0 / phi.p3,
        w3: -r2 / 3.0,
    })
}

pub fn omega_to_phi(w: &Omega) -> Result<Phi, UpperError> {
    if w.w2 == 0.0 {
        return Err(UpperError::DegenerateOmega);
    }
    let p3 = -1.0 / w.w2;
    let r2 = -3.0 * w.w3;
    let r1 = w.w0 + r2 * r2 / 3.0;
    let r0 = w.w1 - 2.0 * r2.powi(3) / 27.0 + r1 * r2 / 3.0;
    Ok(Phi::new(p3, p3 * r2, p3 * r1, p3 * r0))
}

/// Time at which the committed motion passes `p`, from the depressed cubic.
///
/// One real root: Cardano. Three real roots happen when the motion, extended
/// beyond its span, reverses on both sides (`φ₃ < 0`); the forward branch is
/// then the middle root, taken from the trigonometric form.
pub fn time_at_position(w: &Omega, p: f64) -> Result<f64, UpperError> {
    let q = w.w1 + w.w2 * p;
    let disc = 0.25 * q * q + w.w0.powi(3) / 27.0;
    let mut x = if disc > 0.0 {
        let sd = disc.sqrt();
        // Take the larger-magnitude cube root directly, derive the other from
        // A·B = −ω₀/3 to avoid cancellation.
        let big = if q > 0.0 { -0.5 * q - sd } else { -0.5 * q + sd };
        let a = big.cbrt();
        let b = if a != 0.0 { -w.w0 / (3.0 * a) } else { 0.0 };
        a + b
    } else if w.w2 > 0.0 && w.w0 < 0.0 {
        let m = 2.0 * (-w.w0 / 3.0).sqrt();
        let arg = (3.0 * q / (w.w0 * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        let mut roots = [0, 1, 2].map(|k| m * (theta - 2.0 * PI * k as f64 / 3.0).cos());
        roots.sort_by(f64::total_cmp);
        roots[1]
    } else {
        return Err(UpperError::Discriminant(disc));
    };
    for _ in 0..2 {
        let d = 3.0 * x * x + w.w0;
        if d == 0.0 {
            break;
        }
        x -= (x * x * x + w.w0 * x + q) / d;
    }
    Ok(x + w.w3)
}

/// Everything the minimum-exit-time program needs for one CAV.
#[derive(Clone, Debug)]
pub struct UpperProblem {
    pub cav_id: u32,
    pub route: String,
    pub t0: f64,
    pub v0: f64,
    pub pf: f64,
    /// Merging-zone entry for turns with an entry speed cap.
    pub merge_position: Option<f64>,
    pub v_entry: Option<f64>,
    pub limits: Limits,
    /// `ξ` is taken as 1 here regardless of the stored value.
    pub safety: SafetyParams,
    pub epsilon: f64,
    pub horizon: f64,
    pub sources: Vec<SafetySource>,
    pub exit_lane: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpperParams {
    pub limits: Limits,
    pub safety: SafetyParams,
    pub epsilon: f64,
    pub horizon: f64,
    pub v_entry: Option<f64>,
}

impl UpperProblem {
    pub fn assemble(
        protocol: &CrossingProtocol,
        cav_id: u32,
        route: &Route,
        t0: f64,
        v0: f64,
        params: &UpperParams,
    ) -> Result<Self, UpperError> {
        let v_entry = if route.is_turn() { params.v_entry } else { None };
        Ok(Self {
            cav_id,
            route: route.id.clone(),
            t0,
            v0,
            pf: route.total_length,
            merge_position: v_entry.map(|_| route.merge_entry),
            v_entry,
            limits: params.limits,
            safety: params.safety,
            epsilon: params.epsilon,
            horizon: params.horizon,
            sources: protocol.safety_sources(&route.id)?,
            exit_lane: route.exit_lane(),
        })
    }

    fn unit_safety(&self) -> SafetyParams {
        SafetyParams {
            xi: 1.0,
            ..self.safety
        }
    }

    /// Minimum feasible duration from `u ≤ u_max`, `v ≤ v_max` alone.
    pub fn kinematic_lower_bound(&self) -> f64 {
        let l = &self.limits;
        let x = self.pf;
        let ta = ((l.v_max - self.v0) / l.u_max).max(0.0);
        let da = 0.5 * (self.v0 + l.v_max) * ta;
        let d = if da >= x {
            let disc = self.v0 * self.v0 + 2.0 * l.u_max * x;
            (disc.sqrt() - self.v0) / l.u_max
        } else {
            ta + (x - da) / l.v_max
        };
        self.t0 + d
    }
}

/// Residuals `h⁽¹⁾..h⁽⁴⁾`, plus `h⁽⁵⁾` when a merge time is given.
pub fn equality_residuals(phi: &Phi, problem: &UpperProblem, tf: f64, tm: Option<f64>) -> Vec<f64> {
    let t0 = problem.t0;
    let mut h = vec![
        phi.position(t0),
        phi.position(tf) - problem.pf,
        phi.speed(t0) - problem.v0,
        phi.control(tf),
    ];
    if let (Some(tm), Some(pm)) = (tm, problem.merge_position) {
        h.push(phi.position(tm) - pm);
    }
    h
}

/// One gap constraint's worst margin and where it occurs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapMargin {
    /// Index into the problem's sources.
    pub source: usize,
    pub label: String,
    pub rear_end: bool,
    pub value: f64,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InequalityValues {
    /// `g⁽¹⁾..g⁽⁷⁾`; families without members are `-inf`.
    pub g: [f64; 7],
    pub tau_v: f64,
    /// Time of the lowest speed on the span.
    pub tau_vmin: f64,
    pub tau_s: Option<f64>,
    pub tau_l: Option<f64>,
    pub t_m: Option<f64>,
    pub gaps: Vec<GapMargin>,
}

impl InequalityValues {
    pub fn feasible(&self) -> bool {
        self.g.iter().all(|g| *g < 0.0)
    }

    pub fn worst(&self) -> f64 {
        self.g.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Largest `δ̄ + ρv − (L − p) + ε` over the obstacle window (ξ = 1).
fn gap_margin(me: &Cubic, obs: &Obstacle, span: (f64, f64), s: &SafetyParams, eps: f64) -> Option<(f64, f64)> {
    let a = obs.window.0.max(span.0);
    let b = obs.window.1.min(span.1);
    if b < a {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for piece in obs.pieces(a, b) {
        let (pa, pb) = piece.span();
        let (pa, pb) = (pa.max(a), pb.min(b));
        if pb < pa {
            continue;
        }
        let (t, v) = match piece {
            LeaderPiece::Poly { p, .. } => slack_cubic(&p, me, s).scale(-1.0).max_on(pa, pb),
            LeaderPiece::Other { .. } => {
                let f = |t: f64| {
                    let l = obs.state(t).p;
                    s.dbar + s.rho * me.d1(t) - (l - me.value(t))
                };
                let n = 64;
                let h = (pb - pa) / n as f64;
                let (mut bt, mut bv) = (pa, f(pa));
                for k in 1..=n {
                    let t = pa + h * k as f64;
                    if f(t) > bv {
                        bv = f(t);
                        bt = t;
                    }
                }
                let (t, nv) = golden_min(|t| -f(t), (bt - h).max(pa), (bt + h).min(pb), 1e-10);
                if -nv > bv {
                    (t, -nv)
                } else {
                    (bt, bv)
                }
            }
        };
        if best.is_none_or(|bb| v > bb.1) {
            best = Some((t, v));
        }
    }
    best.map(|(t, v)| (t, v + eps))
}

/// The seven margin families at `t_f`, with their extremum times.
pub fn inequality_values(phi: &Phi, problem: &UpperProblem, tf: f64) -> InequalityValues {
    let t0 = problem.t0;
    let l = &problem.limits;
    let eps = problem.epsilon;
    let clamp = |t: f64| t.clamp(t0, tf);
    let tau = if phi.p3 != 0.0 {
        clamp(-phi.p2 / (3.0 * phi.p3))
    } else {
        t0
    };
    let cands = [t0, tf, tau];
    let tau_v = cands
        .iter()
        .copied()
        .max_by(|a, b| phi.speed(*a).total_cmp(&phi.speed(*b)))
        .unwrap_or(t0);
    let tau_vmin = cands
        .iter()
        .copied()
        .min_by(|a, b| phi.speed(*a).total_cmp(&phi.speed(*b)))
        .unwrap_or(t0);
    let mut g = [f64::NEG_INFINITY; 7];
    g[0] = phi.speed(tau_v) - l.v_max + eps;
    g[1] = l.v_min - phi.speed(tau_vmin) + eps;
    g[2] = phi.control(t0) - l.u_max + eps;
    g[3] = l.u_min - phi.control(t0) + eps;

    let traj = phi.trajectory(t0, tf);
    let me = phi.cubic();
    let s = problem.unit_safety();
    let mut gaps = Vec::new();
    let (mut tau_s, mut tau_l) = (None, None);
    for (idx, src) in problem.sources.iter().enumerate() {
        let obs = src.obstacle(&traj);
        let Some((t, v)) = gap_margin(&me, &obs, (t0, tf), &s, eps) else {
            continue;
        };
        let rear = matches!(src.kind, SourceKind::RearEnd { .. });
        let slot = if rear { 4 } else { 5 };
        if v > g[slot] {
            g[slot] = v;
            if rear {
                tau_s = Some(t);
            } else {
                tau_l = Some(t);
            }
        }
        gaps.push(GapMargin {
            source: idx,
            label: src.label(),
            rear_end: rear,
            value: v,
            time: t,
        });
    }
    let mut t_m = None;
    if let (Some(cap), Some(pm)) = (problem.v_entry, problem.merge_position) {
        let tm = phi.time_at(pm, (t0, tf));
        t_m = Some(tm);
        g[6] = phi.speed(tm) - cap + eps;
    }
    InequalityValues {
        g,
        tau_v,
        tau_vmin,
        tau_s,
        tau_l,
        t_m,
        gaps,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpperSolution {
    pub route: String,
    pub tf: f64,
    pub tm: Option<f64>,
    pub phi: Phi,
    pub values: InequalityValues,
}

fn candidate(problem: &UpperProblem, protocol: &CrossingProtocol, tf: f64) -> Option<(Phi, InequalityValues)> {
    if !protocol.exit_time_allowed(problem.exit_lane, tf) {
        return None;
    }
    let phi = Phi::from_boundary(problem.t0, 0.0, problem.v0, tf, problem.pf);
    let vals = inequality_values(&phi, problem, tf);
    vals.feasible().then_some((phi, vals))
}

/// Earliest feasible exit time: a forward scan from the kinematic bound,
/// then bisection inside the first feasible cell.
pub fn solve_min_exit_time(
    problem: &UpperProblem,
    protocol: &CrossingProtocol,
) -> Result<UpperSolution, UpperError> {
    let start = problem.kinematic_lower_bound().max(problem.t0 + 1e-3);
    let end = problem.t0 + problem.horizon;
    let mut lo = start;
    let mut t = start;
    let found = loop {
        if t > end {
            return Err(UpperError::Infeasible);
        }
        if candidate(problem, protocol, t).is_some() {
            break t;
        }
        lo = t;
        t += SCAN_STEP;
    };
    let mut hi = found;
    if hi > start {
        while hi - lo > BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            if candidate(problem, protocol, mid).is_some() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let (phi, values) = candidate(problem, protocol, hi).ok_or(UpperError::Infeasible)?;
    Ok(UpperSolution {
        route: problem.route.clone(),
        tf: hi,
        tm: values.t_m,
        phi,
        values,
    })
}

/// Solves every route sharing the origin–destination pair and keeps the
/// earliest exit, ties to the lowest entry lane.
pub fn solve_over_candidates(
    protocol: &CrossingProtocol,
    cav_id: u32,
    route: &str,
    t0: f64,
    v0: f64,
    params: &UpperParams,
) -> Result<(UpperProblem, UpperSolution), UpperError> {
    let mut best: Option<(UpperProblem, UpperSolution)> = None;
    for r in protocol.candidate_routes(route) {
        let problem = UpperProblem::assemble(protocol, cav_id, r, t0, v0, params)?;
        if let Ok(sol) = solve_min_exit_time(&problem, protocol) {
            if best.as_ref().is_none_or(|b| sol.tf < b.1.tf) {
                best = Some((problem, sol));
            }
        }
    }
    best.ok_or(UpperError::Infeasible)
}

/// Earliest exit time at or after the kinematic bound that is free on the exit lane.
pub fn select_fallback_tf(problem: &UpperProblem, protocol: &CrossingProtocol) -> Result<f64, UpperError> {
    let lb = problem.kinematic_lower_bound();
    let end = problem.t0 + problem.horizon;
    let mut blocks: Vec<(f64, f64)> = protocol
        .exit_blocks(problem.exit_lane)
        .into_iter()
        .map(|(_, a, b)| (a, b))
        .collect();
    blocks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut t = lb;
    loop {
        let mut moved = false;
        for &(a, b) in &blocks {
            if t >= a && t <= b {
                t = b + 1e-6;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    if t > end {
        return Err(UpperError::HorizonExhausted);
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Duality check

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub gamma: Vec<f64>,
    /// One multiplier per inequality, labelled.
    pub nu: Vec<(String, f64)>,
}

/// Inequalities frozen at their extremum times, hence affine in `φ`.
type Frozen<'a> = Vec<(String, Box<dyn Fn(&Phi) -> f64 + 'a>)>;

fn frozen_inequalities<'a>(problem: &'a UpperProblem, vals: &InequalityValues, tf: f64) -> Frozen<'a> {
    let l = problem.limits;
    let eps = problem.epsilon;
    let t0 = problem.t0;
    let (tv, tvm) = (vals.tau_v, vals.tau_vmin);
    let mut out: Frozen<'a> = vec![
        ("g1".into(), Box::new(move |p: &Phi| p.speed(tv) - l.v_max + eps)),
        ("g2".into(), Box::new(move |p: &Phi| l.v_min - p.speed(tvm) + eps)),
        ("g3".into(), Box::new(move |p: &Phi| p.control(t0) - l.u_max + eps)),
        ("g4".into(), Box::new(move |p: &Phi| l.u_min - p.control(t0) + eps)),
    ];
    let s = problem.unit_safety();
    let star = Phi::from_boundary(t0, 0.0, problem.v0, tf, problem.pf);
    let traj = star.trajectory(t0, tf);
    for gm in &vals.gaps {
        let src = &problem.sources[gm.source];
        let obs = src.obstacle(&traj);
        let t = gm.time;
        let lead = obs.state(t).p;
        out.push((
            gm.label.clone(),
            Box::new(move |p: &Phi| s.dbar + s.rho * p.speed(t) - (lead - p.position(t)) + eps),
        ));
    }
    if let (Some(tm), Some(cap)) = (vals.t_m, problem.v_entry) {
        out.push(("g7".into(), Box::new(move |p: &Phi| p.speed(tm) - cap + eps)));
    }
    out
}

/// Numeric primal–dual gap at fixed `t_f`.
///
/// The inner infimum of the Lagrangian is taken over `φ` whose equality
/// residuals stay within a small box, where the exit-time function is
/// well defined; the outer maximum is projected subgradient ascent from the
/// least-squares KKT multipliers.
pub fn duality_gap_estimate(problem: &UpperProblem, tf: f64) -> Result<DualityReport, UpperError> {
    let t0 = problem.t0;
    let star = Phi::from_boundary(t0, 0.0, problem.v0, tf, problem.pf);
    let vals = inequality_values(&star, problem, tf);
    let gs = frozen_inequalities(problem, &vals, tf);
    let slack: Vec<f64> = gs.iter().map(|(_, g)| g(&star)).collect();
    if slack.iter().any(|g| *g >= 0.0) {
        return Err(UpperError::NoSlaterPoint);
    }
    let f = |p: &Phi| p.time_at(problem.pf, (t0, tf));
    let primal = f(&star);

    // φ is parametrized by its equality residuals y = h(φ), an affine bijection.
    let h_of = |p: &Phi| -> [f64; 4] {
        let h = equality_residuals(p, problem, tf, None);
        [h[0], h[1], h[2], h[3]]
    };
    let basis: Vec<[f64; 4]> = (0..4)
        .map(|j| {
            let mut e = [0.0; 4];
            e[j] = 1.0;
            e
        })
        .collect();
    // Columns of dh/dφ, exact since h is affine.
    let to_phi = |c: [f64; 4]| Phi::new(c[0], c[1], c[2], c[3]);
    let base = h_of(&to_phi([0.0; 4]));
    let jac: Vec<[f64; 4]> = basis
        .iter()
        .map(|e| {
            let h = h_of(&to_phi(*e));
            [h[0] - base[0], h[1] - base[1], h[2] - base[2], h[3] - base[3]]
        })
        .collect();
    let mut m = nalgebra::Matrix4::zeros();
    for (j, col) in jac.iter().enumerate() {
        for i in 0..4 {
            m[(i, j)] = col[i];
        }
    }
    let minv = m.try_inverse().ok_or(UpperError::DegenerateCubic)?;
    let phi_of = |y: &[f64; 4]| {
        let rhs = nalgebra::Vector4::new(y[0] - base[0], y[1] - base[1], y[2] - base[2], y[3] - base[3]);
        let c = minv * rhs;
        Phi::new(c[0], c[1], c[2], c[3])
    };
    let radius = [1e-3, 1e-3, 1e-3, 1e-4];

    let lagrangian = |y: &[f64; 4], gamma: &[f64; 4], nu: &[f64]| {
        let p = phi_of(y);
        let mut v = f(&p);
        for i in 0..4 {
            v += gamma[i] * y[i];
        }
        for (k, (_, g)) in gs.iter().enumerate() {
            v += nu[k] * g(&p);
        }
        v
    };
    // Inner minimization over the box by projected Newton (finite differences).
    let inner = |gamma: &[f64; 4], nu: &[f64]| -> ([f64; 4], f64) {
        let mut best = ([0.0; 4], lagrangian(&[0.0; 4], gamma, nu));
        let starts: Vec<[f64; 4]> = (0..5)
            .map(|s| {
                let mut y = [0.0; 4];
                if s > 0 {
                    for i in 0..4 {
                        let bit = ((s - 1) >> i) & 1;
                        y[i] = if bit == 1 { 0.5 } else { -0.5 } * radius[i];
                    }
                }
                y
            })
            .collect();
        for y0 in starts {
            let mut y = y0;
            for _ in 0..30 {
                let mut grad = [0.0; 4];
                let mut hess = nalgebra::Matrix4::<f64>::zeros();
                let fy = lagrangian(&y, gamma, nu);
                let hs: Vec<f64> = radius.iter().map(|r| 1e-3 * r).collect();
                for i in 0..4 {
                    let mut yp = y;
                    let mut ym = y;
                    yp[i] += hs[i];
                    ym[i] -= hs[i];
                    let (fp, fm) = (lagrangian(&yp, gamma, nu), lagrangian(&ym, gamma, nu));
                    grad[i] = (fp - fm) / (2.0 * hs[i]);
                    hess[(i, i)] = (fp - 2.0 * fy + fm) / (hs[i] * hs[i]);
                }
                for i in 0..4 {
                    for j in i + 1..4 {
                        let mut ypp = y;
                        ypp[i] += hs[i];
                        ypp[j] += hs[j];
                        let mut ymm = y;
                        ymm[i] -= hs[i];
                        ymm[j] -= hs[j];
                        let mut ypm = y;
                        ypm[i] += hs[i];
                        ypm[j] -= hs[j];
                        let mut ymp = y;
                        ymp[i] -= hs[i];
                        ymp[j] += hs[j];
                        let v = (lagrangian(&ypp, gamma, nu) - lagrangian(&ypm, gamma, nu)
                            - lagrangian(&ymp, gamma, nu)
                            + lagrangian(&ymm, gamma, nu))
                            / (4.0 * hs[i] * hs[j]);
                        hess[(i, j)] = v;
                        hess[(j, i)] = v;
                    }
                }
                // Newton step when the model is convex, gradient step otherwise.
                let g = nalgebra::Vector4::from(grad);
                let step = match hess.cholesky() {
                    Some(ch) => ch.solve(&g),
                    None => g.component_mul(&nalgebra::Vector4::from(radius)) * 1.0,
                };
                let mut next = y;
                for i in 0..4 {
                    next[i] = (y[i] - step[i]).clamp(-radius[i], radius[i]);
                }
                let fn_ = lagrangian(&next, gamma, nu);
                if fn_ >= fy - 1e-16 {
                    break;
                }
                y = next;
            }
            let fy = lagrangian(&y, gamma, nu);
            if fy < best.1 {
                best = (y, fy);
            }
        }
        best
    };

    // KKT warm start: ∇f + γ = 0 in y coordinates, ν = 0 (all margins slack).
    let mut gamma = [0.0; 4];
    for i in 0..4 {
        let hs = 1e-6 * radius[i];
        let mut yp = [0.0; 4];
        let mut ym = [0.0; 4];
        yp[i] = hs;
        ym[i] = -hs;
        gamma[i] = -(f(&phi_of(&yp)) - f(&phi_of(&ym))) / (2.0 * hs);
    }
    let mut nu = vec![0.0; gs.len()];
    let (mut y_hat, mut q) = inner(&gamma, &nu);
    let mut best = (q, gamma, nu.clone());
    for k in 1..=500 {
        let step = 1.0 / k as f64;
        let p_hat = phi_of(&y_hat);
        for i in 0..4 {
            gamma[i] += step * y_hat[i];
        }
        for (j, (_, g)) in gs.iter().enumerate() {
            nu[j] = (nu[j] + step * g(&p_hat)).max(0.0);
        }
        let r = inner(&gamma, &nu);
        y_hat = r.0;
        q = r.1;
        if q > best.0 {
            best = (q, gamma, nu.clone());
        }
    }
    Ok(DualityReport {
        primal,
        dual: best.0,
        gap: primal - best.0,
        gamma: best.1.to_vec(),
        nu: gs.iter().map(|(n, _)| n.clone()).zip(best.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_examples() {
        let w = phi_to_omega(&Phi::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!((w.w0, w.w1, w.w2, w.w3), (0.0, 0.0, -1.0, 0.0));
        let w = phi_to_omega(&Phi::new(1.0, 3.0, 0.0, 0.0)).unwrap();
        assert_eq!((w.w0, w.w1, w.w2, w.w3), (-3.0, 2.0, -1.0, -1.0));
        let p = omega_to_phi(&w).unwrap();
        assert_eq!(p, Phi::new(1.0, 3.0, 0.0, 0.0));
        assert_eq!(phi_to_omega(&Phi::new(0.0, 1.0, 1.0, 0.0)), Err(UpperError::DegenerateCubic));
    }

    #[test]
    fn cardano_examples() {
        let w = phi_to_omega(&Phi::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((time_at_position(&w, 8.0).unwrap() - 2.0).abs() < 1e-14);
        assert!((time_at_position(&w, 27.0).unwrap() - 3.0).abs() < 1e-14);
        // p = 3t - t³ rises on (-1, 1); p = 0 has roots -√3, 0, √3.
        let w = phi_to_omega(&Phi::new(-1.0, 0.0, 3.0, 0.0)).unwrap();
        assert!(time_at_position(&w, 0.0).unwrap().abs() < 1e-14);
        assert!((time_at_position(&w, 1.375).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn boundary_cubic_matches_equalities() {
        let phi = Phi::from_boundary(12.0, 0.0, 11.0, 31.0, 420.0);
        assert!((phi.position(12.0)).abs() < 1e-9);
        assert!((phi.speed(12.0) - 11.0).abs() < 1e-10);
        assert!((phi.position(31.0) - 420.0).abs() < 1e-9);
        assert!(phi.control(31.0).abs() < 1e-11);
        assert!((phi.time_at(200.0, (12.0, 31.0)) - phi.time_at(200.0, (0.0, 50.0))).abs() < 1e-12);
    }

    pub(crate) fn lone_problem(t0: f64, v0: f64, pf: f64) -> UpperProblem {
        UpperProblem {
            cav_id: 1,
            route: "r".into(),
            t0,
            v0,
            pf,
            merge_position: None,
            v_entry: None,
            limits: Limits {
                u_min: -3.0,
                u_max: 2.5,
                v_min: 2.0,
                v_max: 22.0,
            },
            safety: SafetyParams {
                xi: 1.0,
                rho: 1.0,
                dbar: 5.0,
            },
            epsilon: DEFAULT_EPSILON,
            horizon: DEFAULT_HORIZON,
            sources: Vec::new(),
            exit_lane: 1,
        }
    }

    #[test]
    fn margin_arithmetic() {
        let mut pr = lone_problem(0.0, 10.0, 150.0);
        pr.epsilon = 0.01;
        // Peak speed exactly at the cap.
        let phi = Phi::from_boundary(0.0, 0.0, 10.0, 10.0, 150.0);
        let vmax = phi.speed(10.0);
        pr.limits.v_max = vmax;
        let g = inequality_values(&phi, &pr, 10.0);
        assert!((g.g[0] - 0.01).abs() < 1e-12);
        assert_eq!(g.g[4], f64::NEG_INFINITY);
    }

    #[test]
    fn perturbing_phi0_shifts_h1_by_one() {
        let pr = lone_problem(3.0, 10.0, 150.0);
        let phi = Phi::from_boundary(3.0, 0.0, 10.0, 15.0, 150.0);
        let h = equality_residuals(&phi, &pr, 15.0, None);
        assert!(h.iter().all(|x| x.abs() < 1e-10), "{h:?}");
        let moved = Phi { p0: phi.p0 + 1.0, ..phi };
        let h2 = equality_residuals(&moved, &pr, 15.0, None);
        assert!((h2[0] - h[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slack_instance_has_tiny_duality_gap() {
        let pr = lone_problem(5.0, 12.0, 420.0);
        let tf = 40.0;
        let rep = duality_gap_estimate(&pr, tf).unwrap();
        assert!((rep.primal - tf).abs() < 1e-9);
        assert!(rep.gap.abs() < 1e-4 * (1.0 + rep.primal), "{rep:?}");
        assert!(rep.nu.iter().all(|(_, v)| *v == 0.0));
    }
}
