//! Piecewise vehicle trajectories: polynomial arcs, safety-following arcs and
//! the junction records between them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::{integrate, Cubic};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct State {
    pub p: f64,
    pub v: f64,
    pub u: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArcKind {
    Unconstrained,
    SafetyFollow,
    UMin,
    UMax,
    VMin,
    VMax,
    VEntryCap,
}

impl ArcKind {
    pub fn label(self) -> &'static str {
        match self {
            ArcKind::Unconstrained => "unconstrained",
            ArcKind::SafetyFollow => "safety_follow",
            ArcKind::UMin => "u_min",
            ArcKind::UMax => "u_max",
            ArcKind::VMin => "v_min",
            ArcKind::VMax => "v_max",
            ArcKind::VEntryCap => "v_entry_cap",
        }
    }
}

/// Safety and reaction parameters of the rear-end / lateral gap model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyParams {
    pub xi: f64,
    pub rho: f64,
    pub dbar: f64,
}

/// What a follower must keep clear of: a vehicle's trajectory or a fixed point.
#[derive(Clone, Debug)]
pub enum LeaderPath {
    Vehicle(Arc<PiecewiseTrajectory>),
    Fixed(f64),
}

/// A virtual leader in the follower's own position coordinate, `p_k(t) + offset`,
/// constraining the follower only while `window` is active.
#[derive(Clone, Debug)]
pub struct Obstacle {
    pub path: LeaderPath,
    pub offset: f64,
    pub window: (f64, f64),
    /// Free-form label used in reports, e.g. `rear:3` or `lateral:5@r2`.
    pub label: String,
}

/// A stretch of leader motion that is either a cubic or something else.
#[derive(Clone, Debug)]
pub enum LeaderPiece {
    Poly { start: f64, end: f64, p: Cubic },
    Other { start: f64, end: f64 },
}

impl LeaderPiece {
    pub fn span(&self) -> (f64, f64) {
        match *self {
            LeaderPiece::Poly { start, end, .. } | LeaderPiece::Other { start, end } => (start, end),
        }
    }
}

impl Obstacle {
    pub fn state(&self, t: f64) -> State {
        match &self.path {
            LeaderPath::Vehicle(traj) => {
                let s = traj.state_extended(t);
                State {
                    p: s.p + self.offset,
                    ..s
                }
            }
            LeaderPath::Fixed(p) => State {
                p: p + self.offset,
                v: 0.0,
                u: 0.0,
            },
        }
    }

    /// Leader motion split into pieces over `[a, b]`.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<LeaderPiece> {
        match &self.path {
            LeaderPath::Fixed(p) => vec![LeaderPiece::Poly {
                start: a,
                end: b,
                p: Cubic::new(a, [p + self.offset, 0.0, 0.0, 0.0]),
            }],
            LeaderPath::Vehicle(traj) => traj
                .pieces_extended(a, b)
                .into_iter()
                .map(|pc| match pc {
                    LeaderPiece::Poly { start, end, p } => LeaderPiece::Poly {
                        start,
                        end,
                        p: p.add_constant(self.offset),
                    },
                    other => other,
                })
                .collect(),
        }
    }
}

/// Position on one leader piece of a safety-following arc:
/// `p(t) = yp(t) + amp·exp(-κ (t - start))`.
#[derive(Clone, Debug)]
pub struct FollowPiece {
    pub start: f64,
    pub end: f64,
    pub yp: Cubic,
    pub amp: f64,
    /// Dense samples used when the leader piece is not polynomial.
    pub table: Option<Vec<(f64, f64)>>,
}

/// Motion that keeps the gap exactly at the safe distance,
/// `ξ(L(t) - p(t)) = δ̄ + ρ v(t)`.
#[derive(Clone, Debug)]
pub struct FollowLaw {
    pub leader: Obstacle,
    pub params: SafetyParams,
    pub pieces: Vec<FollowPiece>,
}

impl FollowLaw {
    fn kappa(&self) -> f64 {
        self.params.xi / self.params.rho
    }

    /// Integrates the follow dynamics from `(t1, p1)` up to `t_end`.
    pub fn build(leader: Obstacle, params: SafetyParams, t1: f64, p1: f64, t_end: f64) -> Self {
        let kappa = params.xi / params.rho;
        let shift = params.dbar / params.rho;
        let mut pieces = Vec::new();
        let mut p = p1;
        let leader_pieces = if t_end > t1 {
            leader.pieces(t1, t_end)
        } else {
            leader.pieces(t1, t1 + 1e-9)
        };
        for lp in leader_pieces {
            let (a, b) = lp.span();
            let b = if t_end > t1 { b } else { a };
            match lp {
                LeaderPiece::Poly { p: q, .. } => {
                    // y' + κ y = κ q - δ̄/ρ; particular solution via the
                    // alternating derivative series (exact for cubics).
                    let g = q.rebase(a).scale(kappa).add_constant(-shift);
                    let g1 = g.derivative();
                    let g2 = g1.derivative();
                    let g3 = g2.derivative();
                    let yp = g
                        .scale(1.0 / kappa)
                        .add_scaled(&g1, -1.0 / kappa.powi(2))
                        .add_scaled(&g2, 1.0 / kappa.powi(3))
                        .add_scaled(&g3, -1.0 / kappa.powi(4));
                    let amp = p - yp.value(a);
                    p = yp.value(b) + amp * (-kappa * (b - a)).exp();
                    pieces.push(FollowPiece {
                        start: a,
                        end: b,
                        yp,
                        amp,
                        table: None,
                    });
                }
                LeaderPiece::Other { .. } => {
                    let n = (((b - a) / 1e-3).ceil() as usize).max(2);
                    let h = (b - a) / n as f64;
                    let rhs = |t: f64, y: f64| kappa * (leader.state(t).p - y) - shift;
                    let mut table = Vec::with_capacity(n + 1);
                    let mut t = a;
                    table.push((t, p));
                    for _ in 0..n {
                        let k1 = rhs(t, p);
                        let k2 = rhs(t + h / 2.0, p + h / 2.0 * k1);
                        let k3 = rhs(t + h / 2.0, p + h / 2.0 * k2);
                        let k4 = rhs(t + h, p + h * k3);
                        p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                        t += h;
                        table.push((t, p));
                    }
                    pieces.push(FollowPiece {
                        start: a,
                        end: b,
                        yp: Cubic::new(a, [0.0; 4]),
                        amp: 0.0,
                        table: Some(table),
                    });
                }
            }
        }
        Self {
            leader,
            params,
            pieces,
        }
    }

    pub fn position(&self, t: f64) -> f64 {
        let idx = self
            .pieces
            .iter()
            .rposition(|pc| pc.start <= t)
            .unwrap_or(0);
        let pc = &self.pieces[idx];
        match &pc.table {
            None => pc.yp.value(t) + pc.amp * (-self.kappa() * (t - pc.start)).exp(),
            Some(table) => {
                let h = (table[table.len() - 1].0 - table[0].0) / (table.len() - 1) as f64;
                let k = (((t - table[0].0) / h).floor().max(0.0) as usize).min(table.len() - 2);
                let (t0, p0) = table[k];
                let (t1, p1) = table[k + 1];
                let v0 = self.speed_at(t0, p0);
                let v1 = self.speed_at(t1, p1);
                let s = (t - t0) / h;
                let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
                let h10 = s.powi(3) - 2.0 * s * s + s;
                let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
                let h11 = s.powi(3) - s * s;
                h00 * p0 + h10 * h * v0 + h01 * p1 + h11 * h * v1
            }
        }
    }

    fn speed_at(&self, t: f64, p: f64) -> f64 {
        (self.params.xi * (self.leader.state(t).p - p) - self.params.dbar) / self.params.rho
    }

    pub fn state(&self, t: f64) -> State {
        let p = self.position(t);
        let v = self.speed_at(t, p);
        let lead = self.leader.state(t);
        State {
            p,
            v,
            u: self.params.xi * (lead.v - v) / self.params.rho,
        }
    }
}

#[derive(Clone, Debug)]
pub enum ArcLaw {
    /// Position cubic (affine control).
    Poly(Cubic),
    Follow(Box<FollowLaw>),
}

#[derive(Clone, Debug)]
pub struct ArcSegment {
    pub kind: ArcKind,
    pub start: f64,
    pub end: f64,
    pub law: ArcLaw,
}

impl ArcSegment {
    pub fn poly(kind: ArcKind, start: f64, end: f64, p: Cubic) -> Self {
        Self {
            kind,
            start,
            end,
            law: ArcLaw::Poly(p),
        }
    }

    pub fn state(&self, t: f64) -> State {
        match &self.law {
            ArcLaw::Poly(c) => State {
                p: c.value(t),
                v: c.d1(t),
                u: c.d2(t),
            },
            ArcLaw::Follow(f) => f.state(t),
        }
    }

    pub fn cubic(&self) -> Option<&Cubic> {
        match &self.law {
            ArcLaw::Poly(c) => Some(c),
            ArcLaw::Follow(_) => None,
        }
    }

    /// `½∫u²` over the arc.
    pub fn energy(&self) -> f64 {
        let (a, b) = (self.start, self.end);
        match &self.law {
            ArcLaw::Poly(c) => {
                // u = u0 + j s on [0, T]
                let u0 = c.d2(a);
                let j = c.d3();
                let t = b - a;
                0.5 * (u0 * u0 * t + u0 * j * t * t + j * j * t.powi(3) / 3.0)
            }
            ArcLaw::Follow(f) => {
                let scale = 1e-12 * (1.0 + f.state(a).u.powi(2));
                0.5 * integrate(|t| f.state(t).u.powi(2), a, b, scale)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JunctionKind {
    /// Control saturation ends and an unconstrained arc begins.
    ControlBoundExit,
    /// A speed bound becomes active.
    SpeedEntry,
    /// The safe-distance constraint becomes active (possibly a corner).
    SafetyEntry,
    /// The safe-distance constraint is released.
    SafetyExit,
    /// Control saturates after a safety arc or an unconstrained arc.
    ControlBoundEntry,
    /// Leaving the turn-entry speed cap at merge entry.
    EntryCapExit,
}

/// Interior boundary data at a junction between consecutive arcs.
#[derive(Clone, Debug, PartialEq)]
pub struct Junction {
    pub time: f64,
    pub kind: JunctionKind,
    pub u_left: f64,
    pub u_right: f64,
    /// Value of the tangency function at the junction.
    pub tangency: f64,
    pub pi: f64,
    /// `λ(t⁻) − λ(t⁺)` for the (p, v, s) influence functions.
    pub costate_jump: [f64; 3],
    /// Residual of the Hamiltonian corner condition with the stored `pi`.
    pub hamiltonian_residual: f64,
    /// Residual of the p-costate jump implied by the slopes on both sides.
    pub slope_residual: f64,
}

impl Junction {
    pub fn plain(time: f64, kind: JunctionKind, u_left: f64, u_right: f64) -> Self {
        Self {
            time,
            kind,
            u_left,
            u_right,
            tangency: 0.0,
            pi: 0.0,
            costate_jump: [0.0; 3],
            hamiltonian_residual: u_left - u_right,
            slope_residual: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PiecewiseTrajectory {
    pub arcs: Vec<ArcSegment>,
    pub junctions: Vec<Junction>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("time {t} outside trajectory span [{t0}, {tf}]")]
pub struct OutOfSpan {
    pub t: f64,
    pub t0: f64,
    pub tf: f64,
}

impl PiecewiseTrajectory {
    pub fn single(arc: ArcSegment) -> Self {
        Self {
            arcs: vec![arc],
            junctions: Vec::new(),
        }
    }

    pub fn t0(&self) -> f64 {
        self.arcs[0].start
    }

    pub fn tf(&self) -> f64 {
        self.arcs[self.arcs.len() - 1].end
    }

    pub fn kinds(&self) -> Vec<ArcKind> {
        self.arcs.iter().map(|a| a.kind).collect()
    }

    fn arc_index(&self, t: f64) -> usize {
        // Right-continuous: a junction time belongs to the arc that starts there,
        // except at the very end.
        let n = self.arcs.len();
        self.arcs
            .iter()
            .rposition(|a| a.start <= t && a.end > a.start)
            .unwrap_or(0)
            .min(n - 1)
    }

    pub fn arc_at(&self, t: f64) -> &ArcSegment {
        &self.arcs[self.arc_index(t)]
    }

    /// State on the span; `u` is the right limit at junctions.
    pub fn evaluate(&self, t: f64) -> Result<State, OutOfSpan> {
        let (t0, tf) = (self.t0(), self.tf());
        let tol = 1e-9 * (1.0 + tf.abs());
        if t < t0 - tol || t > tf + tol {
            return Err(OutOfSpan { t, t0, tf });
        }
        Ok(self.arc_at(t.clamp(t0, tf)).state(t))
    }

    /// State with constant-speed extension before entry and after exit.
    pub fn state_extended(&self, t: f64) -> State {
        let (t0, tf) = (self.t0(), self.tf());
        if t < t0 {
            let s = self.arcs[0].state(t0);
            State {
                p: s.p + s.v * (t - t0),
                v: s.v,
                u: 0.0,
            }
        } else if t > tf {
            let s = self.arcs[self.arcs.len() - 1].state(tf);
            State {
                p: s.p + s.v * (t - tf),
                v: s.v,
                u: 0.0,
            }
        } else {
            self.arc_at(t).state(t)
        }
    }

    /// Motion pieces over `[a, b]`, with the constant-speed extensions.
    pub fn pieces_extended(&self, a: f64, b: f64) -> Vec<LeaderPiece> {
        let (t0, tf) = (self.t0(), self.tf());
        let mut out = Vec::new();
        if a < t0 {
            let s = self.arcs[0].state(t0);
            out.push(LeaderPiece::Poly {
                start: a,
                end: b.min(t0),
                p: Cubic::from_state(t0, s.p, s.v, 0.0, 0.0),
            });
        }
        for arc in &self.arcs {
            let lo = arc.start.max(a);
            let hi = arc.end.min(b);
            if hi <= lo {
                continue;
            }
            out.push(match &arc.law {
                ArcLaw::Poly(c) => LeaderPiece::Poly {
                    start: lo,
                    end: hi,
                    p: *c,
                },
                ArcLaw::Follow(_) => LeaderPiece::Other { start: lo, end: hi },
            });
        }
        if b > tf {
            let s = self.arcs[self.arcs.len() - 1].state(tf);
            out.push(LeaderPiece::Poly {
                start: a.max(tf),
                end: b,
                p: Cubic::from_state(tf, s.p, s.v, 0.0, 0.0),
            });
        }
        if out.is_empty() {
            let s = self.state_extended(a);
            out.push(LeaderPiece::Poly {
                start: a,
                end: b,
                p: Cubic::from_state(a, s.p, s.v, s.u, 0.0),
            });
        }
        out
    }

    pub fn energy_cost(&self) -> f64 {
        self.arcs.iter().map(ArcSegment::energy).sum()
    }

    /// Time at which route position `p` is reached (bracketed on the span,
    /// extended at constant speed outside it).
    pub fn time_at_position(&self, p: f64) -> f64 {
        let (t0, tf) = (self.t0(), self.tf());
        let s0 = self.arcs[0].state(t0);
        if p <= s0.p {
            return t0 + (p - s0.p) / s0.v.max(1e-12);
        }
        let sf = self.arcs[self.arcs.len() - 1].state(tf);
        if p >= sf.p {
            return tf + (p - sf.p) / sf.v.max(1e-12);
        }
        for arc in &self.arcs {
            let pe = arc.state(arc.end).p;
            if pe >= p {
                if let ArcLaw::Poly(c) = &arc.law {
                    let shifted = c.add_constant(-p);
                    if let Some(&r) = shifted.roots_in(arc.start, arc.end).first() {
                        return r;
                    }
                }
                return crate::numeric::brent(|t| arc.state(t).p - p, arc.start, arc.end, 1e-12)
                    .unwrap_or(arc.end);
            }
        }
        tf
    }
}
