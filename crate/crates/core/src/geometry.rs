//! Intersection layout: control zone, square merging zone, lanes and routes.
//!
//! The merging zone is the square `[-h, h]²` with `h = S_m / 2`, traffic keeps
//! right. Every approach carries `lanes_per_approach` inbound lanes; lane `j = 0`
//! is the curb lane. Geometry is built in the frame of the eastbound approach and
//! rotated by quarter turns for the other three.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("geometry parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("route `{route}`: lane index {lane} out of range (approach has {available})")]
    LaneOutOfRange {
        route: String,
        lane: usize,
        available: usize,
    },
    #[error("route `{route}`: {reason}")]
    BadTurnLane { route: String, reason: &'static str },
}

/// Cardinal point an approach comes from (or a route leaves towards).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cardinal {
    North,
    East,
    South,
    West,
}

impl Cardinal {
    /// Index of the travel heading when entering from this side: 0 east, 1 north,
    /// 2 west, 3 south (counter-clockwise quarter turns from east).
    pub fn inbound_heading(self) -> usize {
        match self {
            Cardinal::West => 0,
            Cardinal::South => 1,
            Cardinal::East => 2,
            Cardinal::North => 3,
        }
    }

    /// Side a vehicle leaves through when travelling with `heading`.
    pub fn from_outbound_heading(heading: usize) -> Self {
        match heading % 4 {
            0 => Cardinal::East,
            1 => Cardinal::North,
            2 => Cardinal::West,
            _ => Cardinal::South,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    LeftTurn,
    RightTurn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionGeometry {
    /// Distance from control-zone entry to merging-zone entry, `S_c` (m).
    pub control_zone_length: f64,
    /// Side of the square merging zone, `S_m` (m).
    pub merging_zone_side: f64,
    pub right_turn_radius: f64,
    pub left_turn_radius: f64,
    /// Inbound lanes per approach; the lane count is four times this.
    pub lanes_per_approach: usize,
    pub lane_width: f64,
}

impl IntersectionGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let checks = [
            ("control_zone_length", self.control_zone_length),
            ("merging_zone_side", self.merging_zone_side),
            ("right_turn_radius", self.right_turn_radius),
            ("left_turn_radius", self.left_turn_radius),
            ("lane_width", self.lane_width),
        ];
        for (name, v) in checks {
            if !(v > 0.0) {
                return Err(GeometryError::NonPositive(name));
            }
        }
        if self.lanes_per_approach == 0 {
            return Err(GeometryError::NonPositive("lanes_per_approach"));
        }
        Ok(())
    }

    /// Total number of lanes `M`.
    pub fn lane_count(&self) -> usize {
        4 * self.lanes_per_approach
    }

    /// Lane id (1-based) of lane `j` carrying traffic with `heading`.
    pub fn lane_id(&self, heading: usize, j: usize) -> usize {
        (heading % 4) * self.lanes_per_approach + j + 1
    }

    /// Arc length of the in-zone part of a maneuver.
    pub fn in_zone_length(&self, maneuver: Maneuver) -> f64 {
        match maneuver {
            Maneuver::Straight => self.merging_zone_side,
            Maneuver::RightTurn => FRAC_PI_2 * self.right_turn_radius,
            Maneuver::LeftTurn => FRAC_PI_2 * self.left_turn_radius,
        }
    }
}

/// Distance from control-zone entry to exit for a maneuver.
pub fn path_length(geometry: &IntersectionGeometry, maneuver: Maneuver) -> f64 {
    2.0 * geometry.control_zone_length + geometry.in_zone_length(maneuver)
}

pub fn merge_entry(geometry: &IntersectionGeometry) -> f64 {
    geometry.control_zone_length
}

/// Portion of a route driven on one lane.
///
/// Positions are route distances; `lane_offset` maps them to the lane's own
/// coordinate (distance from the lane's upstream end), `ℓ = p + lane_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSpan {
    pub lane: usize,
    pub from: f64,
    pub to: f64,
    pub lane_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub id: String,
    pub origin: Cardinal,
    pub destination: Cardinal,
    pub maneuver: Maneuver,
    pub lane_sequence: Vec<LaneSpan>,
    pub total_length: f64,
    pub merge_entry: f64,
    /// Route distance where the vehicle leaves the merging zone.
    pub merge_exit: f64,
    #[serde(skip)]
    curve: Option<Curve>,
}

impl Route {
    /// Builds a route entering from `origin` on inbound lane `entry_lane` and
    /// leaving on outbound lane `exit_lane` (both 0-based from the curb).
    pub fn new(
        id: impl Into<String>,
        geometry: &IntersectionGeometry,
        origin: Cardinal,
        maneuver: Maneuver,
        entry_lane: usize,
        exit_lane: usize,
    ) -> Result<Self, GeometryError> {
        let id = id.into();
        let k = geometry.lanes_per_approach;
        for lane in [entry_lane, exit_lane] {
            if lane >= k {
                return Err(GeometryError::LaneOutOfRange {
                    route: id,
                    lane,
                    available: k,
                });
            }
        }
        match maneuver {
            Maneuver::RightTurn if entry_lane != 0 => {
                return Err(GeometryError::BadTurnLane {
                    route: id,
                    reason: "right turns must start from the curb lane",
                })
            }
            Maneuver::LeftTurn if entry_lane != k - 1 => {
                return Err(GeometryError::BadTurnLane {
                    route: id,
                    reason: "left turns must start from the innermost lane",
                })
            }
            Maneuver::Straight if entry_lane != exit_lane => {
                return Err(GeometryError::BadTurnLane {
                    route: id,
                    reason: "straight routes keep their lane",
                })
            }
            _ => {}
        }
        let heading = origin.inbound_heading();
        let out_heading = match maneuver {
            Maneuver::Straight => heading,
            Maneuver::LeftTurn => (heading + 1) % 4,
            Maneuver::RightTurn => (heading + 3) % 4,
        };
        let sc = geometry.control_zone_length;
        let arc = geometry.in_zone_length(maneuver);
        let total = path_length(geometry, maneuver);
        let lane_sequence = if maneuver == Maneuver::Straight {
            vec![LaneSpan {
                lane: geometry.lane_id(heading, entry_lane),
                from: 0.0,
                to: total,
                lane_offset: 0.0,
            }]
        } else {
            vec![
                LaneSpan {
                    lane: geometry.lane_id(heading, entry_lane),
                    from: 0.0,
                    to: sc,
                    lane_offset: 0.0,
                },
                LaneSpan {
                    lane: geometry.lane_id(out_heading, exit_lane),
                    from: sc + arc,
                    to: total,
                    lane_offset: geometry.merging_zone_side - arc,
                },
            ]
        };
        let curve = Curve::build(geometry, heading, maneuver, entry_lane, exit_lane);
        Ok(Self {
            id,
            origin,
            destination: Cardinal::from_outbound_heading(out_heading),
            maneuver,
            lane_sequence,
            total_length: total,
            merge_entry: sc,
            merge_exit: sc + arc,
            curve: Some(curve),
        })
    }

    pub fn od_pair(&self) -> (Cardinal, Cardinal) {
        (self.origin, self.destination)
    }

    pub fn entry_lane(&self) -> usize {
        self.lane_sequence[0].lane
    }

    pub fn exit_lane(&self) -> usize {
        self.lane_sequence.last().map(|s| s.lane).unwrap_or(0)
    }

    pub fn is_turn(&self) -> bool {
        self.maneuver != Maneuver::Straight
    }

    pub fn span_on_lane(&self, lane: usize) -> Option<&LaneSpan> {
        self.lane_sequence.iter().find(|s| s.lane == lane)
    }
}

/// In-zone centerline of a route, in global coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Curve {
    Segment {
        a: [f64; 2],
        b: [f64; 2],
    },
    /// Quarter arc; angle measured from +x, swept by `sweep` radians.
    Arc {
        center: [f64; 2],
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

fn rotate(p: [f64; 2], quarter_turns: usize) -> [f64; 2] {
    let mut q = p;
    for _ in 0..quarter_turns % 4 {
        q = [-q[1], q[0]];
    }
    q
}

impl Curve {
    fn build(
        g: &IntersectionGeometry,
        heading: usize,
        maneuver: Maneuver,
        entry_lane: usize,
        _exit_lane: usize,
    ) -> Self {
        let h = g.merging_zone_side / 2.0;
        let local = match maneuver {
            Maneuver::Straight => {
                let y = -(entry_lane as f64 + 0.5) * g.lane_width;
                Curve::Segment {
                    a: [-h, y],
                    b: [h, y],
                }
            }
            // Clockwise quarter arc around the near-right corner.
            Maneuver::RightTurn => Curve::Arc {
                center: [-h, -h],
                radius: g.right_turn_radius,
                start: FRAC_PI_2,
                sweep: -FRAC_PI_2,
            },
            // Counter-clockwise quarter arc around the far-left corner.
            Maneuver::LeftTurn => Curve::Arc {
                center: [-h, h],
                radius: g.left_turn_radius,
                start: -FRAC_PI_2,
                sweep: FRAC_PI_2,
            },
        };
        match local {
            Curve::Segment { a, b } => Curve::Segment {
                a: rotate(a, heading),
                b: rotate(b, heading),
            },
            Curve::Arc {
                center,
                radius,
                start,
                sweep,
            } => Curve::Arc {
                center: rotate(center, heading),
                radius,
                start: start + heading as f64 * FRAC_PI_2,
                sweep,
            },
        }
    }

    fn length(&self) -> f64 {
        match *self {
            Curve::Segment { a, b } => (b[0] - a[0]).hypot(b[1] - a[1]),
            Curve::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Arc length from the curve start to a point known to lie on it.
    fn arclength_of(&self, p: [f64; 2]) -> f64 {
        match *self {
            Curve::Segment { a, .. } => (p[0] - a[0]).hypot(p[1] - a[1]),
            Curve::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let ang = (p[1] - center[1]).atan2(p[0] - center[0]);
                radius * wrap(sweep.signum() * (ang - start)).min(sweep.abs())
            }
        }
    }

    /// Parameter in [0, 1] along the curve if `p` (assumed on the carrier
    /// line/circle) lies within the drawn part.
    fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        match *self {
            Curve::Segment { a, b } => {
                let d = [b[0] - a[0], b[1] - a[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let s = ((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2;
                let len = len2.sqrt();
                s >= -tol / len && s <= 1.0 + tol / len
            }
            Curve::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let ang = (p[1] - center[1]).atan2(p[0] - center[0]);
                let rel = wrap(sweep.signum() * (ang - start));
                let slack = tol / radius;
                rel <= sweep.abs() + slack || rel >= 2.0 * PI - slack
            }
        }
    }
}

/// Angle folded into [0, 2π).
fn wrap(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

const TOUCH_TOL: f64 = 1e-7;

fn line_circle(a: [f64; 2], b: [f64; 2], c: [f64; 2], r: f64) -> Vec<[f64; 2]> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    let u = [d[0] / len, d[1] / len];
    let w = [a[0] - c[0], a[1] - c[1]];
    let proj = w[0] * u[0] + w[1] * u[1];
    let dist2 = w[0] * w[0] + w[1] * w[1] - proj * proj;
    let disc = r * r - dist2;
    if disc < -TOUCH_TOL * r {
        return Vec::new();
    }
    let root = disc.max(0.0).sqrt();
    let mut out = Vec::new();
    for s in [-proj - root, -proj + root] {
        out.push([a[0] + u[0] * s, a[1] + u[1] * s]);
    }
    out
}

fn circle_circle(c1: [f64; 2], r1: f64, c2: [f64; 2], r2: f64) -> Vec<[f64; 2]> {
    let dx = c2[0] - c1[0];
    let dy = c2[1] - c1[1];
    let d = dx.hypot(dy);
    if d == 0.0 || d > r1 + r2 + TOUCH_TOL || d < (r1 - r2).abs() - TOUCH_TOL {
        return Vec::new();
    }
    let a = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d);
    let h = (r1 * r1 - a * a).max(0.0).sqrt();
    let m = [c1[0] + a * dx / d, c1[1] + a * dy / d];
    vec![
        [m[0] - h * dy / d, m[1] + h * dx / d],
        [m[0] + h * dy / d, m[1] - h * dx / d],
    ]
}

fn intersections(x: &Curve, y: &Curve) -> Vec<[f64; 2]> {
    let candidates = match (*x, *y) {
        (Curve::Segment { a, b }, Curve::Segment { a: c, b: d }) => {
            let r = [b[0] - a[0], b[1] - a[1]];
            let s = [d[0] - c[0], d[1] - c[1]];
            let den = r[0] * s[1] - r[1] * s[0];
            if den.abs() < 1e-12 {
                Vec::new()
            } else {
                let t = ((c[0] - a[0]) * s[1] - (c[1] - a[1]) * s[0]) / den;
                vec![[a[0] + t * r[0], a[1] + t * r[1]]]
            }
        }
        (Curve::Segment { a, b }, Curve::Arc { center, radius, .. })
        | (Curve::Arc { center, radius, .. }, Curve::Segment { a, b }) => {
            line_circle(a, b, center, radius)
        }
        (
            Curve::Arc {
                center: c1,
                radius: r1,
                ..
            },
            Curve::Arc {
                center: c2,
                radius: r2,
                ..
            },
        ) => circle_circle(c1, r1, c2, r2),
    };
    let mut out: Vec<[f64; 2]> = Vec::new();
    for p in candidates {
        if x.contains(p, 1e-6) && y.contains(p, 1e-6)
            && !out.iter().any(|q| (q[0] - p[0]).hypot(q[1] - p[1]) < 1e-5)
        {
            out.push(p);
        }
    }
    out
}

/// A point where two routes from different approaches can collide laterally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictPoint {
    pub route_a: String,
    pub route_b: String,
    pub distance_on_a: f64,
    pub distance_on_b: f64,
}

impl ConflictPoint {
    /// Distances ordered as (on `route`, on the other route), if `route` is involved.
    pub fn distances_for(&self, route: &str) -> Option<(f64, f64)> {
        if self.route_a == route {
            Some((self.distance_on_a, self.distance_on_b))
        } else if self.route_b == route {
            Some((self.distance_on_b, self.distance_on_a))
        } else {
            None
        }
    }
}

/// All lateral conflict points between routes from different approaches,
/// including merge points where two routes join the same outbound lane.
/// Routes sharing an approach only interact through rear-end constraints.
pub fn conflict_table(geometry: &IntersectionGeometry, routes: &[Route]) -> Vec<ConflictPoint> {
    let mut out = Vec::new();
    for (ia, ra) in routes.iter().enumerate() {
        for rb in routes.iter().skip(ia + 1) {
            if ra.origin == rb.origin {
                continue;
            }
            let (Some(ca), Some(cb)) = (ra.curve, rb.curve) else {
                continue;
            };
            let sc = geometry.control_zone_length;
            for p in intersections(&ca, &cb) {
                out.push(ConflictPoint {
                    route_a: ra.id.clone(),
                    route_b: rb.id.clone(),
                    distance_on_a: sc + ca.arclength_of(p).min(ca.length()),
                    distance_on_b: sc + cb.arclength_of(p).min(cb.length()),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(sc: f64, sm: f64) -> IntersectionGeometry {
        IntersectionGeometry {
            control_zone_length: sc,
            merging_zone_side: sm,
            right_turn_radius: sm / 2.0 - 2.0,
            left_turn_radius: sm / 2.0 + 2.0,
            lanes_per_approach: 1,
            lane_width: 4.0,
        }
    }

    #[test]
    fn path_lengths() {
        let mut g = geo(200.0, 20.0);
        assert_eq!(path_length(&g, Maneuver::Straight), 420.0);
        g.right_turn_radius = 10.0;
        assert!((path_length(&g, Maneuver::RightTurn) - (400.0 + 5.0 * PI)).abs() < 1e-12);
        let z = IntersectionGeometry {
            control_zone_length: 0.0,
            merging_zone_side: 0.0,
            ..g.clone()
        };
        assert_eq!(path_length(&z, Maneuver::Straight), 0.0);
        assert!(z.validate().is_err());
        assert_eq!(merge_entry(&g), 200.0);
    }

    #[test]
    fn perpendicular_straights_cross_once() {
        let g = geo(100.0, 20.0);
        let a = Route::new("a", &g, Cardinal::West, Maneuver::Straight, 0, 0).unwrap();
        let b = Route::new("b", &g, Cardinal::South, Maneuver::Straight, 0, 0).unwrap();
        let t = conflict_table(&g, &[a, b]);
        assert_eq!(t.len(), 1);
        // Eastbound lane at y = -2 meets northbound lane at x = 2.
        assert!((t[0].distance_on_a - 112.0).abs() < 1e-9);
        assert!((t[0].distance_on_b - 108.0).abs() < 1e-9);
    }

    #[test]
    fn same_approach_has_no_lateral_conflict() {
        let g = geo(100.0, 20.0);
        let a = Route::new("a", &g, Cardinal::West, Maneuver::Straight, 0, 0).unwrap();
        let b = Route::new("b", &g, Cardinal::West, Maneuver::RightTurn, 0, 0).unwrap();
        assert!(conflict_table(&g, &[a, b]).is_empty());
    }

    #[test]
    fn merge_onto_shared_exit_is_a_conflict() {
        let g = geo(100.0, 20.0);
        // Right turn from the west leaves southbound, like the straight from the north.
        let a = Route::new("r", &g, Cardinal::West, Maneuver::RightTurn, 0, 0).unwrap();
        let b = Route::new("s", &g, Cardinal::North, Maneuver::Straight, 0, 0).unwrap();
        assert_eq!(a.exit_lane(), b.exit_lane());
        let t = conflict_table(&g, &[a.clone(), b]);
        assert_eq!(t.len(), 1);
        assert!((t[0].distance_on_a - a.merge_exit).abs() < 1e-6);
        assert!((t[0].distance_on_b - 120.0).abs() < 1e-6);
    }

    #[test]
    fn turn_routes_use_expected_lanes() {
        let g = geo(100.0, 20.0);
        let l = Route::new("l", &g, Cardinal::West, Maneuver::LeftTurn, 0, 0).unwrap();
        assert_eq!(l.destination, Cardinal::North);
        assert_eq!(l.entry_lane(), 1);
        assert_eq!(l.exit_lane(), 2);
        let last = l.lane_sequence.last().unwrap();
        assert!((last.to + last.lane_offset - 220.0).abs() < 1e-9);
    }

    #[test]
    fn six_route_layout_has_nine_conflicts() {
        let g = IntersectionGeometry {
            control_zone_length: 100.0,
            merging_zone_side: 20.0,
            right_turn_radius: 8.0,
            left_turn_radius: 12.0,
            lanes_per_approach: 1,
            lane_width: 4.0,
        };
        let spec = [
            (Cardinal::West, Maneuver::Straight),
            (Cardinal::West, Maneuver::RightTurn),
            (Cardinal::West, Maneuver::LeftTurn),
            (Cardinal::South, Maneuver::Straight),
            (Cardinal::East, Maneuver::LeftTurn),
            (Cardinal::North, Maneuver::Straight),
        ];
        let routes: Vec<Route> = spec
            .iter()
            .enumerate()
            .map(|(i, (o, m))| Route::new(format!("r{i}"), &g, *o, *m, 0, 0).unwrap())
            .collect();
        assert_eq!(conflict_table(&g, &routes).len(), 9);
        let sym: Vec<Route> = routes.iter().rev().cloned().collect();
        assert_eq!(conflict_table(&g, &sym).len(), 9);
    }
}
