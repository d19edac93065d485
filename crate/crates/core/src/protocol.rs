//! Shared crossing record: committed trajectories and lane occupancy.
//!
//! CAVs register in entry order and never change afterwards. Later CAVs read
//! the record to find who they must stay behind, on shared lanes and at
//! conflict points.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{conflict_table, Cardinal, ConflictPoint, IntersectionGeometry, Route};
use crate::trajectory::{LeaderPath, Obstacle, PiecewiseTrajectory};
use crate::upperlevel::Phi;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("unknown route {0}")]
    UnknownRoute(String),
    #[error("cav {cav} registered out of entry order")]
    OutOfOrder { cav: u32 },
    #[error("cav {cav} exits lane {lane} inside the headway of cav {other}")]
    HeadwayConflict { cav: u32, other: u32, lane: usize },
    #[error("cav {cav}: {reason}")]
    InvalidRecord { cav: u32, reason: String },
}

#[derive(Clone, Debug)]
pub struct CavRecord {
    pub cav_id: u32,
    pub route: String,
    pub entry_time: f64,
    pub exit_time: f64,
    pub merge_entry_time: Option<f64>,
    pub merge_exit_time: Option<f64>,
    /// Set when the committed motion came straight from the upper level.
    pub phi: Option<Phi>,
    pub trajectory: Arc<PiecewiseTrajectory>,
}

impl CavRecord {
    /// Builds a record, reading merge-zone times off the trajectory.
    pub fn new(
        cav_id: u32,
        route: &Route,
        phi: Option<Phi>,
        trajectory: Arc<PiecewiseTrajectory>,
    ) -> Self {
        let inside = |p: f64| p > 0.0 && p < route.total_length;
        Self {
            cav_id,
            route: route.id.clone(),
            entry_time: trajectory.t0(),
            exit_time: trajectory.tf(),
            merge_entry_time: inside(route.merge_entry)
                .then(|| trajectory.time_at_position(route.merge_entry)),
            merge_exit_time: inside(route.merge_exit)
                .then(|| trajectory.time_at_position(route.merge_exit)),
            phi,
            trajectory,
        }
    }

    /// `[enter, leave]` time per lane of the route.
    pub fn lane_intervals(&self, route: &Route) -> Vec<(usize, f64, f64)> {
        route
            .lane_sequence
            .iter()
            .map(|s| {
                (
                    s.lane,
                    self.trajectory.time_at_position(s.from),
                    self.trajectory.time_at_position(s.to),
                )
            })
            .collect()
    }
}

/// Time intervals during which a lane is occupied, merged when they overlap.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OccupancySet {
    pub lane: usize,
    pub intervals: Vec<(f64, f64)>,
}

impl OccupancySet {
    pub fn insert(&mut self, start: f64, end: f64) {
        self.intervals.push((start, end));
        self.intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(self.intervals.len());
        for &(a, b) in &self.intervals {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        self.intervals = merged;
    }

    /// Free intervals inside `horizon`.
    pub fn gaps(&self, horizon: (f64, f64)) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut cursor = horizon.0;
        for &(a, b) in &self.intervals {
            if b <= cursor {
                continue;
            }
            if a >= horizon.1 {
                break;
            }
            if a > cursor {
                out.push((cursor, a));
            }
            cursor = cursor.max(b);
        }
        if cursor < horizon.1 {
            out.push((cursor, horizon.1));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaneFeasibilitySet {
    pub od_pair: (Cardinal, Cardinal),
    pub lanes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    RearEnd { lane: usize },
    Lateral,
}

/// A committed vehicle that a newcomer on `route` must keep clear of, as a
/// virtual leader active while the newcomer's position is inside `positions`.
#[derive(Clone, Debug)]
pub struct SafetySource {
    pub kind: SourceKind,
    pub leader_id: u32,
    pub leader: Arc<PiecewiseTrajectory>,
    pub offset: f64,
    pub positions: (f64, f64),
}

impl SafetySource {
    pub fn label(&self) -> String {
        match self.kind {
            SourceKind::RearEnd { lane } => format!("rear:{}@{}", self.leader_id, lane),
            SourceKind::Lateral => format!("lateral:{}", self.leader_id),
        }
    }

    /// The constraint against a candidate trajectory of the newcomer.
    pub fn obstacle(&self, me: &PiecewiseTrajectory) -> Obstacle {
        let pf = me.arcs[me.arcs.len() - 1].state(me.tf()).p;
        let t_at = |p: f64| {
            if p >= pf {
                me.tf()
            } else {
                me.time_at_position(p).max(me.t0())
            }
        };
        Obstacle {
            path: LeaderPath::Vehicle(self.leader.clone()),
            offset: self.offset,
            window: (t_at(self.positions.0), t_at(self.positions.1)),
            label: self.label(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossingProtocol {
    pub geometry: IntersectionGeometry,
    pub routes: Vec<Route>,
    pub conflicts: Vec<ConflictPoint>,
    /// Headway padding applied to occupancy intervals.
    pub headway: f64,
    pub records: Vec<CavRecord>,
    pub occupancy: BTreeMap<usize, OccupancySet>,
    pub feasibility: Vec<LaneFeasibilitySet>,
}

#[derive(Serialize)]
struct RecordDump<'a> {
    cav_id: u32,
    route: &'a str,
    entry_time: f64,
    exit_time: f64,
    merge_entry_time: Option<f64>,
    merge_exit_time: Option<f64>,
    phi: Option<[f64; 4]>,
    arcs: Vec<&'static str>,
}

#[derive(Serialize)]
struct ProtocolDump<'a> {
    record: Vec<RecordDump<'a>>,
    occupancy: Vec<&'a OccupancySet>,
    feasibility: Vec<FeasDump>,
}

#[derive(Serialize)]
struct FeasDump {
    origin: Cardinal,
    destination: Cardinal,
    lanes: Vec<usize>,
}

impl CrossingProtocol {
    pub fn new(geometry: IntersectionGeometry, routes: Vec<Route>, headway: f64) -> Self {
        let conflicts = conflict_table(&geometry, &routes);
        let mut feasibility: Vec<LaneFeasibilitySet> = Vec::new();
        for r in &routes {
            let od = r.od_pair();
            let lane = r.entry_lane();
            match feasibility.iter_mut().find(|f| f.od_pair == od) {
                Some(f) => {
                    if !f.lanes.contains(&lane) {
                        f.lanes.push(lane);
                        f.lanes.sort_unstable();
                    }
                }
                None => feasibility.push(LaneFeasibilitySet {
                    od_pair: od,
                    lanes: vec![lane],
                }),
            }
        }
        Self {
            geometry,
            routes,
            conflicts,
            headway,
            records: Vec::new(),
            occupancy: BTreeMap::new(),
            feasibility,
        }
    }

    pub fn route(&self, id: &str) -> Option<&Route> {
        self.routes.iter().find(|r| r.id == id)
    }

    /// Routes sharing `route`'s origin–destination pair, by entry lane.
    pub fn candidate_routes(&self, route: &str) -> Vec<&Route> {
        let Some(r) = self.route(route) else {
            return Vec::new();
        };
        let mut out: Vec<&Route> = self
            .routes
            .iter()
            .filter(|c| c.od_pair() == r.od_pair())
            .collect();
        out.sort_by_key(|c| c.entry_lane());
        out
    }

    /// Padded times at which other CAVs occupy the stretch of `lane` beyond the
    /// merging zone; exiting on that lane inside one would overtake.
    pub fn exit_blocks(&self, lane: usize) -> Vec<(u32, f64, f64)> {
        let downstream = self.geometry.control_zone_length + self.geometry.merging_zone_side;
        let mut out = Vec::new();
        for rec in &self.records {
            let Some(route) = self.route(&rec.route) else {
                continue;
            };
            if route.exit_lane() != lane {
                continue;
            }
            let Some(span) = route.span_on_lane(lane) else {
                continue;
            };
            let from = (downstream - span.lane_offset).max(span.from);
            let start = rec.trajectory.time_at_position(from);
            out.push((rec.cav_id, start - self.headway, rec.exit_time + self.headway));
        }
        out
    }

    /// True when exiting at `tf` on `lane` respects every exit block.
    pub fn exit_time_allowed(&self, lane: usize, tf: f64) -> bool {
        self.exit_blocks(lane)
            .iter()
            .all(|&(_, a, b)| tf < a || tf > b)
    }

    pub fn register(&mut self, record: CavRecord) -> Result<(), ProtocolError> {
        let route = self
            .route(&record.route)
            .ok_or_else(|| ProtocolError::UnknownRoute(record.route.clone()))?
            .clone();
        if let Some(last) = self.records.last() {
            let earlier = record.entry_time < last.entry_time
                || (record.entry_time == last.entry_time && record.cav_id < last.cav_id);
            if earlier {
                return Err(ProtocolError::OutOfOrder { cav: record.cav_id });
            }
        }
        if !(record.exit_time > record.entry_time) {
            return Err(ProtocolError::InvalidRecord {
                cav: record.cav_id,
                reason: "exit time not after entry time".into(),
            });
        }
        let lane = route.exit_lane();
        if let Some(&(other, _, _)) = self
            .exit_blocks(lane)
            .iter()
            .find(|&&(_, a, b)| record.exit_time >= a && record.exit_time <= b)
        {
            return Err(ProtocolError::HeadwayConflict {
                cav: record.cav_id,
                other,
                lane,
            });
        }
        for (lane, a, b) in record.lane_intervals(&route) {
            self.occupancy
                .entry(lane)
                .or_insert_with(|| OccupancySet {
                    lane,
                    intervals: Vec::new(),
                })
                .insert(a, b);
        }
        self.records.push(record);
        Ok(())
    }

    pub fn occupancy(&self, lane: usize) -> &[(f64, f64)] {
        self.occupancy
            .get(&lane)
            .map_or(&[], |o| o.intervals.as_slice())
    }

    pub fn occupancy_gaps(&self, lanes: &[usize], horizon: (f64, f64)) -> Vec<(usize, Vec<(f64, f64)>)> {
        lanes
            .iter()
            .map(|&l| {
                let gaps = match self.occupancy.get(&l) {
                    Some(o) => o.gaps(horizon),
                    None => vec![horizon],
                };
                (l, gaps)
            })
            .collect()
    }

    /// Most recent record that entered `lane` at or before `time`.
    pub fn predecessor_on_lane(&self, lane: usize, time: f64) -> Option<&CavRecord> {
        let mut best: Option<(&CavRecord, f64)> = None;
        for rec in &self.records {
            let Some(route) = self.route(&rec.route) else {
                continue;
            };
            for (l, a, _) in rec.lane_intervals(route) {
                if l == lane && a <= time && best.is_none_or(|b| a >= b.1) {
                    best = Some((rec, a));
                }
            }
        }
        best.map(|b| b.0)
    }

    /// The record as seen at time `t`.
    pub fn snapshot(&self, t: f64) -> Self {
        let mut out = Self {
            records: Vec::new(),
            occupancy: BTreeMap::new(),
            ..self.clone()
        };
        for rec in self.records.iter().filter(|r| r.entry_time <= t) {
            let route = self.route(&rec.route).expect("registered route").clone();
            for (lane, a, b) in rec.lane_intervals(&route) {
                out.occupancy
                    .entry(lane)
                    .or_insert_with(|| OccupancySet {
                        lane,
                        intervals: Vec::new(),
                    })
                    .insert(a, b);
            }
            out.records.push(rec.clone());
        }
        out
    }

    /// Everyone a newcomer on `route` must stay behind. Vehicles on the same
    /// route are followed end to end; otherwise per shared lane and per
    /// conflict point, first come first served.
    pub fn safety_sources(&self, route: &str) -> Result<Vec<SafetySource>, ProtocolError> {
        let me = self
            .route(route)
            .ok_or_else(|| ProtocolError::UnknownRoute(route.to_string()))?;
        let mut out = Vec::new();
        for rec in &self.records {
            let other = self
                .route(&rec.route)
                .ok_or_else(|| ProtocolError::UnknownRoute(rec.route.clone()))?;
            if other.id == me.id {
                out.push(SafetySource {
                    kind: SourceKind::RearEnd {
                        lane: me.entry_lane(),
                    },
                    leader_id: rec.cav_id,
                    leader: rec.trajectory.clone(),
                    offset: 0.0,
                    positions: (0.0, me.total_length),
                });
                continue;
            }
            for mine in &me.lane_sequence {
                let Some(theirs) = other.span_on_lane(mine.lane) else {
                    continue;
                };
                let lo = (mine.from + mine.lane_offset).max(theirs.from + theirs.lane_offset);
                let hi = (mine.to + mine.lane_offset).min(theirs.to + theirs.lane_offset);
                if hi <= lo {
                    continue;
                }
                out.push(SafetySource {
                    kind: SourceKind::RearEnd { lane: mine.lane },
                    leader_id: rec.cav_id,
                    leader: rec.trajectory.clone(),
                    offset: theirs.lane_offset - mine.lane_offset,
                    positions: (lo - mine.lane_offset, hi - mine.lane_offset),
                });
            }
            for cp in &self.conflicts {
                let Some((d_me, d_other)) = cp.distances_for(&me.id) else {
                    continue;
                };
                if cp.distances_for(&other.id).is_none() {
                    continue;
                }
                out.push(SafetySource {
                    kind: SourceKind::Lateral,
                    leader_id: rec.cav_id,
                    leader: rec.trajectory.clone(),
                    offset: d_me - d_other,
                    positions: (me.merge_entry.min(d_me), d_me),
                });
            }
        }
        Ok(out)
    }

    /// Structured text dump of records, occupancy and lane feasibility.
    pub fn dump(&self) -> String {
        let doc = ProtocolDump {
            record: self
                .records
                .iter()
                .map(|r| RecordDump {
                    cav_id: r.cav_id,
                    route: &r.route,
                    entry_time: r.entry_time,
                    exit_time: r.exit_time,
                    merge_entry_time: r.merge_entry_time,
                    merge_exit_time: r.merge_exit_time,
                    phi: r.phi.map(|p| p.coefficients()),
                    arcs: r.trajectory.arcs.iter().map(|a| a.kind.label()).collect(),
                })
                .collect(),
            occupancy: self.occupancy.values().collect(),
            feasibility: self
                .feasibility
                .iter()
                .map(|f| FeasDump {
                    origin: f.od_pair.0,
                    destination: f.od_pair.1,
                    lanes: f.lanes.clone(),
                })
                .collect(),
        };
        toml::to_string(&doc).expect("protocol dump serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Maneuver;
    use crate::upperlevel::Phi;

    fn geo() -> IntersectionGeometry {
        IntersectionGeometry {
            control_zone_length: 100.0,
            merging_zone_side: 20.0,
            right_turn_radius: 8.0,
            left_turn_radius: 12.0,
            lanes_per_approach: 1,
            lane_width: 4.0,
        }
    }

    fn protocol() -> CrossingProtocol {
        let g = geo();
        let routes = vec![
            Route::new("ws", &g, Cardinal::West, Maneuver::Straight, 0, 0).unwrap(),
            Route::new("ss", &g, Cardinal::South, Maneuver::Straight, 0, 0).unwrap(),
        ];
        CrossingProtocol::new(g, routes, 1.0)
    }

    fn cruise(p: &CrossingProtocol, id: u32, route: &str, t0: f64, v: f64) -> CavRecord {
        let r = p.route(route).unwrap();
        let tf = t0 + r.total_length / v;
        let phi = Phi::from_boundary(t0, 0.0, v, tf, r.total_length);
        CavRecord::new(id, r, Some(phi), Arc::new(phi.trajectory(t0, tf)))
    }

    #[test]
    fn occupancy_merges_overlaps() {
        let mut o = OccupancySet::default();
        o.insert(5.0, 7.0);
        o.insert(1.0, 2.0);
        o.insert(6.5, 9.0);
        o.insert(2.0, 3.0);
        assert_eq!(o.intervals, vec![(1.0, 3.0), (5.0, 9.0)]);
        assert_eq!(o.gaps((0.0, 10.0)), vec![(0.0, 1.0), (3.0, 5.0), (9.0, 10.0)]);
        assert_eq!(o.gaps((2.0, 8.0)), vec![(3.0, 5.0)]);
    }

    #[test]
    fn register_enforces_entry_order() {
        let mut p = protocol();
        let a = cruise(&p, 1, "ws", 5.0, 10.0);
        p.register(a).unwrap();
        let b = cruise(&p, 2, "ss", 4.0, 10.0);
        assert_eq!(p.register(b), Err(ProtocolError::OutOfOrder { cav: 2 }));
        let tie = cruise(&p, 0, "ss", 5.0, 10.0);
        assert_eq!(p.register(tie), Err(ProtocolError::OutOfOrder { cav: 0 }));
    }

    #[test]
    fn exit_inside_headway_is_rejected() {
        let mut p = protocol();
        let a = cruise(&p, 1, "ws", 0.0, 10.0);
        let exit = a.exit_time;
        p.register(a).unwrap();
        assert!(!p.exit_time_allowed(p.route("ws").unwrap().exit_lane(), exit + 0.5));
        // Half a second behind on the same route exits inside the headway.
        let b = cruise(&p, 2, "ws", 0.5, 10.0);
        assert!(matches!(p.register(b), Err(ProtocolError::HeadwayConflict { other: 1, .. })));
        let c = cruise(&p, 3, "ws", 3.0, 10.0);
        p.register(c).unwrap();
        assert_eq!(p.records.len(), 2);
    }

    #[test]
    fn sources_for_same_route_and_crossing() {
        let mut p = protocol();
        p.register(cruise(&p, 1, "ws", 0.0, 10.0)).unwrap();
        let same = p.safety_sources("ws").unwrap();
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].kind, SourceKind::RearEnd { lane: p.route("ws").unwrap().entry_lane() });
        let cross = p.safety_sources("ss").unwrap();
        assert_eq!(cross.len(), 1);
        assert_eq!(cross[0].kind, SourceKind::Lateral);
        assert_eq!(cross[0].label(), "lateral:1");
        assert!(matches!(p.safety_sources("nope"), Err(ProtocolError::UnknownRoute(_))));
    }

    #[test]
    fn snapshot_hides_later_entries() {
        let mut p = protocol();
        p.register(cruise(&p, 1, "ws", 0.0, 10.0)).unwrap();
        p.register(cruise(&p, 2, "ss", 6.0, 10.0)).unwrap();
        let s = p.snapshot(3.0);
        assert_eq!(s.records.len(), 1);
        let lane = p.route("ss").unwrap().entry_lane();
        assert!(s.occupancy(lane).is_empty());
        assert!(!p.occupancy(lane).is_empty());
        assert_eq!(p.predecessor_on_lane(lane, 20.0).map(|r| r.cav_id), Some(2));
        assert!(p.predecessor_on_lane(lane, 5.0).is_none());
    }
}
