use std::sync::Arc;

use crossing_core::geometry::{Cardinal, IntersectionGeometry, Maneuver, Route};
use crossing_core::lowlevel::{
    audit_speed_arcs, first_violation, piece_arcs, solve_unconstrained, BoundaryData, Limits,
    SolveOptions,
};
use crossing_core::oracle;
use crossing_core::protocol::{CavRecord, CrossingProtocol, OccupancySet};
use crossing_core::trajectory::SafetyParams;
use crossing_core::upperlevel::{omega_to_phi, phi_to_omega, time_at_position, Phi};
use proptest::prelude::*;

fn boundary(t0: f64, dur: f64, v0: f64, pf: f64, limits: Limits) -> BoundaryData {
    BoundaryData {
        t0,
        tf: t0 + dur,
        p0: 0.0,
        pf,
        v0,
        s0: f64::INFINITY,
        limits,
        safety: SafetyParams {
            xi: 1.0,
            rho: 1.0,
            dbar: 5.0,
        },
        v_entry: None,
        merge_position: None,
        relax_initial: false,
    }
}

const WIDE: Limits = Limits {
    u_min: -5.0,
    u_max: 3.0,
    v_min: 1.0,
    v_max: 30.0,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cardano_inverts_committed_motion(
        t0 in 0.0f64..60.0,
        dur in 4.0f64..30.0,
        v0 in 3.0f64..20.0,
        ratio in 0.75f64..1.35,
        k in 1usize..50,
    ) {
        let pf = v0 * ratio * dur;
        let phi = Phi::from_boundary(t0, 0.0, v0, t0 + dur, pf);
        // Forward motion only.
        prop_assume!(phi.speed(t0 + dur) > 0.5 && phi.p3 != 0.0);
        let t = t0 + dur * k as f64 / 50.0;
        let w = phi_to_omega(&phi).unwrap();
        let back = time_at_position(&w, phi.position(t)).unwrap();
        prop_assert!((back - t).abs() < 1e-9, "t = {t}, got {back}");
    }

    #[test]
    fn omega_round_trip(
        p3 in prop_oneof![-1.0f64..-1e-3, 1e-3f64..1.0],
        p2 in -5.0f64..5.0,
        p1 in -20.0f64..20.0,
        p0 in -500.0f64..500.0,
    ) {
        let phi = Phi::new(p3, p2, p1, p0);
        let back = omega_to_phi(&phi_to_omega(&phi).unwrap()).unwrap();
        for (a, b) in phi.coefficients().iter().zip(back.coefficients()) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{phi:?} vs {back:?}");
        }
    }

    #[test]
    fn occupancy_stays_sorted_and_disjoint(
        raw in prop::collection::vec((0.0f64..100.0, 0.1f64..10.0), 1..20),
    ) {
        let mut o = OccupancySet::default();
        for &(a, len) in &raw {
            o.insert(a, a + len);
        }
        for w in o.intervals.windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        // Every inserted interval is covered; gaps avoid all of them.
        for &(a, len) in &raw {
            prop_assert!(o.intervals.iter().any(|&(x, y)| x <= a && a + len <= y));
        }
        let gaps = o.gaps((0.0, 120.0));
        let covered: f64 = o.intervals.iter().map(|(a, b)| b.min(120.0) - a).sum::<f64>()
            + gaps.iter().map(|(a, b)| b - a).sum::<f64>();
        prop_assert!((covered - 120.0).abs() < 1e-9);
    }

    #[test]
    fn speed_arcs_obey_junction_structure(
        v0 in 4.0f64..14.0,
        headroom in 1.0f64..6.0,
        dur in 5.0f64..15.0,
        push in 0.9f64..1.05,
        slow in any::<bool>(),
        relax in any::<bool>(),
    ) {
        let mut limits = Limits { v_max: v0 + headroom, ..WIDE };
        let pf = if slow {
            limits.v_min = (v0 - headroom).max(0.5);
            limits.v_min * dur * (2.0 - push) + 1.0
        } else {
            limits.v_max * dur * push
        };
        let mut b = boundary(0.0, dur, v0, pf, limits);
        b.relax_initial = relax;
        if let Ok(tr) = piece_arcs(&b, &[], &SolveOptions::default()) {
            let issues = audit_speed_arcs(&tr);
            prop_assert!(issues.is_empty(), "{issues:?} for {:?}", tr.kinds());
            prop_assert!(first_violation(&tr, &b, &[]).is_none());
            let end = tr.evaluate(b.tf).unwrap();
            prop_assert!((end.p - b.pf).abs() < 1e-6);
        }
    }

    #[test]
    fn register_keeps_records_in_entry_order(
        gaps in prop::collection::vec(0.0f64..5.0, 1..8),
        speeds in prop::collection::vec(8.0f64..15.0, 8),
    ) {
        let g = IntersectionGeometry {
            control_zone_length: 100.0,
            merging_zone_side: 20.0,
            right_turn_radius: 8.0,
            left_turn_radius: 12.0,
            lanes_per_approach: 1,
            lane_width: 4.0,
        };
        let routes = vec![
            Route::new("ws", &g, Cardinal::West, Maneuver::Straight, 0, 0).unwrap(),
            Route::new("ss", &g, Cardinal::South, Maneuver::Straight, 0, 0).unwrap(),
        ];
        let mut p = CrossingProtocol::new(g, routes, 1.0);
        let mut t = 0.0;
        for (i, gap) in gaps.iter().enumerate() {
            t += gap;
            let r = p.route(if i % 2 == 0 { "ws" } else { "ss" }).unwrap().clone();
            let v = speeds[i];
            let tf = t + r.total_length / v;
            let phi = Phi::from_boundary(t, 0.0, v, tf, r.total_length);
            let rec = CavRecord::new(i as u32, &r, Some(phi), Arc::new(phi.trajectory(t, tf)));
            let _ = p.register(rec);
        }
        for w in p.records.windows(2) {
            prop_assert!(w[0].entry_time <= w[1].entry_time);
        }
        // A later exit never falls inside the exit block of an earlier CAV.
        for (j, rec) in p.records.iter().enumerate() {
            let lane = p.route(&rec.route).unwrap().exit_lane();
            let earlier: Vec<u32> = p.records[..j].iter().map(|r| r.cav_id).collect();
            for (other, a, b) in p.exit_blocks(lane) {
                if earlier.contains(&other) {
                    prop_assert!(rec.exit_time < a || rec.exit_time > b);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn slack_instances_match_the_oracle(
        t0 in 0.0f64..20.0,
        dur in 5.0f64..20.0,
        v0 in 5.0f64..20.0,
        ratio in 0.8f64..1.2,
    ) {
        let b = boundary(t0, dur, v0, v0 * ratio * dur, WIDE);
        let unc = solve_unconstrained(&b).unwrap().trajectory();
        prop_assume!(first_violation(&unc, &b, &[]).is_none());
        let tr = piece_arcs(&b, &[], &SolveOptions::default()).unwrap();
        let o = oracle::solve(&b, &[], 100).unwrap();
        prop_assert!(tr.energy_cost() <= o.cost * 1.01 + 1e-12);
        for (t, u) in o.t.iter().zip(&o.u) {
            prop_assert!((tr.evaluate(*t).unwrap().u - u).abs() <= 0.05);
        }
    }
}
