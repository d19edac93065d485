use std::path::PathBuf;
use std::sync::Arc;

use crossing_core::config::Config;
use crossing_core::lowlevel::{solve_unconstrained, BoundaryData};
use crossing_core::sim::{self, Commitment};
use crossing_core::trajectory::ArcKind;

fn scenario(name: &str) -> Config {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name]
        .iter()
        .collect();
    Config::load(&path).unwrap()
}

#[test]
fn crossing_pair_is_certified_without_active_constraints() {
    let cfg = scenario("two_cav_unconstrained.toml");
    let r = sim::run(&cfg).unwrap();
    assert!(r.safety.certified(), "{:?}", r.safety.violations);
    assert_eq!(r.cavs.len(), 2);
    for c in &r.cavs {
        assert_eq!(c.commitment, Commitment::Upper);
        assert!(c.no_gap(), "cav {} {:?}", c.cav_id, c.arcs());
        assert!(c.integration_error < 1e-6);
    }
    assert!(r.safety.min_lateral.unwrap() > 0.0);
}

#[test]
fn prescribed_follower_brakes_behind_leader() {
    let cfg = scenario("scenario1.toml");
    let r = sim::run(&cfg).unwrap();
    assert!(r.safety.certified());
    let f = &r.cavs[1];
    assert_eq!(f.commitment, Commitment::Prescribed);
    assert_eq!(f.arcs(), vec![ArcKind::Unconstrained, ArcKind::Unconstrained]);
    let end = f.trajectory.evaluate(f.tf).unwrap();
    assert!(end.u.abs() < 1e-9);
}

#[test]
fn corrupted_follower_is_caught_at_the_right_time() {
    let cfg = scenario("scenario1.toml");
    let mut r = sim::run(&cfg).unwrap();
    let (lead, foll) = (r.cavs[0].trajectory.clone(), &mut r.cavs[1]);
    // Replace the follower by its plan ignoring the leader.
    let route = cfg.build_routes().unwrap().remove(0);
    let bd = BoundaryData {
        t0: foll.t0,
        tf: foll.tf,
        p0: 0.0,
        pf: route.total_length,
        v0: foll.v0,
        s0: f64::INFINITY,
        limits: cfg.limits(),
        safety: cfg.safety_params(),
        v_entry: None,
        merge_position: None,
        relax_initial: false,
    };
    let naive = solve_unconstrained(&bd).unwrap().trajectory();
    foll.trajectory = Arc::new(naive.clone());
    let report = sim::verify_safety(&r.cavs, &cfg).unwrap();
    assert_eq!(report.violations.len(), 1);
    let v = &report.violations[0];
    assert_eq!((v.follower, v.leader, v.lateral), (2, 1, false));

    // Brute force on a fine grid.
    let s = cfg.safety_params();
    let n = 200_000;
    let (mut t_min, mut worst) = (0.0, f64::INFINITY);
    for k in 0..=n {
        let t = bd.t0 + (bd.tf - bd.t0) * k as f64 / n as f64;
        let me = naive.evaluate(t).unwrap();
        let slack = s.xi * (lead.state_extended(t).p - me.p) - s.dbar - s.rho * me.v;
        if slack < worst {
            (t_min, worst) = (t, slack);
        }
    }
    assert!(worst < -1e-3);
    assert!((v.time - t_min).abs() < 1e-3, "{} vs {t_min}", v.time);
    assert!((v.min_slack - worst).abs() < 1e-8);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let cfg = scenario("scenario2.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let r = sim::run(&cfg).unwrap();
        sim::write_outputs(&r, &cfg, d.path(), cfg.solver.dt_output).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "cav_1.csv"));
    for n in &names {
        let a = std::fs::read(dirs[0].path().join(n)).unwrap();
        let b = std::fs::read(dirs[1].path().join(n)).unwrap();
        assert!(a == b, "{n:?} differs");
    }
}

#[test]
fn csv_rows_follow_the_fixed_layout() {
    let cfg = scenario("scenario1.toml");
    let r = sim::run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    sim::write_outputs(&r, &cfg, dir.path(), 0.5).unwrap();
    let text = std::fs::read_to_string(dir.path().join("cav_1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), sim::CSV_HEADER.join(","));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[1], "0.000000");
    assert_eq!(first[5], "inf");
    let last: Vec<String> = text.lines().last().unwrap().split(',').map(String::from).collect();
    assert_eq!(last[1], format!("{:.6}", r.cavs[0].tf));
    let follower = std::fs::read_to_string(dir.path().join("cav_2.csv")).unwrap();
    let row: Vec<&str> = follower.lines().nth(1).unwrap().split(',').collect();
    assert!(row[5].parse::<f64>().unwrap() > 0.0);
}
