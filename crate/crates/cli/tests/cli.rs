use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios"].iter().collect()
}

fn crossing(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossing"))
        .args(args)
        .env_remove("CROSSING_OUT_DIR")
        .output()
        .unwrap()
}

fn run_into(scenario: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = scenarios().join(scenario);
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    crossing(&args)
}

#[test]
fn run_writes_one_csv_per_cav() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into("two_cav_unconstrained", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["cav_1.csv", "cav_2.csv", "summary.toml", "safety_report.toml", "protocol.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("safety: certified"));
}

#[test]
fn missing_field_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenarios().join("two_cav_unconstrained.toml")).unwrap();
    let broken: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("rho"))
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = dir.path().join("broken.toml");
    std::fs::write(&cfg, broken).unwrap();
    let o = crossing(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rho"));
}

#[test]
fn sampling_step_only_changes_row_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run_into("scenario1", a.path(), &[]).status.code(), Some(0));
    assert_eq!(run_into("scenario1", b.path(), &["--dt", "0.1"]).status.code(), Some(0));
    let fine = std::fs::read_to_string(a.path().join("cav_2.csv")).unwrap();
    let coarse = std::fs::read_to_string(b.path().join("cav_2.csv")).unwrap();
    assert!(fine.lines().count() > 5 * coarse.lines().count());
    // Rows at shared times agree exactly.
    let at = |text: &str, t: &str| text.lines().find(|l| l.split(',').nth(1) == Some(t)).map(String::from);
    assert_eq!(at(&fine, "4.500000"), at(&coarse, "4.500000"));
    assert!(at(&coarse, "4.500000").is_some());
    let summary = |d: &Path| std::fs::read_to_string(d.join("solutions.toml")).unwrap();
    assert_eq!(summary(a.path()), summary(b.path()));
}

#[test]
fn plot_data_stacks_four_series_per_cav() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_into("scenario1", dir.path(), &[]).status.code(), Some(0));
    let o = crossing(&["plot-data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("plot_data.csv")).unwrap();
    let mut series: Vec<(String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].to_string())
        })
        .collect();
    series.dedup();
    assert_eq!(series.len(), 8);

    let empty = tempfile::tempdir().unwrap();
    let o = crossing(&["plot-data", empty.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solve_low_reports_oracle_gap() {
    let o = crossing(&[
        "solve-low", "--tf", "10", "--pf", "150", "--v0", "10", "--oracle",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("arcs: [unconstrained]"), "{out}");
    let gap: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("relative gap: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(gap <= 0.01);
    // Reaching 400 m in 10 s from 10 m/s needs more than u_max at entry.
    let o = crossing(&["solve-low", "--tf", "10", "--pf", "400", "--v0", "10"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn env_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("two_cav_unconstrained.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_crossing"))
        .args(["run", cfg.to_str().unwrap()])
        .env("CROSSING_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("cav_1.csv").exists());
}
