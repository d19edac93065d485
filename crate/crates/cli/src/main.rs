//! `crossing`: run intersection scenarios, solve single-vehicle problems and
//! turn results into plot-ready tables.
//!
//! Exit codes: 0 success, 1 bad input, 2 safety violation, 3 solver failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossing_core::config::Config;
use crossing_core::lowlevel::{piece_arcs, BoundaryData, JunctionRule, Limits, SolveOptions};
use crossing_core::oracle;
use crossing_core::sim::{self, SimError};
use crossing_core::trajectory::SafetyParams;

const OUT_ENV: &str = "CROSSING_OUT_DIR";

#[derive(Parser)]
#[command(name = "crossing", version, about = "Unsignalized intersection crossing planner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario file and write per-CAV CSVs and reports.
    Run(RunArgs),
    /// Solve one fixed-exit-time energy problem.
    SolveLow(LowArgs),
    /// Convert a result directory into long-format plot data.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; `.toml` may be omitted.
    config: PathBuf,
    /// Output sampling step in seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Override `[safety] epsilon`.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override `[solver] horizon`.
    #[arg(long)]
    horizon: Option<f64>,
    /// Output directory. Falls back to $CROSSING_OUT_DIR, the scenario's
    /// `[output] dir`, then `results/<scenario name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LowArgs {
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long)]
    tf: f64,
    #[arg(long, default_value_t = 0.0)]
    p0: f64,
    #[arg(long)]
    pf: f64,
    #[arg(long)]
    v0: f64,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    u_min: f64,
    #[arg(long, default_value_t = 3.0)]
    u_max: f64,
    #[arg(long, default_value_t = 0.5)]
    v_min: f64,
    #[arg(long, default_value_t = 30.0)]
    v_max: f64,
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 5.0)]
    dbar: f64,
    /// Accept a control bound already active at t0.
    #[arg(long)]
    relax_initial: bool,
    /// Place the corner by the Hamiltonian jump rule instead of by cost.
    #[arg(long)]
    hamiltonian: bool,
    /// Cross-check against the discretized QP.
    #[arg(long)]
    oracle: bool,
    /// Grid intervals for `--oracle`.
    #[arg(long, default_value_t = 200)]
    grid: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory written by `run`.
    dir: PathBuf,
    /// Output file; defaults to `<dir>/plot_data.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::SolveLow(a) => cmd_solve_low(a),
        Cmd::PlotData(a) => cmd_plotdata(a),
    };
    ExitCode::from(code)
}

fn out_dir(args: &RunArgs, cfg: &Config) -> PathBuf {
    if let Some(d) = &args.out {
        return d.clone();
    }
    if let Some(d) = std::env::var_os(OUT_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(d);
    }
    if let Some(o) = &cfg.output {
        return o.dir.clone();
    }
    let stem = args
        .config
        .file_stem()
        .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    Path::new("results").join(stem)
}

fn cmd_run(args: RunArgs) -> u8 {
    let mut cfg = match Config::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return 1;
        }
    };
    if let Some(e) = args.epsilon {
        cfg.safety.epsilon = e;
    }
    if let Some(h) = args.horizon {
        cfg.solver.horizon = h;
    }
    if let Some(dt) = args.dt {
        cfg.solver.dt_output = dt;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 1;
    }
    let result = match sim::run(&cfg) {
        Ok(r) => r,
        Err(SimError::Config(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
        Err(e) => {
            eprintln!("solver failure: {e}");
            return 3;
        }
    };
    let dir = out_dir(&args, &cfg);
    if let Err(e) = sim::write_outputs(&result, &cfg, &dir, cfg.solver.dt_output) {
        eprintln!("error: {e}");
        return 1;
    }
    println!(
        "{} CAVs, mean travel time {:.3} s, total energy {:.4}, results in {}",
        result.cavs.len(),
        result.mean_travel_time,
        result.total_energy,
        dir.display()
    );
    for c in &result.cavs {
        let arcs: Vec<&str> = c.arcs().into_iter().map(|k| k.label()).collect();
        println!(
            "  cav {:>3} {:<6} t0 {:>7.3} tf {:>8.3} [{}]",
            c.cav_id,
            c.route,
            c.t0,
            c.tf,
            arcs.join(", ")
        );
    }
    if result.safety.certified() {
        println!("safety: certified");
        0
    } else {
        for v in &result.safety.violations {
            eprintln!(
                "violation: cav {} behind cav {} ({}) slack {:.3e} at t = {:.4}",
                v.follower, v.leader, v.label, v.min_slack, v.time
            );
        }
        2
    }
}

fn cmd_solve_low(a: LowArgs) -> u8 {
    let bd = BoundaryData {
        t0: a.t0,
        tf: a.tf,
        p0: a.p0,
        pf: a.pf,
        v0: a.v0,
        s0: f64::INFINITY,
        limits: Limits {
            u_min: a.u_min,
            u_max: a.u_max,
            v_min: a.v_min,
            v_max: a.v_max,
        },
        safety: SafetyParams {
            xi: a.xi,
            rho: a.rho,
            dbar: a.dbar,
        },
        v_entry: None,
        merge_position: None,
        relax_initial: a.relax_initial,
    };
    if let Err(e) = bd.validate() {
        eprintln!("error: {e}");
        return 1;
    }
    let opts = SolveOptions {
        junction_rule: if a.hamiltonian {
            JunctionRule::HamiltonianJump
        } else {
            JunctionRule::MinCost
        },
        ..SolveOptions::default()
    };
    let traj = match piece_arcs(&bd, &[], &opts) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("solver failure: {e}");
            return 3;
        }
    };
    let arcs: Vec<&str> = traj.arcs.iter().map(|x| x.kind.label()).collect();
    println!("arcs: [{}]", arcs.join(", "));
    for j in &traj.junctions {
        println!(
            "junction {:?} at t = {:.6}: u- = {:.6}, u+ = {:.6}",
            j.kind, j.time, j.u_left, j.u_right
        );
    }
    let cost = traj.energy_cost();
    println!("cost: {cost:.9}");
    if a.oracle {
        match oracle::solve(&bd, &[], a.grid) {
            Ok(o) => {
                let gap = (cost - o.cost) / o.cost.abs().max(1e-12);
                println!("oracle cost: {:.9}", o.cost);
                println!("relative gap: {gap:.3e}");
            }
            Err(e) => {
                eprintln!("oracle failure: {e}");
                return 3;
            }
        }
    }
    0
}

fn cmd_plotdata(a: PlotArgs) -> u8 {
    match plotdata(&a) {
        Ok(n) => {
            println!("{n} series");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn plotdata(a: &PlotArgs) -> Result<usize, Box<dyn std::error::Error>> {
    let mut files: Vec<(u32, PathBuf)> = std::fs::read_dir(&a.dir)?
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let id = name.strip_prefix("cav_")?.strip_suffix(".csv")?.parse().ok()?;
            Some((id, e.path()))
        })
        .collect();
    if files.is_empty() {
        return Err(format!("no cav_<id>.csv files in {}", a.dir.display()).into());
    }
    files.sort();
    let out = a.out.clone().unwrap_or_else(|| a.dir.join("plot_data.csv"));
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["cav_id", "t", "series", "value"])?;
    let series = ["p", "v", "u", "s"];
    for (_, path) in &files {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| format!("{}: missing column {name}", path.display()))
        };
        let (ci, ti) = (col("cav_id")?, col("t")?);
        let cols = series.map(col);
        let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>()?;
        for (s, c) in series.iter().zip(&cols) {
            let c = *c.as_ref().map_err(|e| e.clone())?;
            for row in &rows {
                w.write_record([&row[ci], &row[ti], s, &row[c]])?;
            }
        }
    }
    w.flush()?;
    Ok(files.len() * series.len())
}
