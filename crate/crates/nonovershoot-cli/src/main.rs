//! Command-line front end: validate scenario files, run single simulations,
//! sweep a gain axis across several runs, and print the closed-form dip
//! bounds. Outputs are pure functions of the inputs; CSV and JSON bodies
//! carry the scenario fingerprint instead of timestamps.

mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand, ValueEnum};
use nonovershoot::controller::{compile_for, gain_floor_report, violation_bound, BoundError, BoundMode, FloorViolation};
use nonovershoot::scenario::{LoadError, Scenario};
use nonovershoot::sim::{self, metrics_for, Metrics, Trace};

#[derive(Parser)]
#[command(
    name = "nonovershoot",
    version,
    about = "Simulate and check adaptive controllers that approach a reference from one side"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a scenario, check it, and print the initial-condition gain floors
    Validate {
        /// Scenario TOML file
        scenario: PathBuf,
    },
    /// Simulate a scenario and write metrics.json (plus optional trace/plots)
    Run {
        /// Scenario TOML file
        scenario: PathBuf,
        /// Output directory (created if missing)
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write trace.csv
        #[arg(long)]
        csv: bool,
        /// Also write fig_y.svg, fig_theta.svg, fig_u.svg, fig_h1.svg
        #[arg(long)]
        plot: bool,
        /// Keep every Nth trace row in trace.csv
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Override the scenario step size
        #[arg(long)]
        dt: Option<f64>,
        /// Override the scenario horizon
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Rerun one scenario across a list of values on one gain axis
    Sweep {
        /// Scenario TOML file
        scenario: PathBuf,
        /// Which knob the values replace (vector gains are set uniformly)
        #[arg(long, value_enum)]
        axis: Axis,
        /// Axis values, at least two
        #[arg(long, num_args = 2.., required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        /// Output directory (created if missing)
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the scenario step size
        #[arg(long)]
        dt: Option<f64>,
        /// Override the scenario horizon
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Print the closed-form worst-dip bound h1* for all four identifiers
    Bounds {
        /// Scenario TOML file
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    /// Every stage gain c_i
    Cbar,
    /// Every damping weight kappa_i
    Kappabar,
    /// Every damping weight g_i
    Gbar,
    /// Observer injection gain
    Sigma,
    /// Adaptation gain
    Gamma,
    /// Every component of the initial estimate
    Thetahat0,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Cbar => "cbar",
            Axis::Kappabar => "kappabar",
            Axis::Gbar => "gbar",
            Axis::Sigma => "sigma",
            Axis::Gamma => "gamma",
            Axis::Thetahat0 => "thetahat0",
        }
    }

    fn needs_positive(self) -> bool {
        !matches!(self, Axis::Thetahat0)
    }

    fn apply(self, sc: &mut Scenario, v: f64) {
        let n = sc.n();
        let p = sc.p();
        match self {
            Axis::Cbar => sc.gains.c = vec![v; n],
            Axis::Kappabar => sc.gains.kappa = vec![v; n],
            Axis::Gbar => sc.gains.g = vec![v; n],
            Axis::Sigma => sc.gains.sigma = v,
            Axis::Gamma => sc.gains.gamma = v,
            Axis::Thetahat0 => sc.thetahat0 = vec![v; p],
        }
    }
}

/// Failed command: exit code plus the text already formatted for stderr.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

/// One machine-readable diagnostic line (JSON object per line on stderr).
fn diag(check: &str, stage: Option<usize>, msg: &str) -> String {
    let mut line = format!("{{\"level\":\"error\",\"check\":\"{}\"", json_escape(check));
    if let Some(i) = stage {
        let _ = write!(line, ",\"stage\":{i}");
    }
    let _ = write!(line, ",\"msg\":\"{}\"}}", json_escape(msg));
    line
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    Scenario::from_file(path).map_err(|e| match e {
        LoadError::Io { .. } => Failure::io(diag("load", None, &e.to_string())),
        _ => Failure::invalid(diag("load", None, &e.to_string())),
    })
}

fn apply_overrides(sc: &mut Scenario, dt: Option<f64>, t_end: Option<f64>) -> Result<(), Failure> {
    if let Some(dt) = dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Failure::invalid(diag("override", None, &format!("dt = {dt} must be positive"))));
        }
        sc.dt = dt;
    }
    if let Some(t_end) = t_end {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Failure::invalid(diag("override", None, &format!("t_end = {t_end} must be positive"))));
        }
        sc.t_end = t_end;
    }
    if sc.dt > sc.t_end {
        return Err(Failure::invalid(diag(
            "override",
            None,
            &format!("dt = {} exceeds t_end = {}", sc.dt, sc.t_end),
        )));
    }
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body)
        .map_err(|e| Failure::io(format!("error: cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let sc = load(path)?;
    let graph = compile_for(&sc)
        .map_err(|e| Failure::invalid(diag("compile", None, &e.to_string())))?;
    let report = gain_floor_report(&graph, &sc)
        .map_err(|e| Failure::numeric(diag("floor", None, &e.to_string())))?;

    println!(
        "n = {}, p = {}, identifier = {}, filter = {}, gated = {}",
        sc.n(),
        sc.p(),
        sc.identifier.as_str(),
        if sc.filter_on { "on" } else { "off" },
        if sc.gated { "on" } else { "off" }
    );
    println!(
        "dt = {}, t_end = {}, steps = {}, fingerprint = {}",
        sc.dt,
        sc.t_end,
        sc.steps(),
        sc.fingerprint()
    );
    for e in &report.entries {
        if e.degenerate {
            println!(
                "stage {}: floor degenerate (|h{}(0)| ~ 0), c = {}",
                e.i, e.i, sc.gains.c[e.i - 1]
            );
        } else {
            println!("stage {}: floor = {:.4}, c = {}", e.i, e.floor, sc.gains.c[e.i - 1]);
        }
    }
    println!(
        "stage {}: positivity only, c = {}",
        sc.n(),
        sc.gains.c[sc.n() - 1]
    );
    let h0: Vec<String> = report.h0.iter().map(|h| format!("{h:.4}")).collect();
    println!("h(0) = [{}]", h0.join(", "));

    if report.violations.is_empty() {
        println!("ok");
        return Ok(());
    }
    let mut lines = Vec::new();
    for v in &report.violations {
        match v {
            FloorViolation::BelowFloor { i, c, floor } => lines.push(diag(
                "floor",
                Some(*i),
                &format!("c_{i} = {c} is below the initial-condition floor {floor:.4}"),
            )),
            FloorViolation::NegativeInitial { i, h } => lines.push(diag(
                "init",
                Some(*i),
                &format!("h_{i}(0) = {h:.4} is negative; no gain choice can clear it"),
            )),
        }
    }
    println!("invalid");
    Err(Failure::invalid(lines.join("\n")))
}

struct RunArtifacts<'a> {
    trace: &'a Trace,
    metrics: &'a Metrics,
    scenario: &'a Scenario,
}

fn write_run_outputs(
    out: &Path,
    art: &RunArtifacts,
    csv: bool,
    plots: bool,
    stride: usize,
) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .map_err(|e| Failure::io(format!("error: cannot create {}: {e}", out.display())))?;
    write_file(&out.join("metrics.json"), &sim::metrics_to_json(art.metrics))?;
    if csv {
        write_file(&out.join("trace.csv"), &sim::trace_to_csv(art.trace, stride))?;
    }
    if plots {
        write_plots(out, art)?;
    }
    Ok(())
}

fn write_plots(out: &Path, art: &RunArtifacts) -> Result<(), Failure> {
    let trace = art.trace;
    let n = trace.n;
    let p = trace.p;
    let t: Vec<f64> = trace.rows.iter().map(|r| r.t).collect();
    let y: Vec<f64> = trace.rows.iter().map(|r| r.state[0]).collect();
    let r_sig: Vec<f64> = trace.rows.iter().map(|r| r.state[0] - r.h[0]).collect();
    let fig = plot::line_chart(
        "output vs reference",
        "t",
        "y",
        &[plot::Series::line("y", &t, &y), plot::Series::guide("r", &t, &r_sig)],
    );
    write_file(&out.join("fig_y.svg"), &fig)?;

    let mut series_data: Vec<(String, Vec<f64>, bool)> = Vec::new();
    for j in 0..p {
        let vals: Vec<f64> = trace.rows.iter().map(|r| r.thetahat(n, p)[j]).collect();
        series_data.push((format!("thetahat{}", j + 1), vals, false));
        let truth = vec![art.scenario.plant.theta[j]; t.len()];
        series_data.push((format!("theta{}", j + 1), truth, true));
    }
    let theta_series: Vec<plot::Series> = series_data
        .iter()
        .map(|(label, ys, dashed)| plot::Series {
            label,
            xs: &t,
            ys,
            dashed: *dashed,
            markers: false,
        })
        .collect();
    let fig = plot::line_chart("parameter estimates", "t", "theta", &theta_series);
    write_file(&out.join("fig_theta.svg"), &fig)?;

    let u: Vec<f64> = trace.rows.iter().map(|r| r.u).collect();
    let u0: Vec<f64> = trace.rows.iter().map(|r| r.u0).collect();
    let ubar: Vec<f64> = trace.rows.iter().map(|r| r.ubar).collect();
    let fig = plot::line_chart(
        "applied, backup, and certified inputs",
        "t",
        "u",
        &[
            plot::Series::line("u", &t, &u),
            plot::Series::guide("u0", &t, &u0),
            plot::Series::line("ubar", &t, &ubar),
        ],
    );
    write_file(&out.join("fig_u.svg"), &fig)?;

    let h1: Vec<f64> = trace.rows.iter().map(|r| r.h[0]).collect();
    let mut h1_series = vec![plot::Series::line("h1", &t, &h1)];
    let floor;
    if let Some(star) = art.metrics.h1_star {
        floor = vec![-star; t.len()];
        h1_series.push(plot::Series::guide("-h1*", &t, &floor));
    }
    let fig = plot::line_chart("clearance and certified floor", "t", "h1", &h1_series);
    write_file(&out.join("fig_h1.svg"), &fig)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    path: &Path,
    out: &Path,
    csv: bool,
    plots: bool,
    stride: usize,
    dt: Option<f64>,
    t_end: Option<f64>,
) -> Result<(), Failure> {
    let mut sc = load(path)?;
    apply_overrides(&mut sc, dt, t_end)?;
    match sim::run(&sc) {
        Ok(output) => {
            let art = RunArtifacts {
                trace: &output.trace,
                metrics: &output.metrics,
                scenario: &sc,
            };
            write_run_outputs(out, &art, csv, plots, stride)?;
            println!(
                "min_h1 = {}, violation = {}, settled = {}",
                output.metrics.min_h1, output.metrics.violation, output.metrics.settled
            );
            Ok(())
        }
        Err(failure) => {
            // Keep whatever prefix integrated so the blow-up can be inspected.
            let metrics = metrics_for(&failure.partial, &sc);
            let art = RunArtifacts {
                trace: &failure.partial,
                metrics: &metrics,
                scenario: &sc,
            };
            write_run_outputs(out, &art, csv, plots, stride)?;
            Err(Failure::numeric(format!(
                "error: {} (partial outputs written to {})",
                failure.error,
                out.display()
            )))
        }
    }
}

struct SweepRow {
    value: f64,
    violation: f64,
    h1_star: Option<f64>,
    settled: bool,
    status: String,
}

fn sweep_point(base: &Scenario, axis: Axis, value: f64) -> SweepRow {
    let mut sc = base.clone();
    axis.apply(&mut sc, value);
    match sim::run(&sc) {
        Ok(output) => SweepRow {
            value,
            violation: output.metrics.violation,
            h1_star: output.metrics.h1_star,
            settled: output.metrics.settled,
            status: "ok".to_string(),
        },
        Err(failure) => {
            let metrics = metrics_for(&failure.partial, &sc);
            SweepRow {
                value,
                violation: metrics.violation,
                h1_star: metrics.h1_star,
                settled: false,
                status: format!("failed: {}", failure.error),
            }
        }
    }
}

fn cmd_sweep(
    path: &Path,
    axis: Axis,
    values: &[f64],
    out: &Path,
    dt: Option<f64>,
    t_end: Option<f64>,
) -> Result<(), Failure> {
    let mut base = load(path)?;
    apply_overrides(&mut base, dt, t_end)?;
    for &v in values {
        if !v.is_finite() || (axis.needs_positive() && v <= 0.0) {
            return Err(Failure::invalid(diag(
                "sweep",
                None,
                &format!("axis {} requires positive finite values, got {v}", axis.name()),
            )));
        }
    }
    fs::create_dir_all(out)
        .map_err(|e| Failure::io(format!("error: cannot create {}: {e}", out.display())))?;

    // Runs are independent; integrate them in parallel and collect in the
    // order the values were given.
    let base_ref = &base;
    let rows: Vec<SweepRow> = thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|&v| scope.spawn(move || sweep_point(base_ref, axis, v)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut csv = String::from("value,violation,h1_star,settled,status\n");
    for row in &rows {
        let star = row
            .h1_star
            .map(|v| v.to_string())
            .unwrap_or_else(|| "inf".to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.value, row.violation, star, row.settled, row.status
        );
    }
    write_file(&out.join("summary.csv"), &csv)?;

    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.violation).collect();
    let mut series = plot::Series::line("violation", &xs, &ys);
    series.markers = true;
    let fig = plot::line_chart(
        "measured worst dip vs axis value",
        axis.name(),
        "violation",
        &[series],
    );
    write_file(&out.join("violation_vs_axis.svg"), &fig)?;

    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(Failure::numeric(format!(
            "error: {failed} of {} sweep runs failed; see summary.csv",
            rows.len()
        )));
    }
    for row in &rows {
        println!(
            "{} = {}: violation = {}, settled = {}",
            axis.name(),
            row.value,
            row.violation,
            row.settled
        );
    }
    Ok(())
}

fn cmd_bounds(path: &Path) -> Result<(), Failure> {
    let sc = load(path)?;
    let modes = [
        ("h-passive", BoundMode::HPassive),
        ("x-passive", BoundMode::XPassive),
        ("h-swapping", BoundMode::HSwapping),
        ("x-swapping", BoundMode::XSwapping),
    ];
    println!("mode,h1_star");
    for (name, mode) in modes {
        match violation_bound(&sc.gains, sc.n(), sc.theta_err0(), mode) {
            Ok(v) => println!("{name},{v}"),
            Err(BoundError::InvalidMode) => println!("{name},inf"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Validate { scenario } => cmd_validate(scenario),
        Cmd::Run {
            scenario,
            out,
            csv,
            plot,
            stride,
            dt,
            t_end,
        } => cmd_run(scenario, out, *csv, *plot, *stride, *dt, *t_end),
        Cmd::Sweep {
            scenario,
            axis,
            values,
            out,
            dt,
            t_end,
        } => cmd_sweep(scenario, *axis, values, out, *dt, *t_end),
        Cmd::Bounds { scenario } => cmd_bounds(scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
