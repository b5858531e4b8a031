//! Fixed-step closed-loop simulation.
//!
//! The integrator is classical fourth-order Runge-Kutta on the packed state
//! `[x, thetahat, aux]`, where `aux` is the identifier's auxiliary state.
//! Every stage evaluates the full pipeline: reference derivatives, the
//! compiled controller (clearances, gains, regressors, `ubar`), the backup
//! input `u0`, the override decision, the prediction error, and the gated
//! update law. The override comparison is therefore re-decided at every
//! Runge-Kutta stage, not once per step.
//!
//! Runs are deterministic: the same scenario produces byte-identical traces
//! on every execution, and all outputs carry the scenario fingerprint.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::controller::{
    self, BoundError, BoundMode, CompileError, ControllerEval, ControllerGraph,
};
use crate::expr::{EvalError, DEFAULT_NODE_BUDGET};
use crate::filter::{compile_nominal, override_input, NominalController};
use crate::identifiers::{self, AuxInputs};
use crate::lyap::{lyapunov_pair, LyapError, LyapunovPair};
use crate::scenario::{drift_into, Scenario};

/// Tolerance used when a measured minimum is compared against `-h1_star`.
pub const BOUND_TOL: f64 = 1e-6;
/// Final-time clearance magnitude below which a run counts as settled.
pub const SETTLE_H_TOL: f64 = 2e-2;
/// Final relative parameter error below which a run counts as settled.
pub const SETTLE_THETA_REL: f64 = 2e-2;

#[derive(Error, Debug)]
pub enum SimError {
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("evaluation failed at t = {t}: {source}")]
    Eval { t: f64, source: EvalError },
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Lyap(#[from] LyapError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("clearance bound violated: min h1 = {min_h1} is below {limit}")]
    BoundViolated { min_h1: f64, limit: f64 },
}

/// A failed run together with whatever prefix of the trace was produced.
#[derive(Debug)]
pub struct SimFailure {
    pub error: SimError,
    pub partial: Trace,
}

/// One recorded sample.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub t: f64,
    /// Packed state `[x (n), thetahat (p), aux]` at `t`.
    pub state: Vec<f64>,
    pub h: Vec<f64>,
    pub u0: f64,
    pub ubar: f64,
    pub u: f64,
    /// Certified branch in effect (`ubar >= u0`).
    pub active: bool,
    pub eps_norm: f64,
    pub v: f64,
    pub theta_dot_norm: f64,
}

impl TraceRow {
    pub fn x<'a>(&'a self, n: usize) -> &'a [f64] {
        &self.state[..n]
    }

    pub fn thetahat<'a>(&'a self, n: usize, p: usize) -> &'a [f64] {
        &self.state[n..n + p]
    }
}

/// Full-resolution record of one run (one row per step plus the initial
/// point). Striding is applied only at CSV export.
#[derive(Clone, Debug)]
pub struct Trace {
    pub fingerprint: String,
    pub n: usize,
    pub p: usize,
    pub dt: f64,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn min_h1(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.h[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn h1_final(&self) -> f64 {
        self.rows.last().map(|r| r.h[0]).unwrap_or(f64::NAN)
    }
}

/// Summary statistics for one run.
#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub fingerprint: String,
    pub identifier: String,
    pub gated: bool,
    pub filter: bool,
    pub n: usize,
    pub p: usize,
    pub dt: f64,
    pub t_end: f64,
    pub steps: usize,
    pub min_h1: f64,
    /// `max(0, -min_h1)`: how far the clearance dipped past the boundary.
    pub violation: f64,
    /// Closed-form worst-case violation for the configured identifier;
    /// absent when the scheme provides none (swapping with `nu = 0`).
    pub h1_star: Option<f64>,
    pub bound_respected: Option<bool>,
    pub h1_final: f64,
    pub theta_err_initial: f64,
    pub theta_err_final: f64,
    pub settled: bool,
    pub max_abs_u: f64,
}

/// Trace plus metrics.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub trace: Trace,
    pub metrics: Metrics,
}

/// Everything the pipeline produces at one evaluation point.
#[derive(Clone, Debug)]
pub struct StepOutputs {
    /// Time derivative of the packed state.
    pub dy: Vec<f64>,
    pub h: DVector<f64>,
    pub s: Vec<f64>,
    pub w: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub eps: DVector<f64>,
    pub theta_dot: DVector<f64>,
    pub u0: f64,
    pub ubar: f64,
    pub u: f64,
    pub active: bool,
    pub gate_on: bool,
    pub v: f64,
}

/// Reusable closed-loop evaluator and integrator for one scenario.
pub struct Simulator {
    scenario: Scenario,
    graph: ControllerGraph,
    nominal: NominalController,
    pair: LyapunovPair,
    n: usize,
    p: usize,
    aux_len: usize,
    ctrl: ControllerEval,
    ctrl_scratch: Vec<f64>,
    nom_scratch: Vec<f64>,
    ref_scratch: Vec<f64>,
    plant_scratch: Vec<f64>,
    r_buf: Vec<f64>,
    yr_buf: Vec<f64>,
    f_mat: DMatrix<f64>,
    f_vec: DVector<f64>,
    theta: DVector<f64>,
}

impl Simulator {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let n = scenario.n();
        let p = scenario.p();
        let graph = controller::compile(&scenario.plant, &scenario.gains, DEFAULT_NODE_BUDGET)?;
        let nominal = compile_nominal(
            &scenario.plant,
            &scenario.gains.k_nominal,
            &scenario.plant.theta,
            DEFAULT_NODE_BUDGET,
        )?;
        let pair = lyapunov_pair(&scenario.gains.c)?;
        let aux_len = identifiers::aux_len(scenario.identifier, n, p);
        Ok(Self {
            scenario: scenario.clone(),
            graph,
            nominal,
            pair,
            n,
            p,
            aux_len,
            ctrl: ControllerEval::zeros(n, p),
            ctrl_scratch: Vec::new(),
            nom_scratch: Vec::new(),
            ref_scratch: Vec::new(),
            plant_scratch: Vec::new(),
            r_buf: vec![0.0; n + 1],
            yr_buf: vec![0.0; n + 1],
            f_mat: DMatrix::zeros(p, n),
            f_vec: DVector::zeros(n),
            theta: DVector::from_column_slice(&scenario.plant.theta),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn graph(&self) -> &ControllerGraph {
        &self.graph
    }

    pub fn lyapunov(&self) -> &LyapunovPair {
        &self.pair
    }

    pub fn state_len(&self) -> usize {
        self.n + self.p + self.aux_len
    }

    /// Packed initial state with the identifier's prescribed start.
    pub fn initial_state(&mut self) -> Result<Vec<f64>, SimError> {
        let sc = &self.scenario;
        sc.reference
            .sample(0.0, &mut self.ref_scratch, &mut self.r_buf, &mut self.yr_buf)
            .map_err(|source| SimError::Eval { t: 0.0, source })?;
        self.graph
            .evaluate(
                &sc.x0,
                &sc.thetahat0,
                &self.r_buf,
                &mut self.ctrl_scratch,
                &mut self.ctrl,
            )
            .map_err(|source| SimError::Eval { t: 0.0, source })?;
        let mut y = Vec::with_capacity(self.state_len());
        y.extend_from_slice(&sc.x0);
        y.extend_from_slice(&sc.thetahat0);
        let mut aux = Vec::new();
        identifiers::init_aux(sc.identifier, self.n, self.p, &self.ctrl.h, &sc.x0, &mut aux);
        y.extend_from_slice(&aux);
        debug_assert_eq!(y.len(), self.state_len());
        Ok(y)
    }

    /// Evaluates the full pipeline at `(t, y)`.
    pub fn outputs_at(&mut self, t: f64, y: &[f64]) -> Result<StepOutputs, SimError> {
        let n = self.n;
        let p = self.p;
        let x = &y[..n];
        let th = &y[n..n + p];
        let aux = &y[n + p..];

        self.scenario
            .reference
            .sample(t, &mut self.ref_scratch, &mut self.r_buf, &mut self.yr_buf)
            .map_err(|source| SimError::Eval { t, source })?;
        self.graph
            .evaluate(x, th, &self.r_buf, &mut self.ctrl_scratch, &mut self.ctrl)
            .map_err(|source| SimError::Eval { t, source })?;
        let u0 = self
            .nominal
            .nominal_u(x, &self.yr_buf, &mut self.nom_scratch)
            .map_err(|source| SimError::Eval { t, source })?;
        let ubar = self.ctrl.ubar;
        let (u, active) = if self.scenario.filter_on {
            override_input(ubar, u0)
        } else {
            (ubar, ubar >= u0)
        };

        self.scenario
            .plant
            .phi_matrix(x, &mut self.plant_scratch, &mut self.f_mat)
            .map_err(|source| SimError::Eval { t, source })?;
        drift_into(x, u, &mut self.f_vec);

        let kind = self.scenario.identifier;
        let gains = &self.scenario.gains;
        let th_vec = DVector::from_column_slice(th);
        let x_vec = DVector::from_column_slice(x);
        let eps = identifiers::epsilon(kind, n, p, aux, &self.ctrl.h, x, &th_vec);
        let gate_on = !self.scenario.gated || active;
        let reg = if kind.is_x_form() {
            &self.f_mat
        } else {
            &self.ctrl.w
        };
        let theta_dot =
            identifiers::theta_dot(kind, gains, reg, &self.pair.p, &eps, aux, n, p, gate_on);

        let xdot = &self.f_vec + self.f_mat.transpose() * &self.theta;
        let inputs = AuxInputs {
            a: &self.ctrl.a,
            w: &self.ctrl.w,
            q: &self.ctrl.q,
            a0: &self.pair.a0,
            f_mat: &self.f_mat,
            f_vec: &self.f_vec,
            p_mat: &self.pair.p,
            h: &self.ctrl.h,
            x: &x_vec,
            thetahat: &th_vec,
            theta_dot: &theta_dot,
            eps: &eps,
            sigma: gains.sigma,
        };
        let mut aux_dot = Vec::with_capacity(self.aux_len);
        identifiers::aux_deriv(kind, &inputs, aux, &mut aux_dot);

        let mut dy = Vec::with_capacity(self.state_len());
        dy.extend(xdot.iter());
        dy.extend(theta_dot.iter());
        dy.extend_from_slice(&aux_dot);

        let theta_err = &self.theta - &th_vec;
        let v = identifiers::certificate(
            kind,
            gains,
            &self.pair.p,
            &eps,
            aux,
            n,
            p,
            &theta_err,
        );

        Ok(StepOutputs {
            dy,
            h: self.ctrl.h.clone(),
            s: self.ctrl.s.clone(),
            w: self.ctrl.w.clone(),
            q: self.ctrl.q.clone(),
            eps,
            theta_dot,
            u0,
            ubar,
            u,
            active,
            gate_on,
            v,
        })
    }

    /// Advances `y` by one Runge-Kutta step of size `dt` from time `t`.
    /// Returns the pipeline outputs at the step start.
    pub fn step(&mut self, t: f64, y: &mut [f64], dt: f64) -> Result<StepOutputs, SimError> {
        let m = y.len();
        let o1 = self.outputs_at(t, y)?;
        let mut ytmp = vec![0.0; m];

        for i in 0..m {
            ytmp[i] = y[i] + 0.5 * dt * o1.dy[i];
        }
        let o2 = self.outputs_at(t + 0.5 * dt, &ytmp)?;
        for i in 0..m {
            ytmp[i] = y[i] + 0.5 * dt * o2.dy[i];
        }
        let o3 = self.outputs_at(t + 0.5 * dt, &ytmp)?;
        for i in 0..m {
            ytmp[i] = y[i] + dt * o3.dy[i];
        }
        let o4 = self.outputs_at(t + dt, &ytmp)?;

        let w = dt / 6.0;
        for i in 0..m {
            y[i] += w * (o1.dy[i] + 2.0 * o2.dy[i] + 2.0 * o3.dy[i] + o4.dy[i]);
            if !y[i].is_finite() {
                return Err(SimError::NonFinite { t: t + dt });
            }
        }
        Ok(o1)
    }

    fn row_from(&self, t: f64, state: Vec<f64>, o: &StepOutputs) -> TraceRow {
        TraceRow {
            t,
            state,
            h: o.h.iter().copied().collect(),
            u0: o.u0,
            ubar: o.ubar,
            u: o.u,
            active: o.active,
            eps_norm: o.eps.norm(),
            v: o.v,
            theta_dot_norm: o.theta_dot.norm(),
        }
    }

    fn trace_from(&self, rows: Vec<TraceRow>) -> Trace {
        Trace {
            fingerprint: self.scenario.fingerprint(),
            n: self.n,
            p: self.p,
            dt: self.scenario.dt,
            rows,
        }
    }

    /// Runs the scenario to `t_end`, recording every step.
    pub fn run(&mut self) -> Result<SimOutput, Box<SimFailure>> {
        let steps = self.scenario.steps();
        let dt = self.scenario.dt;
        let mut y = match self.initial_state() {
            Ok(y) => y,
            Err(error) => {
                return Err(Box::new(SimFailure {
                    error,
                    partial: self.trace_from(Vec::new()),
                }))
            }
        };
        let mut rows = Vec::with_capacity(steps + 1);
        for step in 0..steps {
            let t = step as f64 * dt;
            let snapshot = y.clone();
            match self.step(t, &mut y, dt) {
                Ok(o) => rows.push(self.row_from(t, snapshot, &o)),
                Err(error) => {
                    return Err(Box::new(SimFailure {
                        error,
                        partial: self.trace_from(rows),
                    }))
                }
            }
        }
        let t_end = steps as f64 * dt;
        match self.outputs_at(t_end, &y) {
            Ok(o) => rows.push(self.row_from(t_end, y.clone(), &o)),
            Err(error) => {
                return Err(Box::new(SimFailure {
                    error,
                    partial: self.trace_from(rows),
                }))
            }
        }
        let trace = self.trace_from(rows);
        let metrics = metrics_for(&trace, &self.scenario);
        Ok(SimOutput { trace, metrics })
    }
}

/// Compiles and runs `scenario`. On setup failure the partial trace is
/// empty.
pub fn run(scenario: &Scenario) -> Result<SimOutput, Box<SimFailure>> {
    let mut sim = match Simulator::new(scenario) {
        Ok(s) => s,
        Err(error) => {
            return Err(Box::new(SimFailure {
                error,
                partial: Trace {
                    fingerprint: scenario.fingerprint(),
                    n: scenario.n(),
                    p: scenario.p(),
                    dt: scenario.dt,
                    rows: Vec::new(),
                },
            }))
        }
    };
    sim.run()
}

/// Summary statistics for a finished trace.
pub fn metrics_for(trace: &Trace, scenario: &Scenario) -> Metrics {
    let n = trace.n;
    let p = trace.p;
    let min_h1 = trace.min_h1();
    let h1_final = trace.h1_final();
    let theta = &scenario.plant.theta;
    let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err_of = |row: &TraceRow| {
        row.thetahat(n, p)
            .iter()
            .zip(theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let theta_err_initial = trace.rows.first().map(&err_of).unwrap_or(f64::NAN);
    let theta_err_final = trace.rows.last().map(&err_of).unwrap_or(f64::NAN);
    let h1_star = controller::violation_bound(
        &scenario.gains,
        n,
        scenario.theta_err0(),
        BoundMode::for_identifier(scenario.identifier),
    )
    .ok();
    let bound_respected = h1_star.map(|b| min_h1 >= -b - BOUND_TOL);
    let theta_tol = if theta_norm > 0.0 {
        SETTLE_THETA_REL * theta_norm
    } else {
        SETTLE_THETA_REL
    };
    let settled = h1_final.abs() <= SETTLE_H_TOL && theta_err_final <= theta_tol;
    let max_abs_u = trace
        .rows
        .iter()
        .map(|r| r.u.abs())
        .fold(0.0_f64, f64::max);
    Metrics {
        schema_version: 1,
        fingerprint: trace.fingerprint.clone(),
        identifier: scenario.identifier.as_str().to_string(),
        gated: scenario.gated,
        filter: scenario.filter_on,
        n,
        p,
        dt: trace.dt,
        t_end: scenario.t_end,
        steps: trace.rows.len().saturating_sub(1),
        min_h1,
        violation: (-min_h1).max(0.0),
        h1_star,
        bound_respected,
        h1_final,
        theta_err_initial,
        theta_err_final,
        settled,
        max_abs_u,
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders the trace as CSV with the fixed column set
/// `t, x1..xn, thetahat1..thetahatp, h1..hn, u0, ubar, u, active, eps_norm, V`.
/// Rows are taken at indices `0, stride, 2*stride, ...`; floats carry 17
/// significant digits so the file round-trips exactly.
pub fn trace_to_csv(trace: &Trace, stride: usize) -> String {
    let stride = stride.max(1);
    let n = trace.n;
    let p = trace.p;
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for j in 1..=p {
        out.push_str(&format!(",thetahat{j}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",h{i}"));
    }
    out.push_str(",u0,ubar,u,active,eps_norm,V\n");
    for row in trace.rows.iter().step_by(stride) {
        out.push_str(&fmt17(row.t));
        for v in row.x(n) {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        for v in row.thetahat(n, p) {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        for v in &row.h {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        out.push(',');
        out.push_str(&fmt17(row.u0));
        out.push(',');
        out.push_str(&fmt17(row.ubar));
        out.push(',');
        out.push_str(&fmt17(row.u));
        out.push_str(if row.active { ",1" } else { ",0" });
        out.push(',');
        out.push_str(&fmt17(row.eps_norm));
        out.push(',');
        out.push_str(&fmt17(row.v));
        out.push('\n');
    }
    out
}

/// Serializes metrics as pretty JSON with a trailing newline.
pub fn metrics_to_json(metrics: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    s.push('\n');
    s
}

/// Measured trace versus the closed-form guarantees.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub h1_star: f64,
    pub min_h1: f64,
    /// `min_h1 + h1_star`: distance above the certified floor.
    pub lower_margin: f64,
    /// Worst excess of `h1(t)` over the transient ceiling; only meaningful
    /// on unfiltered runs (the override can push `h1` above the cascade
    /// envelope), so `None` when the filter was on.
    pub envelope_excess: Option<f64>,
}

/// Checks the trace against the certified floor `-h1_star` (and, on
/// unfiltered runs, the transient ceiling). The floor check failing is an
/// error; the ceiling excess is reported for inspection.
pub fn compare_bound(trace: &Trace, scenario: &Scenario) -> Result<BoundReport, SimError> {
    let h1_star = controller::violation_bound(
        &scenario.gains,
        trace.n,
        scenario.theta_err0(),
        BoundMode::for_identifier(scenario.identifier),
    )?;
    let min_h1 = trace.min_h1();
    let limit = -h1_star - BOUND_TOL;
    if min_h1 < limit {
        return Err(SimError::BoundViolated { min_h1, limit });
    }
    let envelope_excess = if scenario.filter_on {
        None
    } else {
        let h0 = &trace.rows[0].h;
        let c_min = scenario.gains.c_min();
        let excess = trace
            .rows
            .iter()
            .map(|row| row.h[0] - controller::upper_envelope(c_min, h0, h1_star, row.t))
            .fold(f64::NEG_INFINITY, f64::max);
        Some(excess)
    };
    Ok(BoundReport {
        h1_star,
        min_h1,
        lower_margin: min_h1 + h1_star,
        envelope_excess,
    })
}
