//! Override-controller synthesis.
//!
//! Compilation walks the backstepping recursion once, symbolically, and
//! leaves behind a closed-form expression graph for the clearance
//! coordinates `h_i`, the damped stage gains `s_i`, the filtered regressors
//! `w_i`, the estimate-sensitivity columns of `Q`, and the certified input
//! `ubar`:
//!
//! ```text
//! h_1 = x1 - r
//! h_{i+1} = x_{i+1} - alpha_i - r^(i)
//! w_i = phi_i - sum_{j<i} (d alpha_{i-1} / d x_j) phi_j
//! s_i = c_i + kappa_i |w_i|^2 + g_i |d alpha_{i-1} / d thetahat|^2
//! alpha_i = -s_i h_i - w_i·thetahat
//!           + sum_{k<i} [(d alpha_{i-1}/d x_k) x_{k+1} + (d alpha_{i-1}/d r^(k-1)) r^(k)]
//! ubar = alpha_n + r^(n)
//! ```
//!
//! All partial derivatives are exact symbolic derivatives; nothing is
//! approximated at runtime. `ubar` depends only on the state, the estimate,
//! and reference derivatives: the recursion replaces the estimate's time
//! derivative with damping, so no update-law feedthrough appears.
//!
//! Along trajectories the clearances obey
//! `dh/dt = A(x) h + e_n (u - ubar) + W^T thetatilde + Q^T dthetahat/dt`
//! with `A` upper bidiagonal (diagonal `-s_i`, unit superdiagonal), which is
//! what the identifier observers in [`crate::identifiers`] integrate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{Arena, BudgetError, Env, EvalError, ExprId, Var, DEFAULT_NODE_BUDGET};
use crate::scenario::{Gains, IdentifierKind, Plant, Scenario};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CompileError {
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("gain vector `{name}` has length {got}, expected n = {n}")]
    GainLength {
        name: &'static str,
        n: usize,
        got: usize,
    },
}

/// Compiled controller: expression graph plus the handles needed to read
/// every published quantity out of one evaluation pass.
#[derive(Clone, Debug)]
pub struct ControllerGraph {
    pub n: usize,
    pub p: usize,
    pub arena: Arena,
    /// `h[i-1]` is the clearance coordinate `h_i`.
    pub h: Vec<ExprId>,
    /// `s[i-1]` is the damped stage gain `s_i`.
    pub s: Vec<ExprId>,
    /// `w[i-1][j-1]` is component `j` of the filtered regressor `w_i`.
    pub w: Vec<Vec<ExprId>>,
    /// `alpha[i-1]` is the stage-`i` virtual control.
    pub alpha: Vec<ExprId>,
    /// `dalpha_dx[i-1][k-1]` is `d alpha_i / d x_k` for `i = 1..n-1`.
    pub dalpha_dx: Vec<Vec<ExprId>>,
    /// `dalpha_dref[i-1][k]` is `d alpha_i / d r^(k)` for `i = 1..n-1`.
    pub dalpha_dref: Vec<Vec<ExprId>>,
    /// `dalpha_dth[i-1][j-1]` is `d alpha_i / d thetahat_j` for `i = 1..n-1`.
    pub dalpha_dth: Vec<Vec<ExprId>>,
    pub ubar: ExprId,
}

/// Everything the simulator reads per evaluation point.
#[derive(Clone, Debug)]
pub struct ControllerEval {
    pub h: DVector<f64>,
    pub s: Vec<f64>,
    /// p×n, column `i` is `w_i`.
    pub w: DMatrix<f64>,
    /// p×n, column `i` is `-(d alpha_{i-1} / d thetahat)^T` (column 1 zero).
    pub q: DMatrix<f64>,
    /// n×n closed-loop clearance matrix: diagonal `-s_i`, unit superdiagonal.
    pub a: DMatrix<f64>,
    pub ubar: f64,
}

impl ControllerEval {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            h: DVector::zeros(n),
            s: vec![0.0; n],
            w: DMatrix::zeros(p, n),
            q: DMatrix::zeros(p, n),
            a: DMatrix::zeros(n, n),
            ubar: 0.0,
        }
    }
}

/// Compiles the controller for `plant` under `gains`.
pub fn compile(plant: &Plant, gains: &Gains, budget: usize) -> Result<ControllerGraph, CompileError> {
    let n = plant.n;
    let p = plant.p;
    for (name, len) in [
        ("c", gains.c.len()),
        ("kappa", gains.kappa.len()),
        ("g", gains.g.len()),
    ] {
        if len != n {
            return Err(CompileError::GainLength { name, n, got: len });
        }
    }

    let mut arena = Arena::new(budget);
    let mut phi = Vec::with_capacity(n);
    for row in &plant.phi {
        let mut ids = Vec::with_capacity(p);
        for &e in row {
            ids.push(arena.import(&plant.arena, e)?);
        }
        phi.push(ids);
    }
    let xv: Vec<ExprId> = (1..=n)
        .map(|i| arena.var(Var::X(i as u32)))
        .collect::<Result<_, _>>()?;
    let rv: Vec<ExprId> = (0..=n)
        .map(|k| arena.var(Var::Ref(k as u32)))
        .collect::<Result<_, _>>()?;
    let th: Vec<ExprId> = (1..=p)
        .map(|j| arena.var(Var::ThetaHat(j as u32)))
        .collect::<Result<_, _>>()?;

    let mut h = vec![arena.sub(xv[0], rv[0])?];
    let mut s = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut dalpha_dx: Vec<Vec<ExprId>> = Vec::new();
    let mut dalpha_dref: Vec<Vec<ExprId>> = Vec::new();
    let mut dalpha_dth: Vec<Vec<ExprId>> = Vec::new();

    for i in 1..=n {
        let mut w_i = Vec::with_capacity(p);
        for j in 0..p {
            let mut acc = phi[i - 1][j];
            for k in 1..i {
                let prod = arena.mul(dalpha_dx[i - 2][k - 1], phi[k - 1][j])?;
                acc = arena.sub(acc, prod)?;
            }
            w_i.push(acc);
        }

        let mut s_i = arena.constant(gains.c[i - 1])?;
        let mut w_sq = Vec::with_capacity(p);
        for &wj in &w_i {
            w_sq.push(arena.powint(wj, 2)?);
        }
        let w_norm2 = arena.sum(&w_sq)?;
        let kappa_c = arena.constant(gains.kappa[i - 1])?;
        let damp_w = arena.mul(kappa_c, w_norm2)?;
        s_i = arena.add(s_i, damp_w)?;
        if i >= 2 {
            let mut g_sq = Vec::with_capacity(p);
            for &dj in &dalpha_dth[i - 2] {
                g_sq.push(arena.powint(dj, 2)?);
            }
            let g_norm2 = arena.sum(&g_sq)?;
            let g_c = arena.constant(gains.g[i - 1])?;
            let damp_g = arena.mul(g_c, g_norm2)?;
            s_i = arena.add(s_i, damp_g)?;
        }

        let mut chain = arena.constant(0.0)?;
        for k in 1..i {
            let tx = arena.mul(dalpha_dx[i - 2][k - 1], xv[k])?;
            chain = arena.add(chain, tx)?;
            let tr = arena.mul(dalpha_dref[i - 2][k - 1], rv[k])?;
            chain = arena.add(chain, tr)?;
        }

        let sh = arena.mul(s_i, h[i - 1])?;
        let neg_sh = arena.neg(sh)?;
        let mut wth_terms = Vec::with_capacity(p);
        for j in 0..p {
            wth_terms.push(arena.mul(w_i[j], th[j])?);
        }
        let wth = arena.sum(&wth_terms)?;
        let head = arena.sub(neg_sh, wth)?;
        let a_i = arena.add(head, chain)?;

        s.push(s_i);
        w.push(w_i);
        alpha.push(a_i);

        if i < n {
            let dx: Vec<ExprId> = (1..=i)
                .map(|k| arena.diff(a_i, Var::X(k as u32)))
                .collect::<Result<_, _>>()?;
            let dref: Vec<ExprId> = (0..i)
                .map(|k| arena.diff(a_i, Var::Ref(k as u32)))
                .collect::<Result<_, _>>()?;
            let dth: Vec<ExprId> = (1..=p)
                .map(|j| arena.diff(a_i, Var::ThetaHat(j as u32)))
                .collect::<Result<_, _>>()?;
            dalpha_dx.push(dx);
            dalpha_dref.push(dref);
            dalpha_dth.push(dth);
            let x_next = arena.sub(xv[i], a_i)?;
            h.push(arena.sub(x_next, rv[i])?);
        }
    }

    let ubar = arena.add(alpha[n - 1], rv[n])?;

    Ok(ControllerGraph {
        n,
        p,
        arena,
        h,
        s,
        w,
        alpha,
        dalpha_dx,
        dalpha_dref,
        dalpha_dth,
        ubar,
    })
}

/// Compiles with the default node budget.
pub fn compile_for(scenario: &Scenario) -> Result<ControllerGraph, CompileError> {
    compile(&scenario.plant, &scenario.gains, DEFAULT_NODE_BUDGET)
}

impl ControllerGraph {
    /// One arena pass; fills `out` with every published quantity.
    pub fn evaluate(
        &self,
        x: &[f64],
        thetahat: &[f64],
        refs: &[f64],
        scratch: &mut Vec<f64>,
        out: &mut ControllerEval,
    ) -> Result<(), EvalError> {
        let env = Env {
            t: 0.0,
            x,
            thetahat,
            refs,
        };
        self.arena.eval_all(&env, scratch)?;
        for i in 0..self.n {
            out.h[i] = scratch[self.h[i].index()];
            out.s[i] = scratch[self.s[i].index()];
            for j in 0..self.p {
                out.w[(j, i)] = scratch[self.w[i][j].index()];
                out.q[(j, i)] = if i == 0 {
                    0.0
                } else {
                    -scratch[self.dalpha_dth[i - 1][j].index()]
                };
            }
            out.a[(i, i)] = -out.s[i];
            if i + 1 < self.n {
                out.a[(i, i + 1)] = 1.0;
            }
        }
        out.ubar = scratch[self.ubar.index()];
        Ok(())
    }

    /// Allocating convenience wrapper around [`Self::evaluate`].
    pub fn evaluate_at(
        &self,
        x: &[f64],
        thetahat: &[f64],
        refs: &[f64],
    ) -> Result<ControllerEval, EvalError> {
        let mut scratch = Vec::new();
        let mut out = ControllerEval::zeros(self.n, self.p);
        self.evaluate(x, thetahat, refs, &mut scratch, &mut out)?;
        Ok(out)
    }
}

/// Smallest `c_i` keeping the next clearance non-negative at `t = 0`.
#[derive(Clone, Copy, Debug)]
pub struct FloorEntry {
    /// Stage index, 1-based.
    pub i: usize,
    pub floor: f64,
    /// Set when `|h_i(0)|` is too small to divide by; the floor is then
    /// reported as 0 and any positive `c_i` is acceptable.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub enum FloorViolation {
    /// `c_i` is below the required initial-condition floor.
    BelowFloor { i: usize, c: f64, floor: f64 },
    /// Some initial clearance is negative, so no gain choice can help.
    NegativeInitial { i: usize, h: f64 },
}

/// Outcome of the initial-condition gain check.
#[derive(Clone, Debug)]
pub struct FloorReport {
    /// Floors for stages `1..n-1`; stage `n` needs positivity only.
    pub entries: Vec<FloorEntry>,
    /// Initial clearances `h_i(0)` under the configured gains.
    pub h0: Vec<f64>,
    pub violations: Vec<FloorViolation>,
}

impl FloorReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Threshold below which `h_i(0)` is treated as exactly on the boundary
/// when computing gain floors.
pub const FLOOR_DEGENERATE_EPS: f64 = 1e-9;

/// Evaluates the initial-condition gain floors
///
/// ```text
/// cfloor_i = -[x_{i+1}(0) - r^(i)(0) + w_i(0)·thetahat(0)
///              - sum_{j<i} ((d alpha_{i-1}/d x_j)(0) x_{j+1}(0)
///                           + (d alpha_{i-1}/d r^(j-1))(0) r^(j)(0))] / h_i(0)
/// ```
///
/// for `i = 1..n-1` and checks `c_i >= max(cfloor_i, 0)` together with
/// `h_i(0) >= 0` for every stage.
pub fn gain_floor_report(
    graph: &ControllerGraph,
    scenario: &Scenario,
) -> Result<FloorReport, EvalError> {
    let n = graph.n;
    let p = graph.p;
    let (r0, _) = scenario.reference.sample_vec(0.0)?;
    let env = Env {
        t: 0.0,
        x: &scenario.x0,
        thetahat: &scenario.thetahat0,
        refs: &r0,
    };
    let mut vals = Vec::new();
    graph.arena.eval_all(&env, &mut vals)?;

    let h0: Vec<f64> = graph.h.iter().map(|e| vals[e.index()]).collect();
    let mut entries = Vec::new();
    let mut violations = Vec::new();

    for (i, &h) in h0.iter().enumerate() {
        if h < -FLOOR_DEGENERATE_EPS {
            violations.push(FloorViolation::NegativeInitial { i: i + 1, h });
        }
    }

    for i in 1..n {
        // 1-based stage index i, floor for gain c_i.
        let mut num = scenario.x0[i] - r0[i];
        for j in 0..p {
            num += vals[graph.w[i - 1][j].index()] * scenario.thetahat0[j];
        }
        for j in 1..i {
            num -= vals[graph.dalpha_dx[i - 2][j - 1].index()] * scenario.x0[j];
            num -= vals[graph.dalpha_dref[i - 2][j - 1].index()] * r0[j];
        }
        let h = h0[i - 1];
        let (floor, degenerate) = if h.abs() < FLOOR_DEGENERATE_EPS {
            (0.0, true)
        } else {
            (-num / h, false)
        };
        entries.push(FloorEntry {
            i,
            floor,
            degenerate,
        });
        let c = scenario.gains.c[i - 1];
        if c < floor.max(0.0) {
            violations.push(FloorViolation::BelowFloor { i, c, floor });
        }
    }

    Ok(FloorReport {
        entries,
        h0,
        violations,
    })
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BoundError {
    #[error("swapping bounds require nu > 0")]
    InvalidMode,
}

/// Disturbance model behind a clearance bound.
#[derive(Clone, Copy, Debug)]
pub enum BoundMode {
    /// Both the parameter error and the update rate bounded in magnitude.
    Linf {
        theta_err_sup: f64,
        theta_dot_sup: f64,
    },
    /// Parameter error bounded in magnitude, update rate in energy.
    L2 {
        theta_err_sup: f64,
        theta_dot_l2: f64,
    },
    /// Closed-form guarantees of the matching identifier, driven by the
    /// initial parameter error.
    HPassive,
    HSwapping,
    XPassive,
    XSwapping,
}

impl BoundMode {
    pub fn for_identifier(kind: IdentifierKind) -> Self {
        match kind {
            IdentifierKind::HPassive => BoundMode::HPassive,
            IdentifierKind::HSwapping => BoundMode::HSwapping,
            IdentifierKind::XPassive => BoundMode::XPassive,
            IdentifierKind::XSwapping => BoundMode::XSwapping,
        }
    }
}

/// Geometric-sum amplification `(cbar^n - 1) / (cbar^(n-1) (cbar - 1))`,
/// continuously extended to `n` at `cbar = 1`.
pub fn geo_factor(c_min: f64, n: usize) -> f64 {
    if (c_min - 1.0).abs() < 1e-9 {
        return n as f64;
    }
    (c_min.powi(n as i32) - 1.0) / (c_min.powi(n as i32 - 1) * (c_min - 1.0))
}

/// Worst-case clearance violation `h1star`: along the closed loop,
/// `h_1(t) >= -h1star` for the given disturbance model.
pub fn violation_bound(
    gains: &Gains,
    n: usize,
    theta_err0: f64,
    mode: BoundMode,
) -> Result<f64, BoundError> {
    let c_min = gains.c_min();
    let kappa_min = gains.kappa_min();
    let g_min = gains.g_min();
    let geo = geo_factor(c_min, n);
    let value = match mode {
        BoundMode::Linf {
            theta_err_sup,
            theta_dot_sup,
        } => geo
            * (theta_err_sup / (2.0 * (c_min * kappa_min).sqrt())
                + theta_dot_sup / (2.0 * (c_min * g_min).sqrt())),
        BoundMode::L2 {
            theta_err_sup,
            theta_dot_l2,
        } => geo
            * (theta_err_sup / (2.0 * (c_min * kappa_min).sqrt())
                + theta_dot_l2 / (2.0 * g_min).sqrt()),
        BoundMode::HPassive | BoundMode::XPassive => {
            // theta error stays at its initial magnitude; the update rate has
            // energy gamma/(2 sigma) times the initial squared error.
            let theta_dot_l2 = (gains.gamma / (2.0 * gains.sigma)).sqrt() * theta_err0;
            geo * (theta_err0 / (2.0 * (c_min * kappa_min).sqrt())
                + theta_dot_l2 / (2.0 * g_min).sqrt())
        }
        BoundMode::HSwapping | BoundMode::XSwapping => {
            if gains.nu <= 0.0 {
                return Err(BoundError::InvalidMode);
            }
            let theta_dot_sup = gains.gamma / gains.nu * theta_err0;
            geo * (theta_err0 / (2.0 * (c_min * kappa_min).sqrt())
                + theta_dot_sup / (2.0 * (c_min * g_min).sqrt()))
        }
    };
    Ok(value)
}

/// Transient ceiling from the clearance cascade: for `u = ubar` and the
/// disturbance model behind `h1_star`,
/// `h_1(t) <= exp(-c_min t) sum_i t^(i-1)/(i-1)! h_i(0) + h1_star`.
pub fn upper_envelope(c_min: f64, h0: &[f64], h1_star: f64, t: f64) -> f64 {
    let mut sum = 0.0;
    let mut weight = 1.0; // t^(i-1) / (i-1)!
    for (i, &h) in h0.iter().enumerate() {
        if i > 0 {
            weight *= t / i as f64;
        }
        sum += weight * h;
    }
    (-c_min * t).exp() * sum + h1_star
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geo_factor_is_continuous_at_one() {
        let lim = geo_factor(1.0, 3);
        let near = geo_factor(1.0 + 5e-10, 3);
        assert_eq!(lim, 3.0);
        assert_eq!(near, 3.0);
        let off = geo_factor(1.0 + 1e-6, 3);
        assert!((off - 3.0).abs() < 1e-5);
    }
}
