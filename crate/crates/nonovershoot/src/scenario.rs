//! Scenario definition and loading.
//!
//! A scenario bundles everything one simulation run needs: the plant (state
//! dimension `n`, parameter dimension `p`, regressor rows, true parameters),
//! the tracked reference `y_r` and safety boundary `r`, gain settings,
//! initial data, and integration controls. Scenarios are loaded from TOML
//! (see `docs/scenario-format.md`) and validated eagerly, so a `Scenario`
//! value is always internally consistent.
//!
//! Reference derivative chains are produced symbolically at load time: the
//! file supplies `r` and `y_r` as expressions in `t`, and derivatives up to
//! order `n` come from [`crate::expr::Arena::diff`].

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::expr::{Arena, Env, EvalError, ExprId, ParseError, SymbolTable, Var};

#[derive(Error, Debug)]
pub enum ValidationError {
    #[error("{field}: expected length {expected}, got {got}")]
    Dimension {
        field: String,
        expected: usize,
        got: usize,
    },
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: String, value: f64 },
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: String, value: f64 },
    #[error("{field} must be finite, got {value}")]
    NonFinite { field: String, value: f64 },
    #[error("{field}: {source}")]
    Expr { field: String, source: ParseError },
    #[error("{field}: {source}")]
    Eval { field: String, source: EvalError },
    #[error("plant.phi row {row} uses `{var}`, outside the strict-feedback scope x1..x{row}")]
    StrictFeedback { row: usize, var: String },
    #[error("initial boundary clearance h1(0) = x1(0) - r(0) must be >= 0, got {value}")]
    H1Negative { value: f64 },
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
}

#[derive(Error, Debug)]
pub enum LoadError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("TOML parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Which parameter-update scheme drives the estimate.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentifierKind {
    HPassive,
    HSwapping,
    XPassive,
    XSwapping,
}

impl IdentifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IdentifierKind::HPassive => "h-passive",
            IdentifierKind::HSwapping => "h-swapping",
            IdentifierKind::XPassive => "x-passive",
            IdentifierKind::XSwapping => "x-swapping",
        }
    }

    pub fn is_swapping(self) -> bool {
        matches!(self, IdentifierKind::HSwapping | IdentifierKind::XSwapping)
    }

    pub fn is_x_form(self) -> bool {
        matches!(self, IdentifierKind::XPassive | IdentifierKind::XSwapping)
    }
}

/// Strict-feedback plant: `dx_i = x_{i+1} + phi_i(x1..xi)·theta` for `i < n`,
/// `dx_n = u + phi_n(x)·theta`, output `y = x1`.
#[derive(Clone, Debug)]
pub struct Plant {
    pub n: usize,
    pub p: usize,
    pub arena: Arena,
    /// `phi[i-1][j-1]` is component `j` of the row-`i` regressor.
    pub phi: Vec<Vec<ExprId>>,
    /// True parameter vector; hidden from the controller, used by the plant
    /// integrator and for estimation-error reporting.
    pub theta: Vec<f64>,
}

impl Plant {
    /// Fills `out` (p×n) with the regressor matrix at `x`: column `i` is
    /// `phi_i(x)`.
    pub fn phi_matrix(
        &self,
        x: &[f64],
        scratch: &mut Vec<f64>,
        out: &mut DMatrix<f64>,
    ) -> Result<(), EvalError> {
        debug_assert_eq!(out.nrows(), self.p);
        debug_assert_eq!(out.ncols(), self.n);
        let env = Env {
            t: 0.0,
            x,
            thetahat: &[],
            refs: &[],
        };
        self.arena.eval_all(&env, scratch)?;
        for i in 0..self.n {
            for j in 0..self.p {
                out[(j, i)] = scratch[self.phi[i][j].index()];
            }
        }
        Ok(())
    }

    /// Control-affine split `dx = f(x, u) + F(x)^T theta` with
    /// `f = (x2, ..., xn, u)`. Allocating convenience wrapper.
    pub fn split(&self, x: &[f64], u: f64) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
        let mut f = DVector::zeros(self.n);
        drift_into(x, u, &mut f);
        let mut big_f = DMatrix::zeros(self.p, self.n);
        let mut scratch = Vec::new();
        self.phi_matrix(x, &mut scratch, &mut big_f)?;
        Ok((f, big_f))
    }
}

/// Fills `out` with the parameter-free drift `f(x, u) = (x2, ..., xn, u)`.
pub fn drift_into(x: &[f64], u: f64, out: &mut DVector<f64>) {
    let n = x.len();
    for i in 0..n - 1 {
        out[i] = x[i + 1];
    }
    out[n - 1] = u;
}

/// Safety boundary `r` and tracked reference `y_r`, each with symbolic
/// derivatives up to order `n`.
#[derive(Clone, Debug)]
pub struct Reference {
    pub arena: Arena,
    /// `r[k]` is the k-th derivative of the boundary signal.
    pub r: Vec<ExprId>,
    /// `yr[k]` is the k-th derivative of the tracked reference.
    pub yr: Vec<ExprId>,
}

impl Reference {
    /// Evaluates both derivative chains at `t` in one arena pass.
    pub fn sample(
        &self,
        t: f64,
        scratch: &mut Vec<f64>,
        r_out: &mut [f64],
        yr_out: &mut [f64],
    ) -> Result<(), EvalError> {
        debug_assert_eq!(r_out.len(), self.r.len());
        debug_assert_eq!(yr_out.len(), self.yr.len());
        let env = Env {
            t,
            x: &[],
            thetahat: &[],
            refs: &[],
        };
        self.arena.eval_all(&env, scratch)?;
        for (k, id) in self.r.iter().enumerate() {
            r_out[k] = scratch[id.index()];
        }
        for (k, id) in self.yr.iter().enumerate() {
            yr_out[k] = scratch[id.index()];
        }
        Ok(())
    }

    /// Allocating convenience: `(r derivatives, y_r derivatives)` at `t`.
    pub fn sample_vec(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
        let mut scratch = Vec::new();
        let mut r = vec![0.0; self.r.len()];
        let mut yr = vec![0.0; self.yr.len()];
        self.sample(t, &mut scratch, &mut r, &mut yr)?;
        Ok((r, yr))
    }
}

/// Gain settings for the override controller and identifier.
#[derive(Clone, Debug)]
pub struct Gains {
    /// Per-stage linear gains `c_i`, all positive.
    pub c: Vec<f64>,
    /// Per-stage damping weights `kappa_i`, all positive.
    pub kappa: Vec<f64>,
    /// Per-stage damping weights `g_i`; `g_1` is accepted but inert.
    pub g: Vec<f64>,
    /// Observer injection gain.
    pub sigma: f64,
    /// Adaptation gain (scalar `Gamma = gamma * I`).
    pub gamma: f64,
    /// Normalization weight for swapping identifiers (0 disables the
    /// associated disturbance bounds).
    pub nu: f64,
    /// Backup-controller gains `k_i`.
    pub k_nominal: Vec<f64>,
}

impl Gains {
    pub fn c_min(&self) -> f64 {
        self.c.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn kappa_min(&self) -> f64 {
        self.kappa.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Minimum of `g_2..g_n`; `g_1` never enters any bound. For `n = 1`
    /// there is no such gain and the result is infinite.
    pub fn g_min(&self) -> f64 {
        self.g[1..].iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// A fully validated simulation scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub plant: Plant,
    pub reference: Reference,
    pub gains: Gains,
    pub x0: Vec<f64>,
    pub thetahat0: Vec<f64>,
    pub identifier: IdentifierKind,
    /// When true, the parameter update is switched off while the backup
    /// controller holds the input (`ubar < u0`).
    pub gated: bool,
    /// When true, the applied input is `max(ubar, u0)`; otherwise `ubar`.
    pub filter_on: bool,
    pub t_end: f64,
    pub dt: f64,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.plant.n
    }

    pub fn p(&self) -> usize {
        self.plant.p
    }

    /// Number of fixed integration steps covering `[0, t_end]`.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }

    /// Initial parameter error magnitude `|theta - thetahat(0)|`.
    pub fn theta_err0(&self) -> f64 {
        self.plant
            .theta
            .iter()
            .zip(&self.thetahat0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn from_file(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, LoadError> {
        let file: ScenarioFile = toml::from_str(text)?;
        Ok(build(file)?)
    }

    /// Stable 64-bit digest of every number and expression that affects the
    /// trajectory. Written into traces and metrics so outputs can be matched
    /// to the exact configuration that produced them.
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let _ = write!(s, "v1;n={};p={}", self.n(), self.p());
        for row in &self.plant.phi {
            s.push(';');
            for (j, e) in row.iter().enumerate() {
                if j > 0 {
                    s.push('|');
                }
                s.push_str(&self.plant.arena.to_text(*e));
            }
        }
        push_f64s(&mut s, "theta", &self.plant.theta);
        let _ = write!(s, ";r={}", self.reference.arena.to_text(self.reference.r[0]));
        let _ = write!(s, ";yr={}", self.reference.arena.to_text(self.reference.yr[0]));
        push_f64s(&mut s, "c", &self.gains.c);
        push_f64s(&mut s, "kappa", &self.gains.kappa);
        push_f64s(&mut s, "g", &self.gains.g);
        push_f64s(&mut s, "sigma", &[self.gains.sigma]);
        push_f64s(&mut s, "gamma", &[self.gains.gamma]);
        push_f64s(&mut s, "nu", &[self.gains.nu]);
        push_f64s(&mut s, "k", &self.gains.k_nominal);
        push_f64s(&mut s, "x0", &self.x0);
        push_f64s(&mut s, "thetahat0", &self.thetahat0);
        let _ = write!(
            s,
            ";id={};gated={};filter={}",
            self.identifier.as_str(),
            u8::from(self.gated),
            u8::from(self.filter_on)
        );
        push_f64s(&mut s, "dt", &[self.dt]);
        push_f64s(&mut s, "t_end", &[self.t_end]);
        format!("{:016x}", fnv1a64(s.as_bytes()))
    }
}

fn push_f64s(s: &mut String, label: &str, vals: &[f64]) {
    use std::fmt::Write as _;
    let _ = write!(s, ";{label}=");
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{:016x}", v.to_bits());
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    plant: PlantFile,
    reference: ReferenceFile,
    gains: GainsFile,
    init: InitFile,
    sim: SimFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantFile {
    n: usize,
    p: usize,
    phi: Vec<Vec<String>>,
    theta: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    r: String,
    y_r: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GainsFile {
    c: Vec<f64>,
    kappa: Vec<f64>,
    g: Vec<f64>,
    sigma: f64,
    gamma: f64,
    #[serde(default)]
    nu: f64,
    k_nominal: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InitFile {
    x0: Vec<f64>,
    thetahat0: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimFile {
    identifier: IdentifierKind,
    gated: Option<bool>,
    filter: Option<bool>,
    t_end: Option<f64>,
    dt: Option<f64>,
}

fn check_len(field: &str, expected: usize, got: usize) -> Result<(), ValidationError> {
    if expected != got {
        return Err(ValidationError::Dimension {
            field: field.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn check_finite(field: &str, vals: &[f64]) -> Result<(), ValidationError> {
    for (i, &v) in vals.iter().enumerate() {
        if !v.is_finite() {
            return Err(ValidationError::NonFinite {
                field: format!("{field}[{}]", i + 1),
                value: v,
            });
        }
    }
    Ok(())
}

fn check_positive(field: &str, vals: &[f64]) -> Result<(), ValidationError> {
    for (i, &v) in vals.iter().enumerate() {
        if !(v > 0.0) {
            return Err(ValidationError::NonPositive {
                field: format!("{field}[{}]", i + 1),
                value: v,
            });
        }
    }
    Ok(())
}

fn check_finite_scalar(field: &str, v: f64) -> Result<(), ValidationError> {
    if !v.is_finite() {
        return Err(ValidationError::NonFinite {
            field: field.to_string(),
            value: v,
        });
    }
    Ok(())
}

fn check_positive_scalar(field: &str, v: f64) -> Result<(), ValidationError> {
    if !(v > 0.0) {
        return Err(ValidationError::NonPositive {
            field: field.to_string(),
            value: v,
        });
    }
    Ok(())
}

fn build(file: ScenarioFile) -> Result<Scenario, ValidationError> {
    let n = file.plant.n;
    let p = file.plant.p;
    if n == 0 {
        return Err(ValidationError::Invalid {
            field: "plant.n".to_string(),
            msg: "state dimension must be at least 1".to_string(),
        });
    }
    if p == 0 {
        return Err(ValidationError::Invalid {
            field: "plant.p".to_string(),
            msg: "parameter dimension must be at least 1".to_string(),
        });
    }

    check_len("plant.phi", n, file.plant.phi.len())?;
    for (i, row) in file.plant.phi.iter().enumerate() {
        check_len(&format!("plant.phi[{}]", i + 1), p, row.len())?;
    }
    check_len("plant.theta", p, file.plant.theta.len())?;
    check_len("init.x0", n, file.init.x0.len())?;
    check_len("init.thetahat0", p, file.init.thetahat0.len())?;
    check_len("gains.c", n, file.gains.c.len())?;
    check_len("gains.kappa", n, file.gains.kappa.len())?;
    check_len("gains.g", n, file.gains.g.len())?;
    let k_nominal = file.gains.k_nominal.unwrap_or_else(|| vec![2.0; n]);
    check_len("gains.k_nominal", n, k_nominal.len())?;

    check_finite("plant.theta", &file.plant.theta)?;
    check_finite("init.x0", &file.init.x0)?;
    check_finite("init.thetahat0", &file.init.thetahat0)?;
    check_finite("gains.c", &file.gains.c)?;
    check_finite("gains.kappa", &file.gains.kappa)?;
    check_finite("gains.g", &file.gains.g)?;
    check_finite("gains.k_nominal", &k_nominal)?;
    check_finite_scalar("gains.sigma", file.gains.sigma)?;
    check_finite_scalar("gains.gamma", file.gains.gamma)?;
    check_finite_scalar("gains.nu", file.gains.nu)?;

    check_positive("gains.c", &file.gains.c)?;
    check_positive("gains.kappa", &file.gains.kappa)?;
    check_positive("gains.k_nominal", &k_nominal)?;
    // g_1 multiplies a gradient that is identically zero, so only g_2..g_n
    // must be positive.
    for (i, &v) in file.gains.g.iter().enumerate().skip(1) {
        if !(v > 0.0) {
            return Err(ValidationError::NonPositive {
                field: format!("gains.g[{}]", i + 1),
                value: v,
            });
        }
    }
    if file.gains.g[0] < 0.0 {
        return Err(ValidationError::Negative {
            field: "gains.g[1]".to_string(),
            value: file.gains.g[0],
        });
    }
    check_positive_scalar("gains.sigma", file.gains.sigma)?;
    check_positive_scalar("gains.gamma", file.gains.gamma)?;
    if file.gains.nu < 0.0 {
        return Err(ValidationError::Negative {
            field: "gains.nu".to_string(),
            value: file.gains.nu,
        });
    }

    let dt = file.sim.dt.unwrap_or(1e-3);
    let t_end = file.sim.t_end.unwrap_or(30.0);
    check_finite_scalar("sim.dt", dt)?;
    check_finite_scalar("sim.t_end", t_end)?;
    check_positive_scalar("sim.dt", dt)?;
    check_positive_scalar("sim.t_end", t_end)?;
    if dt > t_end {
        return Err(ValidationError::Invalid {
            field: "sim.dt".to_string(),
            msg: format!("dt = {dt} exceeds t_end = {t_end}"),
        });
    }

    // Parse regressor rows against the full state table, then enforce the
    // strict-feedback scope per row so the error names the offending symbol.
    let mut plant_arena = Arena::default();
    let state_table = SymbolTable::plant_row(n);
    let mut phi = Vec::with_capacity(n);
    for (i, row) in file.plant.phi.iter().enumerate() {
        let mut ids = Vec::with_capacity(p);
        for (j, text) in row.iter().enumerate() {
            let id = plant_arena
                .parse(text, &state_table)
                .map_err(|source| ValidationError::Expr {
                    field: format!("plant.phi[{}][{}]", i + 1, j + 1),
                    source,
                })?;
            let scope: BTreeSet<Var> = (1..=i + 1).map(|k| Var::X(k as u32)).collect();
            for v in plant_arena.free_vars(id) {
                if !scope.contains(&v) {
                    return Err(ValidationError::StrictFeedback {
                        row: i + 1,
                        var: v.name(),
                    });
                }
            }
            ids.push(id);
        }
        phi.push(ids);
    }

    let mut ref_arena = Arena::default();
    let time_table = SymbolTable::time_only();
    let r0 = ref_arena
        .parse(&file.reference.r, &time_table)
        .map_err(|source| ValidationError::Expr {
            field: "reference.r".to_string(),
            source,
        })?;
    let yr0 = ref_arena
        .parse(&file.reference.y_r, &time_table)
        .map_err(|source| ValidationError::Expr {
            field: "reference.y_r".to_string(),
            source,
        })?;
    let mut r = vec![r0];
    let mut yr = vec![yr0];
    for k in 0..n {
        let dr = ref_arena
            .diff(r[k], Var::T)
            .map_err(|source| ValidationError::Expr {
                field: format!("reference.r derivative {}", k + 1),
                source: ParseError::Budget(source),
            })?;
        r.push(dr);
        let dyr = ref_arena
            .diff(yr[k], Var::T)
            .map_err(|source| ValidationError::Expr {
                field: format!("reference.y_r derivative {}", k + 1),
                source: ParseError::Budget(source),
            })?;
        yr.push(dyr);
    }

    let plant = Plant {
        n,
        p,
        arena: plant_arena,
        phi,
        theta: file.plant.theta,
    };
    let reference = Reference {
        arena: ref_arena,
        r,
        yr,
    };

    // Surface reference-domain problems at t = 0 now rather than mid-run,
    // and enforce the always-on initial clearance requirement.
    let (r_at0, _yr_at0) =
        reference
            .sample_vec(0.0)
            .map_err(|source| ValidationError::Eval {
                field: "reference".to_string(),
                source,
            })?;
    let h1_0 = file.init.x0[0] - r_at0[0];
    if h1_0 < -1e-12 {
        return Err(ValidationError::H1Negative { value: h1_0 });
    }

    let identifier = file.sim.identifier;
    let filter_on = file.sim.filter.unwrap_or(false);
    let gated = file
        .sim
        .gated
        .unwrap_or(identifier == IdentifierKind::HPassive && filter_on);

    Ok(Scenario {
        plant,
        reference,
        gains: Gains {
            c: file.gains.c,
            kappa: file.gains.kappa,
            g: file.gains.g,
            sigma: file.gains.sigma,
            gamma: file.gains.gamma,
            nu: file.gains.nu,
            k_nominal,
        },
        x0: file.init.x0,
        thetahat0: file.init.thetahat0,
        identifier,
        gated,
        filter_on,
        t_end,
        dt,
    })
}
