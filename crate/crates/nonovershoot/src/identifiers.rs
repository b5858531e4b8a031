//! Parameter identifiers.
//!
//! Four schemes, two per coordinate system. Clearance-coordinate (`h`)
//! schemes observe the cascade `dh/dt = A h + W^T thetatilde + Q^T dthetahat/dt`
//! produced by the override controller; state-coordinate (`x`) schemes work
//! on `dx/dt = f(x, u) + F^T theta` directly and are insensitive to which
//! input is applied.
//!
//! | Scheme      | Auxiliary state        | Prescribed start          | Update law                          |
//! |-------------|------------------------|---------------------------|-------------------------------------|
//! | h-passive   | observer `hhat` (n)    | `hhat(0) = h(0)`          | `gamma W P eps`                     |
//! | h-swapping  | `Omega` (p×n), `omega0` (n) | `Omega(0) = 0`, `omega0(0) = -h(0)` | `gamma Omega eps / (1 + nu |Omega|^2)` |
//! | x-passive   | observer `xhat` (n)    | `xhat(0) = x(0)`          | `gamma F P eps`                     |
//! | x-swapping  | `Omega` (p×n), `omega0` (n) | `Omega(0) = 0`, `omega0(0) = -x(0)` | `gamma Omega eps / (1 + nu |Omega|^2)` |
//!
//! With the prescribed starts the swapping prediction error is exactly
//! `eps = Omega^T thetatilde` (no exponentially-decaying tail), and every
//! scheme keeps `|thetatilde(t)| <= |thetatilde(0)|`.
//!
//! Auxiliary state is packed into a flat slice: swapping schemes store
//! `Omega` column-major (p×n) followed by `omega0`.

use nalgebra::{DMatrix, DVector};

use crate::scenario::{Gains, IdentifierKind};

/// Length of the packed auxiliary state for `kind`.
pub fn aux_len(kind: IdentifierKind, n: usize, p: usize) -> usize {
    match kind {
        IdentifierKind::HPassive | IdentifierKind::XPassive => n,
        IdentifierKind::HSwapping | IdentifierKind::XSwapping => p * n + n,
    }
}

/// Writes the prescribed initial auxiliary state.
pub fn init_aux(
    kind: IdentifierKind,
    n: usize,
    p: usize,
    h0: &DVector<f64>,
    x0: &[f64],
    out: &mut Vec<f64>,
) {
    out.clear();
    match kind {
        IdentifierKind::HPassive => out.extend(h0.iter()),
        IdentifierKind::XPassive => out.extend_from_slice(x0),
        IdentifierKind::HSwapping => {
            out.resize(p * n, 0.0);
            out.extend(h0.iter().map(|v| -v));
        }
        IdentifierKind::XSwapping => {
            out.resize(p * n, 0.0);
            out.extend(x0.iter().map(|v| -v));
        }
    }
}

fn omega_parts(aux: &[f64], n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let omega = DMatrix::from_column_slice(p, n, &aux[..p * n]);
    let omega0 = DVector::from_column_slice(&aux[p * n..]);
    (omega, omega0)
}

/// Prediction error `eps` for the scheme.
pub fn epsilon(
    kind: IdentifierKind,
    n: usize,
    p: usize,
    aux: &[f64],
    h: &DVector<f64>,
    x: &[f64],
    thetahat: &DVector<f64>,
) -> DVector<f64> {
    match kind {
        IdentifierKind::HPassive => h - DVector::from_column_slice(aux),
        IdentifierKind::XPassive => {
            DVector::from_column_slice(x) - DVector::from_column_slice(aux)
        }
        IdentifierKind::HSwapping => {
            let (omega, omega0) = omega_parts(aux, n, p);
            h + omega0 - omega.transpose() * thetahat
        }
        IdentifierKind::XSwapping => {
            let (omega, omega0) = omega_parts(aux, n, p);
            DVector::from_column_slice(x) + omega0 - omega.transpose() * thetahat
        }
    }
}

/// Update law. `reg` is `W` for h-schemes and `F` for x-schemes (p×n).
/// Returns zero when `gate_on` is false.
pub fn theta_dot(
    kind: IdentifierKind,
    gains: &Gains,
    reg: &DMatrix<f64>,
    p_mat: &DMatrix<f64>,
    eps: &DVector<f64>,
    aux: &[f64],
    n: usize,
    p: usize,
    gate_on: bool,
) -> DVector<f64> {
    if !gate_on {
        return DVector::zeros(p);
    }
    match kind {
        IdentifierKind::HPassive | IdentifierKind::XPassive => {
            gains.gamma * (reg * (p_mat * eps))
        }
        IdentifierKind::HSwapping | IdentifierKind::XSwapping => {
            let (omega, _) = omega_parts(aux, n, p);
            let norm2: f64 = omega.iter().map(|v| v * v).sum();
            (gains.gamma / (1.0 + gains.nu * norm2)) * (omega * eps)
        }
    }
}

/// Per-evaluation inputs for the auxiliary dynamics.
pub struct AuxInputs<'a> {
    /// Clearance-cascade matrix at the current point (diag `-s_i`, unit
    /// superdiagonal).
    pub a: &'a DMatrix<f64>,
    pub w: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    /// Constant-gain matrix for x-schemes.
    pub a0: &'a DMatrix<f64>,
    pub f_mat: &'a DMatrix<f64>,
    pub f_vec: &'a DVector<f64>,
    pub p_mat: &'a DMatrix<f64>,
    pub h: &'a DVector<f64>,
    pub x: &'a DVector<f64>,
    pub thetahat: &'a DVector<f64>,
    pub theta_dot: &'a DVector<f64>,
    pub eps: &'a DVector<f64>,
    pub sigma: f64,
}

/// Time derivative of the packed auxiliary state.
pub fn aux_deriv(kind: IdentifierKind, inp: &AuxInputs, aux: &[f64], out: &mut Vec<f64>) {
    let n = inp.x.len();
    let p = inp.thetahat.len();
    out.clear();
    match kind {
        IdentifierKind::HPassive => {
            // dhhat = A hhat + sigma W^T W P eps + Q^T dthetahat
            let hhat = DVector::from_column_slice(aux);
            let d = inp.a * hhat
                + inp.sigma * (inp.w.transpose() * (inp.w * (inp.p_mat * inp.eps)))
                + inp.q.transpose() * inp.theta_dot;
            out.extend(d.iter());
        }
        IdentifierKind::XPassive => {
            // dxhat = (A0 - sigma F^T F P)(xhat - x) + f + F^T thetahat
            let xhat = DVector::from_column_slice(aux);
            let diff = &xhat - inp.x;
            let d = inp.a0 * &diff - inp.sigma * (inp.f_mat.transpose() * (inp.f_mat * (inp.p_mat * &diff)))
                + inp.f_vec
                + inp.f_mat.transpose() * inp.thetahat;
            out.extend(d.iter());
        }
        IdentifierKind::HSwapping => {
            // dOmega = Omega A^T + W ; domega0 = A omega0 + W^T thetahat - Q^T dthetahat
            let (omega, omega0) = omega_parts(aux, n, p);
            let domega = &omega * inp.a.transpose() + inp.w;
            let domega0 =
                inp.a * omega0 + inp.w.transpose() * inp.thetahat - inp.q.transpose() * inp.theta_dot;
            out.extend(domega.iter());
            out.extend(domega0.iter());
        }
        IdentifierKind::XSwapping => {
            // M = A0 - sigma F^T F P ; dOmega = Omega M^T + F ;
            // domega0 = M (omega0 + x) - f
            let (omega, omega0) = omega_parts(aux, n, p);
            let m = inp.a0 - inp.sigma * (inp.f_mat.transpose() * (inp.f_mat * inp.p_mat));
            let domega = &omega * m.transpose() + inp.f_mat;
            let domega0 = &m * (omega0 + inp.x) - inp.f_vec;
            out.extend(domega.iter());
            out.extend(domega0.iter());
        }
    }
}

/// Certificate value along the run: `eps^T P eps + |thetatilde|^2 / gamma`
/// for the passive schemes; the swapping schemes use the filtered error
/// `eps - Omega^T thetatilde` in place of `eps`.
pub fn certificate(
    kind: IdentifierKind,
    gains: &Gains,
    p_mat: &DMatrix<f64>,
    eps: &DVector<f64>,
    aux: &[f64],
    n: usize,
    p: usize,
    theta_err: &DVector<f64>,
) -> f64 {
    let core = match kind {
        IdentifierKind::HPassive | IdentifierKind::XPassive => eps.clone(),
        IdentifierKind::HSwapping | IdentifierKind::XSwapping => {
            let (omega, _) = omega_parts(aux, n, p);
            eps - omega.transpose() * theta_err
        }
    };
    (core.transpose() * p_mat * &core)[(0, 0)] + theta_err.norm_squared() / gains.gamma
}
