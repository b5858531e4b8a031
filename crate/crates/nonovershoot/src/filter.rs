//! Backup controller and safety override.
//!
//! The backup (nominal) controller tracks `y_r` by standard backstepping
//! with the true parameters baked in as constants; it is the
//! performance-oriented input that the certified input `ubar` is allowed to
//! override from below. The applied input is `u = max(ubar, u0)`: pushing
//! the input up can only increase the clearance `h_1`, so the override
//! never endangers the boundary.
//!
//! Recursion (Ref(k) binds the k-th derivative of `y_r`):
//!
//! ```text
//! z_1 = x1 - y_r
//! beta_1 = -k_1 z_1 - phi_1·theta + y_r'
//! z_i = x_i - beta_{i-1}
//! beta_i = -z_{i-1} - k_i z_i - phi_i·theta
//!          + sum_{k<i} (d beta_{i-1}/d x_k)(x_{k+1} + phi_k·theta)
//!          + sum_{k<i} (d beta_{i-1}/d y_r^(k)) y_r^(k+1)
//! u0 = beta_n
//! ```
//!
//! The resulting tracking cascade `dz_i = z_{i+1} - z_{i-1} - k_i z_i` is
//! globally exponentially stable for positive `k_i`.

use thiserror::Error;

use crate::controller::CompileError;
use crate::expr::{Arena, Env, EvalError, ExprId, Var};
use crate::scenario::Plant;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum NominalError {
    #[error(transparent)]
    Compile(#[from] CompileError),
}

/// Compiled backup controller.
#[derive(Clone, Debug)]
pub struct NominalController {
    pub n: usize,
    pub p: usize,
    pub arena: Arena,
    /// `beta[i-1]` is the stage-`i` virtual control; `beta[n-1]` is `u0`.
    pub beta: Vec<ExprId>,
    pub u0: ExprId,
}

/// Compiles the backup controller for `plant` with gains `k` and the true
/// parameters `theta` folded in as constants.
pub fn compile_nominal(
    plant: &Plant,
    k: &[f64],
    theta: &[f64],
    budget: usize,
) -> Result<NominalController, CompileError> {
    let n = plant.n;
    let p = plant.p;
    if k.len() != n {
        return Err(CompileError::GainLength {
            name: "k_nominal",
            n,
            got: k.len(),
        });
    }

    let mut arena = Arena::new(budget);
    let mut phi_theta = Vec::with_capacity(n);
    for row in &plant.phi {
        let mut terms = Vec::with_capacity(p);
        for (j, &e) in row.iter().enumerate() {
            let imported = arena.import(&plant.arena, e)?;
            let tj = arena.constant(theta[j])?;
            terms.push(arena.mul(imported, tj)?);
        }
        phi_theta.push(arena.sum(&terms)?);
    }
    let xv: Vec<ExprId> = (1..=n)
        .map(|i| arena.var(Var::X(i as u32)))
        .collect::<Result<_, _>>()?;
    let rv: Vec<ExprId> = (0..=n)
        .map(|kk| arena.var(Var::Ref(kk as u32)))
        .collect::<Result<_, _>>()?;

    let mut z = Vec::with_capacity(n);
    let mut beta: Vec<ExprId> = Vec::with_capacity(n);
    for i in 1..=n {
        let z_i = if i == 1 {
            arena.sub(xv[0], rv[0])?
        } else {
            arena.sub(xv[i - 1], beta[i - 2])?
        };
        let kc = arena.constant(k[i - 1])?;
        let kz = arena.mul(kc, z_i)?;
        let mut b = arena.neg(kz)?;
        b = arena.sub(b, phi_theta[i - 1])?;
        if i == 1 {
            b = arena.add(b, rv[1])?;
        } else {
            b = arena.sub(b, z[i - 2])?;
            for kk in 1..i {
                let dbx = arena.diff(beta[i - 2], Var::X(kk as u32))?;
                let xdot_k = arena.add(xv[kk], phi_theta[kk - 1])?;
                let t1 = arena.mul(dbx, xdot_k)?;
                b = arena.add(b, t1)?;
            }
            // beta_{i-1} depends on y_r^(0..i-1), so the feedforward sum
            // runs one order higher than the state sum.
            for kk in 0..i {
                let dbr = arena.diff(beta[i - 2], Var::Ref(kk as u32))?;
                let t2 = arena.mul(dbr, rv[kk + 1])?;
                b = arena.add(b, t2)?;
            }
        }
        z.push(z_i);
        beta.push(b);
    }

    let u0 = beta[n - 1];
    Ok(NominalController {
        n,
        p,
        arena,
        beta,
        u0,
    })
}

impl NominalController {
    /// Evaluates `u0` at state `x` with the tracked-reference derivatives
    /// `yr` (orders 0..=n).
    pub fn nominal_u(
        &self,
        x: &[f64],
        yr: &[f64],
        scratch: &mut Vec<f64>,
    ) -> Result<f64, EvalError> {
        let env = Env {
            t: 0.0,
            x,
            thetahat: &[],
            refs: yr,
        };
        self.arena.eval_all(&env, scratch)?;
        Ok(scratch[self.u0.index()])
    }
}

/// The override: certified input wins whenever it is at least the backup
/// input. Returns `(u, active)` where `active` reports `ubar >= u0`, the
/// certified branch being in effect (ties count as certified).
pub fn override_input(ubar: f64, u0: f64) -> (f64, bool) {
    let active = ubar >= u0;
    (ubar.max(u0), active)
}
