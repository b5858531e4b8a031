//! Simulation and verification toolkit for adaptive override control of
//! strict-feedback systems whose output must never cross a moving lower
//! boundary.
//!
//! The plant is `dx_i = x_{i+1} + phi_i(x1..xi)·theta`,
//! `dx_n = u + phi_n(x)·theta`, `y = x1`, with `theta` an unknown constant
//! vector. A boundary signal `r(t)` with known derivatives defines the
//! clearance `h_1 = y - r`, which must stay non-negative while a backup
//! controller tracks a separate reference `y_r`. The toolkit compiles the
//! certified override controller symbolically, runs the closed loop under
//! one of four parameter identifiers, and checks the measured trajectories
//! against the closed-form violation bounds.
//!
//! Modules:
//!
//! - [`expr`]: hash-consed expression arena, parser, symbolic derivatives.
//! - [`scenario`]: TOML scenario format, validation, reference chains.
//! - [`lyap`]: Lyapunov certificate for the constant-gain cascade.
//! - [`controller`]: backstepping compilation, gain floors, violation bounds.
//! - [`filter`]: backup controller and the `max(ubar, u0)` override.
//! - [`identifiers`]: passive-observer and swapping update laws.
//! - [`sim`]: fixed-step integrator, traces, metrics, bound comparison.

pub mod controller;
pub mod expr;
pub mod filter;
pub mod identifiers;
pub mod lyap;
pub mod scenario;
pub mod sim;
