//! Simulation and stability certification for real-time iteration NMPC.
//!
//! The crate models a sampled plant controlled by an optimizer that performs a
//! single Gauss-Newton SQP iteration per sampling instant, and treats plant and
//! optimizer as one coupled dynamical system. Around that loop it provides:
//!
//! - [`plant`]: continuous-time models and zero-order-hold RK4 simulation,
//! - [`ocp`]: the multiple-shooting optimal control problem with an LQR terminal cost,
//! - [`qp`]: a dense primal active-set QP solver for the Gauss-Newton subproblem,
//! - [`optimizer`]: the one-step optimizer map and a converged solver used as oracle,
//! - [`coupled`]: closed-loop rollouts of the coupled system with per-step metrics,
//! - [`constants`]: empirical estimation of contraction and Lyapunov constants,
//! - [`certify`]: the auxiliary positive system, sampling-time conditions and trace audits.

pub mod certify;
pub mod constants;
pub mod coupled;
mod error;
pub mod kv;
pub mod linalg;
pub mod lp;
pub mod ocp;
pub mod optimizer;
pub mod plant;
pub mod qp;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
