//! Robust weighted PnP: Huber-robustified Levenberg-Marquardt and
//! Gauss-Newton solvers, covariance estimation and random-sampling
//! initialization.

pub mod init;
pub mod kernel;
pub mod lm;
pub mod system;

pub use init::{random_sample_init, sample_subset, solve, solve_guarded, solve_many};
pub use kernel::{adaptive_delta, huber, Huber};
pub use lm::{covariance, gn_solve, gn_step, lm_solve, lm_solve_with_delta, SolveResult, SolverOptions};
pub use system::{build_system, RobustSystem};
