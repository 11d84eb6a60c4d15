//! Dense numerical kernels shared by the rest of the crate.

pub mod cholesky;
pub mod expm;
pub mod lp;
pub mod qp;
pub mod tridiag;

pub use cholesky::{cholesky_lower, cholesky_solve, solve_lower, solve_lower_transpose};
pub use expm::matrix_exponential;
pub use lp::{solve_lp, LpProblem, LpSolution, LpStatus};
pub use qp::{solve_qp, KktResiduals, QpProblem, QpSolution, QpStatus, DEFAULT_TOL_KKT};
pub use tridiag::Tridiagonal;
