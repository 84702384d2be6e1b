//! Numerical foundations: dense matrices, stable special functions, a
//! reverse-mode differentiation tape for small MLPs, and a finite-difference
//! gradient oracle used by the other modules' tests.

pub mod check;
pub mod linalg;
pub mod special;
pub mod tape;

pub use check::central_difference_gradient;
pub use linalg::DenseMatrix;
pub use special::{log_sum_exp, softmax, std_normal_cdf, std_normal_logpdf};
pub use tape::{Tape, Var};
