//! Maximum-likelihood estimation of linear utility coefficients.
