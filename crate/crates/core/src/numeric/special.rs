//! Stable special functions: log-sum-exp, softmax, the standard normal
//! density/CDF, and truncated-normal helpers built on them.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use rand::Rng;
use rand_distr::StandardNormal;

pub const LN_2PI: f64 = 1.8378770664093453;
const SQRT_2PI: f64 = 2.5066282746310002;

/// `log(sum(exp(x)))` with max subtraction. Empty input is a shape error.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::shape("log_sum_exp of empty slice"));
    }
    Ok(lse_slice(xs))
}

/// Internal log-sum-exp over a non-empty slice. `-inf` entries contribute
/// nothing; an all `-inf` slice yields `-inf`.
pub(crate) fn lse_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax. Empty input is a shape error.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::shape("softmax of empty slice"));
    }
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Log density of the standard normal at `x`.
pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * LN_2PI - 0.5 * x * x
}

/// Standard normal CDF via the Hart/West rational approximations
/// (double-precision accurate; absolute error well below 1e-7).
pub fn std_normal_cdf(x: f64) -> f64 {
    let xabs = x.abs();
    let cum = if xabs > 37.0 {
        0.0
    } else {
        let e = (-xabs * xabs / 2.0).exp();
        if xabs < 7.071067811865475 {
            let mut b = 3.52624965998911e-2 * xabs + 0.700383064443688;
            b = b * xabs + 6.37396220353165;
            b = b * xabs + 33.912866078383;
            b = b * xabs + 112.079291497871;
            b = b * xabs + 221.213596169931;
            b = b * xabs + 220.206867912376;
            let mut d = 8.83883476483184e-2 * xabs + 1.75566716318264;
            d = d * xabs + 16.064177579207;
            d = d * xabs + 86.7807322029461;
            d = d * xabs + 296.564248779674;
            d = d * xabs + 637.333633378831;
            d = d * xabs + 793.826512519948;
            d = d * xabs + 440.413735824752;
            e * b / d
        } else {
            let mut b = xabs + 0.65;
            b = xabs + 4.0 / b;
            b = xabs + 3.0 / b;
            b = xabs + 2.0 / b;
            b = xabs + 1.0 / b;
            e / (b * SQRT_2PI)
        }
    };
    if x > 0.0 {
        1.0 - cum
    } else {
        cum
    }
}

/// `ln Phi(x)`, finite for all finite `x` (asymptotic expansion in the far
/// left tail where the CDF underflows).
pub fn ln_std_normal_cdf(x: f64) -> f64 {
    if x > -36.0 {
        std_normal_cdf(x).ln()
    } else {
        // ln Phi(x) ~ -x^2/2 - ln(-x) - ln(sqrt(2 pi)) + ln(1 - 1/x^2 + 3/x^4)
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + (-1.0 / x2 + 3.0 / (x2 * x2)).ln_1p()
    }
}

/// Inverse Mills ratio `phi(x) / Phi(x)`, stable in the left tail.
pub fn normal_pdf_over_cdf(x: f64) -> f64 {
    if x > -36.0 {
        (std_normal_logpdf(x) - ln_std_normal_cdf(x)).exp()
    } else {
        let x2 = x * x;
        -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2))
    }
}

/// Per-coordinate log density of `Normal(mean, sigma^2)` truncated to
/// `[0, inf)`, summed over coordinates. Any negative coordinate gives `-inf`.
pub fn truncnorm_logpdf(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    let lower = vec![0.0; x.len()];
    truncnorm_logpdf_lb(x, mean, sigma, &lower)
}

/// Same as [`truncnorm_logpdf`] with a per-coordinate lower bound.
pub fn truncnorm_logpdf_lb(x: &[f64], mean: &[f64], sigma: f64, lower: &[f64]) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::param(format!("truncnorm sigma must be > 0, got {sigma}")));
    }
    if x.len() != mean.len() || x.len() != lower.len() {
        return Err(Error::shape("truncnorm_logpdf: length mismatch"));
    }
    let mut total = 0.0;
    for ((&xa, &ma), &la) in x.iter().zip(mean).zip(lower) {
        if xa < la {
            return Ok(f64::NEG_INFINITY);
        }
        // ln(1 - Phi((l-m)/s)) = ln Phi((m-l)/s)
        total += std_normal_logpdf((xa - ma) / sigma)
            - sigma.ln()
            - ln_std_normal_cdf((ma - la) / sigma);
    }
    Ok(total)
}

/// Mean of `Normal(mean, sigma^2)` truncated to `[lower, inf)`.
pub fn truncnorm_mean(mean: f64, sigma: f64, lower: f64) -> f64 {
    let a = (mean - lower) / sigma;
    mean + sigma * normal_pdf_over_cdf(a)
}

/// Variance of `Normal(mean, sigma^2)` truncated to `[lower, inf)`.
pub fn truncnorm_var(mean: f64, sigma: f64, lower: f64) -> f64 {
    let a = (mean - lower) / sigma;
    let h = normal_pdf_over_cdf(a);
    sigma * sigma * (1.0 - a * h - h * h).max(0.0)
}

/// Draws from `Normal(mean, sigma^2)` truncated to `[lower, inf)`.
///
/// Plain rejection from the untruncated normal; when the acceptance
/// probability drops below 5% the draw switches to the exponential-proposal
/// tail sampler, which is exact for one-sided truncations.
pub fn truncnorm_sample(mean: f64, sigma: f64, lower: f64, rng: &mut SeedRng) -> f64 {
    let accept = std_normal_cdf((mean - lower) / sigma);
    if accept >= 0.05 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = mean + sigma * z;
            if x >= lower {
                return x;
            }
        }
    }
    // standardized lower bound is far in the right tail here
    let a = (lower - mean) / sigma;
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = a - (1.0 - u1).ln() / lambda;
        let d = z - lambda;
        if u2 <= (-0.5 * d * d).exp() {
            return mean + sigma * z;
        }
    }
}
