//! The IAP-GEV family: multinomial and cross-nested logit probabilities with
//! per-alternative implicit availability/perception weights.
//!
//! Each alternative `j` carries a positive weight `BC(j)` entering utility as
//! `ln BC(j)`; absent alternatives have `BC = 0` and receive probability
//! exactly zero. The cross-nested generation function is
//!
//! ```text
//! G = sum_m ( sum_j BC(j) * alpha[j][m] * exp(mu_m * V_j) )^(mu / mu_m)
//! ```
//!
//! All inner sums run in log space; the naive formulas overflow once
//! utilities leave a narrow band.

use crate::error::{Error, Result};
use crate::numeric::linalg::DenseMatrix;
use crate::numeric::special::lse_slice;
use crate::rng::SeedRng;
use rand::Rng;

/// Systematic utilities, one per alternative. All entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector {
    v: Vec<f64>,
}

impl UtilityVector {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::shape("utilities must be finite"));
        }
        Ok(UtilityVector { v })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }
}

/// Per-alternative `ln BC(j)` values; `-inf` encodes an absent alternative.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionVector {
    log_bc: Vec<f64>,
}

impl PerceptionVector {
    /// Builds from log-space values. `-inf` is allowed, `NaN`/`+inf` are not.
    pub fn from_log(log_bc: Vec<f64>) -> Result<Self> {
        if log_bc.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::shape("log BC entries must be finite or -inf"));
        }
        Ok(PerceptionVector { log_bc })
    }

    /// Builds from linear weights; zeros become `-inf`.
    pub fn from_weights(bc: &[f64]) -> Result<Self> {
        if bc.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::shape("BC weights must be finite and >= 0"));
        }
        Ok(PerceptionVector {
            log_bc: bc.iter().map(|x| x.ln()).collect(),
        })
    }

    /// `BC = 1` everywhere: every alternative definitely perceived.
    pub fn ones(len: usize) -> Self {
        PerceptionVector {
            log_bc: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.log_bc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_bc.is_empty()
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_bc
    }

    pub fn any_present(&self) -> bool {
        self.log_bc.iter().any(|x| x.is_finite())
    }
}

/// Cross-nested structure: model scale, nest scales, and the inclusion
/// matrix `alpha` (alternatives x nests).
#[derive(Debug, Clone, PartialEq)]
pub struct NestStructure {
    mu: f64,
    mu_m: Vec<f64>,
    alpha: DenseMatrix,
}

impl NestStructure {
    /// Validates the sufficient conditions for `G` to be a GEV generation
    /// function: `mu > 0`, `mu_m >= mu > 0`, `alpha >= 0` with every
    /// alternative belonging to at least one nest.
    pub fn new(mu: f64, mu_m: Vec<f64>, alpha: DenseMatrix) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Structure(format!("model scale mu must be > 0, got {mu}")));
        }
        if mu_m.len() != alpha.cols() {
            return Err(Error::Structure(format!(
                "{} nest scales for {} alpha columns",
                mu_m.len(),
                alpha.cols()
            )));
        }
        for (m, &s) in mu_m.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Structure(format!("nest scale mu_{m} must be > 0, got {s}")));
            }
            if s < mu - 1e-12 {
                return Err(Error::Structure(format!(
                    "nest scale mu_{m} = {s} below model scale mu = {mu}"
                )));
            }
        }
        for j in 0..alpha.rows() {
            let row = alpha.row(j);
            if row.iter().any(|a| *a < 0.0 || !a.is_finite()) {
                return Err(Error::Structure(format!("alpha row {j} has a negative entry")));
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Structure(format!(
                    "alternative {j} belongs to no nest (alpha row sums to 0)"
                )));
            }
        }
        Ok(NestStructure { mu, mu_m, alpha })
    }

    /// Single-nest structure with full membership: degenerates to MNL when
    /// `mu_1 = mu`.
    pub fn single_nest(n_alts: usize, mu: f64) -> Result<Self> {
        let alpha = DenseMatrix::from_vec(n_alts, 1, vec![1.0; n_alts])?;
        NestStructure::new(mu, vec![mu], alpha)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn nest_scales(&self) -> &[f64] {
        &self.mu_m
    }

    pub fn nest_count(&self) -> usize {
        self.mu_m.len()
    }

    pub fn alternatives(&self) -> usize {
        self.alpha.rows()
    }

    pub fn alpha(&self) -> &DenseMatrix {
        &self.alpha
    }

    fn check_lengths(&self, v: &UtilityVector, bc: &PerceptionVector) -> Result<()> {
        if v.len() != self.alternatives() || bc.len() != self.alternatives() {
            return Err(Error::shape(format!(
                "lengths differ: {} utilities, {} perceptions, {} alpha rows",
                v.len(),
                bc.len(),
                self.alternatives()
            )));
        }
        if !bc.any_present() {
            return Err(Error::DegenerateChoiceSet(
                "every alternative has BC = 0".into(),
            ));
        }
        Ok(())
    }
}

// ── MNL ──────────────────────────────────────────────────────────────

/// Log choice probabilities of the IAP-MNL model:
/// `ln p(i) = (V_i + ln BC_i) - lse_j(V_j + ln BC_j)`.
pub fn iap_mnl_log_probs(v: &UtilityVector, bc: &PerceptionVector) -> Result<Vec<f64>> {
    if v.len() != bc.len() || v.is_empty() {
        return Err(Error::shape(format!(
            "iap_mnl: {} utilities vs {} perceptions",
            v.len(),
            bc.len()
        )));
    }
    if !bc.any_present() {
        return Err(Error::DegenerateChoiceSet(
            "every alternative has BC = 0".into(),
        ));
    }
    let scores: Vec<f64> = v
        .as_slice()
        .iter()
        .zip(bc.log_values())
        .map(|(vi, li)| vi + li)
        .collect();
    let denom = lse_slice(&scores);
    Ok(scores.iter().map(|s| s - denom).collect())
}

/// IAP-MNL choice probabilities. Alternatives with `BC = 0` get exactly 0.
pub fn iap_mnl_prob(v: &UtilityVector, bc: &PerceptionVector) -> Result<Vec<f64>> {
    Ok(iap_mnl_log_probs(v, bc)?.iter().map(|l| l.exp()).collect())
}

// ── CNL generation function ──────────────────────────────────────────

/// Per-nest log inner sums `ln y_m = lse_j(ln alpha[j][m] + ln BC_j + mu_m V_j)`.
/// A nest with no perceivable member has `ln y_m = -inf` and contributes
/// nothing anywhere.
fn log_nest_sums(v: &UtilityVector, bc: &PerceptionVector, nests: &NestStructure) -> Vec<f64> {
    let m_count = nests.nest_count();
    let mut out = vec![f64::NEG_INFINITY; m_count];
    let mut terms: Vec<f64> = Vec::with_capacity(v.len());
    for (m, out_m) in out.iter_mut().enumerate() {
        terms.clear();
        let mu_m = nests.mu_m[m];
        for j in 0..v.len() {
            let a = nests.alpha.get(j, m);
            let lbc = bc.log_values()[j];
            if a > 0.0 && lbc > f64::NEG_INFINITY {
                terms.push(a.ln() + lbc + mu_m * v.as_slice()[j]);
            }
        }
        if !terms.is_empty() {
            *out_m = lse_slice(&terms);
        }
    }
    out
}

/// `ln G` for the cross-nested generation function with IAP weights.
pub fn ln_cnl_generation(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
) -> Result<f64> {
    nests.check_lengths(v, bc)?;
    let log_y = log_nest_sums(v, bc, nests);
    let terms: Vec<f64> = log_y
        .iter()
        .zip(nests.nest_scales())
        .filter(|(ly, _)| ly.is_finite())
        .map(|(ly, mu_m)| (nests.mu / mu_m) * ly)
        .collect();
    if terms.is_empty() {
        return Err(Error::DegenerateChoiceSet("all nests empty".into()));
    }
    Ok(lse_slice(&terms))
}

/// The generation function `G` itself; strictly positive on valid input.
pub fn cnl_generation(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
) -> Result<f64> {
    Ok(ln_cnl_generation(v, bc, nests)?.exp())
}

/// `ln G'_i`: log of the partial-derivative factor with `BC_i * mu` divided
/// out, so that `dG/d exp(V_i) = BC_i * mu * exp(ln G'_i)`.
pub fn ln_cnl_partial(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
    i: usize,
) -> Result<f64> {
    nests.check_lengths(v, bc)?;
    if i >= v.len() {
        return Err(Error::IndexOutOfRange { index: i, len: v.len() });
    }
    let log_y = log_nest_sums(v, bc, nests);
    Ok(ln_partial_from_sums(v, nests, &log_y, i))
}

fn ln_partial_from_sums(
    v: &UtilityVector,
    nests: &NestStructure,
    log_y: &[f64],
    i: usize,
) -> f64 {
    let mut terms: Vec<f64> = Vec::with_capacity(nests.nest_count());
    for (m, ly) in log_y.iter().enumerate() {
        let a = nests.alpha.get(i, m);
        if a > 0.0 && ly.is_finite() {
            let mu_m = nests.mu_m[m];
            terms.push(a.ln() + (mu_m - 1.0) * v.as_slice()[i] + ((nests.mu - mu_m) / mu_m) * ly);
        }
    }
    if terms.is_empty() {
        f64::NEG_INFINITY
    } else {
        lse_slice(&terms)
    }
}

/// `G'_i` in linear space.
pub fn cnl_partial(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
    i: usize,
) -> Result<f64> {
    Ok(ln_cnl_partial(v, bc, nests, i)?.exp())
}

// ── IAP-CNL probabilities and their utility gradient ─────────────────

/// Evaluated IAP-CNL choice probabilities together with the pieces needed
/// for differentiating the log probabilities with respect to utilities.
#[derive(Debug, Clone)]
pub struct CnlEvaluation {
    /// `ln p(i)`; `-inf` where `BC = 0`.
    pub log_probs: Vec<f64>,
    probs: Vec<f64>,
    /// Within-alternative nest shares `r[i][m] = term_im / G'_i`.
    shares_by_alt: DenseMatrix,
    /// Within-nest alternative shares `w[j][m] = BC_j alpha_jm e^{mu_m V_j} / y_m`.
    shares_by_nest: DenseMatrix,
    mu: f64,
    mu_m: Vec<f64>,
}

/// Evaluates Eq.-style IAP-CNL log probabilities
/// `ln p(i) = s_i - lse_j(s_j)` with `s_i = V_i + ln BC_i + ln G'_i`.
pub fn iap_cnl_evaluate(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
) -> Result<CnlEvaluation> {
    nests.check_lengths(v, bc)?;
    let n = v.len();
    let m_count = nests.nest_count();
    let log_y = log_nest_sums(v, bc, nests);

    let mut shares_by_alt = DenseMatrix::zeros(n, m_count);
    let mut shares_by_nest = DenseMatrix::zeros(n, m_count);
    let mut scores = vec![f64::NEG_INFINITY; n];
    for j in 0..n {
        let ln_gp = ln_partial_from_sums(v, nests, &log_y, j);
        for m in 0..m_count {
            let a = nests.alpha.get(j, m);
            if a <= 0.0 || !log_y[m].is_finite() {
                continue;
            }
            let mu_m = nests.mu_m[m];
            let term =
                a.ln() + (mu_m - 1.0) * v.as_slice()[j] + ((nests.mu - mu_m) / mu_m) * log_y[m];
            if ln_gp.is_finite() {
                shares_by_alt.set(j, m, (term - ln_gp).exp());
            }
            let lbc = bc.log_values()[j];
            if lbc > f64::NEG_INFINITY {
                let member = a.ln() + lbc + mu_m * v.as_slice()[j];
                shares_by_nest.set(j, m, (member - log_y[m]).exp());
            }
        }
        let lbc = bc.log_values()[j];
        if lbc > f64::NEG_INFINITY {
            scores[j] = v.as_slice()[j] + lbc + ln_gp;
        }
    }
    let denom = lse_slice(&scores);
    if !denom.is_finite() {
        return Err(Error::DegenerateChoiceSet(
            "no alternative carries probability mass".into(),
        ));
    }
    let log_probs: Vec<f64> = scores.iter().map(|s| s - denom).collect();
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    Ok(CnlEvaluation {
        log_probs,
        probs,
        shares_by_alt,
        shares_by_nest,
        mu: nests.mu,
        mu_m: nests.mu_m.clone(),
    })
}

impl CnlEvaluation {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Gradient of `ln p(chosen)` with respect to every utility `V_k`.
    pub fn dlnp_dv(&self, chosen: usize) -> Result<Vec<f64>> {
        let n = self.probs.len();
        if chosen >= n {
            return Err(Error::IndexOutOfRange { index: chosen, len: n });
        }
        let m_count = self.mu_m.len();
        // A_k = sum_m r[k][m] (mu_m - 1); q_m = sum_j p_j r[j][m]
        let mut a = vec![0.0; n];
        let mut q = vec![0.0; m_count];
        for j in 0..n {
            for m in 0..m_count {
                let r = self.shares_by_alt.get(j, m);
                a[j] += r * (self.mu_m[m] - 1.0);
                q[m] += self.probs[j] * r;
            }
        }
        let mut grad = vec![0.0; n];
        for (k, g) in grad.iter_mut().enumerate() {
            let mut val = -self.probs[k] * (1.0 + a[k]);
            if k == chosen {
                val += 1.0 + a[chosen];
            }
            for m in 0..m_count {
                val += (self.mu - self.mu_m[m])
                    * self.shares_by_nest.get(k, m)
                    * (self.shares_by_alt.get(chosen, m) - q[m]);
            }
            *g = val;
        }
        Ok(grad)
    }
}

/// IAP-CNL choice probabilities (Eq.-style second line: softmax of
/// `V + ln BC + ln G'`).
pub fn iap_cnl_prob(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
) -> Result<Vec<f64>> {
    Ok(iap_cnl_evaluate(v, bc, nests)?.probs().to_vec())
}

// ── Theorem 1 verification ───────────────────────────────────────────

/// Analytic k-th order mixed partial of `G` with respect to `exp(V_i)` for
/// distinct indices, in literal form:
///
/// ```text
/// sum_m mu_m^k * prod_{l in idx} (BC_l alpha_lm e^{V_l (mu_m - 1)})
///      * prod_{l=0}^{k-1} (mu/mu_m - l) * y_m^{(mu - k mu_m)/mu_m}
/// ```
pub fn cnl_mixed_partial_analytic(
    v: &UtilityVector,
    bc: &PerceptionVector,
    nests: &NestStructure,
    indices: &[usize],
) -> Result<f64> {
    nests.check_lengths(v, bc)?;
    let k = indices.len();
    if k == 0 {
        return Err(Error::param("mixed partial needs at least one index"));
    }
    for &i in indices {
        if i >= v.len() {
            return Err(Error::IndexOutOfRange { index: i, len: v.len() });
        }
    }
    let mut total = 0.0;
    for m in 0..nests.nest_count() {
        let mu_m = nests.mu_m[m];
        // y_m in linear space (callers keep utilities at test scale)
        let mut y = 0.0;
        for j in 0..v.len() {
            let lbc = bc.log_values()[j];
            if lbc > f64::NEG_INFINITY {
                y += lbc.exp() * nests.alpha.get(j, m) * (mu_m * v.as_slice()[j]).exp();
            }
        }
        if y <= 0.0 {
            continue; // empty nest contributes identically zero
        }
        let mut prod = mu_m.powi(k as i32);
        for &l in indices {
            let lbc = bc.log_values()[l];
            let bc_l = if lbc > f64::NEG_INFINITY { lbc.exp() } else { 0.0 };
            prod *= bc_l * nests.alpha.get(l, m) * ((mu_m - 1.0) * v.as_slice()[l]).exp();
        }
        for l in 0..k {
            prod *= nests.mu / mu_m - l as f64;
        }
        total += prod * y.powf((nests.mu - k as f64 * mu_m) / mu_m);
    }
    Ok(total)
}

/// One mixed-partial check inside a [`Theorem1Report`].
#[derive(Debug, Clone)]
pub struct MixedPartialCheck {
    pub order: usize,
    pub indices: Vec<usize>,
    pub finite_difference: f64,
    pub analytic: f64,
    /// `+1` expects `>= 0`, `-1` expects `<= 0`, `0` expects vanishing.
    pub expected_sign: i8,
    pub ok: bool,
}

/// Numerical verification report for the GEV generation-function properties.
#[derive(Debug, Clone)]
pub struct Theorem1Report {
    pub ln_g: f64,
    pub non_negative: bool,
    /// `(beta, |G(beta e^V) - beta^mu G| / G)` for each tested scaling.
    pub homogeneity: Vec<(f64, f64)>,
    /// `ln G` along an increasing utility ladder for alternative 0.
    pub divergence_ladder: Vec<f64>,
    pub divergence_monotone: bool,
    /// `ln(G_scaled / G_base)` once `exp(V_0)` grew by 1e8.
    pub divergence_log_growth: f64,
    pub mixed_partials: Vec<MixedPartialCheck>,
    pub noise_floor: f64,
}

impl Theorem1Report {
    pub fn homogeneity_ok(&self, tol: f64) -> bool {
        self.homogeneity.iter().all(|(_, r)| *r < tol)
    }

    pub fn signs_ok(&self) -> bool {
        self.mixed_partials.iter().all(|c| c.ok)
    }

    pub fn divergence_ok(&self) -> bool {
        self.divergence_monotone && self.divergence_log_growth > (1e6f64).ln()
    }

    pub fn all_ok(&self, homogeneity_tol: f64) -> bool {
        self.non_negative
            && self.homogeneity_ok(homogeneity_tol)
            && self.divergence_ok()
            && self.signs_ok()
    }
}

const MIXED_PARTIAL_STEP: f64 = 1e-3;
const MIXED_PARTIAL_NOISE: f64 = 1e-4;

/// Verifies the generation-function properties numerically on one instance:
/// non-negativity, homogeneity of degree `mu`, divergence as one exp-utility
/// grows, and the alternating mixed-partial signs up to order `k_max`
/// (finite differences cross-checked against the literal analytic form).
pub fn verify_theorem1(
    nests: &NestStructure,
    v: &UtilityVector,
    bc: &PerceptionVector,
    k_max: usize,
) -> Result<Theorem1Report> {
    nests.check_lengths(v, bc)?;
    let n = v.len();
    if n > 5 {
        return Err(Error::UnsupportedCheck(format!(
            "mixed finite differences support at most 5 alternatives, got {n}"
        )));
    }
    if k_max > 3 || k_max == 0 {
        return Err(Error::UnsupportedCheck(format!(
            "mixed partial order must be in 1..=3, got {k_max}"
        )));
    }
    let u: Vec<f64> = v.as_slice().iter().map(|x| x.exp()).collect();
    if u.iter().any(|&ui| ui < 10.0 * MIXED_PARTIAL_STEP) {
        return Err(Error::UnsupportedCheck(
            "exp-utilities too small for the fixed finite-difference step".into(),
        ));
    }

    let ln_g = ln_cnl_generation(v, bc, nests)?;

    let mut homogeneity = Vec::new();
    for beta in [0.5, 2.0, 10.0] {
        let shifted = UtilityVector::new(
            v.as_slice().iter().map(|x| x + f64::ln(beta)).collect(),
        )?;
        let ln_g_beta = ln_cnl_generation(&shifted, bc, nests)?;
        let delta = ln_g_beta - (nests.mu * f64::ln(beta) + ln_g);
        homogeneity.push((beta, delta.exp_m1().abs()));
    }

    let mut divergence_ladder = vec![ln_g];
    for step in 1..=4 {
        let mut vs = v.as_slice().to_vec();
        vs[0] += 2.0 * std::f64::consts::LN_10 * step as f64; // exp(V_0) x 10^(2 step)
        divergence_ladder.push(ln_cnl_generation(&UtilityVector::new(vs)?, bc, nests)?);
    }
    let divergence_monotone = divergence_ladder.windows(2).all(|w| w[1] > w[0]);
    let divergence_log_growth = divergence_ladder[4] - divergence_ladder[0];

    let g_of_u = |u_probe: &[f64]| -> f64 {
        let vs: Vec<f64> = u_probe.iter().map(|x| x.ln()).collect();
        ln_cnl_generation(&UtilityVector::new(vs).unwrap(), bc, nests)
            .map(|l| l.exp())
            .unwrap_or(f64::NAN)
    };

    let uniform_scales = nests
        .nest_scales()
        .iter()
        .all(|s| (s - nests.mu).abs() < 1e-12);

    let mut mixed_partials = Vec::new();
    for k in 1..=k_max.min(n) {
        for indices in combinations(n, k) {
            let fd = mixed_central_difference(&g_of_u, &u, &indices, MIXED_PARTIAL_STEP);
            let analytic = cnl_mixed_partial_analytic(v, bc, nests, &indices)?;
            let expected_sign: i8 = if k == 1 {
                1
            } else if uniform_scales {
                0
            } else if k % 2 == 1 {
                1
            } else {
                -1
            };
            let agrees = (fd - analytic).abs() <= MIXED_PARTIAL_NOISE * analytic.abs().max(1.0);
            let sign_ok = match expected_sign {
                0 => fd.abs() <= MIXED_PARTIAL_NOISE,
                1 => fd >= -MIXED_PARTIAL_NOISE,
                _ => fd <= MIXED_PARTIAL_NOISE,
            };
            mixed_partials.push(MixedPartialCheck {
                order: k,
                indices,
                finite_difference: fd,
                analytic,
                expected_sign,
                ok: agrees && sign_ok,
            });
        }
    }

    Ok(Theorem1Report {
        ln_g,
        non_negative: true, // G = exp(ln G) by construction
        homogeneity,
        divergence_ladder,
        divergence_monotone,
        divergence_log_growth,
        mixed_partials,
        noise_floor: MIXED_PARTIAL_NOISE,
    })
}

/// Mixed central difference of `f` over the distinct coordinates `indices`.
fn mixed_central_difference<F>(f: &F, x: &[f64], indices: &[usize], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let k = indices.len();
    let mut total = 0.0;
    for mask in 0..(1usize << k) {
        let mut probe = x.to_vec();
        let mut sign = 1.0;
        for (bit, &idx) in indices.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                probe[idx] += h;
            } else {
                probe[idx] -= h;
                sign = -sign;
            }
        }
        total += sign * f(&probe);
    }
    total / (2.0 * h).powi(k as i32)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// Draws a random valid instance for property tests and the verification
/// command: utilities in `[-1, 1]`, `mu` in `[0.8, 1.5]`, nest scales up to
/// `2.5 mu`, softmax-normalized inclusion rows, BC weights in `[0.2, 2]`
/// (optionally with zeroed-out alternatives, never all of them).
pub fn sample_instance(
    rng: &mut SeedRng,
    n_alts: usize,
    n_nests: usize,
    allow_zero_bc: bool,
) -> (UtilityVector, PerceptionVector, NestStructure) {
    let v = UtilityVector::new((0..n_alts).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mu = rng.gen_range(0.8..1.5);
    let mu_m: Vec<f64> = (0..n_nests).map(|_| mu * rng.gen_range(1.0..2.5)).collect();
    let mut alpha = DenseMatrix::zeros(n_alts, n_nests);
    for j in 0..n_alts {
        let mut row: Vec<f64> = (0..n_nests).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for a in row.iter_mut() {
            *a /= sum;
        }
        alpha.row_mut(j).copy_from_slice(&row);
    }
    let mut bc: Vec<f64> = (0..n_alts).map(|_| rng.gen_range(0.2..2.0)).collect();
    if allow_zero_bc && n_alts > 1 {
        let drop = rng.gen_range(0..n_alts);
        if rng.gen_bool(0.5) {
            bc[drop] = 0.0;
        }
    }
    let bc = PerceptionVector::from_weights(&bc).unwrap();
    (v, bc, NestStructure::new(mu, mu_m, alpha).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::check::central_difference_gradient;
    use crate::rng::seed_rng;

    fn utils(v: &[f64]) -> UtilityVector {
        UtilityVector::new(v.to_vec()).unwrap()
    }

    fn weights(bc: &[f64]) -> PerceptionVector {
        PerceptionVector::from_weights(bc).unwrap()
    }

    #[test]
    fn iap_mnl_symmetry() {
        let p = iap_mnl_prob(&utils(&[0.0, 0.0]), &weights(&[1.0, 1.0])).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn iap_mnl_hand_evaluation() {
        // V = 0, BC = [1, 0.5]: p = [1/(1.5), 0.5/1.5]
        let p = iap_mnl_prob(&utils(&[0.0, 0.0]), &weights(&[1.0, 0.5])).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn iap_mnl_unit_bc_is_softmax() {
        let mut rng = seed_rng(1);
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
            let p = iap_mnl_prob(&utils(&v), &PerceptionVector::ones(4)).unwrap();
            let sm = crate::numeric::softmax(&v).unwrap();
            for (a, b) in p.iter().zip(&sm) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn iap_mnl_zero_bc_gets_zero_probability() {
        let p = iap_mnl_prob(&utils(&[5.0, 0.0, 1.0]), &weights(&[0.0, 1.0, 1.0])).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iap_mnl_all_zero_bc_is_degenerate() {
        let r = iap_mnl_prob(&utils(&[0.0, 0.0]), &weights(&[0.0, 0.0]));
        assert!(matches!(r, Err(Error::DegenerateChoiceSet(_))));
    }

    #[test]
    fn generation_single_term() {
        let nests = NestStructure::single_nest(1, 1.0).unwrap();
        let g = cnl_generation(&utils(&[0.0]), &weights(&[1.0]), &nests).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generation_homogeneous_of_degree_mu() {
        let mut rng = seed_rng(2);
        for _ in 0..20 {
            let (v, bc, nests) = sample_instance(&mut rng, 4, 2, false);
            let ln_g = ln_cnl_generation(&v, &bc, &nests).unwrap();
            let beta: f64 = 2.0;
            let shifted =
                UtilityVector::new(v.as_slice().iter().map(|x| x + beta.ln()).collect()).unwrap();
            let ln_g_b = ln_cnl_generation(&shifted, &bc, &nests).unwrap();
            let residual = ((ln_g_b - nests.mu() * beta.ln() - ln_g).exp() - 1.0).abs();
            assert!(residual < 1e-10, "residual {residual}");
        }
    }

    /// Literal double loop of the generation function at safe magnitudes.
    fn naive_generation(v: &[f64], bc: &[f64], nests: &NestStructure) -> f64 {
        let mut g = 0.0;
        for m in 0..nests.nest_count() {
            let mut y = 0.0;
            for j in 0..v.len() {
                y += bc[j] * nests.alpha().get(j, m) * (nests.nest_scales()[m] * v[j]).exp();
            }
            g += y.powf(nests.mu() / nests.nest_scales()[m]);
        }
        g
    }

    #[test]
    fn generation_matches_literal_formula() {
        let mut rng = seed_rng(3);
        for _ in 0..30 {
            let (v, bc, nests) = sample_instance(&mut rng, 3, 2, false);
            let bc_lin: Vec<f64> = bc.log_values().iter().map(|l| l.exp()).collect();
            let got = cnl_generation(&v, &bc, &nests).unwrap();
            let want = naive_generation(v.as_slice(), &bc_lin, &nests);
            assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn partial_matches_finite_differences() {
        let mut rng = seed_rng(4);
        for trial in 0..50 {
            let (v, bc, nests) = sample_instance(&mut rng, 4, 2, false);
            let i = trial % 4;
            let gp = cnl_partial(&v, &bc, &nests, i).unwrap();
            // dG/du_i by central differences over u = exp(V)
            let u: Vec<f64> = v.as_slice().iter().map(|x| x.exp()).collect();
            let f = |u_probe: &[f64]| {
                let vs: Vec<f64> = u_probe.iter().map(|x| x.ln()).collect();
                cnl_generation(&UtilityVector::new(vs).unwrap(), &bc, &nests).unwrap()
            };
            let fd = central_difference_gradient(&f, &u, 1e-6)[i];
            let bc_i = bc.log_values()[i].exp();
            let want = fd / (bc_i * nests.mu());
            assert!(
                (gp - want).abs() < 1e-6 * want.abs().max(1e-6),
                "trial {trial}: {gp} vs {want}"
            );
        }
    }

    #[test]
    fn partial_with_zero_bc_stays_finite() {
        let nests = NestStructure::new(
            1.0,
            vec![1.5, 2.0],
            DenseMatrix::from_vec(3, 2, vec![0.5, 0.5, 1.0, 0.0, 0.2, 0.8]).unwrap(),
        )
        .unwrap();
        let v = utils(&[0.3, -0.2, 0.1]);
        let bc = weights(&[0.0, 1.0, 1.0]);
        let gp = cnl_partial(&v, &bc, &nests, 0).unwrap();
        assert!(gp.is_finite() && gp > 0.0);
        // full derivative is BC_0 * mu * G'_0 = 0
        let u: Vec<f64> = v.as_slice().iter().map(|x| x.exp()).collect();
        let f = |u_probe: &[f64]| {
            let vs: Vec<f64> = u_probe.iter().map(|x| x.ln()).collect();
            cnl_generation(&UtilityVector::new(vs).unwrap(), &bc, &nests).unwrap()
        };
        let fd = central_difference_gradient(&f, &u, 1e-6)[0];
        assert!(fd.abs() < 1e-9);
    }

    #[test]
    fn degenerate_single_nest_reproduces_mnl() {
        let mut rng = seed_rng(5);
        for _ in 0..50 {
            let n = 4;
            let v: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let v = utils(&v);
            let nests = NestStructure::single_nest(n, 1.0).unwrap();
            let bc = PerceptionVector::ones(n);
            let p = iap_cnl_prob(&v, &bc, &nests).unwrap();
            let mnl = iap_mnl_prob(&v, &bc).unwrap();
            for (a, b) in p.iter().zip(&mnl) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cnl_probability_first_line_identity() {
        // p(i) = exp(V_i) * (BC_i mu G'_i) / (mu G)
        let mut rng = seed_rng(6);
        for _ in 0..30 {
            let (v, bc, nests) = sample_instance(&mut rng, 3, 2, false);
            let p = iap_cnl_prob(&v, &bc, &nests).unwrap();
            let ln_g = ln_cnl_generation(&v, &bc, &nests).unwrap();
            for i in 0..3 {
                let ln_gp = ln_cnl_partial(&v, &bc, &nests, i).unwrap();
                let direct =
                    (v.as_slice()[i] + bc.log_values()[i] + ln_gp - ln_g).exp();
                assert!((p[i] - direct).abs() < 1e-10, "{} vs {}", p[i], direct);
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cnl_matches_literal_chain_evaluation() {
        // literal Eq. evaluation: p_i = u_i * dG/du_i / (mu G) with dG/du_i by
        // finite differences of the naive generation function
        let mut rng = seed_rng(7);
        for _ in 0..10 {
            let (v, bc, nests) = sample_instance(&mut rng, 3, 2, false);
            let bc_lin: Vec<f64> = bc.log_values().iter().map(|l| l.exp()).collect();
            let p = iap_cnl_prob(&v, &bc, &nests).unwrap();
            let u: Vec<f64> = v.as_slice().iter().map(|x| x.exp()).collect();
            let g = naive_generation(v.as_slice(), &bc_lin, &nests);
            let f = |u_probe: &[f64]| {
                let vs: Vec<f64> = u_probe.iter().map(|x| x.ln()).collect();
                naive_generation(&vs, &bc_lin, &nests)
            };
            let fd = central_difference_gradient(&f, &u, 1e-7);
            for i in 0..3 {
                let want = u[i] * fd[i] / (nests.mu() * g);
                assert!((p[i] - want).abs() < 1e-5, "{} vs {}", p[i], want);
            }
        }
    }

    #[test]
    fn dlnp_dv_matches_finite_differences() {
        let mut rng = seed_rng(8);
        for trial in 0..30 {
            let (v, bc, nests) = sample_instance(&mut rng, 4, 3, trial % 2 == 0);
            let chosen = bc
                .log_values()
                .iter()
                .position(|l| l.is_finite())
                .unwrap();
            let eval = iap_cnl_evaluate(&v, &bc, &nests).unwrap();
            let analytic = eval.dlnp_dv(chosen).unwrap();
            let f = |vs: &[f64]| {
                iap_cnl_evaluate(&UtilityVector::new(vs.to_vec()).unwrap(), &bc, &nests)
                    .unwrap()
                    .log_probs[chosen]
            };
            let fd = central_difference_gradient(&f, v.as_slice(), 1e-6);
            for (a, n) in analytic.iter().zip(&fd) {
                assert!((a - n).abs() < 1e-6 * n.abs().max(1.0), "trial {trial}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn theorem1_uniform_scales_vanishing_mixed_partial() {
        let mu = 1.2;
        let nests = NestStructure::new(
            mu,
            vec![mu, mu],
            DenseMatrix::from_vec(3, 2, vec![0.6, 0.4, 0.3, 0.7, 0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let report = verify_theorem1(
            &nests,
            &utils(&[0.2, -0.3, 0.5]),
            &weights(&[1.0, 0.8, 1.2]),
            2,
        )
        .unwrap();
        for check in report.mixed_partials.iter().filter(|c| c.order == 2) {
            assert_eq!(check.expected_sign, 0);
            assert!(check.finite_difference.abs() < 1e-4, "{:?}", check);
            assert!(check.ok);
        }
    }

    #[test]
    fn theorem1_doubled_scales_nonpositive_second_partial() {
        let mu = 1.0;
        let nests = NestStructure::new(
            mu,
            vec![2.0 * mu, 2.0 * mu],
            DenseMatrix::from_vec(3, 2, vec![0.6, 0.4, 0.3, 0.7, 0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let report = verify_theorem1(
            &nests,
            &utils(&[0.2, -0.3, 0.5]),
            &weights(&[1.0, 0.8, 1.2]),
            2,
        )
        .unwrap();
        for check in report.mixed_partials.iter().filter(|c| c.order == 2) {
            assert_eq!(check.expected_sign, -1);
            assert!(check.finite_difference <= 1e-4, "{:?}", check);
            assert!(check.ok);
        }
    }

    #[test]
    fn theorem1_first_partials_non_negative() {
        let mut rng = seed_rng(9);
        for _ in 0..10 {
            let (v, bc, nests) = sample_instance(&mut rng, 4, 2, false);
            let report = verify_theorem1(&nests, &v, &bc, 1).unwrap();
            for check in &report.mixed_partials {
                assert_eq!(check.expected_sign, 1);
                assert!(check.ok, "{:?}", check);
            }
            // G is strictly increasing in any exp-utility; the 1e6 growth bar
            // additionally depends on the instance constants (see the
            // canonical-instance test below)
            assert!(report.divergence_monotone);
            assert!(report.homogeneity_ok(1e-10));
        }
    }

    #[test]
    fn theorem1_divergence_bar_on_canonical_instance() {
        let nests = NestStructure::new(
            1.0,
            vec![2.0, 2.0],
            DenseMatrix::from_vec(5, 2, vec![0.5; 10]).unwrap(),
        )
        .unwrap();
        let v = utils(&[0.0; 5]);
        let bc = PerceptionVector::ones(5);
        let report = verify_theorem1(&nests, &v, &bc, 1).unwrap();
        assert!(
            report.divergence_ok(),
            "log growth {}",
            report.divergence_log_growth
        );
    }

    #[test]
    fn theorem1_rejects_unsupported() {
        let nests = NestStructure::single_nest(6, 1.0).unwrap();
        let v = utils(&[0.0; 6]);
        let bc = PerceptionVector::ones(6);
        assert!(matches!(
            verify_theorem1(&nests, &v, &bc, 2),
            Err(Error::UnsupportedCheck(_))
        ));
        let nests = NestStructure::single_nest(3, 1.0).unwrap();
        let v = utils(&[0.0; 3]);
        let bc = PerceptionVector::ones(3);
        assert!(matches!(
            verify_theorem1(&nests, &v, &bc, 4),
            Err(Error::UnsupportedCheck(_))
        ));
    }

    #[test]
    fn invalid_structures_rejected() {
        let alpha = DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(NestStructure::new(0.0, vec![1.0], alpha.clone()).is_err());
        assert!(NestStructure::new(1.0, vec![0.5], alpha.clone()).is_err());
        let zero_row = DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(NestStructure::new(1.0, vec![1.0], zero_row).is_err());
        let neg = DenseMatrix::from_vec(2, 1, vec![1.0, -0.1]).unwrap();
        assert!(NestStructure::new(1.0, vec![1.0], neg).is_err());
    }
}
