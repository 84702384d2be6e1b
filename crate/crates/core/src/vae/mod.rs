//! Variational autoencoder for choice set generation and implicit
//! perception.
//!
//! The encoder maps an alternative's normalized attributes to a diagonal
//! Gaussian posterior over latent cluster scores; the decoder softmax-
//! normalizes a latent draw and produces the mean of a truncated-normal
//! attribute distribution. The importance-weighted Monte Carlo average of
//! `p(z) q(j|z) / p_phi(z|j)` is both the training objective (its log lower
//! bounds the log marginal) and, with weights frozen, the estimator of
//! `ln BC(j)`.
//!
//! The model works in normalized attribute space. Absolute attributes are
//! non-negative, so the truncation bound of the attribute distribution is
//! the normalized image of absolute zero, one bound per attribute.

mod checkpoint;
mod net;
mod search;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use search::{random_search, SearchSpace, TrialResult};
pub use train::{minibatch_bound, minibatch_bound_and_grad, train, TrainReport};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::AttributeSchema;
use crate::error::{Error, Result};
use crate::numeric::linalg::DenseMatrix;
use crate::numeric::special::{
    lse_slice, softmax_in_place, std_normal_logpdf, truncnorm_sample, LN_2PI,
};
use crate::rng::SeedRng;

use net::{Decoder, Encoder, Stack, LOGVAR_MAX, LOGVAR_MIN};

/// Network and training hyperparameters. The defaults are the selected
/// configuration: latent dimension 3, two encoder and three decoder hidden
/// layers, batch normalization on, minibatches of 100, learning rate 1e-3,
/// 100 Monte Carlo draws, 10000 iterations, fixed decoder sigma 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VaeHyperparams {
    pub latent_dim: usize,
    pub encoder_hidden_layers: usize,
    pub decoder_hidden_layers: usize,
    pub batch_norm: bool,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub mc_draws: usize,
    pub max_iterations: usize,
    pub decoder_sigma: f64,
    pub hidden_width: usize,
}

impl Default for VaeHyperparams {
    fn default() -> Self {
        VaeHyperparams {
            latent_dim: 3,
            encoder_hidden_layers: 2,
            decoder_hidden_layers: 3,
            batch_norm: true,
            minibatch_size: 100,
            learning_rate: 1e-3,
            mc_draws: 100,
            max_iterations: 10_000,
            decoder_sigma: 1.0,
            hidden_width: 16,
        }
    }
}

impl VaeHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::param("latent_dim must be >= 1"));
        }
        if self.mc_draws == 0 {
            return Err(Error::param("mc_draws must be >= 1"));
        }
        if self.minibatch_size == 0 {
            return Err(Error::param("minibatch_size must be >= 1"));
        }
        if !(self.decoder_sigma > 0.0) {
            return Err(Error::param("decoder_sigma must be > 0"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::param("learning_rate must be >= 0"));
        }
        if self.hidden_width == 0
            && (self.encoder_hidden_layers > 0 || self.decoder_hidden_layers > 0)
        {
            return Err(Error::param("hidden_width must be >= 1 with hidden layers"));
        }
        Ok(())
    }
}

/// Encoder/decoder weights plus the attribute schema that defines the
/// model's normalized input space.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub hyper: VaeHyperparams,
    pub schema: AttributeSchema,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
    /// Truncation bound of the attribute distribution in normalized space:
    /// the image of absolute zero per attribute.
    pub(crate) lower: Vec<f64>,
}

impl VaeModel {
    /// He-initialized model over the schema's attribute space.
    pub fn init(hyper: VaeHyperparams, schema: AttributeSchema, rng: &mut SeedRng) -> Result<Self> {
        hyper.validate()?;
        let attr_dim = schema.len();
        let width = hyper.hidden_width;
        let enc_stack = Stack::he_init(
            attr_dim,
            width,
            hyper.encoder_hidden_layers,
            hyper.batch_norm,
            rng,
        );
        let enc_out = enc_stack.out_dim(attr_dim);
        let encoder = Encoder {
            mean_head: net::Dense::he_init(hyper.latent_dim, enc_out, rng),
            logvar_head: net::Dense::he_init(hyper.latent_dim, enc_out, rng),
            stack: enc_stack,
        };
        let dec_stack = Stack::he_init(
            hyper.latent_dim,
            width,
            hyper.decoder_hidden_layers,
            hyper.batch_norm,
            rng,
        );
        let dec_out = dec_stack.out_dim(hyper.latent_dim);
        let decoder = Decoder {
            out_head: net::Dense::he_init(attr_dim, dec_out, rng),
            stack: dec_stack,
        };
        let lower = schema.normalized_lower_bounds();
        Ok(VaeModel { hyper, schema, encoder, decoder, lower })
    }

    pub fn attr_dim(&self) -> usize {
        self.schema.len()
    }

    /// Normalized-space truncation bounds (image of absolute zero).
    pub fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }

    fn check_input(&self, j: &[f64]) -> Result<()> {
        if j.len() != self.attr_dim() {
            return Err(Error::shape(format!(
                "alternative has {} attributes, model expects {}",
                j.len(),
                self.attr_dim()
            )));
        }
        Ok(())
    }

    /// Posterior parameters `(mu_phi(j), sigma_phi(j))` for one normalized
    /// alternative. Deterministic given the weights; batch normalization
    /// runs in evaluation mode.
    pub fn encode(&self, j: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(j)?;
        let x = DenseMatrix::from_row(j);
        let h = self.encoder.stack.eval_forward(&x)?;
        let mu = self.encoder.mean_head.forward(&h)?;
        let lv = self.encoder.logvar_head.forward(&h)?;
        let sigma: Vec<f64> = lv
            .row(0)
            .iter()
            .map(|v| (0.5 * v.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp())
            .collect();
        Ok((mu.row(0).to_vec(), sigma))
    }

    /// Reparameterized posterior draw `z = mu + sigma .* eps`.
    pub fn sample_posterior(&self, j: &[f64], rng: &mut SeedRng) -> Result<Vec<f64>> {
        let (mu, sigma) = self.encode(j)?;
        Ok(mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// Decoder mean `mu_theta(z)`: softmax over the latent draw, then the
    /// hidden stack and the output head.
    pub fn decode_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.hyper.latent_dim {
            return Err(Error::shape(format!(
                "latent draw has {} entries, model expects {}",
                z.len(),
                self.hyper.latent_dim
            )));
        }
        let mut sm = z.to_vec();
        softmax_in_place(&mut sm);
        let h = self.decoder.stack.eval_forward(&DenseMatrix::from_row(&sm))?;
        Ok(self.decoder.out_head.forward(&h)?.row(0).to_vec())
    }

    /// Log importance weight of one posterior draw for alternative `j`:
    /// `ln p(z) + ln q(j|z) - ln p_phi(z|j)`.
    fn log_weight(&self, j: &[f64], mu: &[f64], sigma: &[f64], z: &[f64]) -> Result<f64> {
        let mut log_prior = 0.0;
        for &zd in z {
            log_prior += std_normal_logpdf(zd);
        }
        let mut log_post = 0.0;
        for ((zd, m), s) in z.iter().zip(mu).zip(sigma) {
            let u = (zd - m) / s;
            log_post += -0.5 * LN_2PI - s.ln() - 0.5 * u * u;
        }
        let mean = self.decode_mean(z)?;
        let log_lik = crate::numeric::special::truncnorm_logpdf_lb(
            j,
            &mean,
            self.hyper.decoder_sigma,
            &self.lower,
        )?;
        Ok(log_prior + log_lik - log_post)
    }

    /// Importance-weighted lower-bound estimate of `ln q(j)` from `s`
    /// posterior draws: `lse(log w) - ln s`.
    pub fn iwae_bound(&self, j: &[f64], s: usize, rng: &mut SeedRng) -> Result<f64> {
        self.check_input(j)?;
        if s == 0 {
            return Err(Error::param("draw count must be >= 1"));
        }
        let (mu, sigma) = self.encode(j)?;
        log_mean_weights(s, rng, |rng| {
            let z: Vec<f64> = mu
                .iter()
                .zip(&sigma)
                .map(|(m, sd)| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            self.log_weight(j, &mu, &sigma, &z)
        })
    }

    /// `ln BC(j)`: the same Monte Carlo estimator with weights held fixed.
    pub fn estimate_log_bc(&self, j: &[f64], s: usize, rng: &mut SeedRng) -> Result<f64> {
        self.iwae_bound(j, s, rng)
    }

    /// Draws a new alternative in normalized space: `z` from the prior,
    /// then one draw per attribute from the truncated normal around
    /// `mu_theta(z)`. Denormalizing yields a non-negative absolute vector.
    pub fn generate_alternative(&self, rng: &mut SeedRng) -> Result<Vec<f64>> {
        let z: Vec<f64> = (0..self.hyper.latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = self.decode_mean(&z)?;
        Ok(mean
            .iter()
            .zip(&self.lower)
            .map(|(m, l)| truncnorm_sample(*m, self.hyper.decoder_sigma, *l, rng))
            .collect())
    }

    /// Nest membership of `j`: the average of `softmax(z)` over posterior
    /// draws. Entries lie in `[0, 1]` and sum to one.
    pub fn nest_membership(&self, j: &[f64], rng: &mut SeedRng, draws: usize) -> Result<Vec<f64>> {
        if draws == 0 {
            return Err(Error::param("membership draws must be >= 1"));
        }
        let (mu, sigma) = self.encode(j)?;
        let mut acc = vec![0.0; self.hyper.latent_dim];
        for _ in 0..draws {
            let mut z: Vec<f64> = mu
                .iter()
                .zip(&sigma)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            softmax_in_place(&mut z);
            for (a, v) in acc.iter_mut().zip(&z) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= draws as f64;
        }
        Ok(acc)
    }

    /// Flattens all trainable tensors in canonical order.
    pub fn flatten_params(&self) -> Vec<f64> {
        net::visit_params(&self.encoder, &self.decoder)
            .into_iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    /// Writes a flat parameter vector back into the model.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for m in net::visit_params_mut(&mut self.encoder, &mut self.decoder) {
            let n = m.data().len();
            if offset + n > flat.len() {
                return Err(Error::shape("flat parameter vector too short"));
            }
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::shape("flat parameter vector too long"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        net::visit_params(&self.encoder, &self.decoder)
            .iter()
            .map(|m| m.data().len())
            .sum()
    }
}

/// The shared Monte Carlo estimator `lse(log w_1..s) - ln s`. The closure
/// produces one log importance weight per call; the linear-Gaussian test
/// harness plugs its own weights through here.
pub fn log_mean_weights<F>(s: usize, rng: &mut SeedRng, mut log_w: F) -> Result<f64>
where
    F: FnMut(&mut SeedRng) -> Result<f64>,
{
    if s == 0 {
        return Err(Error::param("draw count must be >= 1"));
    }
    let mut logs = Vec::with_capacity(s);
    for _ in 0..s {
        logs.push(log_w(rng)?);
    }
    Ok(lse_slice(&logs) - (s as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{child_rng, seed_rng};

    /// Schema with zero means and unit stds: normalized space equals
    /// absolute space and the truncation bound sits at exactly zero.
    pub(crate) fn plain_schema(dim: usize) -> AttributeSchema {
        AttributeSchema::new(
            (0..dim).map(|i| format!("x{i}")).collect(),
            vec![0.0; dim],
            vec![1.0; dim],
        )
        .unwrap()
    }

    fn tiny_hyper(latent: usize, enc: usize, dec: usize, bn: bool) -> VaeHyperparams {
        VaeHyperparams {
            latent_dim: latent,
            encoder_hidden_layers: enc,
            decoder_hidden_layers: dec,
            batch_norm: bn,
            hidden_width: 3,
            mc_draws: 5,
            minibatch_size: 4,
            max_iterations: 10,
            ..VaeHyperparams::default()
        }
    }

    #[test]
    fn defaults_are_the_selected_configuration() {
        let h = VaeHyperparams::default();
        assert_eq!(h.latent_dim, 3);
        assert_eq!(h.encoder_hidden_layers, 2);
        assert_eq!(h.decoder_hidden_layers, 3);
        assert!(h.batch_norm);
        assert_eq!(h.minibatch_size, 100);
        assert_eq!(h.learning_rate, 1e-3);
        assert_eq!(h.mc_draws, 100);
        assert_eq!(h.max_iterations, 10_000);
        assert_eq!(h.decoder_sigma, 1.0);
    }

    #[test]
    fn zero_weight_encoder_gives_standard_posterior() {
        let mut rng = seed_rng(1);
        let mut model =
            VaeModel::init(tiny_hyper(2, 1, 1, false), plain_schema(3), &mut rng).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_params(&zeros).unwrap();
        let (mu, sigma) = model.encode(&[0.4, 0.1, 0.9]).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn encode_deterministic_and_shape_checked() {
        let mut rng = seed_rng(2);
        let model = VaeModel::init(tiny_hyper(2, 2, 1, true), plain_schema(3), &mut rng).unwrap();
        let a = model.encode(&[0.4, 0.1, 0.9]).unwrap();
        let b = model.encode(&[0.4, 0.1, 0.9]).unwrap();
        assert_eq!(a, b);
        assert!(model.encode(&[0.4, 0.1]).is_err());
    }

    #[test]
    fn posterior_sampling_matches_encoder_moments() {
        let mut rng = seed_rng(3);
        let model = VaeModel::init(tiny_hyper(2, 1, 1, false), plain_schema(2), &mut rng).unwrap();
        let j = [0.7, 0.2];
        let (mu, sigma) = model.encode(&j).unwrap();
        let n = 100_000;
        let mut sum = vec![0.0; 2];
        let mut sumsq = vec![0.0; 2];
        for _ in 0..n {
            let z = model.sample_posterior(&j, &mut rng).unwrap();
            for d in 0..2 {
                sum[d] += z[d];
                sumsq[d] += z[d] * z[d];
            }
        }
        for d in 0..2 {
            let m = sum[d] / n as f64;
            let v = sumsq[d] / n as f64 - m * m;
            let se = sigma[d] / (n as f64).sqrt();
            assert!((m - mu[d]).abs() < 4.0 * se, "mean off: {m} vs {}", mu[d]);
            assert!(
                (v - sigma[d] * sigma[d]).abs() < 0.05 * sigma[d] * sigma[d],
                "var off: {v} vs {}",
                sigma[d] * sigma[d]
            );
        }
    }

    #[test]
    fn degenerate_sigma_collapses_to_mean() {
        let mut rng = seed_rng(4);
        let mut model =
            VaeModel::init(tiny_hyper(2, 0, 0, false), plain_schema(2), &mut rng).unwrap();
        // no hidden stack: heads act on the input directly; force the
        // log-variance bias to -60 (sigma ~ 9e-14)
        let mut flat = model.flatten_params();
        let n = flat.len();
        // layout: mean w (2x2), mean b (2), logvar w (2x2), logvar b (2), dec head w, dec head b
        flat[4 + 2] = 0.0; // keep logvar weights zero
        model.set_params(&flat).unwrap();
        {
            let lvb = &mut model.encoder.logvar_head.b;
            for v in lvb.data_mut() {
                *v = -60.0;
            }
        }
        let _ = n;
        let j = [0.3, 0.8];
        let (mu, _) = model.encode(&j).unwrap();
        let z = model.sample_posterior(&j, &mut rng).unwrap();
        for d in 0..2 {
            assert!((z[d] - mu[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_mean_shift_invariant() {
        let mut rng = seed_rng(5);
        let model = VaeModel::init(tiny_hyper(3, 1, 2, false), plain_schema(4), &mut rng).unwrap();
        let z = [0.3, -0.4, 1.1];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
        let a = model.decode_mean(&z).unwrap();
        let b = model.decode_mean(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_decoder_outputs_bias() {
        let mut rng = seed_rng(6);
        let mut model =
            VaeModel::init(tiny_hyper(2, 0, 0, false), plain_schema(3), &mut rng).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_params(&zeros).unwrap();
        {
            let bias = &mut model.decoder.out_head.b;
            bias.data_mut().copy_from_slice(&[0.5, 1.5, 2.5]);
        }
        let mean = model.decode_mean(&[0.0, 0.0]).unwrap();
        assert_eq!(mean, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn iwae_bound_deterministic_and_equal_to_log_bc() {
        let mut rng = seed_rng(7);
        let model = VaeModel::init(tiny_hyper(2, 1, 1, true), plain_schema(3), &mut rng).unwrap();
        let j = [0.4, 0.8, 0.2];
        let a = model.iwae_bound(&j, 50, &mut child_rng(9, 0)).unwrap();
        let b = model.iwae_bound(&j, 50, &mut child_rng(9, 0)).unwrap();
        let c = model.estimate_log_bc(&j, 50, &mut child_rng(9, 0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
        assert!(model.iwae_bound(&j, 0, &mut rng).is_err());
    }

    #[test]
    fn log_bc_variance_shrinks_with_draws() {
        let mut rng = seed_rng(8);
        let model = VaeModel::init(tiny_hyper(2, 1, 1, false), plain_schema(2), &mut rng).unwrap();
        let j = [0.5, 0.3];
        let spread = |s: usize| {
            let vals: Vec<f64> = (0..40)
                .map(|k| model.estimate_log_bc(&j, s, &mut child_rng(77, k)).unwrap())
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
        };
        let v10 = spread(10);
        let v100 = spread(100);
        let v1000 = spread(1000);
        assert!(v100 < v10, "{v100} !< {v10}");
        assert!(v1000 < v100, "{v1000} !< {v100}");
    }

    #[test]
    fn generated_alternatives_respect_support() {
        let mut rng = seed_rng(9);
        // canonical schema: normalized bounds are negative, absolute space
        // must come out non-negative
        let model = VaeModel::init(
            tiny_hyper(3, 1, 1, false),
            AttributeSchema::canonical(),
            &mut rng,
        )
        .unwrap();
        for _ in 0..2000 {
            let norm = model.generate_alternative(&mut rng).unwrap();
            for (v, l) in norm.iter().zip(model.lower_bounds()) {
                assert!(v >= l);
            }
            let abs = model.schema.denormalize_row(&norm).unwrap();
            assert!(abs.iter().all(|v| *v >= 0.0));
        }
        // determinism
        let a = model.generate_alternative(&mut child_rng(5, 1)).unwrap();
        let b = model.generate_alternative(&mut child_rng(5, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_matches_truncated_normal_moment() {
        // decoder forced to a constant mean c: draws follow
        // TruncatedNormal(c, 1) so the empirical mean has a closed form
        let mut rng = seed_rng(10);
        let mut model =
            VaeModel::init(tiny_hyper(2, 0, 0, false), plain_schema(1), &mut rng).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_params(&zeros).unwrap();
        let c = 0.4;
        model.decoder.out_head.b.data_mut()[0] = c;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = model.generate_alternative(&mut rng).unwrap();
            assert!(x[0] >= 0.0);
            sum += x[0];
        }
        let want = crate::numeric::special::truncnorm_mean(c, 1.0, 0.0);
        let got = sum / n as f64;
        assert!((got - want).abs() < 0.02 * want, "{got} vs {want}");
    }

    #[test]
    fn nest_membership_simplex() {
        let mut rng = seed_rng(11);
        let model = VaeModel::init(tiny_hyper(3, 1, 1, true), plain_schema(4), &mut rng).unwrap();
        let alpha = model.nest_membership(&[0.2, 0.5, 0.1, 0.9], &mut rng, 200).unwrap();
        assert_eq!(alpha.len(), 3);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(model.nest_membership(&[0.2, 0.5, 0.1, 0.9], &mut rng, 0).is_err());
    }

    #[test]
    fn singleton_latent_membership_is_one() {
        let mut rng = seed_rng(12);
        let model = VaeModel::init(tiny_hyper(1, 1, 1, false), plain_schema(2), &mut rng).unwrap();
        let alpha = model.nest_membership(&[0.3, 0.3], &mut rng, 10).unwrap();
        assert_eq!(alpha, vec![1.0]);
    }

    #[test]
    fn degenerate_posterior_membership_is_softmax_of_mean() {
        let mut rng = seed_rng(13);
        let mut model =
            VaeModel::init(tiny_hyper(3, 0, 0, false), plain_schema(3), &mut rng).unwrap();
        for v in model.encoder.logvar_head.b.data_mut() {
            *v = -60.0;
        }
        for v in model.encoder.logvar_head.w.data_mut() {
            *v = 0.0;
        }
        let j = [0.5, 0.1, 0.8];
        let (mu, _) = model.encode(&j).unwrap();
        let want = crate::numeric::softmax(&mu).unwrap();
        let got = model.nest_membership(&j, &mut rng, 50).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn flatten_set_round_trip() {
        let mut rng = seed_rng(14);
        let model = VaeModel::init(tiny_hyper(3, 2, 2, true), plain_schema(5), &mut rng).unwrap();
        let flat = model.flatten_params();
        assert_eq!(flat.len(), model.param_count());
        let mut other =
            VaeModel::init(tiny_hyper(3, 2, 2, true), plain_schema(5), &mut seed_rng(99)).unwrap();
        other.set_params(&flat).unwrap();
        assert_eq!(model.flatten_params(), other.flatten_params());
        assert_eq!(model.encoder, other.encoder);
    }
}
