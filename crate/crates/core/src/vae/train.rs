//! Training: the batched importance-weighted objective recorded on the tape,
//! and plain stochastic gradient ascent over minibatches.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::linalg::DenseMatrix;
use crate::numeric::tape::{Tape, Var};
use crate::rng::SeedRng;

use super::net::{visit_params, visit_params_mut, LOGVAR_MAX, LOGVAR_MIN};
use super::VaeModel;

/// Per-iteration minibatch bound values.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<f64>,
}

/// Records the minibatch objective
/// `mean_n [ lse_s(log w_ns) - ln S ]`
/// on a tape. Batch normalization, when present, runs in training mode over
/// the minibatch. Returns the objective node and the parameter nodes in
/// canonical order.
fn build_objective(
    model: &VaeModel,
    tape: &mut Tape,
    batch: &DenseMatrix,
    eps: &DenseMatrix,
) -> Result<(Var, Vec<Var>)> {
    let b = batch.rows();
    let s = eps.rows() / b;
    if b == 0 || eps.rows() != b * s || eps.cols() != model.hyper.latent_dim {
        return Err(Error::shape(format!(
            "objective: batch {b} rows, noise {}x{}",
            eps.rows(),
            eps.cols()
        )));
    }

    // register parameters in canonical order
    let mut params = Vec::new();
    for p in visit_params(&model.encoder, &model.decoder) {
        params.push(tape.input(p.clone()));
    }
    let mut next = params.iter().copied();
    let mut take = || next.next().expect("canonical parameter order");

    let x = tape.constant(batch.clone());

    // encoder stack
    let mut h = x;
    for layer in &model.encoder.stack.layers {
        let w = take();
        let bias = take();
        h = tape.affine(w, bias, h)?;
        if layer.bn.is_some() {
            let gamma = take();
            let beta = take();
            h = tape.batch_norm(h, gamma, beta)?;
        }
        h = tape.tanh(h);
    }
    let (w_mu, b_mu) = (take(), take());
    let mu = tape.affine(w_mu, b_mu, h)?;
    let (w_lv, b_lv) = (take(), take());
    let lv = tape.affine(w_lv, b_lv, h)?;
    let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    let log_sigma = tape.scale(lv, 0.5);

    // reparameterized draws, S per observation
    let mu_rep = tape.repeat_rows(mu, s);
    let log_sigma_rep = tape.repeat_rows(log_sigma, s);
    let sigma_rep = tape.exp(log_sigma_rep);
    let eps_v = tape.constant(eps.clone());
    let noise = tape.mul(sigma_rep, eps_v)?;
    let z = tape.add(mu_rep, noise)?;

    // prior and posterior log densities
    let zeros = tape.constant(DenseMatrix::zeros(b * s, model.hyper.latent_dim));
    let log_prior = tape.gaussian_logpdf_rows(z, zeros, zeros)?;
    let log_post = tape.gaussian_logpdf_rows(z, mu_rep, log_sigma_rep)?;

    // decoder
    let mut d = tape.softmax_rows(z);
    for layer in &model.decoder.stack.layers {
        let w = take();
        let bias = take();
        d = tape.affine(w, bias, d)?;
        if layer.bn.is_some() {
            let gamma = take();
            let beta = take();
            d = tape.batch_norm(d, gamma, beta)?;
        }
        d = tape.tanh(d);
    }
    let (w_out, b_out) = (take(), take());
    let mean = tape.affine(w_out, b_out, d)?;

    // observed rows repeated to align with the draws
    let mut repeated = DenseMatrix::zeros(b * s, batch.cols());
    for r in 0..b {
        for k in 0..s {
            repeated.row_mut(r * s + k).copy_from_slice(batch.row(r));
        }
    }
    let data_rep = tape.constant(repeated);
    let log_lik =
        tape.truncnorm_logpdf_rows(data_rep, mean, model.hyper.decoder_sigma, &model.lower)?;

    let ratio = tape.sub(log_prior, log_post)?;
    let log_w = tape.add(log_lik, ratio)?;
    let per_obs = tape.group_log_sum_exp(log_w, s)?;
    let minus_ln_s = tape.constant(DenseMatrix::from_vec(
        b,
        1,
        vec![-(s as f64).ln(); b],
    )?);
    let bounds = tape.add(per_obs, minus_ln_s)?;
    let total = tape.sum_all(bounds);
    let objective = tape.scale(total, 1.0 / b as f64);
    Ok((objective, params))
}

/// Minibatch objective value under fixed noise. The finite-difference side
/// of the gradient checks evaluates this on perturbed parameter vectors.
pub fn minibatch_bound(model: &VaeModel, batch: &DenseMatrix, eps: &DenseMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let (objective, _) = build_objective(model, &mut tape, batch, eps)?;
    Ok(tape.value(objective).get(0, 0))
}

/// Minibatch objective and its gradient with respect to the flattened
/// parameters, under fixed noise.
pub fn minibatch_bound_and_grad(
    model: &VaeModel,
    batch: &DenseMatrix,
    eps: &DenseMatrix,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (objective, params) = build_objective(model, &mut tape, batch, eps)?;
    let value = tape.value(objective).get(0, 0);
    tape.backward(objective)?;
    let mut flat = Vec::new();
    for p in params {
        flat.extend_from_slice(tape.grad(p).data());
    }
    Ok((value, flat))
}

/// Trains the model in place by stochastic gradient ascent on the
/// importance-weighted bound. Returns the per-iteration minibatch bound
/// trace. Fails with a divergence error (naming the iteration) if the bound
/// leaves the finite range.
pub fn train(model: &mut VaeModel, data: &[Vec<f64>], rng: &mut SeedRng) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != model.attr_dim() {
            return Err(Error::shape(format!(
                "training row {i} has {} attributes, model expects {}",
                row.len(),
                model.attr_dim()
            )));
        }
        if row.iter().zip(&model.lower).any(|(v, l)| v < l) {
            return Err(Error::Data(format!(
                "training row {i} lies outside the attribute support"
            )));
        }
    }
    let n = data.len();
    let b = model.hyper.minibatch_size.min(n);
    let s = model.hyper.mc_draws;
    let zdim = model.hyper.latent_dim;
    let lr = model.hyper.learning_rate;

    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n; // forces a shuffle on the first iteration
    let mut trace = Vec::with_capacity(model.hyper.max_iterations);

    for iteration in 0..model.hyper.max_iterations {
        if pos + b > n {
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            pos = 0;
        }
        let idx = &order[pos..pos + b];
        pos += b;

        let mut batch = DenseMatrix::zeros(b, model.attr_dim());
        for (r, &i) in idx.iter().enumerate() {
            batch.row_mut(r).copy_from_slice(&data[i]);
        }
        let eps_data: Vec<f64> = (0..b * s * zdim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let eps = DenseMatrix::from_vec(b * s, zdim, eps_data)?;

        let mut tape = Tape::new();
        let (objective, params) = build_objective(model, &mut tape, &batch, &eps)?;
        let bound = tape.value(objective).get(0, 0);
        if !bound.is_finite() {
            return Err(Error::Divergence {
                iteration,
                message: format!("minibatch bound became {bound}"),
            });
        }
        tape.backward(objective)?;
        let grads: Vec<DenseMatrix> = params.iter().map(|p| tape.grad(*p)).collect();

        // running batch-norm statistics, encoder layers then decoder layers
        let mut bn_idx = 0;
        for (layer, rows) in model
            .encoder
            .stack
            .layers
            .iter_mut()
            .map(|l| (l, b))
            .chain(model.decoder.stack.layers.iter_mut().map(|l| (l, b * s)))
        {
            if let Some(bn) = &mut layer.bn {
                let (mean, var) = tape
                    .batch_norm_stats(bn_idx)
                    .ok_or_else(|| Error::Numerical("missing batch-norm stats".into()))?;
                bn.update_running(&mean, &var, rows);
                bn_idx += 1;
            }
        }
        drop(tape);

        // gradient ascent
        if lr != 0.0 {
            for (p, g) in visit_params_mut(&mut model.encoder, &mut model.decoder)
                .into_iter()
                .zip(&grads)
            {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv += lr * gv;
                }
            }
        }
        trace.push(bound);
    }
    Ok(TrainReport { trace })
}
