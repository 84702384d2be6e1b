//! Encoder/decoder networks: dense layers with optional batch normalization
//! and tanh activations, He-initialized, plus evaluation-mode forwards and
//! the canonical parameter ordering shared by training, checkpoints, and
//! gradient checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numeric::linalg::DenseMatrix;
use crate::rng::SeedRng;

pub(crate) const BN_EPS: f64 = 1e-8;
pub(crate) const LOGVAR_MIN: f64 = -60.0;
pub(crate) const LOGVAR_MAX: f64 = 10.0;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub w: DenseMatrix,
    pub b: DenseMatrix,
}

impl Dense {
    pub fn he_init(out_dim: usize, in_dim: usize, rng: &mut SeedRng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dense {
            w: DenseMatrix::from_vec(out_dim, in_dim, data).unwrap(),
            b: DenseMatrix::zeros(1, out_dim),
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.w.affine_batch(self.b.row(0), x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm1 {
    pub gamma: DenseMatrix,
    pub beta: DenseMatrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm1 {
    pub fn new(dim: usize) -> Self {
        BatchNorm1 {
            gamma: DenseMatrix::from_vec(1, dim, vec![1.0; dim]).unwrap(),
            beta: DenseMatrix::zeros(1, dim),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Evaluation-mode forward using the running statistics.
    pub fn eval_forward(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = x.clone();
        let cols = out.cols();
        let g = self.gamma.row(0);
        let b = self.beta.row(0);
        crate::parallel::for_each_row_mut(out.data_mut(), cols, |_, row| {
            for c in 0..cols {
                let inv = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
                row[c] = g[c] * (row[c] - self.running_mean[c]) * inv + b[c];
            }
        });
        out
    }

    /// Folds one minibatch's statistics into the running averages.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64], batch_rows: usize) {
        // unbiased variance for the running estimate, as is conventional
        let correction = if batch_rows > 1 {
            batch_rows as f64 / (batch_rows as f64 - 1.0)
        } else {
            1.0
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * batch_mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * batch_var[c] * correction;
        }
    }
}

/// One hidden block: affine, optional batch norm, tanh.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HiddenLayer {
    pub dense: Dense,
    pub bn: Option<BatchNorm1>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Stack {
    pub layers: Vec<HiddenLayer>,
}

impl Stack {
    pub fn he_init(
        in_dim: usize,
        width: usize,
        depth: usize,
        batch_norm: bool,
        rng: &mut SeedRng,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut dim = in_dim;
        for _ in 0..depth {
            layers.push(HiddenLayer {
                dense: Dense::he_init(width, dim, rng),
                bn: batch_norm.then(|| BatchNorm1::new(width)),
            });
            dim = width;
        }
        Stack { layers }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.dense.w.rows())
    }

    pub fn eval_forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.dense.forward(&h)?;
            if let Some(bn) = &layer.bn {
                h = bn.eval_forward(&h);
            }
            for v in h.data_mut() {
                *v = v.tanh();
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Encoder {
    pub stack: Stack,
    pub mean_head: Dense,
    pub logvar_head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Decoder {
    pub stack: Stack,
    pub out_head: Dense,
}

/// Visits every trainable tensor in the fixed canonical order. Checkpoints,
/// SGD updates, flattening, and tape registration all rely on this order.
pub(crate) fn visit_params<'a>(
    encoder: &'a Encoder,
    decoder: &'a Decoder,
) -> Vec<&'a DenseMatrix> {
    let mut out: Vec<&'a DenseMatrix> = Vec::new();
    for layer in &encoder.stack.layers {
        out.push(&layer.dense.w);
        out.push(&layer.dense.b);
        if let Some(bn) = &layer.bn {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
    }
    out.push(&encoder.mean_head.w);
    out.push(&encoder.mean_head.b);
    out.push(&encoder.logvar_head.w);
    out.push(&encoder.logvar_head.b);
    for layer in &decoder.stack.layers {
        out.push(&layer.dense.w);
        out.push(&layer.dense.b);
        if let Some(bn) = &layer.bn {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
    }
    out.push(&decoder.out_head.w);
    out.push(&decoder.out_head.b);
    out
}

pub(crate) fn visit_params_mut<'a>(
    encoder: &'a mut Encoder,
    decoder: &'a mut Decoder,
) -> Vec<&'a mut DenseMatrix> {
    let mut out: Vec<&'a mut DenseMatrix> = Vec::new();
    for layer in &mut encoder.stack.layers {
        out.push(&mut layer.dense.w);
        out.push(&mut layer.dense.b);
        if let Some(bn) = &mut layer.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
    }
    out.push(&mut encoder.mean_head.w);
    out.push(&mut encoder.mean_head.b);
    out.push(&mut encoder.logvar_head.w);
    out.push(&mut encoder.logvar_head.b);
    for layer in &mut decoder.stack.layers {
        out.push(&mut layer.dense.w);
        out.push(&mut layer.dense.b);
        if let Some(bn) = &mut layer.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
    }
    out.push(&mut decoder.out_head.w);
    out.push(&mut decoder.out_head.b);
    out
}
