//! Reverse-mode differentiation tape.
//!
//! Nodes hold matrices whose rows are batch entries; a vector is a single
//! row. Each recording call evaluates its result eagerly and appends one op,
//! so node indices strictly increase and the tape is acyclic by
//! construction. `backward` replays the ops in reverse, accumulating a
//! gradient for every recorded input.
//!
//! The op set is exactly what small MLP heads with Gaussian and
//! truncated-normal log-densities need; there is no broadcasting beyond the
//! batch dimension.

use crate::error::{Error, Result};
use crate::numeric::linalg::{axpy, dot, DenseMatrix};
use crate::numeric::special::{
    lse_slice, normal_pdf_over_cdf, softmax_in_place, std_normal_logpdf, LN_2PI,
};
use crate::parallel;

const BN_EPS: f64 = 1e-8;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Affine { w: Var, b: Var, x: Var, out: Var },
    Tanh { x: Var, out: Var },
    Exp { x: Var, out: Var },
    Clamp { x: Var, lo: f64, hi: f64, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    SoftmaxRows { x: Var, out: Var },
    LogSumExpRows { x: Var, out: Var },
    RepeatRows { x: Var, times: usize, out: Var },
    GroupLogSumExp { x: Var, group: usize, out: Var },
    SumAll { x: Var, out: Var },
    GaussianLogPdfRows { x: Var, mean: Var, log_sigma: Var, out: Var },
    TruncNormLogPdfRows { data: Var, mean: Var, sigma: f64, lower: Vec<f64>, out: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, out: Var, mean: Vec<f64>, invstd: Vec<f64> },
}

/// Reverse-mode tape over matrix-valued nodes.
#[derive(Default)]
pub struct Tape {
    values: Vec<DenseMatrix>,
    grads: Vec<Option<DenseMatrix>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an input or parameter node.
    pub fn input(&mut self, value: DenseMatrix) -> Var {
        self.push(value)
    }

    /// Registers a node that will not receive a useful gradient (data,
    /// noise draws). Identical to [`Tape::input`]; the name documents intent.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value)
    }

    fn push(&mut self, value: DenseMatrix) -> Var {
        self.values.push(value);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.values[v.0]
    }

    /// Gradient accumulated at `v`; zeros if nothing flowed there.
    pub fn grad(&self, v: Var) -> DenseMatrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => DenseMatrix::zeros(self.values[v.0].rows(), self.values[v.0].cols()),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        (self.values[v.0].rows(), self.values[v.0].cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── forward recording ────────────────────────────────────────────

    /// `out = x * w^T + b` for each batch row of `x`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (b_rows, b_cols) = self.shape(b);
        if b_rows != 1 || b_cols != self.values[w.0].rows() {
            return Err(Error::shape("affine: bias must be one row of out_dim"));
        }
        let out = self.values[w.0].affine_batch(self.values[b.0].row(0), &self.values[x.0])?;
        let out = self.push(out);
        self.ops.push(Op::Affine { w, b, x, out });
        Ok(out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let out = self.push(out);
        self.ops.push(Op::Tanh { x, out });
        out
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = v.exp();
        }
        let out = self.push(out);
        self.ops.push(Op::Exp { x, out });
        out
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v = v.clamp(lo, hi);
        }
        let out = self.push(out);
        self.ops.push(Op::Clamp { x, lo, hi, out });
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.values[a.0].clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o += v;
        }
        let out = self.push(out);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.values[a.0].clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o -= v;
        }
        let out = self.push(out);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.values[a.0].clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= v;
        }
        let out = self.push(out);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let out = self.push(out);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        let cols = out.cols();
        parallel::for_each_row_mut(out.data_mut(), cols, |_, row| softmax_in_place(row));
        let out = self.push(out);
        self.ops.push(Op::SoftmaxRows { x, out });
        out
    }

    /// Row-wise `log(sum(exp(.)))`, giving a one-column matrix.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols == 0 {
            return Err(Error::shape("log_sum_exp over zero columns"));
        }
        let mut out = DenseMatrix::zeros(rows, 1);
        let src = &self.values[x.0];
        for r in 0..rows {
            out.set(r, 0, lse_slice(src.row(r)));
        }
        let out = self.push(out);
        self.ops.push(Op::LogSumExpRows { x, out });
        Ok(out)
    }

    /// Repeats each row of `x` `times` consecutive times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (rows, cols) = self.shape(x);
        let mut out = DenseMatrix::zeros(rows * times, cols);
        for r in 0..rows {
            for t in 0..times {
                out.row_mut(r * times + t).copy_from_slice(self.values[x.0].row(r));
            }
        }
        let out = self.push(out);
        self.ops.push(Op::RepeatRows { x, times, out });
        out
    }

    /// Log-sum-exp over consecutive groups of `group` rows of a one-column
    /// matrix.
    pub fn group_log_sum_exp(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if cols != 1 || group == 0 || rows % group != 0 {
            return Err(Error::shape(format!(
                "group_log_sum_exp: {rows}x{cols} rows with group {group}"
            )));
        }
        let n = rows / group;
        let mut out = DenseMatrix::zeros(n, 1);
        for g in 0..n {
            let chunk = &self.values[x.0].data()[g * group..(g + 1) * group];
            out.set(g, 0, lse_slice(chunk));
        }
        let out = self.push(out);
        self.ops.push(Op::GroupLogSumExp { x, group, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.values[x.0].data().iter().sum();
        let out = self.push(DenseMatrix::from_row(&[total]));
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Row-wise diagonal Gaussian log density of `x` under
    /// `Normal(mean, exp(log_sigma)^2)`, summed over columns.
    pub fn gaussian_logpdf_rows(&mut self, x: Var, mean: Var, log_sigma: Var) -> Result<Var> {
        self.same_shape(x, mean, "gaussian_logpdf")?;
        self.same_shape(x, log_sigma, "gaussian_logpdf")?;
        let (rows, cols) = self.shape(x);
        let mut out = DenseMatrix::zeros(rows, 1);
        for r in 0..rows {
            let xs = self.values[x.0].row(r);
            let ms = self.values[mean.0].row(r);
            let ls = self.values[log_sigma.0].row(r);
            let mut total = 0.0;
            for c in 0..cols {
                let u = (xs[c] - ms[c]) * (-ls[c]).exp();
                total += -0.5 * LN_2PI - ls[c] - 0.5 * u * u;
            }
            out.set(r, 0, total);
        }
        let out = self.push(out);
        self.ops.push(Op::GaussianLogPdfRows { x, mean, log_sigma, out });
        Ok(out)
    }

    /// Row-wise log density of constant `data` under a normal with mean
    /// `mean`, shared scale `sigma`, truncated below at `lower` per column.
    /// Gradient flows to `mean` only.
    pub fn truncnorm_logpdf_rows(
        &mut self,
        data: Var,
        mean: Var,
        sigma: f64,
        lower: &[f64],
    ) -> Result<Var> {
        if sigma <= 0.0 {
            return Err(Error::param(format!("truncnorm sigma must be > 0, got {sigma}")));
        }
        self.same_shape(data, mean, "truncnorm_logpdf")?;
        let (rows, cols) = self.shape(data);
        if lower.len() != cols {
            return Err(Error::shape("truncnorm_logpdf: lower bound length"));
        }
        let mut out = DenseMatrix::zeros(rows, 1);
        {
            let data_m = &self.values[data.0];
            let mean_m = &self.values[mean.0];
            parallel::for_each_row_mut(out.data_mut(), 1, |r, slot| {
                let xs = data_m.row(r);
                let ms = mean_m.row(r);
                let mut total = 0.0;
                for c in 0..cols {
                    if xs[c] < lower[c] {
                        total = f64::NEG_INFINITY;
                        break;
                    }
                    total += std_normal_logpdf((xs[c] - ms[c]) / sigma)
                        - sigma.ln()
                        - crate::numeric::special::ln_std_normal_cdf((ms[c] - lower[c]) / sigma);
                }
                slot[0] = total;
            });
        }
        let out = self.push(out);
        self.ops.push(Op::TruncNormLogPdfRows {
            data,
            mean,
            sigma,
            lower: lower.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Batch normalization over the rows of `x` with per-column scale
    /// `gamma` and shift `beta` (both one-row nodes). Uses the biased batch
    /// variance; the saved batch statistics are retrievable afterwards via
    /// [`Tape::batch_norm_stats`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(Error::shape("batch_norm: gamma/beta must be 1 x cols"));
        }
        if rows == 0 {
            return Err(Error::shape("batch_norm over empty batch"));
        }
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        {
            let xm = &self.values[x.0];
            for r in 0..rows {
                for (c, v) in xm.row(r).iter().enumerate() {
                    mean[c] += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= rows as f64;
            }
            for r in 0..rows {
                for (c, v) in xm.row(r).iter().enumerate() {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= rows as f64;
            }
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = DenseMatrix::zeros(rows, cols);
        {
            let xm = &self.values[x.0];
            let g = self.values[gamma.0].row(0).to_vec();
            let bt = self.values[beta.0].row(0).to_vec();
            let mean_c = mean.clone();
            let invstd_c = invstd.clone();
            parallel::for_each_row_mut(out.data_mut(), cols, |r, row| {
                let xs = xm.row(r);
                for c in 0..cols {
                    row[c] = g[c] * (xs[c] - mean_c[c]) * invstd_c[c] + bt[c];
                }
            });
        }
        let out = self.push(out);
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, mean, invstd });
        Ok(out)
    }

    /// Batch statistics `(mean, biased var)` saved by the `idx`-th batch-norm
    /// op recorded on this tape, in recording order.
    pub fn batch_norm_stats(&self, idx: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::BatchNorm { mean, invstd, .. } => Some((mean, invstd)),
                _ => None,
            })
            .nth(idx)
            .map(|(mean, invstd)| {
                let var: Vec<f64> = invstd.iter().map(|s| 1.0 / (s * s) - BN_EPS).collect();
                (mean.clone(), var)
            })
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: DenseMatrix) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => self.grads[v.0] = Some(delta),
        }
    }

    fn take_out_grad(&self, out: Var) -> Option<DenseMatrix> {
        self.grads[out.0].clone()
    }

    /// Runs the backward pass from a scalar node (1x1).
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.shape(out) != (1, 1) {
            return Err(Error::shape(format!(
                "backward requires a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        self.grads[out.0] = Some(DenseMatrix::from_row(&[1.0]));
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize) {
        // Ops are immutable once recorded; take the pieces we need up front.
        match &self.ops[i] {
            Op::Affine { w, b, x, out } => {
                let (w, b, x, out) = (*w, *b, *x, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let wm = &self.values[w.0];
                let xm = &self.values[x.0];
                let (batch, out_dim) = (dy.rows(), dy.cols());
                let in_dim = wm.cols();
                // dX = dY * W
                let mut dx = DenseMatrix::zeros(batch, in_dim);
                parallel::for_each_row_mut(dx.data_mut(), in_dim, |r, row| {
                    let dyr = dy.row(r);
                    for o in 0..out_dim {
                        axpy(dyr[o], wm.row(o), row);
                    }
                });
                // dW[o] = sum_r dY[r][o] * X[r]
                let mut dw = DenseMatrix::zeros(out_dim, in_dim);
                parallel::for_each_row_mut(dw.data_mut(), in_dim, |o, row| {
                    for r in 0..batch {
                        axpy(dy.get(r, o), xm.row(r), row);
                    }
                });
                // db = column sums of dY
                let mut db = DenseMatrix::zeros(1, out_dim);
                for r in 0..batch {
                    for (o, slot) in db.row_mut(0).iter_mut().enumerate() {
                        *slot += dy.get(r, o);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            Op::Tanh { x, out } => {
                let (x, out) = (*x, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let mut dx = dy;
                for (d, y) in dx.data_mut().iter_mut().zip(self.values[out.0].data()) {
                    *d *= 1.0 - y * y;
                }
                self.accumulate(x, dx);
            }
            Op::Exp { x, out } => {
                let (x, out) = (*x, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let mut dx = dy;
                for (d, y) in dx.data_mut().iter_mut().zip(self.values[out.0].data()) {
                    *d *= y;
                }
                self.accumulate(x, dx);
            }
            Op::Clamp { x, lo, hi, out } => {
                let (x, lo, hi, out) = (*x, *lo, *hi, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let mut dx = dy;
                for (d, v) in dx.data_mut().iter_mut().zip(self.values[x.0].data()) {
                    if *v < lo || *v > hi {
                        *d = 0.0;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy);
            }
            Op::Sub { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                self.accumulate(a, dy.clone());
                let mut neg = dy;
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.accumulate(b, neg);
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let mut da = dy.clone();
                for (d, v) in da.data_mut().iter_mut().zip(self.values[b.0].data()) {
                    *d *= v;
                }
                let mut db = dy;
                for (d, v) in db.data_mut().iter_mut().zip(self.values[a.0].data()) {
                    *d *= v;
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let mut dx = dy;
                for v in dx.data_mut() {
                    *v *= c;
                }
                self.accumulate(x, dx);
            }
            Op::SoftmaxRows { x, out } => {
                let (x, out) = (*x, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let y = &self.values[out.0];
                let cols = y.cols();
                let mut dx = DenseMatrix::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let d = dot(dyr, yr);
                    for c in 0..cols {
                        dx.set(r, c, yr[c] * (dyr[c] - d));
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LogSumExpRows { x, out } => {
                let (x, out) = (*x, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let xm = &self.values[x.0];
                let ym = &self.values[out.0];
                let cols = xm.cols();
                let mut dx = DenseMatrix::zeros(xm.rows(), cols);
                for r in 0..xm.rows() {
                    let lse = ym.get(r, 0);
                    let g = dy.get(r, 0);
                    let xr = xm.row(r);
                    let row = dx.row_mut(r);
                    for c in 0..cols {
                        row[c] = g * (xr[c] - lse).exp();
                    }
                }
                self.accumulate(x, dx);
            }
            Op::RepeatRows { x, times, out } => {
                let (x, times, out) = (*x, *times, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let (rows, cols) = self.shape(x);
                let mut dx = DenseMatrix::zeros(rows, cols);
                for r in 0..rows {
                    let row = dx.row_mut(r);
                    for t in 0..times {
                        for (c, v) in dy.row(r * times + t).iter().enumerate() {
                            row[c] += v;
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::GroupLogSumExp { x, group, out } => {
                let (x, group, out) = (*x, *group, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let xm = &self.values[x.0];
                let ym = &self.values[out.0];
                let mut dx = DenseMatrix::zeros(xm.rows(), 1);
                for g in 0..ym.rows() {
                    let lse = ym.get(g, 0);
                    let gy = dy.get(g, 0);
                    for r in g * group..(g + 1) * group {
                        dx.set(r, 0, gy * (xm.get(r, 0) - lse).exp());
                    }
                }
                self.accumulate(x, dx);
            }
            Op::SumAll { x, out } => {
                let (x, out) = (*x, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let g = dy.get(0, 0);
                let (rows, cols) = self.shape(x);
                let mut dx = DenseMatrix::zeros(rows, cols);
                for v in dx.data_mut() {
                    *v = g;
                }
                self.accumulate(x, dx);
            }
            Op::GaussianLogPdfRows { x, mean, log_sigma, out } => {
                let (x, mean, log_sigma, out) = (*x, *mean, *log_sigma, *out);
                let Some(dy) = self.take_out_grad(out) else { return };
                let xm = &self.values[x.0];
                let mm = &self.values[mean.0];
                let lm = &self.values[log_sigma.0];
                let (rows, cols) = (xm.rows(), xm.cols());
                let mut dx = DenseMatrix::zeros(rows, cols);
                let mut dmean = DenseMatrix::zeros(rows, cols);
                let mut dls = DenseMatrix::zeros(rows, cols);
                for r in 0..rows {
                    let g = dy.get(r, 0);
                    let xs = xm.row(r);
                    let ms = mm.row(r);
                    let ls = lm.row(r);
                    for c in 0..cols {
                        let inv_s = (-ls[c]).exp();
                        let u = (xs[c] - ms[c]) * inv_s;
                        dx.set(r, c, -g * u * inv_s);
                        dmean.set(r, c, g * u * inv_s);
                        dls.set(r, c, g * (u * u - 1.0));
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(mean, dmean);
                self.accumulate(log_sigma, dls);
            }
            Op::TruncNormLogPdfRows { data, mean, sigma, lower, out } => {
                let (data, mean, sigma, out) = (*data, *mean, *sigma, *out);
                let lower = lower.clone();
                let Some(dy) = self.take_out_grad(out) else { return };
                let dm = &self.values[data.0];
                let mm = &self.values[mean.0];
                let (rows, cols) = (dm.rows(), dm.cols());
                let mut dmean = DenseMatrix::zeros(rows, cols);
                parallel::for_each_row_mut(dmean.data_mut(), cols, |r, row| {
                    let g = dy.get(r, 0);
                    let xs = dm.row(r);
                    let ms = mm.row(r);
                    for c in 0..cols {
                        let u = (xs[c] - ms[c]) / sigma;
                        let t = (ms[c] - lower[c]) / sigma;
                        row[c] = g * (u - normal_pdf_over_cdf(t)) / sigma;
                    }
                });
                self.accumulate(mean, dmean);
            }
            Op::BatchNorm { x, gamma, beta, out, mean, invstd } => {
                let (x, gamma, beta, out) = (*x, *gamma, *beta, *out);
                let (mean, invstd) = (mean.clone(), invstd.clone());
                let Some(dy) = self.take_out_grad(out) else { return };
                let xm = &self.values[x.0];
                let gm = self.values[gamma.0].row(0).to_vec();
                let (rows, cols) = (xm.rows(), xm.cols());
                let n = rows as f64;
                // column reductions
                let mut sum_dy = vec![0.0; cols];
                let mut sum_dy_xhat = vec![0.0; cols];
                for r in 0..rows {
                    let dyr = dy.row(r);
                    let xr = xm.row(r);
                    for c in 0..cols {
                        let xhat = (xr[c] - mean[c]) * invstd[c];
                        sum_dy[c] += dyr[c];
                        sum_dy_xhat[c] += dyr[c] * xhat;
                    }
                }
                let mut dgamma = DenseMatrix::zeros(1, cols);
                let mut dbeta = DenseMatrix::zeros(1, cols);
                dgamma.row_mut(0).copy_from_slice(&sum_dy_xhat);
                dbeta.row_mut(0).copy_from_slice(&sum_dy);
                let mut dx = DenseMatrix::zeros(rows, cols);
                parallel::for_each_row_mut(dx.data_mut(), cols, |r, row| {
                    let dyr = dy.row(r);
                    let xr = xm.row(r);
                    for c in 0..cols {
                        let xhat = (xr[c] - mean[c]) * invstd[c];
                        row[c] = gm[c] * invstd[c]
                            * (dyr[c] - sum_dy[c] / n - xhat * sum_dy_xhat[c] / n);
                    }
                });
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
        }
    }
}

/// Gradient of a tape-recorded scalar function at `x`.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(DenseMatrix::from_row(x));
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    Ok(tape.grad(xv).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::check::central_difference_gradient;
    use crate::rng::seed_rng;
    use rand::Rng;

    #[test]
    fn quadratic_gradient() {
        // f(x) = x . x  =>  grad = 2x
        let g = gradient(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum_all(sq))
            },
            &[1.0, 2.0],
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn lse_gradient_is_softmax() {
        let g = gradient(|t, x| t.log_sum_exp_rows(x), &[0.0, 0.0]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_output_is_error() {
        let r = gradient(|t, x| Ok(t.scale(x, 2.0)), &[1.0, 2.0]);
        assert!(r.is_err());
    }

    fn rand_mat(rng: &mut crate::SeedRng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-0.8..0.8)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    /// Two-layer tanh MLP with a scalar head, matched against central
    /// differences over the input.
    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = seed_rng(100);
        for trial in 0..20 {
            let w1 = rand_mat(&mut rng, 4, 3);
            let b1 = rand_mat(&mut rng, 1, 4);
            let w2 = rand_mat(&mut rng, 4, 4);
            let b2 = rand_mat(&mut rng, 1, 4);
            let w3 = rand_mat(&mut rng, 1, 4);
            let b3 = rand_mat(&mut rng, 1, 1);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let eval = |xs: &[f64]| -> f64 {
                let h1: Vec<f64> = crate::numeric::linalg::affine(&w1, b1.row(0), xs)
                    .unwrap()
                    .iter()
                    .map(|v| v.tanh())
                    .collect();
                let h2: Vec<f64> = crate::numeric::linalg::affine(&w2, b2.row(0), &h1)
                    .unwrap()
                    .iter()
                    .map(|v| v.tanh())
                    .collect();
                crate::numeric::linalg::affine(&w3, b3.row(0), &h2).unwrap()[0]
            };

            let analytic = gradient(
                |t, xv| {
                    let w1 = t.input(w1.clone());
                    let b1 = t.input(b1.clone());
                    let w2 = t.input(w2.clone());
                    let b2 = t.input(b2.clone());
                    let w3 = t.input(w3.clone());
                    let b3 = t.input(b3.clone());
                    let h1 = t.affine(w1, b1, xv)?;
                    let h1 = t.tanh(h1);
                    let h2 = t.affine(w2, b2, h1)?;
                    let h2 = t.tanh(h2);
                    let o = t.affine(w3, b3, h2)?;
                    Ok(t.sum_all(o))
                },
                &x,
            )
            .unwrap();

            let fd = central_difference_gradient(&eval, &x, 1e-5);
            let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, f) in analytic.iter().zip(&fd) {
                assert!(
                    (a - f).abs() / scale < 1e-5,
                    "trial {trial}: analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn batched_ops_gradients_match_fd() {
        // exercise softmax, repeat, group-lse, gaussian and truncnorm ops in
        // one composite scalar
        let mut rng = seed_rng(7);
        let data = rand_mat(&mut rng, 4, 2);
        let data = {
            let mut d = data;
            for v in d.data_mut() {
                *v = v.abs() + 0.1;
            }
            d
        };
        let eps = rand_mat(&mut rng, 4, 2);
        let x0: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let build = |t: &mut Tape, xv: Var| -> Result<Var> {
            let data_v = t.constant(data.clone());
            let eps_v = t.constant(eps.clone());
            let rep = t.repeat_rows(xv, 4); // (4 x 2)
            let sm = t.softmax_rows(rep);
            let z = t.add(sm, eps_v)?;
            let zeros = t.constant(DenseMatrix::zeros(4, 2));
            let prior = t.gaussian_logpdf_rows(z, zeros, zeros)?;
            let lik = t.truncnorm_logpdf_rows(data_v, z, 0.9, &[0.0, 0.0])?;
            let s = t.add(prior, lik)?;
            let g = t.group_log_sum_exp(s, 2)?;
            Ok(t.sum_all(g))
        };

        let eval = |xs: &[f64]| -> f64 {
            let mut t = Tape::new();
            let xv = t.input(DenseMatrix::from_row(xs));
            let out = build(&mut t, xv).unwrap();
            t.value(out).get(0, 0)
        };

        let analytic = gradient(build, &x0).unwrap();
        let fd = central_difference_gradient(&eval, &x0, 1e-5);
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-6 * f.abs().max(1.0), "{a} vs {f}");
        }
    }

    #[test]
    fn batch_norm_gradient_matches_fd() {
        let mut rng = seed_rng(9);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = DenseMatrix::from_row(&[1.2, 0.8]);
        let beta = DenseMatrix::from_row(&[0.1, -0.2]);
        let w = rand_mat(&mut rng, 1, 2);

        let build = |t: &mut Tape, xv: Var| -> Result<Var> {
            // reshape the flat input into a 3x2 batch via constants
            let g = t.input(gamma.clone());
            let b = t.input(beta.clone());
            let wv = t.input(w.clone());
            let zero_b = t.constant(DenseMatrix::zeros(1, 1));
            let bn = t.batch_norm(xv, g, b)?;
            let o = t.affine(wv, zero_b, bn)?;
            Ok(t.sum_all(o))
        };

        let eval = |xs: &[f64]| -> f64 {
            let mut t = Tape::new();
            let xv = t.input(DenseMatrix::from_vec(3, 2, xs.to_vec()).unwrap());
            let out = build(&mut t, xv).unwrap();
            t.value(out).get(0, 0)
        };

        let mut t = Tape::new();
        let xv = t.input(DenseMatrix::from_vec(3, 2, x0.clone()).unwrap());
        let out = build(&mut t, xv).unwrap();
        t.backward(out).unwrap();
        let analytic = t.grad(xv);

        let fd = central_difference_gradient(&eval, &x0, 1e-6);
        for (a, f) in analytic.data().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-5 * f.abs().max(1.0), "{a} vs {f}");
        }
    }

    #[test]
    fn deterministic_replay() {
        let mut rng = seed_rng(5);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |xs: &[f64]| {
            gradient(
                |t, xv| {
                    let s = t.softmax_rows(xv);
                    let l = t.log_sum_exp_rows(s)?;
                    Ok(t.sum_all(l))
                },
                xs,
            )
            .unwrap()
        };
        assert_eq!(f(&x), f(&x));
    }
}
