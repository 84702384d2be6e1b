//! Dense row-major matrices and the handful of vector kernels the models need.

use crate::error::{Error, Result};
use crate::parallel;

/// Dense matrix of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Single row treated as a matrix, for feeding vectors through batched ops.
    pub fn from_row(row: &[f64]) -> Self {
        DenseMatrix {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product `self * x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "mul_vec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// Batched affine map: `out[r] = x[r] * self^T + b` for every row of `x`.
    ///
    /// `self` is `(out_dim x in_dim)`, `x` is `(batch x in_dim)`, the result
    /// is `(batch x out_dim)`.
    pub fn affine_batch(&self, b: &[f64], x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols != self.cols {
            return Err(Error::shape(format!(
                "affine_batch: weight expects input dim {}, got {}",
                self.cols, x.cols
            )));
        }
        if b.len() != self.rows {
            return Err(Error::shape(format!(
                "affine_batch: bias has len {}, weight has {} rows",
                b.len(),
                self.rows
            )));
        }
        let out_dim = self.rows;
        let mut out = DenseMatrix::zeros(x.rows, out_dim);
        parallel::for_each_row_mut(&mut out.data, out_dim, |r, out_row| {
            let x_row = x.row(r);
            for (o, slot) in out_row.iter_mut().enumerate() {
                *slot = b[o] + dot(self.row(o), x_row);
            }
        });
        Ok(out)
    }
}

/// `affine(W, b, x) = W x + b` on plain vectors.
pub fn affine(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows() {
        return Err(Error::shape(format!(
            "affine: bias len {} does not match {} rows",
            b.len(),
            w.rows()
        )));
    }
    let mut out = w.mul_vec(x)?;
    for (o, bo) in out.iter_mut().zip(b) {
        *o += bo;
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += c * x`
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// Solves `A x = b` for square `A` by LU decomposition with partial pivoting.
pub fn solve_lu(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::shape("solve_lu: dimensions do not match"));
    }
    let mut lu = a.data.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot = k;
        let mut max = lu[perm[k] * n + k].abs();
        for r in (k + 1)..n {
            let v = lu[perm[r] * n + k].abs();
            if v > max {
                max = v;
                pivot = r;
            }
        }
        if max < 1e-300 {
            return Err(Error::Numerical("singular matrix in solve_lu".into()));
        }
        perm.swap(k, pivot);
        let pk = perm[k];
        let diag = lu[pk * n + k];
        for r in (k + 1)..n {
            let pr = perm[r];
            let factor = lu[pr * n + k] / diag;
            lu[pr * n + k] = factor;
            for c in (k + 1)..n {
                lu[pr * n + c] -= factor * lu[pk * n + c];
            }
        }
    }
    // forward then backward substitution
    let mut y = vec![0.0; n];
    for r in 0..n {
        let mut s = b[perm[r]];
        for c in 0..r {
            s -= lu[perm[r] * n + c] * y[c];
        }
        y[r] = s;
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = y[r];
        for c in (r + 1)..n {
            s -= lu[perm[r] * n + c] * x[c];
        }
        x[r] = s / lu[perm[r] * n + r];
    }
    Ok(x)
}

/// Inverse of a small square matrix, column by column through [`solve_lu`].
pub fn invert(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e[c] = 1.0;
        let col = solve_lu(a, &e)?;
        e[c] = 0.0;
        for r in 0..n {
            inv.set(r, c, col[r]);
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use rand::Rng;

    #[test]
    fn affine_identity() {
        let w = DenseMatrix::identity(2);
        let out = affine(&w, &[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
    }

    #[test]
    fn affine_zero_map() {
        let w = DenseMatrix::zeros(2, 2);
        let out = affine(&w, &[1.0, 2.0], &[5.0, -7.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn affine_matches_naive_triple_loop() {
        let mut rng = seed_rng(11);
        for _ in 0..20 {
            let w_data: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = DenseMatrix::from_vec(3, 3, w_data.clone()).unwrap();
            let got = affine(&w, &b, &x).unwrap();
            // naive oracle, written independently of mul_vec
            let mut want = b.clone();
            for r in 0..3 {
                for c in 0..3 {
                    want[r] += w_data[r * 3 + c] * x[c];
                }
            }
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn affine_shape_error() {
        let w = DenseMatrix::identity(2);
        assert!(affine(&w, &[0.0, 0.0], &[1.0]).is_err());
        assert!(affine(&w, &[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn batch_matches_vector_path() {
        let mut rng = seed_rng(3);
        let w_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = DenseMatrix::from_vec(4, 3, w_data).unwrap();
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_data: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = DenseMatrix::from_vec(5, 3, x_data).unwrap();
        let batched = w.affine_batch(&b, &x).unwrap();
        for r in 0..5 {
            let single = affine(&w, &b, x.row(r)).unwrap();
            assert_eq!(batched.row(r), single.as_slice());
        }
    }

    #[test]
    fn lu_solves_and_inverts() {
        let a = DenseMatrix::from_vec(3, 3, vec![4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0])
            .unwrap();
        let x = solve_lu(&a, &[1.0, 2.0, 3.0]).unwrap();
        let back = a.mul_vec(&x).unwrap();
        for (b, want) in back.iter().zip(&[1.0, 2.0, 3.0]) {
            assert!((b - want).abs() < 1e-12);
        }
        let inv = invert(&a).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(r, k) * inv.get(k, c);
                }
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-12);
            }
        }
    }
}
