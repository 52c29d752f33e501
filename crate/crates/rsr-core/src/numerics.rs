//! Deterministic dense linear-algebra and statistics primitives.
//!
//! Everything here is 64-bit, single-threaded and allocation-order
//! deterministic: identical inputs produce bitwise identical outputs.

use crate::{Error, Result};

/// Dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Numerics(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Numerics("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, ikj loop order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Numerics(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Numerics("sub shape mismatch".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

/// Row-wise softmax with optional causal masking.
///
/// With `causal_mask` set, entry `(i, j)` for `j > i` is exactly zero and
/// each row normalizes over positions `<= i`. Max-subtraction keeps large
/// inputs from overflowing.
pub fn softmax_rows(m: &Matrix, causal_mask: bool) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Numerics("softmax of empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Numerics("softmax input not finite".into()));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let valid = if causal_mask {
            (i + 1).min(m.cols)
        } else {
            m.cols
        };
        let row = m.row(i);
        let max = row[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..valid {
            let e = (row[j] - max).exp();
            out.data[i * m.cols + j] = e;
            sum += e;
        }
        for j in 0..valid {
            out.data[i * m.cols + j] /= sum;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity between two nonzero vectors of equal length.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Numerics(format!(
            "cosine_sim length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerics("cosine_sim of zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Result of a two-component principal component analysis.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// n x 2 projection of the mean-centered input onto the top two
    /// principal axes.
    pub projections: Matrix,
    /// Top two eigenvalues of the sample covariance, descending.
    pub eigenvalues: [f64; 2],
    /// The two unit eigenvectors (rows), sign-fixed so the
    /// largest-magnitude entry is positive.
    pub axes: Matrix,
}

/// Projects `points` (n x d) onto the top two principal axes of the sample
/// covariance. Deterministic: cyclic Jacobi eigensolver with a fixed sweep
/// order and a fixed eigenvector sign convention.
pub fn pca2(points: &Matrix) -> Result<Pca2> {
    let n = points.rows;
    let d = points.cols;
    if n < 2 {
        return Err(Error::Numerics("pca2 needs at least 2 points".into()));
    }
    if d < 2 {
        return Err(Error::Numerics("pca2 needs dimension >= 2".into()));
    }

    // Mean-center.
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = points.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    // Sample covariance, d x d.
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        let row = centered.row(i);
        for a in 0..d {
            for b in a..d {
                let v = row[a] * row[b];
                cov.data[a * d + b] += v;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov.data[a * d + b] / denom;
            cov.data[a * d + b] = v;
            cov.data[b * d + a] = v;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigen_sym(&cov)?;

    // Indices of the two largest eigenvalues, descending; ties broken by
    // lower index for determinism.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigvals[b]
            .partial_cmp(&eigvals[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = [order[0], order[1]];

    let mut axes = Matrix::zeros(2, d);
    for (k, &idx) in top.iter().enumerate() {
        let mut v: Vec<f64> = (0..d).map(|r| eigvecs.get(r, idx)).collect();
        // Sign convention: largest-magnitude entry positive.
        let mut best = 0;
        for (j, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() {
                best = j;
            }
        }
        if v[best] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        axes.row_mut(k).copy_from_slice(&v);
    }

    let projections = centered.matmul(&axes.transpose())?;
    Ok(Pca2 {
        projections,
        eigenvalues: [eigvals[top[0]], eigvals[top[1]]],
        axes,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns (eigenvalues, eigenvector matrix with eigenvectors in columns),
/// unsorted. Fixed sweep order (p < q row-major) keeps runs bit-identical.
pub fn jacobi_eigen_sym(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows != m.cols {
        return Err(Error::Numerics("jacobi: matrix not square".into()));
    }
    let n = m.rows;
    let mut a = m.clone();
    let mut v = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });

    const MAX_SWEEPS: usize = 100;
    const TOL: f64 = 1e-30; // on the sum of squared off-diagonal entries

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off <= TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let eigvals = (0..n).map(|i| a.get(i, i)).collect();
    Ok((eigvals, v))
}
