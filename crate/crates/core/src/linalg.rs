//! Minimal dense-matrix support: row-major `Matrix`, a cache-friendly
//! matmul, Householder QR (for orthogonal initialization), and a cyclic
//! Jacobi eigensolver for the symmetric PSD matrices produced by NTK
//! analysis. Everything is f64 and deterministic (fixed loop order).

use crate::error::{Error, Result};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (i, &r) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// `self * other`, ikj loop order so the inner loop walks both
    /// operands contiguously.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aki * b;
                }
            }
        }
        out
    }

    /// Max absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// QR factorization by Householder reflections; returns the thin Q
/// (a.rows × a.cols, requires rows ≥ cols) with orthonormal columns.
/// Signs are fixed so the diagonal of R is non-negative, which makes the
/// factorization (and any initialization built on it) deterministic.
pub fn householder_thin_q(a: &Matrix) -> Matrix {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "thin QR needs rows >= cols");
    let mut r = a.clone();
    // Reflector k is v = (v0s[k], r[k+1..m, k]); r(k,k) holds alpha.
    let mut betas = vec![0.0; n];
    let mut v0s = vec![0.0; n];
    for k in 0..n {
        let mut norm2 = 0.0;
        for i in k..m {
            let v = r.get(i, k);
            norm2 += v * v;
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r.get(k, k) >= 0.0 { -norm } else { norm };
        let v0 = r.get(k, k) - alpha;
        r.set(k, k, alpha);
        let mut vnorm2 = v0 * v0;
        for i in (k + 1)..m {
            let v = r.get(i, k);
            vnorm2 += v * v;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        betas[k] = 2.0 / vnorm2;
        v0s[k] = v0;
        // Apply H = I - beta v vᵀ to the trailing columns.
        for j in (k + 1)..n {
            let mut s = v0 * r.get(k, j);
            for i in (k + 1)..m {
                s += r.get(i, k) * r.get(i, j);
            }
            s *= betas[k];
            r.set(k, j, r.get(k, j) - s * v0);
            for i in (k + 1)..m {
                r.set(i, j, r.get(i, j) - s * r.get(i, k));
            }
        }
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q.set(j, j, 1.0);
    }
    for k in (0..n).rev() {
        let beta = betas[k];
        if beta == 0.0 {
            continue;
        }
        let v0 = v0s[k];
        for j in 0..n {
            let mut s = v0 * q.get(k, j);
            for i in (k + 1)..m {
                s += r.get(i, k) * q.get(i, j);
            }
            s *= beta;
            q.set(k, j, q.get(k, j) - s * v0);
            for i in (k + 1)..m {
                q.set(i, j, q.get(i, j) - s * r.get(i, k));
            }
        }
    }
    // Fix signs so R's diagonal is positive.
    for k in 0..n {
        if r.get(k, k) < 0.0 {
            for i in 0..m {
                q.set(i, k, -q.get(i, k));
            }
        }
    }
    q
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
/// Deterministic sweep order; returns eigenvalues sorted descending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    assert_eq!(m.rows, m.cols, "eigenvalues need a square matrix");
    let n = m.rows;
    if n == 0 {
        return Vec::new();
    }
    let mut a = m.clone();
    let scale: f64 = a.data.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-14 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
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
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eigs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.get(0, 0), 58.0);
        assert_eq!(c.get(0, 1), 64.0);
        assert_eq!(c.get(1, 0), 139.0);
        assert_eq!(c.get(1, 1), 154.0);
    }

    #[test]
    fn thin_q_has_orthonormal_columns() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::NetInit, 0);
        for &(m, n) in &[(8usize, 4usize), (5, 5), (12, 3)] {
            let mut a = Matrix::zeros(m, n);
            for v in a.data_mut() {
                *v = rng.gen::<f64>() * 2.0 - 1.0;
            }
            let q = householder_thin_q(&a);
            let qtq = q.t_matmul(&q);
            let eye = Matrix::eye(n);
            assert!(qtq.max_abs_diff(&eye) < 1e-12, "{m}x{n}: {:?}", qtq);
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Symmetric matrix with eigenvalues 6, 3, 1 (constructed from a
        // rotation of diag(6,3,1)).
        let d = Matrix::from_rows(&[
            vec![6.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let angle: f64 = 0.3;
        let (c, s) = (angle.cos(), angle.sin());
        let rot = Matrix::from_rows(&[
            vec![c, -s, 0.0],
            vec![s, c, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let m = rot.matmul(&d).matmul(&rot.t_matmul(&Matrix::eye(3)));
        let eigs = symmetric_eigenvalues(&m);
        assert!((eigs[0] - 6.0).abs() < 1e-10);
        assert!((eigs[1] - 3.0).abs() < 1e-10);
        assert!((eigs[2] - 1.0).abs() < 1e-10);
    }
}
