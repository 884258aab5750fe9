//! Dense 64-bit real matrices and the small symmetric eigensolver used to
//! build projection bases.
//!
//! Everything in the crate that carries numbers goes through [`Matrix`]:
//! weights, adapters, features, gradients, covariances and projector bases.
//! The solver is a cyclic Jacobi iteration, which is accurate and entirely
//! adequate for the dimensions this crate targets (d ≤ 256).

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract(format!(
                "matrix dims must be >= 1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows. Convenience for tests and small literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Contract("empty row set".into()));
        }
        let cols = rows[0].len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::Contract(format!(
                "row {i} has length {} but expected {cols}",
                r.len()
            )));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column `j` copied out.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn matmul_at_b(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.rows, other.rows,
            "matmul_at_b: {}x{} vs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = out.row_mut(i);
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_a_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_a_bt: {}x{} vs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Entrywise `self + scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of non-square matrix");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Euclidean norm of a vector slice.
pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product of two equal-length slices.
pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric positive semi-definite matrix.
///
/// Returns eigenvalues sorted descending (ties broken by the order the final
/// Jacobi sweep produced, stabilized by original index) and the matching
/// eigenvectors as orthonormal columns. Small negative round-off eigenvalues
/// are clamped to zero; genuinely negative spectra are rejected.
pub fn eigh_psd(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if s.rows() != s.cols() {
        return Err(Error::Contract(format!(
            "eigh_psd needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let n = s.rows();
    let scale = s.frobenius_norm();
    let mut max_asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if max_asym > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Contract(format!(
            "eigh_psd needs a symmetric matrix; max asymmetry {max_asym:.3e} exceeds 1e-9 relative"
        )));
    }

    let mut a = s.clone();
    // Work on the symmetrized copy so both triangles agree exactly.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, m);
            a.set(j, i, m);
        }
    }
    let mut v = Matrix::identity(n);
    let threshold = 1e-12 * scale;

    let mut converged = scale == 0.0 || n == 1;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                // A <- Jᵀ A J restricted to rows/cols p and q.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        converged = (2.0 * off).sqrt() <= threshold;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge after {sweeps} sweeps"
        )));
    }

    let raw: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let trace = s.trace();
    let neg_tol = 1e-9 * trace.abs();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        raw[j]
            .partial_cmp(&raw[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let lam = raw[src];
        if lam < -neg_tol {
            return Err(Error::Contract(format!(
                "matrix is not positive semi-definite: eigenvalue {lam:.3e} below -1e-9*trace"
            )));
        }
        eigenvalues.push(lam.max(0.0));
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok((eigenvalues, vectors))
}

/// Orthonormalize the columns of `v` (modified Gram-Schmidt with one
/// re-orthogonalization pass), preserving the column span.
pub fn orthonormalize(v: &Matrix) -> Result<Matrix> {
    let (n, k) = (v.rows(), v.cols());
    let mut q = v.clone();
    for j in 0..k {
        let original: Vec<f64> = q.col(j);
        let original_norm = vec_norm(&original);
        let mut col = original;
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.col(i);
                let proj = vec_dot(&qi, &col);
                for (c, w) in col.iter_mut().zip(&qi) {
                    *c -= proj * w;
                }
            }
        }
        let norm = vec_norm(&col);
        if norm <= 1e-10 * original_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(format!(
                "column {j} is linearly dependent on earlier columns"
            )));
        }
        for (r, c) in col.iter().enumerate().take(n) {
            q.set(r, j, c / norm);
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = Matrix::from_vec(2, 2, vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn matmul_agrees_with_transposed_variants() {
        let mut rng = SeededRng::new(7);
        let a = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let b = rng.uniform_matrix(4, 5, -1.0, 1.0);
        let direct = a.transpose().matmul(&b);
        let fused = a.matmul_at_b(&b);
        assert!(direct.sub(&fused).max_abs() <= 1e-14);

        let c = rng.uniform_matrix(5, 3, -1.0, 1.0);
        let direct = a.matmul(&c.transpose());
        let fused = a.matmul_a_bt(&c);
        assert!(direct.sub(&fused).max_abs() <= 1e-14);
    }

    #[test]
    fn eigh_diagonal_case() {
        let s = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (vals, vecs) = eigh_psd(&s).unwrap();
        assert_close(vals[0], 2.0, 1e-14);
        assert_close(vals[1], 1.0, 1e-14);
        // Up to column sign the vectors are the standard basis.
        assert_close(vecs.get(0, 0).abs(), 1.0, 1e-12);
        assert_close(vecs.get(1, 1).abs(), 1.0, 1e-12);
        assert_close(vecs.get(1, 0).abs(), 0.0, 1e-12);
    }

    #[test]
    fn eigh_identity_case() {
        let s = Matrix::identity(3);
        let (vals, vecs) = eigh_psd(&s).unwrap();
        for v in &vals {
            assert_close(*v, 1.0, 1e-14);
        }
        let gram = vecs.matmul_at_b(&vecs);
        assert!(gram.sub(&Matrix::identity(3)).max_abs() <= 1e-10);
        let recon = reconstruct(&vals, &vecs);
        assert!(recon.sub(&s).frobenius_norm() <= 1e-9 * s.frobenius_norm());
    }

    fn reconstruct(vals: &[f64], vecs: &Matrix) -> Matrix {
        let n = vecs.rows();
        let mut scaled = vecs.clone();
        for j in 0..vals.len() {
            for i in 0..n {
                scaled.set(i, j, scaled.get(i, j) * vals[j]);
            }
        }
        scaled.matmul_a_bt(vecs)
    }

    #[test]
    fn eigh_reconstructs_random_gram_matrix() {
        let mut rng = SeededRng::new(42);
        let g = rng.uniform_matrix(6, 6, -1.0, 1.0);
        let s = g.matmul_at_b(&g);
        let (vals, vecs) = eigh_psd(&s).unwrap();
        let recon = reconstruct(&vals, &vecs);
        assert!(recon.sub(&s).frobenius_norm() <= 1e-9 * s.frobenius_norm());
        // Eigenvalues descending and non-negative.
        for w in vals.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(vals.iter().all(|&l| l >= 0.0));
        // Sum of eigenvalues equals the trace.
        let sum: f64 = vals.iter().sum();
        assert_close(sum, s.trace(), 1e-9 * s.trace().abs());
        // Orthonormal columns.
        let gram = vecs.matmul_at_b(&vecs);
        assert!(gram.sub(&Matrix::identity(6)).max_abs() <= 1e-10);
    }

    #[test]
    fn eigh_rejects_bad_inputs() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(eigh_psd(&rect), Err(Error::Contract(_))));
        let asym = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eigh_psd(&asym), Err(Error::Contract(_))));
        let notpsd = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(eigh_psd(&notpsd), Err(Error::Contract(_))));
    }

    #[test]
    fn eigh_zero_matrix() {
        let s = Matrix::zeros(3, 3);
        let (vals, vecs) = eigh_psd(&s).unwrap();
        assert!(vals.iter().all(|&l| l == 0.0));
        let gram = vecs.matmul_at_b(&vecs);
        assert!(gram.sub(&Matrix::identity(3)).max_abs() <= 1e-12);
    }

    #[test]
    fn orthonormalize_scales_columns() {
        let v = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let q = orthonormalize(&v).unwrap();
        assert!(q.sub(&Matrix::identity(2)).max_abs() <= 1e-14);
    }

    #[test]
    fn orthonormalize_is_idempotent_on_orthonormal_input() {
        let mut rng = SeededRng::new(3);
        let v = rng.uniform_matrix(5, 3, -1.0, 1.0);
        let q = orthonormalize(&v).unwrap();
        let q2 = orthonormalize(&q).unwrap();
        assert!(q2.sub(&q).max_abs() <= 1e-12);
        let gram = q.matmul_at_b(&q);
        assert!(gram.sub(&Matrix::identity(3)).max_abs() <= 1e-10);
    }

    #[test]
    fn orthonormalize_names_offending_column() {
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        match orthonormalize(&v) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("column 1"), "{msg}"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }
}
