//! Dense linear-algebra primitives: row-major `Matrix`, truncated SVD
//! (top-p left singular vectors via a Jacobi eigensolve of the Gram matrix),
//! and thin Householder QR with a deterministic sign convention.

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Fails if the length is wrong or
    /// any entry is non-finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_cols(cols: &[Vec<f64>]) -> Result<Self> {
        let nc = cols.len();
        if nc == 0 {
            return Err(Error::Dim("from_cols: no columns".into()));
        }
        let nr = cols[0].len();
        if cols.iter().any(|c| c.len() != nr) {
            return Err(Error::Dim("from_cols: ragged columns".into()));
        }
        let mut m = Self::zeros(nr, nc);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m.data[i * nc + j] = v;
            }
        }
        if !m.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a contiguous slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (kk, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(kk);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * v` for a vector `v` of length `rows`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Dim(format!(
                "tr_mul_vec: {} rows vs vector of {}",
                self.rows,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (o, &r) in out.iter_mut().zip(row.iter()) {
                *o += vi * r;
            }
        }
        Ok(out)
    }

    /// `self * v` for a vector `v` of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dim(format!(
                "mul_vec: {} cols vs vector of {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dim(format!(
                "elementwise op {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Deviation of `q` from having orthonormal columns: `‖qᵀq − I‖∞`.
pub fn orthonormality_defect(q: &Matrix) -> f64 {
    let p = q.cols();
    let mut worst = 0.0f64;
    for a in 0..p {
        for b in a..p {
            let mut s = 0.0;
            for i in 0..q.rows() {
                s += q.get(i, a) * q.get(i, b);
            }
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order with matching eigenvector
/// columns. The accumulated rotations keep the eigenvectors orthonormal to
/// machine precision. Input must be symmetric; only the given entries are
/// read, no symmetrizing is attempted.
pub fn jacobi_eig_sym(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(Error::Dim(format!(
            "jacobi_eig_sym needs square input, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);

    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;
    const MAX_SWEEPS: usize = 60;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Classic stable rotation computation.
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    // Stable sort by eigenvalue, descending; ties keep sweep order.
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());

    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = Matrix::zeros(n, n);
    for (newj, &oldj) in order.iter().enumerate() {
        for i in 0..n {
            sorted_vecs.set(i, newj, v.get(i, oldj));
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Flips each column so its first entry of non-negligible magnitude is
/// non-negative. Makes factorization outputs deterministic.
fn fix_column_signs(u: &mut Matrix) {
    for j in 0..u.cols() {
        let mut lead = 0.0;
        for i in 0..u.rows() {
            let x = u.get(i, j);
            if x.abs() > 1e-12 {
                lead = x;
                break;
            }
        }
        if lead < 0.0 {
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
        }
    }
}

/// Top-p left singular vectors of `a`, columns ordered by non-increasing
/// singular value. The returned basis spans the best rank-p approximation
/// of `a`'s column space.
///
/// Computed from the d×d Gram matrix `a·aᵀ`, so the cost is independent of
/// the number of samples beyond forming the Gram matrix once.
pub fn top_p_left_singular_vectors(a: &Matrix, p: usize) -> Result<Matrix> {
    let (d, m) = (a.rows(), a.cols());
    if p == 0 || p > d.min(m) {
        return Err(Error::Dim(format!(
            "top-{p} left singular vectors of a {d}x{m} matrix"
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }

    // Gram matrix G = A Aᵀ, exploiting symmetry.
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        let ri = a.row(i);
        for j in i..d {
            let s = dot(ri, a.row(j));
            g.set(i, j, s);
            g.set(j, i, s);
        }
    }

    let (_vals, vecs) = jacobi_eig_sym(&g)?;
    let mut u = Matrix::zeros(d, p);
    for j in 0..p {
        for i in 0..d {
            u.set(i, j, vecs.get(i, j));
        }
    }
    fix_column_signs(&mut u);
    Ok(u)
}

/// Thin QR factorization by Householder reflections.
///
/// Returns `(Q, R)` with `Q` d×p orthonormal, `R` p×p upper-triangular with
/// non-negative diagonal (fixes the sign ambiguity). Fails with a rank error
/// when any `|R[j][j]| < 1e-12`.
pub fn thin_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (d, p) = (a.rows(), a.cols());
    if p > d {
        return Err(Error::Dim(format!("thin_qr of wide matrix {d}x{p}")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("qr input".into()));
    }

    let mut r_work = a.clone(); // d×p working matrix, becomes R in top block
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(p);

    for j in 0..p {
        // Householder vector for column j, rows j..d.
        let mut vnorm2 = 0.0;
        for i in j..d {
            let x = r_work.get(i, j);
            vnorm2 += x * x;
        }
        let alpha = {
            let xjj = r_work.get(j, j);
            let n = vnorm2.sqrt();
            if xjj >= 0.0 {
                -n
            } else {
                n
            }
        };
        let mut v = vec![0.0; d - j];
        for i in j..d {
            v[i - j] = r_work.get(i, j);
        }
        v[0] -= alpha;
        let vn2: f64 = v.iter().map(|x| x * x).sum();
        if vn2 > 0.0 {
            // Apply H = I − 2vvᵀ/(vᵀv) to the remaining columns.
            for col in j..p {
                let mut s = 0.0;
                for i in j..d {
                    s += v[i - j] * r_work.get(i, col);
                }
                let f = 2.0 * s / vn2;
                for i in j..d {
                    let x = r_work.get(i, col);
                    r_work.set(i, col, x - f * v[i - j]);
                }
            }
        }
        reflectors.push(v);
    }

    for j in 0..p {
        if r_work.get(j, j).abs() < 1e-12 {
            return Err(Error::RankDeficient(format!(
                "R[{j}][{j}] = {:.3e}",
                r_work.get(j, j)
            )));
        }
    }

    // Q = H_0 ⋯ H_{p−1} [I_p; 0], applying reflectors in reverse.
    let mut q = Matrix::zeros(d, p);
    for j in 0..p {
        q.set(j, j, 1.0);
    }
    for j in (0..p).rev() {
        let v = &reflectors[j];
        let vn2: f64 = v.iter().map(|x| x * x).sum();
        if vn2 == 0.0 {
            continue;
        }
        for col in 0..p {
            let mut s = 0.0;
            for i in j..d {
                s += v[i - j] * q.get(i, col);
            }
            let f = 2.0 * s / vn2;
            for i in j..d {
                let x = q.get(i, col);
                q.set(i, col, x - f * v[i - j]);
            }
        }
    }

    // Make the diagonal of R non-negative, flipping Q columns to match.
    let mut r = Matrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            r.set(i, j, r_work.get(i, j));
        }
    }
    for j in 0..p {
        if r.get(j, j) < 0.0 {
            for i in 0..d {
                let x = q.get(i, j);
                q.set(i, j, -x);
            }
            for col in j..p {
                let x = r.get(j, col);
                r.set(j, col, -x);
            }
        }
    }
    Ok((q, r))
}

/// Q factor of the thin QR factorization.
pub fn thin_qr_q(a: &Matrix) -> Result<Matrix> {
    thin_qr(a).map(|(q, _)| q)
}
