//! Grassmannian geometry for subspace updates: orthonormal bases as manifold
//! points, tangent projection, QR retraction, and the Riemannian descent step.

use crate::error::{Error, Result};
use crate::linalg::{thin_qr_q, Matrix};

/// A p-dimensional subspace of ℝᵈ, represented by a d×p orthonormal basis.
///
/// The representative is unique only up to right-multiplication by an
/// orthogonal p×p matrix; compare subspaces through projectors or principal
/// angles, never through raw columns.
#[derive(Clone, Debug)]
pub struct SubspaceBasis {
    basis: Matrix,
}

impl SubspaceBasis {
    /// Wraps a d×p matrix, checking orthonormality to 1e-8.
    pub fn new(basis: Matrix) -> Result<Self> {
        let (d, p) = (basis.rows(), basis.cols());
        if p == 0 || p > d {
            return Err(Error::Dim(format!("subspace basis {d}x{p}")));
        }
        let defect = crate::linalg::orthonormality_defect(&basis);
        if defect > 1e-8 {
            return Err(Error::RankDeficient(format!(
                "basis columns not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self { basis })
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.basis
    }

    /// Frobenius distance between the orthogonal projectors of two
    /// subspaces. Zero iff they span the same space.
    pub fn projector_distance(&self, other: &SubspaceBasis) -> f64 {
        let pa = self.projector();
        let pb = other.projector();
        pa.sub(&pb).map(|d| d.frob_norm()).unwrap_or(f64::INFINITY)
    }

    /// Largest principal angle (radians) between two subspaces of equal
    /// dimension, computed from the singular values of `SᵀQ`.
    pub fn principal_angle(&self, other: &SubspaceBasis) -> f64 {
        let m = self
            .basis
            .transpose()
            .matmul(other.matrix())
            .expect("dimension mismatch in principal_angle");
        // Smallest singular value of SᵀQ = cosine of the largest angle.
        let gram = m.transpose().matmul(&m).unwrap();
        let (vals, _) = crate::linalg::jacobi_eig_sym(&gram).unwrap();
        let min_sv = vals.last().copied().unwrap_or(0.0).max(0.0).sqrt();
        min_sv.clamp(0.0, 1.0).acos()
    }

    fn projector(&self) -> Matrix {
        self.basis.matmul(&self.basis.transpose()).unwrap()
    }
}

/// Projects an ambient d×p direction onto the tangent space at `s`:
/// `(I − SSᵀ)u`, computed as `u − S(Sᵀu)`.
pub fn tangent_project(s: &SubspaceBasis, u: &Matrix) -> Result<Matrix> {
    let b = s.matrix();
    if u.rows() != b.rows() || u.cols() != b.cols() {
        return Err(Error::Dim(format!(
            "tangent_project: basis {}x{} vs direction {}x{}",
            b.rows(),
            b.cols(),
            u.rows(),
            u.cols()
        )));
    }
    let st_u = b.transpose().matmul(u)?;
    u.sub(&b.matmul(&st_u)?)
}

/// QR retraction: maps a tangent direction back onto the manifold as the Q
/// factor of `S + u`. Fails with a rank error when `S + u` loses column
/// rank; the caller is expected to shrink the step.
pub fn retract(s: &SubspaceBasis, u: &Matrix) -> Result<SubspaceBasis> {
    let b = s.matrix();
    if u.rows() != b.rows() || u.cols() != b.cols() {
        return Err(Error::Dim(format!(
            "retract: basis {}x{} vs direction {}x{}",
            b.rows(),
            b.cols(),
            u.rows(),
            u.cols()
        )));
    }
    let q = thin_qr_q(&b.add(u)?)?;
    SubspaceBasis::new(q)
}

/// One Riemannian descent step: retract along the negated tangent projection
/// of the Euclidean gradient, scaled by `eta`.
pub fn riemannian_step(s: &SubspaceBasis, euclid_grad: &Matrix, eta: f64) -> Result<SubspaceBasis> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(Error::Config(format!("step size eta = {eta}")));
    }
    let tangent = tangent_project(s, euclid_grad)?;
    retract(s, &tangent.scale(-eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_basis(rng: &mut ChaCha8Rng, d: usize, p: usize) -> SubspaceBasis {
        loop {
            let data: Vec<f64> = (0..d * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = Matrix::from_vec(d, p, data).unwrap();
            if let Ok(q) = thin_qr_q(&a) {
                return SubspaceBasis::new(q).unwrap();
            }
        }
    }

    fn random_dir(rng: &mut ChaCha8Rng, d: usize, p: usize) -> Matrix {
        let data: Vec<f64> = (0..d * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(d, p, data).unwrap()
    }

    #[test]
    fn construction_rejects_skewed_basis() {
        let a = Matrix::from_cols(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(SubspaceBasis::new(a).is_err());
    }

    #[test]
    fn span_component_is_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_basis(&mut rng, 6, 2);
        let c = random_dir(&mut rng, 2, 2);
        let u = s.matrix().matmul(&c).unwrap();
        let t = tangent_project(&s, &u).unwrap();
        assert!(t.max_abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_component_is_fixed() {
        // S spans e1,e2 in ℝ⁴; u lives in the e3,e4 plane.
        let s = SubspaceBasis::new(
            Matrix::from_cols(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let u = Matrix::from_cols(&[vec![0.0, 0.0, 0.3, -0.7], vec![0.0, 0.0, 1.5, 0.2]]).unwrap();
        let t = tangent_project(&s, &u).unwrap();
        assert!(t.sub(&u).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn projection_in_the_plane() {
        let s = SubspaceBasis::new(Matrix::from_cols(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let u = Matrix::from_cols(&[vec![1.0, 1.0]]).unwrap();
        let t = tangent_project(&s, &u).unwrap();
        assert!((t.get(0, 0)).abs() <= 1e-12);
        assert!((t.get(1, 0) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn retract_at_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_basis(&mut rng, 5, 2);
        let zero = Matrix::zeros(5, 2);
        let r = retract(&s, &zero).unwrap();
        assert!(r.matrix().sub(s.matrix()).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn retract_normalizes_diagonal_direction() {
        let s = SubspaceBasis::new(Matrix::from_cols(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let u = Matrix::from_cols(&[vec![0.0, 1.0]]).unwrap();
        let r = retract(&s, &u).unwrap();
        let v = 1.0 / 2.0f64.sqrt();
        assert!((r.matrix().get(0, 0) - v).abs() <= 1e-12);
        assert!((r.matrix().get(1, 0) - v).abs() <= 1e-12);
    }

    #[test]
    fn retract_preserves_span_of_small_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_basis(&mut rng, 8, 3);
        let mut u = tangent_project(&s, &random_dir(&mut rng, 8, 3)).unwrap();
        u = u.scale(1e-6 / u.frob_norm());
        let r = retract(&s, &u).unwrap();
        // Same span as S + u (acos resolves angles only down to ~1e-8)...
        let target = SubspaceBasis::new(thin_qr_q(&s.matrix().add(&u).unwrap()).unwrap()).unwrap();
        assert!(r.principal_angle(&target) <= 1e-7);
        // ...and within 2e-6 of the starting point.
        assert!(r.principal_angle(&s) <= 2e-6);
    }

    #[test]
    fn zero_gradient_leaves_subspace_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_basis(&mut rng, 6, 2);
        let r = riemannian_step(&s, &Matrix::zeros(6, 2), 1e-3).unwrap();
        assert!(r.matrix().sub(s.matrix()).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn span_gradient_leaves_subspace_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_basis(&mut rng, 6, 2);
        let c = random_dir(&mut rng, 2, 2);
        let g = s.matrix().matmul(&c).unwrap();
        let r = riemannian_step(&s, &g, 1e-2).unwrap();
        assert!(r.projector_distance(&s) <= 1e-10);
    }

    #[test]
    fn tangent_projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let d = rng.gen_range(2..8);
            let p = rng.gen_range(1..=d.min(4));
            let s = random_basis(&mut rng, d, p);
            let u = random_dir(&mut rng, d, p);
            let t = tangent_project(&s, &u).unwrap();
            // Sᵀ·Π_S(u) = 0
            let st_t = s.matrix().transpose().matmul(&t).unwrap();
            assert!(st_t.max_abs() <= 1e-10);
            // Idempotence.
            let tt = tangent_project(&s, &t).unwrap();
            assert!(tt.sub(&t).unwrap().max_abs() <= 1e-12);
            // Retraction stays on the manifold.
            if let Ok(r) = retract(&s, &t) {
                assert!(crate::linalg::orthonormality_defect(r.matrix()) <= 1e-10);
            }
        }
    }

    #[test]
    fn small_steps_move_projector_at_most_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let s = random_basis(&mut rng, 7, 3);
            let g = random_dir(&mut rng, 7, 3);
            let eta = 1e-8;
            let r = riemannian_step(&s, &g, eta).unwrap();
            let moved = r.projector_distance(&s);
            assert!(moved <= 2.0 * eta * g.frob_norm() + 1e-12);
        }
    }
}
