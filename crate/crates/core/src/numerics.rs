//! Dense linear-algebra kernels shared by the rest of the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Everything here is a pure function of
//! its inputs; randomness is always driven by an explicit 64-bit seed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used when validating that a Gram matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Cholesky pivots whose squared ratio to the largest pivot falls below this
/// are treated as a numerically singular system.
const PIVOT_RATIO_FLOOR: f64 = 1e-14;

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteResult(what.to_string()))
    }
}

/// Mixes a base seed with a list of tags into an independent stream seed
/// (splitmix64 finalizer applied per tag).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9E37_79B9_7F4A_7C15;
    for &tag in tags {
        state = splitmix(state ^ splitmix(tag.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    // Fill row-major so the draw order does not depend on nalgebra's storage.
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

pub fn gaussian_vector<R: rand::Rng + ?Sized>(len: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

/// A ridge-shifted symmetric system `(gram + shift * I) x = rhs`.
#[derive(Debug, Clone)]
pub struct SpdSystem {
    gram: Matrix,
    shift: f64,
}

impl SpdSystem {
    pub fn new(gram: Matrix, shift: f64) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::ShapeMismatch(format!("gram must be square, got {}x{}", gram.nrows(), gram.ncols())));
        }
        if !(shift >= 0.0) || !shift.is_finite() {
            return Err(Error::InvalidConfig(format!("ridge shift must be >= 0, got {shift}")));
        }
        ensure_finite(&gram, "gram matrix")?;
        let scale = gram.amax().max(1.0);
        let asym = (&gram - gram.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::ShapeMismatch(format!("gram is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(Self { gram, shift })
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// Symmetrizes, folds in the shift and factorizes.
    pub fn factor(&self) -> Result<SpdFactor> {
        let n = self.dim();
        let mut shifted = (&self.gram + self.gram.transpose()) * 0.5;
        for i in 0..n {
            shifted[(i, i)] += self.shift;
        }
        SpdFactor::new(shifted)
    }

    /// Smallest eigenvalue of `gram + shift * I`.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        let sym = (&self.gram + self.gram.transpose()) * 0.5;
        let eig = sym.symmetric_eigenvalues();
        eig.min() + self.shift
    }
}

/// Cholesky factor of a positive-definite matrix, reusable across solves.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let n = matrix.nrows();
        let chol =
            Cholesky::new(matrix).ok_or_else(|| Error::SingularSystem("Cholesky factorization failed".into()))?;
        if n > 0 {
            let l = chol.l_dirty();
            let diag: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
            let max = diag.iter().cloned().fold(0.0_f64, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min > 0.0) || (min / max).powi(2) < PIVOT_RATIO_FLOOR {
                return Err(Error::SingularSystem(format!("pivot ratio {:e} below floor", (min / max).powi(2))));
            }
        }
        Ok(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        if rhs.nrows() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "rhs has {} rows, system has dimension {}",
                rhs.nrows(),
                self.dim()
            )));
        }
        let x = self.chol.solve(rhs);
        ensure_finite(&x, "spd solve")?;
        Ok(x)
    }

    pub fn solve_vec(&self, rhs: &Vector) -> Result<Vector> {
        if rhs.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "rhs has length {}, system has dimension {}",
                rhs.len(),
                self.dim()
            )));
        }
        Ok(self.chol.solve(rhs))
    }
}

/// Solves `(gram + shift * I) X = rhs`.
pub fn spd_solve(system: &SpdSystem, rhs: &Matrix) -> Result<Matrix> {
    system.factor()?.solve(rhs)
}

/// Orthonormalizes the columns of `m` by Householder QR, fixing signs so that
/// `R` has a nonnegative diagonal. With that convention an already
/// orthonormal input is returned unchanged.
pub fn orthonormalize(m: Matrix) -> Matrix {
    let cols = m.ncols();
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A random `flat_dim x rank` matrix with orthonormal columns, obtained by
/// orthogonalizing a seeded Gaussian matrix.
pub fn orthonormal_basis(flat_dim: usize, rank: usize, seed: u64) -> Result<Matrix> {
    if rank > flat_dim {
        return Err(Error::InvalidRank { rank, dim: flat_dim });
    }
    let mut rng = seeded_rng(seed);
    let g = gaussian_matrix(flat_dim, rank, &mut rng);
    Ok(orthonormalize(g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrobeniusProducts {
    pub inner: f64,
    pub norm_a: f64,
    pub norm_b: f64,
}

pub fn frobenius_products(a: &Matrix, b: &Matrix) -> Result<FrobeniusProducts> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("frobenius product of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(FrobeniusProducts { inner: a.dot(b), norm_a: a.norm(), norm_b: b.norm() })
}

/// `rows x (1 + cols)` matrix with a leading column of ones.
pub fn augment_ones(m: &Matrix) -> Matrix {
    m.clone().insert_column(0, 1.0)
}

/// Largest absolute deviation of `u^T u` from the identity.
pub fn orthonormality_defect(u: &Matrix) -> f64 {
    let gram = u.transpose() * u;
    (gram - Matrix::identity(u.ncols(), u.ncols())).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed);
        let a = gaussian_matrix(n + 3, n, &mut rng);
        a.transpose() * a
    }

    /// Plain conjugate gradients, column by column.
    fn cg_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let rhs = b.column(c).into_owned();
            let mut x = Vector::zeros(rhs.len());
            let mut r = rhs.clone();
            let mut p = r.clone();
            let mut rs = r.dot(&r);
            for _ in 0..10 * rhs.len() {
                if rs.sqrt() < 1e-15 {
                    break;
                }
                let ap = a * &p;
                let alpha = rs / p.dot(&ap);
                x += alpha * &p;
                r -= alpha * &ap;
                let next = r.dot(&r);
                p = &r + (next / rs) * &p;
                rs = next;
            }
            out.set_column(c, &x);
        }
        out
    }

    #[test]
    fn identity_system_returns_rhs() {
        let sys = SpdSystem::new(Matrix::identity(3, 3), 0.0).unwrap();
        let b = Matrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let x = spd_solve(&sys, &b).unwrap();
        assert!((x - b).amax() < 1e-15);
    }

    #[test]
    fn pure_ridge_system() {
        let sys = SpdSystem::new(Matrix::zeros(2, 2), 2.0).unwrap();
        let b = Matrix::from_column_slice(2, 1, &[2.0, 4.0]);
        let x = spd_solve(&sys, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_matches_conjugate_gradient() {
        let g = random_spd(8, 11);
        let sys = SpdSystem::new(g.clone(), 0.01).unwrap();
        let mut rng = seeded_rng(12);
        let b = gaussian_matrix(8, 2, &mut rng);
        let x = spd_solve(&sys, &b).unwrap();
        let shifted = &g + Matrix::identity(8, 8) * 0.01;
        let oracle = cg_oracle(&shifted, &b);
        assert!((&x - &oracle).amax() < 1e-8, "diff {}", (&x - &oracle).amax());
        let resid = (&shifted * &x - &b).norm() / b.norm();
        assert!(resid < 1e-9);
    }

    #[test]
    fn singular_system_is_reported() {
        let mut g = Matrix::zeros(3, 3);
        g[(0, 0)] = 1.0;
        g[(1, 1)] = 1.0;
        let sys = SpdSystem::new(g, 0.0).unwrap();
        let err = spd_solve(&sys, &Matrix::zeros(3, 1)).unwrap_err();
        assert!(matches!(err, Error::SingularSystem(_)));
    }

    #[test]
    fn rank_deficient_gram_is_singular() {
        let mut rng = seeded_rng(3);
        let a = gaussian_matrix(4, 6, &mut rng);
        let sys = SpdSystem::new(a.transpose() * a, 0.0).unwrap();
        assert!(matches!(sys.factor(), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn asymmetric_gram_is_rejected() {
        let g = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(SpdSystem::new(g, 0.0).is_err());
    }

    #[test]
    fn round_trip_recovers_solution() {
        for seed in 0..10 {
            let g = random_spd(6, seed);
            let mut rng = seeded_rng(seed + 100);
            let x = gaussian_matrix(6, 3, &mut rng);
            let shifted = &g + Matrix::identity(6, 6) * 0.3;
            let rhs = shifted * &x;
            let sys = SpdSystem::new(g, 0.3).unwrap();
            let back = spd_solve(&sys, &rhs).unwrap();
            assert!((&back - &x).norm() / x.norm() < 1e-8);
        }
    }

    #[test]
    fn one_ulp_asymmetry_is_tolerated() {
        let mut g = random_spd(5, 9);
        g[(0, 1)] = f64::from_bits(g[(0, 1)].to_bits() + 1);
        let sys = SpdSystem::new(g, 0.0).unwrap();
        assert!(sys.factor().is_ok());
    }

    #[test]
    fn full_rank_basis_is_orthogonal() {
        let u = orthonormal_basis(5, 5, 1).unwrap();
        assert!(orthonormality_defect(&u) < 1e-10);
    }

    #[test]
    fn one_dimensional_basis_is_unit() {
        let u = orthonormal_basis(1, 1, 4).unwrap();
        assert!((u[(0, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_large_rank_is_rejected() {
        assert!(matches!(orthonormal_basis(3, 4, 0), Err(Error::InvalidRank { rank: 4, dim: 3 })));
    }

    #[test]
    fn distinct_seeds_give_distinct_spans() {
        let u1 = orthonormal_basis(100, 20, 1).unwrap();
        let u2 = orthonormal_basis(100, 20, 2).unwrap();
        let cross = u1.transpose() * &u2;
        let sv = cross.singular_values();
        // cosines of principal angles strictly below one
        assert!(sv.max() < 1.0 - 1e-6, "largest cosine {}", sv.max());
    }

    #[test]
    fn basis_is_reproducible() {
        let a = orthonormal_basis(30, 4, 77).unwrap();
        let b = orthonormal_basis(30, 4, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reorthogonalization_is_idempotent() {
        let u = orthonormal_basis(40, 7, 5).unwrap();
        let again = orthonormalize(u.clone());
        assert!((again - u).amax() < 1e-10);
    }

    #[test]
    fn frobenius_of_identity() {
        let i2 = Matrix::identity(2, 2);
        let p = frobenius_products(&i2, &i2).unwrap();
        assert!((p.inner - 2.0).abs() < 1e-15);
        assert!((p.norm_a - 2f64.sqrt()).abs() < 1e-15);
        let swap = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(frobenius_products(&i2, &swap).unwrap().inner, 0.0);
    }

    #[test]
    fn frobenius_matches_double_loop() {
        let mut rng = seeded_rng(8);
        let a = gaussian_matrix(4, 6, &mut rng);
        let b = gaussian_matrix(4, 6, &mut rng);
        let mut naive = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                naive += a[(i, j)] * b[(i, j)];
            }
        }
        let p = frobenius_products(&a, &b).unwrap();
        assert!((p.inner - naive).abs() < 1e-12);
        assert!(p.inner.abs() <= p.norm_a * p.norm_b);
        let self_p = frobenius_products(&a, &a).unwrap();
        assert!((self_p.inner - self_p.norm_a.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn frobenius_shape_mismatch() {
        assert!(frobenius_products(&Matrix::zeros(2, 3), &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn derived_seeds_differ_per_tag() {
        let a = derive_seed(1, &[0, 1]);
        let b = derive_seed(1, &[1, 0]);
        let c = derive_seed(2, &[0, 1]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(1, &[0, 1]));
    }
}
