//! Squared-exponential kernel, kernel-matrix assembly and jittered Cholesky
//! factorization shared by the exact and sparse GP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Number of factorization attempts on the jitter ladder.
pub const JITTER_ATTEMPTS: usize = 5;
/// Multiplier applied to the jitter after each failed attempt.
pub const JITTER_GROWTH: f64 = 10.0;
/// Base jitter relative to the signal variance.
pub const RELATIVE_BASE_JITTER: f64 = 1e-8;

/// Hyperparameters of an isotropic squared-exponential kernel plus the
/// Gaussian observation-noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            lengthscale,
            signal_variance,
            noise_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return Err(Error::input(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::input(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::input(format!(
                "noise variance must be nonnegative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// Base jitter for factorizations of kernel matrices built from this spec.
    pub fn base_jitter(&self) -> f64 {
        RELATIVE_BASE_JITTER * self.signal_variance
    }

    #[inline]
    pub(crate) fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        self.signal_variance * (-sq_dist / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    #[inline]
    pub(crate) fn eval_slices(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_sq_dist(sq_dist(a, b))
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

/// Copies a matrix into a row-major buffer so rows can be used as slices.
pub(crate) fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = x.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// k(x1, x2) = σ_f² exp(−‖x1 − x2‖² / 2ℓ²)
pub fn kernel_eval(x1: &[f64], x2: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::input(format!(
            "kernel arguments have dimensions {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    if x1.is_empty() {
        return Err(Error::input("kernel arguments must have dimension >= 1"));
    }
    Ok(spec.eval_slices(x1, x2))
}

/// Cross-covariance matrix with element (i, j) = k(xa[i], xb[j]).
pub fn kernel_matrix(
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    if xa.ncols() != xb.ncols() {
        return Err(Error::input(format!(
            "kernel matrix inputs have {} and {} columns",
            xa.ncols(),
            xb.ncols()
        )));
    }
    let d = xa.ncols();
    let a = row_major(xa);
    let b = row_major(xb);
    let (r, s) = (xa.nrows(), xb.nrows());
    Ok(DMatrix::from_fn(r, s, |i, j| {
        spec.eval_slices(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d])
    }))
}

/// Symmetric kernel matrix of a point set; the diagonal is exactly σ_f².
pub fn kernel_gram(x: &DMatrix<f64>, spec: &KernelSpec) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let rows = row_major(x);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = spec.signal_variance;
        for j in 0..i {
            let v = spec.eval_slices(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factorization of `M + jitter·I` together with the jitter that
/// was actually applied.
#[derive(Debug, Clone)]
pub struct Factorization {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Factorization {
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Lower-triangular factor L with L Lᵀ = M + jitter·I.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solves (M + jI) X = B.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Computes L⁻¹ B.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    /// Computes L⁻ᵀ B.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Explicit inverse of M + jI. Only the support metric needs this.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

fn try_cholesky(m: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut shifted = m.clone();
    if jitter != 0.0 {
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
    }
    let chol = Cholesky::new(shifted)?;
    let l = chol.l_dirty();
    let ok = (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0);
    ok.then_some(chol)
}

fn check_square_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::input(format!(
            "factorization needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::input(
            "matrix to factorize contains non-finite entries",
        ));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::input(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Factorizes `M + jI`, starting at `j = base_jitter` and multiplying by ten
/// after every failure, for at most [`JITTER_ATTEMPTS`] attempts.
pub fn robust_factorize(m: &DMatrix<f64>, base_jitter: f64) -> Result<Factorization> {
    check_square_symmetric(m)?;
    if !(base_jitter.is_finite() && base_jitter > 0.0) {
        return Err(Error::input(format!(
            "base jitter must be positive, got {base_jitter}"
        )));
    }
    ladder(m, base_jitter, Vec::new())
}

fn ladder(m: &DMatrix<f64>, base_jitter: f64, mut tried: Vec<f64>) -> Result<Factorization> {
    let mut jitter = base_jitter;
    for _ in 0..JITTER_ATTEMPTS {
        tried.push(jitter);
        if let Some(chol) = try_cholesky(m, jitter) {
            return Ok(Factorization { chol, jitter });
        }
        jitter *= JITTER_GROWTH;
    }
    Err(Error::Singular { ladder: tried })
}

/// Factorizes a kernel Gram matrix: a plain Cholesky first, then the jitter
/// ladder from `base_jitter` if the plain attempt fails.
pub fn factorize_gram(m: &DMatrix<f64>, base_jitter: f64) -> Result<Factorization> {
    check_square_symmetric(m)?;
    if let Some(chol) = try_cholesky(m, 0.0) {
        return Ok(Factorization { chol, jitter: 0.0 });
    }
    ladder(m, base_jitter, vec![0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> KernelSpec {
        KernelSpec::new(1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn kernel_eval_closed_forms() {
        assert_eq!(
            kernel_eval(&[0.3, -1.2], &[0.3, -1.2], &unit()).unwrap(),
            1.0
        );
        let v = kernel_eval(&[0.0], &[2f64.sqrt()], &unit()).unwrap();
        assert_abs_diff_eq!(v, (-1f64).exp(), epsilon = 1e-12);
        let spec = KernelSpec::new(2.5, 3.0, 0.0).unwrap();
        let v = kernel_eval(&[1.0, 2.0], &[4.0, 6.0], &spec).unwrap();
        assert_abs_diff_eq!(v, 3.0 * (-2f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.4060058, epsilon = 1e-7);
    }

    #[test]
    fn kernel_eval_rejects_dimension_mismatch() {
        assert!(matches!(
            kernel_eval(&[0.0], &[0.0, 1.0], &unit()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::new(0.0, 1.0, 0.0).is_err());
        assert!(KernelSpec::new(1.0, -1.0, 0.0).is_err());
        assert!(KernelSpec::new(1.0, 1.0, -1e-3).is_err());
        assert!(KernelSpec::new(1.0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn kernel_matrix_small_cases() {
        let one = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let spec = KernelSpec::new(1.0, 2.0, 0.0).unwrap();
        assert_eq!(kernel_matrix(&one, &one, &spec).unwrap()[(0, 0)], 2.0);

        let x = DMatrix::from_row_slice(2, 1, &[0.0, 2f64.sqrt()]);
        let k = kernel_matrix(&x, &x, &unit()).unwrap();
        let e = (-1f64).exp();
        assert_abs_diff_eq!(
            k,
            DMatrix::from_row_slice(2, 2, &[1.0, e, e, 1.0]),
            epsilon = 1e-12
        );
        assert_eq!(kernel_gram(&x, &unit()), k);
    }

    #[test]
    fn kernel_matrix_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xa = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let xb = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-2.0..2.0));
        let spec = KernelSpec::new(1.3, 0.7, 0.1).unwrap();
        let k = kernel_matrix(&xa, &xb, &spec).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let a: Vec<f64> = xa.row(i).iter().copied().collect();
                let b: Vec<f64> = xb.row(j).iter().copied().collect();
                let mut s = 0.0;
                for t in 0..4 {
                    s += (a[t] - b[t]) * (a[t] - b[t]);
                }
                let expected = 0.7 * (-s / (2.0 * 1.3 * 1.3)).exp();
                assert_abs_diff_eq!(k[(i, j)], expected, epsilon = 1e-14);
            }
        }
        assert!(kernel_matrix(&xa, &DMatrix::zeros(2, 3), &spec).is_err());
    }

    #[test]
    fn robust_factorize_identity_uses_base_jitter() {
        let f = robust_factorize(&DMatrix::identity(4, 4), 1e-8).unwrap();
        assert_eq!(f.jitter(), 1e-8);
    }

    #[test]
    fn robust_factorize_rank_one() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let f = robust_factorize(&m, 1e-8).unwrap();
        assert!(f.jitter() <= 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let z = f.solve_vec(&b);
        let shifted = &m + DMatrix::identity(2, 2) * f.jitter();
        assert!((shifted * z - b).norm() < 1e-6);
    }

    #[test]
    fn robust_factorize_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 2.0]));
        match robust_factorize(&m, 1e-8) {
            Err(Error::Singular { ladder }) => {
                assert_eq!(ladder.len(), JITTER_ATTEMPTS);
                assert_abs_diff_eq!(ladder[4], 1e-4, epsilon = 1e-18);
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn factorize_gram_prefers_no_jitter() {
        let f = factorize_gram(&DMatrix::identity(3, 3), 1e-8).unwrap();
        assert_eq!(f.jitter(), 0.0);
        let f = factorize_gram(&DMatrix::from_element(3, 3, 1.0), 1e-8).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(robust_factorize(&m, 1e-8), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_monotone(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            ell in 0.1f64..5.0,
            sf in 0.1f64..5.0,
            t in 1.0f64..3.0,
        ) {
            let spec = KernelSpec::new(ell, sf, 0.0).unwrap();
            let kab = kernel_eval(&a, &b, &spec).unwrap();
            prop_assert_eq!(kab, kernel_eval(&b, &a, &spec).unwrap());
            prop_assert!(kab <= sf);
            prop_assert!(kab >= 0.0);
            if a != b {
                prop_assert!(kab < sf || sq_dist(&a, &b) < 1e-12 * ell * ell);
            }
            let far: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect();
            prop_assert!(kernel_eval(&a, &far, &spec).unwrap() <= kab);
        }

        #[test]
        fn gram_factorizes_with_jitter(
            pts in proptest::collection::vec(-3.0f64..3.0, 2..40),
            ell in 0.2f64..3.0,
        ) {
            let x = DMatrix::from_column_slice(pts.len() / 2, 2, &pts[..(pts.len() / 2) * 2]);
            prop_assume!(x.nrows() >= 1);
            let spec = KernelSpec::new(ell, 1.0, 0.0).unwrap();
            let k = kernel_gram(&x, &spec);
            prop_assert_eq!(&k, &k.transpose());
            prop_assert!(robust_factorize(&k, spec.base_jitter()).is_ok());
        }
    }
}
