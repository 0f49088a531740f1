//! Closed-form posteriors for the spline coefficients and the error variance.
//!
//! The coefficient prior is `beta_j ~ N(0, n k_n^{-1} (X^T X)^{-1})`
//! independently over responses, which gives the conjugate posterior
//! `N(s (X^T X)^{-1} X^T Y_j, c (X^T X)^{-1})` with shrink factor
//! `s = (1 + sigma^2 k_n / n)^{-1}` and scale `c = (1/sigma^2 + k_n/n)^{-1}`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spline::DesignMatrix;

const JITTER_LADDER: [f64; 6] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// Cholesky factorisation with diagonal jitter escalation from `1e-12` to
/// `1e-8` (relative to the mean diagonal). Returns the jitter that was used.
pub fn cholesky_jittered<T: Real>(mat: &DMatrix<T>) -> Result<(Cholesky<T, Dyn>, T)> {
    let n = mat.nrows();
    let scale = if n == 0 {
        T::one()
    } else {
        (mat.trace() / T::from_index(n)).abs().max(T::default_epsilon())
    };
    for eps in JITTER_LADDER {
        let jitter = T::lit(eps) * scale;
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            if eps > 0.0 {
                log::info!("cholesky needed jitter {eps:e} (relative) on a {n}x{n} matrix");
            }
            return Ok((ch, jitter));
        }
    }
    Err(Error::Numeric(format!(
        "cholesky failed on a {n}x{n} matrix even with 1e-8 relative jitter"
    )))
}

/// Factorised Gram matrix of a design, shared by every posterior built on it.
#[derive(Debug, Clone)]
pub struct GramFactor<T: Real> {
    design: DesignMatrix<T>,
    gram_chol: Cholesky<T, Dyn>,
    gram_inv: DMatrix<T>,
    gram_inv_chol: DMatrix<T>,
}

impl<T: Real> GramFactor<T> {
    pub fn new(design: &DesignMatrix<T>) -> Result<Self> {
        let n = design.nrows();
        let dim = design.ncols();
        if n < dim {
            return Err(Error::IllPosedDesign(format!(
                "n = {n} design points cannot identify {dim} spline coefficients (k_n + m - 1)"
            )));
        }
        let x = design.matrix();
        if let Some(j) = (0..dim).find(|&j| x.column(j).iter().all(|v| *v == T::zero())) {
            return Err(Error::IllPosedDesign(format!(
                "basis function {j} has no design point in its support; X^T X is rank deficient in dimension {j}"
            )));
        }
        let gram = design.gram();
        let gram_chol = Cholesky::new(gram.clone()).ok_or_else(|| {
            let eig = SymmetricEigen::new(gram.clone());
            let (j, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .fold((0, T::lit(f64::MAX)), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
            Error::IllPosedDesign(format!(
                "X^T X is numerically singular; smallest eigenvalue direction has largest weight on coefficient {}",
                eig.eigenvectors.column(j).iamax()
            ))
        })?;
        let gram_inv = gram_chol.inverse();
        let sym = (&gram_inv + gram_inv.transpose()) * T::lit(0.5);
        let (inv_chol, _) = cholesky_jittered(&sym)?;
        Ok(Self {
            design: design.clone(),
            gram_chol,
            gram_inv: sym,
            gram_inv_chol: inv_chol.l(),
        })
    }

    pub fn design(&self) -> &DesignMatrix<T> {
        &self.design
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    /// `k_n / n`, the prior-precision ratio.
    pub fn prior_ratio(&self) -> T {
        T::from_index(self.design.knots().segments()) / T::from_index(self.n())
    }

    /// `(X^T X)^{-1}`.
    pub fn gram_inv(&self) -> &DMatrix<T> {
        &self.gram_inv
    }

    /// Lower Cholesky factor of `(X^T X)^{-1}`.
    pub fn gram_inv_chol(&self) -> &DMatrix<T> {
        &self.gram_inv_chol
    }

    /// Least-squares coefficients `(X^T X)^{-1} X^T Y`, one column per response.
    pub fn ols(&self, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.check_response(y)?;
        Ok(self.gram_chol.solve(&self.design.matrix().tr_mul(y)))
    }

    fn check_response(&self, y: &DMatrix<T>) -> Result<()> {
        if y.nrows() != self.n() {
            return Err(Error::invalid(format!(
                "response has {} rows but the design has {} points",
                y.nrows(),
                self.n()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::invalid("response needs at least one column"));
        }
        Ok(())
    }
}

/// A Gaussian law over the coefficient matrix `B_n` that can be sampled.
pub trait CoeffLaw<T: Real>: Send + Sync {
    /// Posterior mean of `B_n`, `(k_n + m - 1) x d`.
    fn mean(&self) -> &DMatrix<T>;

    fn draw(&self, rng: &mut dyn rand::RngCore) -> DMatrix<T>;
}

fn standard_normal_matrix<T: Real>(rows: usize, cols: usize, rng: &mut dyn rand::RngCore) -> DMatrix<T> {
    let mut z = DMatrix::zeros(rows, cols);
    for v in z.iter_mut() {
        let s: f64 = StandardNormal.sample(rng);
        *v = T::lit(s);
    }
    z
}

/// Independent Gaussian posteriors `beta_j | Y` sharing one covariance.
#[derive(Debug, Clone)]
pub struct CoeffPosterior<T: Real> {
    ols: DMatrix<T>,
    mean: DMatrix<T>,
    gram_inv: DMatrix<T>,
    gram_inv_chol: DMatrix<T>,
    shrink: T,
    cov_scale: T,
    sigma2: T,
}

impl<T: Real> CoeffPosterior<T> {
    /// Posterior under the prior `N(0, n k_n^{-1} (X^T X)^{-1})` with known
    /// working variance `sigma2`.
    pub fn new(factor: &GramFactor<T>, y: &DMatrix<T>, sigma2: T) -> Result<Self> {
        check_variance(sigma2)?;
        let ratio = factor.prior_ratio();
        let shrink = T::one() / (T::one() + sigma2 * ratio);
        let cov_scale = T::one() / (T::one() / sigma2 + ratio);
        Self::assemble(factor, y, sigma2, shrink, cov_scale)
    }

    /// Conditional law `beta_j | sigma^2, Y` under the variance-scaled prior
    /// `N(0, n k_n^{-1} sigma^2 (X^T X)^{-1})` used with an inverse-gamma
    /// prior on `sigma^2`.
    pub fn given_sigma2(factor: &GramFactor<T>, y: &DMatrix<T>, sigma2: T) -> Result<Self> {
        check_variance(sigma2)?;
        let shrink = T::one() / (T::one() + factor.prior_ratio());
        Self::assemble(factor, y, sigma2, shrink, sigma2 * shrink)
    }

    fn assemble(factor: &GramFactor<T>, y: &DMatrix<T>, sigma2: T, shrink: T, cov_scale: T) -> Result<Self> {
        let ols = factor.ols(y)?;
        Ok(Self {
            mean: &ols * shrink,
            ols,
            gram_inv: factor.gram_inv().clone(),
            gram_inv_chol: factor.gram_inv_chol().clone(),
            shrink,
            cov_scale,
            sigma2,
        })
    }

    pub fn ols(&self) -> &DMatrix<T> {
        &self.ols
    }

    pub fn shrink(&self) -> T {
        self.shrink
    }

    /// Scalar `c` in the shared covariance `c (X^T X)^{-1}`.
    pub fn cov_scale(&self) -> T {
        self.cov_scale
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    /// Shared covariance of every `beta_j`.
    pub fn covariance(&self) -> DMatrix<T> {
        &self.gram_inv * self.cov_scale
    }

    pub fn responses(&self) -> usize {
        self.mean.ncols()
    }
}

impl<T: Real> CoeffLaw<T> for CoeffPosterior<T> {
    fn mean(&self) -> &DMatrix<T> {
        &self.mean
    }

    fn draw(&self, rng: &mut dyn rand::RngCore) -> DMatrix<T> {
        let z = standard_normal_matrix::<T>(self.mean.nrows(), self.mean.ncols(), rng);
        &self.mean + (&self.gram_inv_chol * z) * self.cov_scale.sqrt()
    }
}

fn check_variance<T: Real>(sigma2: T) -> Result<()> {
    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("working variance must be positive and finite, got {sigma2}")));
    }
    Ok(())
}

/// Symmetric positive-definite check via eigenvalues; returns the eigendecomposition.
pub(crate) fn spd_eigen<T: Real>(sigma: &DMatrix<T>, what: &str) -> Result<SymmetricEigen<T, Dyn>> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::invalid(format!("{what} must be a nonempty square matrix")));
    }
    let asym = (sigma - sigma.transpose()).amax();
    if asym > T::lit(1e-10) * sigma.amax().max(T::one()) {
        return Err(Error::invalid(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new((sigma + sigma.transpose()) * T::lit(0.5));
    if eig.eigenvalues.iter().any(|v| !(*v > T::zero())) {
        return Err(Error::invalid(format!("{what} is not positive definite")));
    }
    Ok(eig)
}

/// Spectral function `V diag(g(lambda)) V^T` of a symmetric matrix.
pub(crate) fn spectral_map<T: Real>(eig: &SymmetricEigen<T, Dyn>, g: impl Fn(T) -> T) -> DMatrix<T> {
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(g));
    v * d * v.transpose()
}

/// Matrix-normal posterior of `B_n` under correlated working errors with
/// row covariance `Sigma`: `vec(B_n) | Y ~ N(vec(M), C_col (x) (X^T X)^{-1})`.
#[derive(Debug, Clone)]
pub struct MatrixNormalPosterior<T: Real> {
    mean: DMatrix<T>,
    row_cov: DMatrix<T>,
    col_cov: DMatrix<T>,
    row_chol: DMatrix<T>,
    col_chol: DMatrix<T>,
}

impl<T: Real> MatrixNormalPosterior<T> {
    pub fn new(factor: &GramFactor<T>, y: &DMatrix<T>, sigma: &DMatrix<T>) -> Result<Self> {
        if sigma.nrows() != y.ncols() {
            return Err(Error::invalid(format!(
                "Sigma is {}x{} but the response has {} columns",
                sigma.nrows(),
                sigma.ncols(),
                y.ncols()
            )));
        }
        let eig = spd_eigen(sigma, "Sigma")?;
        let ratio = factor.prior_ratio();
        let sigma_inv = spectral_map(&eig, |l| T::one() / l);
        let col_cov = spectral_map(&eig, |l| T::one() / (T::one() / l + ratio));
        let ols = factor.ols(y)?;
        let mean = ols * sigma_inv * &col_cov;
        let (col_chol, _) = cholesky_jittered(&col_cov)?;
        Ok(Self {
            mean,
            row_cov: factor.gram_inv().clone(),
            col_cov,
            row_chol: factor.gram_inv_chol().clone(),
            col_chol: col_chol.l(),
        })
    }

    /// `(X^T X)^{-1}`.
    pub fn row_cov(&self) -> &DMatrix<T> {
        &self.row_cov
    }

    /// `(Sigma^{-1} + k_n I / n)^{-1}`.
    pub fn col_cov(&self) -> &DMatrix<T> {
        &self.col_cov
    }

    /// Covariance of `vec(B_n)` (column stacking): `col_cov (x) row_cov`.
    pub fn vec_covariance(&self) -> DMatrix<T> {
        self.col_cov.kronecker(&self.row_cov)
    }
}

impl<T: Real> CoeffLaw<T> for MatrixNormalPosterior<T> {
    fn mean(&self) -> &DMatrix<T> {
        &self.mean
    }

    fn draw(&self, rng: &mut dyn rand::RngCore) -> DMatrix<T> {
        let z = standard_normal_matrix::<T>(self.mean.nrows(), self.mean.ncols(), rng);
        &self.mean + &self.row_chol * z * self.col_chol.transpose()
    }
}

/// Inverse-gamma marginal posterior of `sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Posterior {
    pub shape: f64,
    pub rate: f64,
}

impl Sigma2Posterior {
    /// Shape `(d (n - k_n - m + 1) + 2a) / 2` and rate
    /// `b + sum_j Y_j^T (I - P_X (1 + k_n/n)^{-1}) Y_j / 2` for an
    /// inverse-gamma `(a, b)` prior.
    pub fn new<T: Real>(factor: &GramFactor<T>, y: &DMatrix<T>, a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::invalid(format!("inverse-gamma prior needs a, b > 0 (got {a}, {b})")));
        }
        let ols = factor.ols(y)?;
        let n = factor.n() as f64;
        let d = y.ncols() as f64;
        let ratio = factor.prior_ratio().as_f64();
        let fitted = factor.design().matrix() * &ols;
        let mut quad = 0.0;
        for j in 0..y.ncols() {
            let yj = y.column(j);
            let total = yj.dot(&yj).as_f64();
            let projected = yj.dot(&fitted.column(j)).as_f64();
            quad += total - projected / (1.0 + ratio);
        }
        let shape = (d * (n - factor.dim() as f64) + 2.0 * a) / 2.0;
        let rate = b + quad / 2.0;
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::Numeric(format!("degenerate inverse-gamma posterior (shape {shape}, rate {rate})")));
        }
        Ok(Self { shape, rate })
    }

    /// Posterior mean `rate / (shape - 1)`; `None` when `shape <= 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }

    pub fn variance(&self) -> Option<f64> {
        (self.shape > 2.0).then(|| {
            let s = self.shape;
            self.rate * self.rate / ((s - 1.0) * (s - 1.0) * (s - 2.0))
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("valid gamma parameters");
        1.0 / g.sample(rng)
    }
}

/// How the working variance enters the coefficient posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SigmaMode {
    /// Known working variance.
    Fixed { sigma2: f64 },
    /// Posterior mean of the inverse-gamma posterior, then the fixed-variance law.
    PlugIn { a: f64, b: f64 },
    /// Draw `sigma^2` from its inverse-gamma posterior, then `B_n | sigma^2`.
    Hierarchical { a: f64, b: f64 },
}

impl SigmaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaMode::Fixed { sigma2 } if !(sigma2 > 0.0) => {
                Err(Error::Config(format!("fixed sigma2 must be positive, got {sigma2}")))
            }
            SigmaMode::PlugIn { a, b } | SigmaMode::Hierarchical { a, b } if !(a > 0.0 && b > 0.0) => {
                Err(Error::Config(format!("inverse-gamma prior needs a, b > 0 (got {a}, {b})")))
            }
            _ => Ok(()),
        }
    }
}

/// Draws `count` coefficient matrices from a coefficient law with a seeded
/// ChaCha stream; the same seed yields bit-identical draws.
pub fn sample_coeffs<T: Real>(law: &dyn CoeffLaw<T>, count: usize, seed: u64) -> Result<Vec<DMatrix<T>>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| law.draw(&mut rng)).collect())
}

/// Draws coefficient matrices under any [`SigmaMode`], returning the draws and
/// the `sigma^2` value used for each.
pub fn sample_with_mode<R: Rng>(
    factor: &GramFactor<f64>,
    y: &DMatrix<f64>,
    mode: SigmaMode,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    if count == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    match mode {
        SigmaMode::Fixed { sigma2 } => {
            let post = CoeffPosterior::new(factor, y, sigma2)?;
            Ok(((0..count).map(|_| post.draw(rng)).collect(), vec![sigma2; count]))
        }
        SigmaMode::PlugIn { a, b } => {
            let s2 = Sigma2Posterior::new(factor, y, a, b)?;
            let sigma2 = s2
                .mean()
                .ok_or_else(|| Error::Numeric("inverse-gamma shape <= 1; posterior mean undefined".into()))?;
            let post = CoeffPosterior::new(factor, y, sigma2)?;
            Ok(((0..count).map(|_| post.draw(rng)).collect(), vec![sigma2; count]))
        }
        SigmaMode::Hierarchical { a, b } => {
            let s2 = Sigma2Posterior::new(factor, y, a, b)?;
            // conditional mean does not depend on sigma^2; only the scale changes
            let base = CoeffPosterior::given_sigma2(factor, y, 1.0)?;
            let mut draws = Vec::with_capacity(count);
            let mut sigmas = Vec::with_capacity(count);
            for _ in 0..count {
                let sigma2 = s2.draw(rng);
                let z = standard_normal_matrix::<f64>(base.mean.nrows(), base.mean.ncols(), rng);
                draws.push(&base.mean + (&base.gram_inv_chol * z) * (sigma2 * base.shrink).sqrt());
                sigmas.push(sigma2);
            }
            Ok((draws, sigmas))
        }
    }
}

/// Convenience: the OLS coefficient vector for a single response column.
pub fn ols_column<T: Real>(factor: &GramFactor<T>, y: &DVector<T>) -> Result<DVector<T>> {
    let m = factor.ols(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
    Ok(m.column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::{midpoint_design, KnotVector};
    use approx::assert_relative_eq;

    fn factor(n: usize, k: usize, m: usize) -> GramFactor<f64> {
        let kv = KnotVector::uniform(k, m).unwrap();
        GramFactor::new(&DesignMatrix::new(&kv, &midpoint_design(n)).unwrap()).unwrap()
    }

    #[test]
    fn hand_computed_scalar_posterior() {
        let kv = KnotVector::<f64>::uniform(1, 1).unwrap();
        let dm = DesignMatrix::new(&kv, &[0.25, 0.75]).unwrap();
        let fac = GramFactor::new(&dm).unwrap();
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let post = CoeffPosterior::new(&fac, &y, 1.0).unwrap();
        assert_relative_eq!(post.ols()[(0, 0)], 2.0, max_relative = 1e-14);
        assert_relative_eq!(post.shrink(), 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(post.mean()[(0, 0)], 4.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(post.covariance()[(0, 0)], 1.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn vanishing_variance_recovers_least_squares() {
        let fac = factor(40, 3, 3);
        let y = DMatrix::from_fn(40, 1, |i, _| (i as f64 * 0.3).sin());
        let mut last = f64::INFINITY;
        for s2 in [1e-10, 1e-12] {
            let post = CoeffPosterior::new(&fac, &y, s2).unwrap();
            assert!((post.mean() - post.ols()).amax() < 1e-9);
            let c = post.covariance().amax();
            assert!(c < last);
            last = c;
        }
    }

    #[test]
    fn shrinkage_never_exceeds_least_squares() {
        let fac = factor(60, 4, 4);
        let y = DMatrix::from_fn(60, 2, |i, j| (i as f64 * 0.1 + j as f64).cos() * 3.0);
        for s2 in [0.1, 1.0, 10.0] {
            let post = CoeffPosterior::new(&fac, &y, s2).unwrap();
            assert!(post.mean().norm() <= post.ols().norm());
        }
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let kv = KnotVector::<f64>::uniform(4, 2).unwrap();
        let dm = DesignMatrix::new(&kv, &[0.1, 0.12, 0.14, 0.16, 0.2]).unwrap();
        assert!(matches!(GramFactor::new(&dm), Err(Error::IllPosedDesign(ref s)) if s.contains("dimension")));
        let dm = DesignMatrix::new(&kv, &[0.1, 0.5]).unwrap();
        assert!(matches!(GramFactor::new(&dm), Err(Error::IllPosedDesign(_))));
    }

    #[test]
    fn sigma2_shape_and_zero_response() {
        let fac = factor(100, 5, 5);
        let y = DMatrix::zeros(100, 1);
        let s2 = Sigma2Posterior::new(&fac, &y, 1.0, 0.7).unwrap();
        assert_relative_eq!(s2.shape, 46.5);
        assert_relative_eq!(s2.rate, 0.7);
        assert!(Sigma2Posterior::new(&fac, &y, 0.0, 1.0).is_err());
    }

    #[test]
    fn matrix_normal_reduces_to_independent_case() {
        let fac = factor(50, 3, 4);
        let y = DMatrix::from_fn(50, 1, |i, _| 1.0 + (i as f64 / 7.0).sin());
        let post = CoeffPosterior::new(&fac, &y, 0.8).unwrap();
        let mn = MatrixNormalPosterior::new(&fac, &y, &DMatrix::from_element(1, 1, 0.8)).unwrap();
        assert!((mn.mean() - post.mean()).amax() <= 1e-12 * post.mean().amax());
        let cov = mn.vec_covariance();
        assert!((&cov - post.covariance()).amax() <= 1e-12 * cov.amax());
    }

    #[test]
    fn column_covariance_eigenvalues() {
        let fac = factor(100, 2, 3);
        let y = DMatrix::from_fn(100, 2, |i, j| (i + j) as f64 / 100.0);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let mn = MatrixNormalPosterior::new(&fac, &y, &sigma).unwrap();
        let mut eig: Vec<f64> = SymmetricEigen::new(mn.col_cov().clone()).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let r = 2.0 / 100.0;
        assert_relative_eq!(eig[0], 1.0 / (1.0 + r), max_relative = 1e-12);
        assert_relative_eq!(eig[1], 1.0 / (0.25 + r), max_relative = 1e-12);
    }

    #[test]
    fn non_spd_sigma_is_rejected() {
        let fac = factor(30, 2, 2);
        let y = DMatrix::zeros(30, 2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(MatrixNormalPosterior::new(&fac, &y, &bad), Err(Error::InvalidArgument(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(MatrixNormalPosterior::new(&fac, &y, &asym), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sampling_is_reproducible() {
        let fac = factor(30, 3, 3);
        let y = DMatrix::from_fn(30, 1, |i, _| i as f64 / 30.0);
        let post = CoeffPosterior::new(&fac, &y, 1.0).unwrap();
        let a = sample_coeffs(&post, 1, 42).unwrap();
        let b = sample_coeffs(&post, 1, 42).unwrap();
        assert_eq!(a[0].as_slice(), b[0].as_slice());
        assert_ne!(a[0], sample_coeffs(&post, 1, 43).unwrap()[0]);
        assert!(sample_coeffs(&post, 0, 1).is_err());
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rank_one = &v * v.transpose();
        let (ch, jitter) = cholesky_jittered(&rank_one).unwrap();
        assert!(jitter > 0.0);
        assert!((ch.l() * ch.l().transpose() - rank_one).amax() < 1e-6);
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(cholesky_jittered(&neg), Err(Error::Numeric(_))));
    }
}
