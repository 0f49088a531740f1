//! Normal approximation to the induced posterior of `sqrt(n) (theta - theta_0)`.
//!
//! With residual `r(t) = f_0'(t) - F(t, f_0(t), theta_0)`:
//!
//! * `J = int (F_theta^T F_theta - sum_i r_i d^2F_i/dtheta^2) w dt`
//! * `Gamma(z) = int K(t) z(t) dt` with
//!   `K = -F_theta^T F_f w - d/dt[F_theta^T w] + (sum_i r_i d^2F_i/(dtheta df)) w`
//! * `A(t) = J^{-1} K(t)` (`p x d`), `G_{n,j}^T = int A_{.,j}(t) N(t)^T dt`
//! * `B_j = (<A_{k,j}, A_{k',j}>)_{k,k'}`
//!
//! All derivatives are evaluated along `(t, f_0(t), theta_0)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{Curve, OdeModel, WeightFn};
use crate::posterior::{spd_eigen, spectral_map, GramFactor};
use crate::quadrature::QuadratureRule;
use crate::scalar::Real;
use crate::spline::KnotVector;
use crate::theta_map::BasisTable;

/// Grid size for the central-difference version of `d/dt[F_theta^T w]`.
pub const FD_TIME_GRID: usize = 2048;

/// How `d/dt[F_theta(t, f_0(t), theta_0)^T w(t)]` is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDerivative {
    /// Chain rule through `D_{1,0,1} F + D_{0,1,1} F f_0'` and `w'`.
    #[default]
    ChainRule,
    /// Central differences with step `1 / 2048`.
    FiniteDifference,
}

/// Ingredients of the Bernstein-von Mises approximation.
#[derive(Debug, Clone)]
pub struct BvmIngredients<T: Real> {
    knots: KnotVector<T>,
    theta0: DVector<T>,
    j: DMatrix<T>,
    j_inv: DMatrix<T>,
    s_term: DMatrix<T>,
    gamma_f0: DVector<T>,
    nodes: Vec<T>,
    weights: Vec<T>,
    kernel: Vec<DMatrix<T>>,
    a: Vec<DMatrix<T>>,
    g: Vec<DMatrix<T>>,
    b: Vec<DMatrix<T>>,
}

fn d_theta_along<T: Real>(model: &dyn OdeModel<T>, f0: &dyn Curve<T>, theta0: &DVector<T>, t: T) -> Result<DMatrix<T>> {
    model.d_theta(t, &f0.value(t), theta0)
}

/// Computes `J`, `Gamma(f_0)`, `A(t)` on the quadrature nodes, `G_{n,j}` and `B_j`.
pub fn compute_ingredients<T: Real>(
    model: &dyn OdeModel<T>,
    f0: &dyn Curve<T>,
    theta0: &DVector<T>,
    weight: &WeightFn<T>,
    knots: &KnotVector<T>,
    quad: &QuadratureRule<T>,
    time_derivative: TimeDerivative,
) -> Result<BvmIngredients<T>> {
    let d = model.state_dim();
    let p = model.param_dim();
    if f0.dim() != d {
        return Err(Error::invalid(format!("f_0 has {} components, model has {d} states", f0.dim())));
    }
    if theta0.len() != p {
        return Err(Error::invalid(format!("theta_0 has length {}, model expects {p}", theta0.len())));
    }

    let nq = quad.len();
    let mut j_main = DMatrix::zeros(p, p);
    let mut s_term = DMatrix::zeros(p, p);
    let mut kernel = Vec::with_capacity(nq);
    let fd_h = T::one() / T::from_index(FD_TIME_GRID);

    for (&t, &omega) in quad.nodes().iter().zip(quad.weights()) {
        let f = f0.value(t);
        let fp = f0.derivative(t);
        let wt = weight.value(t);
        let f_theta = model.d_theta(t, &f, theta0)?;
        let f_state = model.d_state(t, &f, theta0)?;
        let resid = &fp - model.rhs(t, &f, theta0)?;
        let hess = model.d_theta_theta(t, &f, theta0)?;
        let mixed = model.d_state_theta(t, &f, theta0)?;

        j_main.gemm_tr(omega * wt, &f_theta, &f_theta, T::one());
        for (i, h) in hess.iter().enumerate() {
            s_term += h * (omega * wt * resid[i]);
        }

        // d/dt [F_theta^T w]
        let dt_term = match time_derivative {
            TimeDerivative::ChainRule => {
                let mut df_theta = model.d_time_theta(t, &f, theta0)?;
                for (i, m) in mixed.iter().enumerate() {
                    for k in 0..p {
                        let mut acc = T::zero();
                        for jj in 0..d {
                            acc += m[(jj, k)] * fp[jj];
                        }
                        df_theta[(i, k)] += acc;
                    }
                }
                df_theta.transpose() * wt + f_theta.transpose() * weight.derivative(t)
            }
            TimeDerivative::FiniteDifference => {
                let lo = (t - fd_h).max(T::zero());
                let hi = (t + fd_h).min(T::one());
                let a = d_theta_along(model, f0, theta0, hi)?.transpose() * weight.value(hi);
                let b = d_theta_along(model, f0, theta0, lo)?.transpose() * weight.value(lo);
                (a - b) / (hi - lo)
            }
        };

        // (D_{0,1,0} S)_{k,j} = sum_i r_i d^2 F_i / (dtheta_k df_j)
        let mut s_state = DMatrix::zeros(p, d);
        for (i, m) in mixed.iter().enumerate() {
            s_state += m.transpose() * resid[i];
        }

        let k_t = -(f_theta.transpose() * &f_state) * wt - dt_term + s_state * wt;
        kernel.push(k_t);
    }

    let j = &j_main - &s_term;
    let eig = SymmetricEigen::new((&j + j.transpose()) * T::lit(0.5));
    let max_abs = eig.eigenvalues.amax();
    let min_abs = eig.eigenvalues.iter().fold(T::lit(f64::MAX), |a, v| a.min(v.abs()));
    if !(min_abs > T::lit(1e-12) * max_abs.max(T::default_epsilon())) {
        return Err(Error::DegenerateModel(format!(
            "J is singular (eigenvalues {:?}); the curvature condition fails at theta_0 = {:?}",
            eig.eigenvalues.as_slice(),
            theta0.as_slice()
        )));
    }
    let j_inv = j.clone().try_inverse().ok_or_else(|| Error::DegenerateModel("J not invertible".into()))?;

    let a: Vec<DMatrix<T>> = kernel.iter().map(|k| &j_inv * k).collect();

    let mut gamma_f0 = DVector::zeros(p);
    for ((k_t, &omega), &t) in kernel.iter().zip(quad.weights()).zip(quad.nodes()) {
        gamma_f0.gemv(omega, k_t, &f0.value(t), T::one());
    }

    let table = BasisTable::new(knots, quad)?;
    let basis = table.values();
    let dim = knots.dim();
    let mut g = vec![DMatrix::zeros(dim, p); d];
    let mut b = vec![DMatrix::zeros(p, p); d];
    for (q, (a_t, &omega)) in a.iter().zip(quad.weights()).enumerate() {
        for jj in 0..d {
            let col = a_t.column(jj);
            for l in 0..dim {
                let nl = basis[(q, l)];
                if nl != T::zero() {
                    for k in 0..p {
                        g[jj][(l, k)] += omega * col[k] * nl;
                    }
                }
            }
            b[jj].ger(omega, &col, &col, T::one());
        }
    }

    Ok(BvmIngredients {
        knots: knots.clone(),
        theta0: theta0.clone(),
        j,
        j_inv,
        s_term,
        gamma_f0,
        nodes: quad.nodes().to_vec(),
        weights: quad.weights().to_vec(),
        kernel,
        a,
        g,
        b,
    })
}

impl<T: Real> BvmIngredients<T> {
    pub fn theta0(&self) -> &DVector<T> {
        &self.theta0
    }

    pub fn knots(&self) -> &KnotVector<T> {
        &self.knots
    }

    /// Curvature matrix `J`.
    pub fn j(&self) -> &DMatrix<T> {
        &self.j
    }

    pub fn j_inv(&self) -> &DMatrix<T> {
        &self.j_inv
    }

    /// `int sum_i r_i d^2F_i/dtheta^2 w dt`, zero when `f_0` solves the ODE at `theta_0`.
    pub fn misspecification_term(&self) -> &DMatrix<T> {
        &self.s_term
    }

    /// `Gamma(f_0)`.
    pub fn gamma_f0(&self) -> &DVector<T> {
        &self.gamma_f0
    }

    /// `Gamma(z)` by the same quadrature used for the ingredients.
    pub fn gamma(&self, z: &dyn Curve<T>) -> DVector<T> {
        let p = self.j.nrows();
        let mut out = DVector::zeros(p);
        for ((k_t, &omega), &t) in self.kernel.iter().zip(&self.weights).zip(&self.nodes) {
            out.gemv(omega, k_t, &z.value(t), T::one());
        }
        out
    }

    /// Quadrature nodes on which `A(t)` is cached.
    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// `A(t_q)` for every cached node.
    pub fn a_values(&self) -> &[DMatrix<T>] {
        &self.a
    }

    /// `G_{n,j}`, each `(k_n + m - 1) x p`.
    pub fn g(&self) -> &[DMatrix<T>] {
        &self.g
    }

    /// `B_j`, each `p x p`.
    pub fn b(&self) -> &[DMatrix<T>] {
        &self.b
    }

    /// Smallest eigenvalue of each `B_j` (nonsingularity is assumed, not proved).
    pub fn b_min_eigenvalues(&self) -> Vec<T> {
        self.b
            .iter()
            .map(|m| SymmetricEigen::new(m.clone()).eigenvalues.min())
            .collect()
    }

    fn check_design(&self, factor: &GramFactor<T>, y: &DMatrix<T>) -> Result<()> {
        if factor.design().knots() != &self.knots {
            return Err(Error::invalid(format!(
                "design basis (k_n = {}, m = {}) differs from the ingredient basis (k_n = {}, m = {})",
                factor.design().knots().segments(),
                factor.design().knots().order(),
                self.knots.segments(),
                self.knots.order()
            )));
        }
        if y.ncols() != self.g.len() {
            return Err(Error::invalid(format!(
                "response has {} columns, ingredients have {}",
                y.ncols(),
                self.g.len()
            )));
        }
        Ok(())
    }

    /// `Sigma_n = n sum_j G_{n,j}^T (X^T X)^{-1} G_{n,j}`.
    pub fn sigma_n(&self, factor: &GramFactor<T>) -> Result<DMatrix<T>> {
        if factor.design().knots() != &self.knots {
            return Err(Error::invalid("design basis differs from the ingredient basis"));
        }
        let n = T::from_index(factor.n());
        let p = self.j.nrows();
        let mut out = DMatrix::zeros(p, p);
        for g in &self.g {
            out += g.transpose() * factor.gram_inv() * g;
        }
        Ok(out * n)
    }
}

/// Normal law `N(mean, covariance)` for `sqrt(n) (theta - theta_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticNormal<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

impl<T: Real> AsymptoticNormal<T> {
    pub fn new(mean: DVector<T>, covariance: DMatrix<T>) -> Result<Self> {
        if covariance.nrows() != mean.len() || !covariance.is_square() {
            return Err(Error::invalid("covariance shape does not match the mean"));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_spd(&self) -> bool {
        spd_eigen(&self.covariance, "covariance").is_ok()
    }
}

/// `N(mu_n, sigma^2 Sigma_n)` with
/// `mu_n = sqrt(n) sum_j G_{n,j}^T (X^T X)^{-1} X^T Y_j - sqrt(n) J^{-1} Gamma(f_0)`.
pub fn bvm_normal<T: Real>(
    ing: &BvmIngredients<T>,
    factor: &GramFactor<T>,
    y: &DMatrix<T>,
    sigma2: T,
) -> Result<AsymptoticNormal<T>> {
    ing.check_design(factor, y)?;
    if !(sigma2 > T::zero()) {
        return Err(Error::invalid("sigma2 must be positive"));
    }
    let root_n = T::from_index(factor.n()).sqrt();
    let ols = factor.ols(y)?;
    let mut lin = DVector::zeros(ing.j.nrows());
    for (jj, g) in ing.g.iter().enumerate() {
        lin.gemv_tr(T::one(), g, &ols.column(jj), T::one());
    }
    let mean = (lin - &ing.j_inv * &ing.gamma_f0) * root_n;
    let covariance = ing.sigma_n(factor)? * sigma2;
    AsymptoticNormal::new(mean, covariance)
}

/// `N(mu*_n, Sigma*_n)` for working errors with row covariance `Sigma`.
pub fn bvm_normal_correlated<T: Real>(
    ing: &BvmIngredients<T>,
    factor: &GramFactor<T>,
    y: &DMatrix<T>,
    sigma: &DMatrix<T>,
) -> Result<AsymptoticNormal<T>> {
    ing.check_design(factor, y)?;
    let d = y.ncols();
    if sigma.nrows() != d {
        return Err(Error::invalid(format!("Sigma is {}x{}, response has {d} columns", sigma.nrows(), sigma.ncols())));
    }
    let eig = spd_eigen(sigma, "Sigma")?;
    let root = spectral_map(&eig, |l| l.sqrt());
    let inv_root = spectral_map(&eig, |l| T::one() / l.sqrt());
    let n = T::from_index(factor.n());
    let p = ing.j.nrows();
    let ols = factor.ols(y)?;

    let mut lin = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for k in 0..d {
        // k-th block of (G_1^T ... G_d^T)(Sigma^{1/2} (x) I)
        let mut block = DMatrix::zeros(p, ing.knots.dim());
        for (jj, g) in ing.g.iter().enumerate() {
            block += g.transpose() * root[(jj, k)];
        }
        // (X^T X)^{-1} X^T sum_j Y_j sigma^{jk}
        let whitened = &ols * inv_root.column(k);
        lin += &block * whitened;
        cov += &block * factor.gram_inv() * block.transpose();
    }
    let mean = (lin - &ing.j_inv * &ing.gamma_f0) * n.sqrt();
    AsymptoticNormal::new(mean, cov * n)
}

/// Which estimator [`tv_diagnostic`] used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMethod {
    /// Half-L1 distance between binned masses after whitening by the target (p <= 2).
    WhitenedHistogram,
    /// Kolmogorov-Smirnov distance of squared Mahalanobis radii against chi-square (p > 2).
    MahalanobisKs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    pub method: TvMethod,
    pub draws: usize,
    /// Bins per axis (histogram method only).
    pub bins: usize,
}

/// Minimum number of draws accepted by [`tv_diagnostic`].
pub const TV_MIN_DRAWS: usize = 500;

const TV_HALF_WIDTH: f64 = 4.0;

/// Proxy for the total-variation distance between the law of `draws` and `target`.
///
/// For `p <= 2` the draws are whitened by the target (TV is invariant under
/// that bijection) and binned on `[-4, 4]^p` with outer tail cells; the target
/// cell masses are exact products of normal CDF differences. Binning can only
/// lower TV, so this estimates a lower bound plus sampling noise. For `p > 2`
/// the KS distance between squared Mahalanobis radii and `chi^2_p` is used.
pub fn tv_diagnostic(draws: &[DVector<f64>], target: &AsymptoticNormal<f64>) -> Result<TvEstimate> {
    let count = draws.len();
    if count < TV_MIN_DRAWS {
        return Err(Error::invalid(format!("tv_diagnostic needs at least {TV_MIN_DRAWS} draws, got {count}")));
    }
    let p = target.dim();
    if draws.iter().any(|d| d.len() != p) {
        return Err(Error::invalid("draw dimension differs from the target dimension"));
    }
    let chol = target
        .covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("target covariance is not positive definite".into()))?;
    let l = chol.l();
    let white: Vec<DVector<f64>> = draws
        .iter()
        .map(|x| {
            l.solve_lower_triangular(&(x - &target.mean))
                .expect("triangular factor is nonsingular")
        })
        .collect();

    if p > 2 {
        let chi = ChiSquared::new(p as f64).map_err(|e| Error::Numeric(e.to_string()))?;
        let mut r2: Vec<f64> = white.iter().map(|z| z.norm_squared()).collect();
        r2.sort_by(|a, b| a.total_cmp(b));
        let nf = count as f64;
        let ks = r2
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let c = chi.cdf(*r);
                (c - i as f64 / nf).abs().max(((i + 1) as f64 / nf - c).abs())
            })
            .fold(0.0, f64::max);
        return Ok(TvEstimate {
            value: ks,
            method: TvMethod::MahalanobisKs,
            draws: count,
            bins: 0,
        });
    }

    let bins = ((2.0 * (count as f64).powf(1.0 / (2.0 + p as f64))).round() as usize).max(4);
    let cells = bins + 2;
    let width = 2.0 * TV_HALF_WIDTH / bins as f64;
    let cell_of = |z: f64| -> usize {
        if z < -TV_HALF_WIDTH {
            0
        } else if z >= TV_HALF_WIDTH {
            cells - 1
        } else {
            1 + (((z + TV_HALF_WIDTH) / width) as usize).min(bins - 1)
        }
    };
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let axis_mass: Vec<f64> = (0..cells)
        .map(|c| {
            let lo = if c == 0 { f64::NEG_INFINITY } else { -TV_HALF_WIDTH + (c - 1) as f64 * width };
            let hi = if c == cells - 1 { f64::INFINITY } else { -TV_HALF_WIDTH + c as f64 * width };
            std.cdf(hi) - std.cdf(lo)
        })
        .collect();

    let total_cells = cells.pow(p as u32);
    let mut counts = vec![0usize; total_cells];
    for z in &white {
        let idx = (0..p).fold(0, |acc, i| acc * cells + cell_of(z[i]));
        counts[idx] += 1;
    }
    let nf = count as f64;
    let l1: f64 = counts
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            let mut rest = idx;
            let mut mass = 1.0;
            for _ in 0..p {
                mass *= axis_mass[rest % cells];
                rest /= cells;
            }
            (c as f64 / nf - mass).abs()
        })
        .sum();
    Ok(TvEstimate {
        value: (0.5 * l1).min(1.0),
        method: TvMethod::WhitenedHistogram,
        draws: count,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, misspecified_truth, ParamBox, TrueFunction};
    use crate::spline::{midpoint_design, DesignMatrix};
    use crate::theta_map::{psi, CurveSamples, PsiConfig, SplineFunction};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn example1_ingredients(td: TimeDerivative) -> BvmIngredients<f64> {
        let model = builtin_model::<f64>("example1").unwrap();
        let f0 = TrueFunction::from_solution(model.clone(), v(&[1.0])).unwrap();
        let kv = KnotVector::uniform(6, 5).unwrap();
        let quad = QuadratureRule::for_basis(&kv, 10).unwrap();
        compute_ingredients(model.as_ref(), &f0, &v(&[1.0]), &WeightFn::parabolic(), &kv, &quad, td).unwrap()
    }

    #[test]
    fn example1_j_matches_dense_oracle() {
        let ing = example1_ingredients(TimeDerivative::ChainRule);
        assert!(ing.misspecification_term().amax() <= 1e-10);
        // J = int t^2 e^{-t^2} t (1 - t) dt on a 10^6-point trapezoid grid
        let n = 1_000_000;
        let h = 1.0 / n as f64;
        let oracle: f64 = (0..=n)
            .map(|i| {
                let t = i as f64 * h;
                let c = if i == 0 || i == n { 0.5 } else { 1.0 };
                c * h * t * t * (-t * t).exp() * t * (1.0 - t)
            })
            .sum();
        assert_relative_eq!(ing.j()[(0, 0)], oracle, max_relative = 1e-8);
    }

    #[test]
    fn chain_rule_and_finite_difference_time_terms_agree() {
        let a = example1_ingredients(TimeDerivative::ChainRule);
        let b = example1_ingredients(TimeDerivative::FiniteDifference);
        for (x, y) in a.a_values().iter().zip(b.a_values()) {
            assert!((x - y).amax() <= 1e-5 * x.amax().max(1.0));
        }
    }

    #[test]
    fn gamma_is_linear() {
        let ing = example1_ingredients(TimeDerivative::ChainRule);
        let kv = ing.knots().clone();
        let z1 = SplineFunction::new(kv.clone(), DMatrix::from_fn(kv.dim(), 1, |i, _| (i as f64).sin())).unwrap();
        let z2 = SplineFunction::new(kv.clone(), DMatrix::from_fn(kv.dim(), 1, |i, _| 1.0 / (1.0 + i as f64))).unwrap();
        let sum = SplineFunction::new(kv.clone(), z1.coeffs() + z2.coeffs()).unwrap();
        let zero = SplineFunction::new(kv.clone(), DMatrix::zeros(kv.dim(), 1)).unwrap();
        assert!((ing.gamma(&sum) - ing.gamma(&z1) - ing.gamma(&z2)).amax() <= 1e-10);
        assert_eq!(ing.gamma(&zero).amax(), 0.0);
    }

    #[test]
    fn g_is_spline_projection_of_a() {
        // Sigma_n with n G^T (X^T X)^{-1} G approximates int A A^T dt = B for smooth A
        let ing = example1_ingredients(TimeDerivative::ChainRule);
        let kv = ing.knots().clone();
        let factor = GramFactor::new(&DesignMatrix::new(&kv, &midpoint_design(4000)).unwrap()).unwrap();
        let s = ing.sigma_n(&factor).unwrap();
        let b = &ing.b()[0];
        assert!(s[(0, 0)] <= b[(0, 0)] * 1.01);
        assert!(s[(0, 0)] >= b[(0, 0)] * 0.9);
        assert!(ing.b_min_eigenvalues()[0] > 0.0);
    }

    #[test]
    fn singular_curvature_is_degenerate() {
        let model = builtin_model::<f64>("example1").unwrap();
        // f_0 = 1 makes dF/dtheta = t (1 - f) vanish identically
        let f0 = TrueFunction::new(1, |_| v(&[1.0]), |_| v(&[0.0]));
        let kv = KnotVector::uniform(4, 5).unwrap();
        let quad = QuadratureRule::for_basis(&kv, 10).unwrap();
        let r = compute_ingredients(model.as_ref(), &f0, &v(&[1.0]), &WeightFn::parabolic(), &kv, &quad, TimeDerivative::ChainRule);
        assert!(matches!(r, Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn linear_in_theta_models_have_no_curvature_correction() {
        let model = builtin_model::<f64>("example1").unwrap();
        let f0 = misspecified_truth::<f64>("example1_case2").unwrap();
        let kv = KnotVector::uniform(6, 5).unwrap();
        let quad = QuadratureRule::for_basis(&kv, 10).unwrap();
        let ing = compute_ingredients(model.as_ref(), &f0, &v(&[1.0]), &WeightFn::parabolic(), &kv, &quad, TimeDerivative::ChainRule).unwrap();
        assert_eq!(ing.misspecification_term().amax(), 0.0);
        assert!(ing.j()[(0, 0)] > 0.0);
    }

    /// `F = -exp(theta_1) f + theta_2 t + theta_1 theta_2 f^2 / 10`, nonlinear in both arguments.
    struct Curved {
        bounds: ParamBox<f64>,
    }

    impl Curved {
        fn new() -> Self {
            Self { bounds: ParamBox::cube(2, -10.0, 10.0) }
        }
    }

    impl OdeModel<f64> for Curved {
        fn name(&self) -> &str {
            "curved"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            2
        }
        fn bounds(&self) -> &ParamBox<f64> {
            &self.bounds
        }
        fn rhs(&self, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(v(&[-th[0].exp() * f[0] + th[1] * t + 0.1 * th[0] * th[1] * f[0] * f[0]]))
        }
        fn d_theta(&self, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> Result<DMatrix<f64>> {
            let f2 = f[0] * f[0];
            Ok(DMatrix::from_row_slice(1, 2, &[-th[0].exp() * f[0] + 0.1 * th[1] * f2, t + 0.1 * th[0] * f2]))
        }
        fn d_state(&self, _t: f64, f: &DVector<f64>, th: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, -th[0].exp() + 0.2 * th[0] * th[1] * f[0]))
        }
    }

    fn curved_setup() -> (Curved, TrueFunction<f64>, KnotVector<f64>, QuadratureRule<f64>) {
        let f0 = TrueFunction::new(
            1,
            |t: f64| v(&[1.0 + 0.5 * (-t).exp() + 0.1 * (3.0 * t).sin()]),
            |t: f64| v(&[-0.5 * (-t).exp() + 0.3 * (3.0 * t).cos()]),
        );
        let kv = KnotVector::uniform(6, 5).unwrap();
        let quad = QuadratureRule::for_basis(&kv, 10).unwrap();
        (Curved::new(), f0, kv, quad)
    }

    #[test]
    fn j_is_half_the_hessian_of_the_squared_defect() {
        let (model, f0, kv, quad) = curved_setup();
        let w = WeightFn::parabolic();
        let theta0 = v(&[0.4, 0.7]);
        let ing = compute_ingredients(&model, &f0, &theta0, &w, &kv, &quad, TimeDerivative::ChainRule).unwrap();
        assert!(ing.misspecification_term().amax() > 1e-3);
        let samples = CurveSamples::from_curve(&f0, &w, &quad);
        let r2 = |th: &DVector<f64>| samples.defect_sq(&model, th).unwrap();
        let h = 1e-4;
        for a in 0..2 {
            for b in 0..2 {
                let e = |i: usize| DVector::from_fn(2, |k, _| if k == i { h } else { 0.0 });
                let hess = (r2(&(&theta0 + e(a) + e(b))) - r2(&(&theta0 + e(a) - e(b))) - r2(&(&theta0 - e(a) + e(b)))
                    + r2(&(&theta0 - e(a) - e(b))))
                    / (4.0 * h * h);
                assert_relative_eq!(ing.j()[(a, b)], 0.5 * hess, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn gamma_linearisation_has_quadratic_remainder() {
        let (model, _, kv, quad) = curved_setup();
        let w = WeightFn::parabolic();
        let f0 = TrueFunction::new(
            1,
            |t: f64| v(&[1.0 + 0.5 * (-t).exp() + 0.1 * (3.0 * t).sin()]),
            |t: f64| v(&[-0.5 * (-t).exp() + 0.3 * (3.0 * t).cos()]),
        );
        let cfg = PsiConfig::default();
        let fit = psi(&f0, &model, &w, &quad, &cfg).unwrap();
        assert!(!fit.diagnostics.on_boundary);
        let theta0 = fit.theta;
        let ing = compute_ingredients(&model, &f0, &theta0, &w, &kv, &quad, TimeDerivative::ChainRule).unwrap();
        let z = SplineFunction::new(kv.clone(), DMatrix::from_fn(kv.dim(), 1, |i, _| (0.7 * i as f64).cos())).unwrap();
        let remainder = |eps: f64| {
            let f = TrueFunction::new(
                1,
                {
                    let (f0, z) = (f0.clone(), z.clone());
                    move |t| f0.value(t) + z.value(t) * eps
                },
                {
                    let (f0, z) = (f0.clone(), z.clone());
                    move |t| f0.derivative(t) + z.derivative(t) * eps
                },
            );
            let th = psi(&f, &model, &w, &quad, &cfg.clone().with_warm_start(theta0.as_slice())).unwrap().theta;
            (th - &theta0 - ing.j_inv() * ing.gamma(&z) * eps).norm()
        };
        let (r1, r2) = (remainder(0.02), remainder(0.01));
        let ratio = r1 / r2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio} ({r1}, {r2})");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ing = example1_ingredients(TimeDerivative::ChainRule);
        let other = KnotVector::uniform(5, 5).unwrap();
        let factor = GramFactor::new(&DesignMatrix::new(&other, &midpoint_design(100)).unwrap()).unwrap();
        let y = DMatrix::zeros(100, 1);
        assert!(matches!(bvm_normal(&ing, &factor, &y, 1.0), Err(Error::InvalidArgument(_))));
    }

    fn example2_setup(n: usize) -> (BvmIngredients<f64>, GramFactor<f64>, DMatrix<f64>) {
        let model = builtin_model::<f64>("example2").unwrap();
        let theta0 = v(&[1.0, 1.0]);
        let f0 = TrueFunction::from_solution(model.clone(), theta0.clone()).unwrap();
        let kv = KnotVector::uniform(5, 5).unwrap();
        let quad = QuadratureRule::for_basis(&kv, 10).unwrap();
        let ing = compute_ingredients(model.as_ref(), &f0, &theta0, &WeightFn::parabolic(), &kv, &quad, TimeDerivative::ChainRule).unwrap();
        let x: Vec<f64> = midpoint_design(n);
        let factor = GramFactor::new(&DesignMatrix::new(&kv, &x).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let y = DMatrix::from_fn(n, 2, |i, j| {
            let e: f64 = StandardNormal.sample(&mut rng);
            f0.value(x[i])[j] + e
        });
        (ing, factor, y)
    }

    #[test]
    fn zero_noise_mean_vanishes_with_n() {
        let model = builtin_model::<f64>("example1").unwrap();
        let f0 = TrueFunction::from_solution(model.clone(), v(&[1.0])).unwrap();
        let norm_at = |n: usize| {
            let kv = KnotVector::uniform(crate::experiments::KnotRule::default().segments(n), 5).unwrap();
            let quad = QuadratureRule::for_basis(&kv, 10).unwrap();
            let ing = compute_ingredients(model.as_ref(), &f0, &v(&[1.0]), &WeightFn::parabolic(), &kv, &quad, TimeDerivative::ChainRule).unwrap();
            let x: Vec<f64> = midpoint_design(n);
            let factor = GramFactor::new(&DesignMatrix::new(&kv, &x).unwrap()).unwrap();
            let y = DMatrix::from_fn(n, 1, |i, _| f0.value(x[i])[0]);
            bvm_normal(&ing, &factor, &y, 1.0).unwrap().mean.norm()
        };
        assert!(norm_at(2000) < norm_at(200));
    }

    #[test]
    fn sigma_n_eigenvalues_stay_in_a_bracket() {
        let mut lo = f64::MAX;
        let mut hi: f64 = 0.0;
        for n in [200, 500, 1000] {
            let (ing, factor, _) = example2_setup(n);
            let e = SymmetricEigen::new(ing.sigma_n(&factor).unwrap()).eigenvalues;
            lo = lo.min(e.min());
            hi = hi.max(e.max());
        }
        assert!(lo > 1e-3 && hi < 1e3, "[{lo}, {hi}]");
        assert!(hi / lo < 1e3);
    }

    #[test]
    fn correlated_law_reduces_to_independent_law() {
        let (ing, factor, y) = example2_setup(200);
        let a = bvm_normal(&ing, &factor, &y, 1.0).unwrap();
        let b = bvm_normal_correlated(&ing, &factor, &y, &DMatrix::identity(2, 2)).unwrap();
        assert!((&a.mean - &b.mean).amax() <= 1e-10 * a.mean.amax().max(1.0));
        assert!((&a.covariance - &b.covariance).amax() <= 1e-10 * a.covariance.amax());

        let a = bvm_normal(&ing, &factor, &y, 2.5).unwrap();
        let b = bvm_normal_correlated(&ing, &factor, &y, &(DMatrix::identity(2, 2) * 2.5)).unwrap();
        assert!((&a.mean - &b.mean).amax() <= 1e-10 * a.mean.amax().max(1.0));
        assert!((&a.covariance - &b.covariance).amax() <= 1e-10 * a.covariance.amax());
    }

    #[test]
    fn correlated_law_matches_kronecker_oracle() {
        let (ing, factor, y) = example2_setup(150);
        let dim = factor.dim();
        let n = factor.n() as f64;
        let p = 2;
        // full p x (d dim) map and vec(B_hat)
        let mut gfull = DMatrix::zeros(p, 2 * dim);
        for (j, g) in ing.g().iter().enumerate() {
            gfull.view_mut((0, j * dim), (p, dim)).copy_from(&g.transpose());
        }
        let ols = factor.ols(&y).unwrap();
        let vec_b = DVector::from_column_slice(ols.as_slice());
        let mut sigmas = vec![DMatrix::from_diagonal(&v(&[1.0, 4.0]))];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let m: DMatrix<f64> = DMatrix::from_fn(2, 2, |_, _| { let e: f64 = StandardNormal.sample(&mut rng); e });
            sigmas.push(&m * m.transpose() + DMatrix::<f64>::identity(2, 2) * 0.05);
        }
        for sigma in &sigmas {
            let law = bvm_normal_correlated(&ing, &factor, &y, sigma).unwrap();
            assert!(law.is_spd());
            let kron = sigma.kronecker(factor.gram_inv());
            let cov = &gfull * kron * gfull.transpose() * n;
            let mean = (&gfull * &vec_b - ing.j_inv() * ing.gamma_f0()) * n.sqrt();
            assert!((&law.covariance - &cov).amax() <= 1e-10 * cov.amax(), "{sigma}");
            assert!((&law.mean - &mean).amax() <= 1e-10 * mean.amax().max(1.0));
        }
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(bvm_normal_correlated(&ing, &factor, &y, &bad), Err(Error::InvalidArgument(_))));
    }

    fn normal_draws(target: &AsymptoticNormal<f64>, count: usize, shift: f64, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = target.covariance.clone().cholesky().unwrap().l();
        (0..count)
            .map(|_| {
                let z = DVector::from_fn(target.dim(), |_, _| StandardNormal.sample(&mut rng));
                let sd = DVector::from_fn(target.dim(), |i, _| target.covariance[(i, i)].sqrt());
                &target.mean + &l * z + sd * shift
            })
            .collect()
    }

    #[test]
    fn tv_self_consistency_and_disjoint_mass() {
        let t1 = AsymptoticNormal::new(v(&[0.3]), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let t2 = AsymptoticNormal::new(v(&[1.0, -2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0])).unwrap();
        let t3 = AsymptoticNormal::new(v(&[0.0, 0.0, 0.0]), DMatrix::identity(3, 3)).unwrap();
        for (i, t) in [t1, t2, t3].iter().enumerate() {
            let same = tv_diagnostic(&normal_draws(t, 100_000, 0.0, i as u64), t).unwrap();
            assert!(same.value <= 0.05, "p={} tv={}", t.dim(), same.value);
            let far = tv_diagnostic(&normal_draws(t, 100_000, 10.0, i as u64), t).unwrap();
            assert!(far.value >= 0.99, "p={} tv={}", t.dim(), far.value);
        }
    }

    #[test]
    fn tv_needs_enough_draws() {
        let t = AsymptoticNormal::new(v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        assert!(matches!(tv_diagnostic(&normal_draws(&t, 100, 0.0, 1), &t), Err(Error::InvalidArgument(_))));
    }
}
