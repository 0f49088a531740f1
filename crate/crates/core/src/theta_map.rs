//! The defect functional
//! `R_f(eta) = { int_0^1 ||f'(t) - F(t, f(t), eta)||^2 w(t) dt }^{1/2}`,
//! its gradient, and the projection `psi(f) = argmin_{eta in Theta} R_f(eta)`.
//!
//! Integrals are discretised with a composite Gauss-Legendre rule. A curve is
//! first tabulated at the quadrature nodes ([`CurveSamples`]); the optimiser
//! then only evaluates the vector field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Curve, OdeModel, ParamBox, WeightFn};
use crate::quadrature::QuadratureRule;
use crate::scalar::Real;
use crate::spline::KnotVector;

/// `f(t) = B^T N(t)` for a coefficient matrix `B` of shape `(k_n + m - 1) x d`.
#[derive(Debug, Clone)]
pub struct SplineFunction<T: Real> {
    knots: KnotVector<T>,
    coeffs: DMatrix<T>,
}

impl<T: Real> SplineFunction<T> {
    pub fn new(knots: KnotVector<T>, coeffs: DMatrix<T>) -> Result<Self> {
        if coeffs.nrows() != knots.dim() {
            return Err(Error::invalid(format!(
                "coefficient matrix has {} rows, basis has dimension {}",
                coeffs.nrows(),
                knots.dim()
            )));
        }
        Ok(Self { knots, coeffs })
    }

    pub fn knots(&self) -> &KnotVector<T> {
        &self.knots
    }

    pub fn coeffs(&self) -> &DMatrix<T> {
        &self.coeffs
    }

    fn eval(&self, t: T, r: usize) -> DVector<T> {
        let t = t.clamp(T::zero(), T::one());
        let d = self.coeffs.ncols();
        let mut out = DVector::zeros(d);
        if r >= self.knots.order() {
            return out;
        }
        let (first, ders) = self.knots.eval_local(t, r).expect("point clamped into [0, 1]");
        for (i, b) in ders[r].iter().enumerate() {
            for j in 0..d {
                out[j] += *b * self.coeffs[(first + i, j)];
            }
        }
        out
    }
}

impl<T: Real> Curve<T> for SplineFunction<T> {
    fn dim(&self) -> usize {
        self.coeffs.ncols()
    }

    fn value(&self, t: T) -> DVector<T> {
        self.eval(t, 0)
    }

    fn derivative(&self, t: T) -> DVector<T> {
        self.eval(t, 1)
    }
}

/// Basis values and first derivatives tabulated at quadrature nodes, so that
/// many spline curves on the same basis can be sampled by one product each.
#[derive(Debug, Clone)]
pub struct BasisTable<T: Real> {
    quad: QuadratureRule<T>,
    values: DMatrix<T>,
    derivs: DMatrix<T>,
}

impl<T: Real> BasisTable<T> {
    pub fn new(knots: &KnotVector<T>, quad: &QuadratureRule<T>) -> Result<Self> {
        let nq = quad.len();
        let mut values = DMatrix::zeros(nq, knots.dim());
        let mut derivs = DMatrix::zeros(nq, knots.dim());
        let nderiv = usize::from(knots.order() > 1);
        for (q, &t) in quad.nodes().iter().enumerate() {
            let (first, ders) = knots.eval_local(t, nderiv)?;
            for j in 0..knots.order() {
                values[(q, first + j)] = ders[0][j];
                if nderiv == 1 {
                    derivs[(q, first + j)] = ders[1][j];
                }
            }
        }
        Ok(Self {
            quad: quad.clone(),
            values,
            derivs,
        })
    }

    pub fn quadrature(&self) -> &QuadratureRule<T> {
        &self.quad
    }

    /// Basis values `N(t_q)^T`, one row per node.
    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    /// Basis derivatives `N'(t_q)^T`, one row per node.
    pub fn derivs(&self) -> &DMatrix<T> {
        &self.derivs
    }

    pub fn samples(&self, coeffs: &DMatrix<T>, weight: &WeightFn<T>) -> CurveSamples<T> {
        let vals = &self.values * coeffs;
        let ders = &self.derivs * coeffs;
        let nq = self.quad.len();
        let mut out = CurveSamples::with_capacity(nq);
        for q in 0..nq {
            let t = self.quad.nodes()[q];
            out.push(
                t,
                self.quad.weights()[q] * weight.value(t),
                vals.row(q).transpose(),
                ders.row(q).transpose(),
            );
        }
        out
    }
}

/// A curve tabulated at quadrature nodes: `t_q`, weights `omega_q w(t_q)`,
/// `f(t_q)` and `f'(t_q)`.
#[derive(Debug, Clone)]
pub struct CurveSamples<T: Real> {
    nodes: Vec<T>,
    weights: Vec<T>,
    values: Vec<DVector<T>>,
    derivs: Vec<DVector<T>>,
}

impl<T: Real> CurveSamples<T> {
    fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            derivs: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, t: T, w: T, v: DVector<T>, d: DVector<T>) {
        self.nodes.push(t);
        self.weights.push(w);
        self.values.push(v);
        self.derivs.push(d);
    }

    pub fn from_curve(curve: &dyn Curve<T>, weight: &WeightFn<T>, quad: &QuadratureRule<T>) -> Self {
        let mut out = Self::with_capacity(quad.len());
        for (&t, &w) in quad.nodes().iter().zip(quad.weights()) {
            out.push(t, w * weight.value(t), curve.value(t), curve.derivative(t));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn residual(&self, model: &dyn OdeModel<T>, q: usize, eta: &DVector<T>) -> Result<DVector<T>> {
        let t = self.nodes[q];
        let f = &self.values[q];
        let rhs = model.rhs(t, f, eta).map_err(|e| field_error(t, f, eta, e))?;
        let r = &self.derivs[q] - rhs;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(field_error(t, f, eta, Error::Numeric("non-finite vector field".into())));
        }
        Ok(r)
    }

    /// `R_f(eta)^2` under this tabulation.
    pub fn defect_sq(&self, model: &dyn OdeModel<T>, eta: &DVector<T>) -> Result<T> {
        let mut acc = T::zero();
        for q in 0..self.len() {
            let r = self.residual(model, q, eta)?;
            acc += self.weights[q] * r.norm_squared();
        }
        Ok(acc)
    }

    /// `R_f(eta)^2`, its gradient `-2 int F_theta^T (f' - F) w dt`, and the
    /// Gauss-Newton matrix `2 int F_theta^T F_theta w dt`.
    pub fn defect_sq_derivs(
        &self,
        model: &dyn OdeModel<T>,
        eta: &DVector<T>,
    ) -> Result<(T, DVector<T>, DMatrix<T>)> {
        let p = eta.len();
        let two = T::lit(2.0);
        let mut value = T::zero();
        let mut grad = DVector::zeros(p);
        let mut gn = DMatrix::zeros(p, p);
        for q in 0..self.len() {
            let t = self.nodes[q];
            let f = &self.values[q];
            let r = self.residual(model, q, eta)?;
            let jac = model.d_theta(t, f, eta).map_err(|e| field_error(t, f, eta, e))?;
            let w = self.weights[q];
            value += w * r.norm_squared();
            grad.gemv_tr(-two * w, &jac, &r, T::one());
            gn.gemm_tr(two * w, &jac, &jac, T::one());
        }
        Ok((value, grad, gn))
    }
}

fn field_error<T: Real>(t: T, f: &DVector<T>, eta: &DVector<T>, e: Error) -> Error {
    Error::Numeric(format!(
        "vector field evaluation failed at t = {t}, f(t) = {:?}, eta = {:?}: {e}",
        f.as_slice(),
        eta.as_slice()
    ))
}

fn check_eta<T: Real>(model: &dyn OdeModel<T>, eta: &DVector<T>) -> Result<()> {
    if eta.len() != model.param_dim() {
        return Err(Error::invalid(format!(
            "parameter has length {}, model '{}' expects {}",
            eta.len(),
            model.name(),
            model.param_dim()
        )));
    }
    if !model.bounds().contains(eta) {
        return Err(Error::Domain(format!("eta = {:?} outside the parameter box", eta.as_slice())));
    }
    Ok(())
}

fn check_curve<T: Real>(curve: &dyn Curve<T>, model: &dyn OdeModel<T>) -> Result<()> {
    if curve.dim() != model.state_dim() {
        return Err(Error::invalid(format!(
            "curve has {} components, model '{}' has {} states",
            curve.dim(),
            model.name(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// `R_f(eta)` by quadrature.
pub fn defect<T: Real>(
    curve: &dyn Curve<T>,
    model: &dyn OdeModel<T>,
    eta: &DVector<T>,
    weight: &WeightFn<T>,
    quad: &QuadratureRule<T>,
) -> Result<T> {
    check_curve(curve, model)?;
    check_eta(model, eta)?;
    Ok(CurveSamples::from_curve(curve, weight, quad).defect_sq(model, eta)?.sqrt())
}

/// Gradient in `eta` of `R_f(eta)^2` by quadrature.
pub fn defect_gradient<T: Real>(
    curve: &dyn Curve<T>,
    model: &dyn OdeModel<T>,
    eta: &DVector<T>,
    weight: &WeightFn<T>,
    quad: &QuadratureRule<T>,
) -> Result<DVector<T>> {
    check_curve(curve, model)?;
    check_eta(model, eta)?;
    Ok(CurveSamples::from_curve(curve, weight, quad).defect_sq_derivs(model, eta)?.1)
}

/// Settings of the multistart projected Gauss-Newton search used for `psi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiConfig {
    /// Number of starts on the rotated Halton grid over the parameter box.
    pub starts: usize,
    /// Converged once the projected gradient of `R^2` is below this (sup norm).
    pub grad_tol: f64,
    /// Converged once a step is below `step_tol * (1 + |eta|)` without progress.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Extra start tried before the grid, e.g. a previous estimate.
    pub warm_start: Option<Vec<f64>>,
}

impl Default for PsiConfig {
    fn default() -> Self {
        Self {
            starts: 8,
            grad_tol: 1e-10,
            step_tol: 1e-13,
            max_iter: 200,
            warm_start: None,
        }
    }
}

impl PsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 && self.warm_start.is_none() {
            return Err(Error::invalid("psi needs at least one start"));
        }
        if !(self.grad_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::invalid("psi tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("psi max_iter must be positive"));
        }
        Ok(())
    }

    pub fn with_warm_start(mut self, theta: &[f64]) -> Self {
        self.warm_start = Some(theta.to_vec());
        self
    }
}

/// Outcome of one local search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: Vec<f64>,
    pub theta: Vec<f64>,
    /// `R_f` at the end point.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiDiagnostics {
    pub starts: Vec<StartRecord>,
    pub best_start: usize,
    /// Per coordinate, whether the minimiser sits on a face of the box.
    pub active_bounds: Vec<bool>,
    pub on_boundary: bool,
    pub projected_gradient: f64,
}

#[derive(Debug, Clone)]
pub struct PsiResult<T: Real> {
    pub theta: DVector<T>,
    /// `R_f(theta)`.
    pub value: T,
    pub diagnostics: PsiDiagnostics,
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// `count` points of a Halton sequence with a fixed Cranley-Patterson
/// rotation, in the unit cube of dimension `dim`.
pub fn start_points(dim: usize, count: usize) -> Vec<Vec<f64>> {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    (0..count)
        .map(|k| {
            (0..dim)
                .map(|i| {
                    let base = PRIMES[i % PRIMES.len()];
                    let shift = ((i as f64 + 1.0) * GOLDEN).fract();
                    // keep starts strictly inside the box
                    let u = (radical_inverse(k as u64 + 1, base) + shift).fract();
                    0.02 + 0.96 * u
                })
                .collect()
        })
        .collect()
}

/// `psi(f)` for a curve given analytically.
pub fn psi<T: Real>(
    curve: &dyn Curve<T>,
    model: &dyn OdeModel<T>,
    weight: &WeightFn<T>,
    quad: &QuadratureRule<T>,
    cfg: &PsiConfig,
) -> Result<PsiResult<T>> {
    check_curve(curve, model)?;
    psi_samples(&CurveSamples::from_curve(curve, weight, quad), model, cfg)
}

/// `psi(f)` for a tabulated curve.
pub fn psi_samples<T: Real>(
    samples: &CurveSamples<T>,
    model: &dyn OdeModel<T>,
    cfg: &PsiConfig,
) -> Result<PsiResult<T>> {
    cfg.validate()?;
    let bounds = model.bounds();
    let p = model.param_dim();
    let mut starts: Vec<DVector<T>> = Vec::with_capacity(cfg.starts + 1);
    if let Some(ws) = &cfg.warm_start {
        if ws.len() != p {
            return Err(Error::invalid(format!("warm start has length {}, expected {p}", ws.len())));
        }
        starts.push(bounds.project(&DVector::from_iterator(p, ws.iter().map(|v| T::lit(*v)))));
    }
    for u in start_points(p, cfg.starts) {
        let u: Vec<T> = u.into_iter().map(T::lit).collect();
        starts.push(bounds.from_unit(&u));
    }

    let mut records = Vec::with_capacity(starts.len());
    let mut finals = Vec::with_capacity(starts.len());
    for start in &starts {
        let run = local_search(samples, model, bounds, start, cfg)?;
        records.push(StartRecord {
            start: start.iter().map(|v| v.as_f64()).collect(),
            theta: run.theta.iter().map(|v| v.as_f64()).collect(),
            value: run.value_sq.as_f64().max(0.0).sqrt(),
            iterations: run.iterations,
            converged: run.converged,
        });
        finals.push(run);
    }

    let best = select_best(&finals);
    let Some(best) = best else {
        let (i, run) = finals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.value_sq.partial_cmp(&b.1.value_sq).unwrap_or(std::cmp::Ordering::Equal))
            .expect("at least one start");
        return Err(Error::OptimizationFailure {
            message: format!("none of {} starts converged (best from start {i})", finals.len()),
            best_theta: run.theta.iter().map(|v| v.as_f64()).collect(),
            best_value: run.value_sq.as_f64().max(0.0).sqrt(),
        });
    };

    let run = &finals[best];
    let tol = T::lit(1e-9);
    let active: Vec<bool> = (0..p)
        .map(|i| {
            let span = bounds.upper()[i] - bounds.lower()[i];
            (run.theta[i] - bounds.lower()[i]).abs() <= tol * span
                || (bounds.upper()[i] - run.theta[i]).abs() <= tol * span
        })
        .collect();
    let on_boundary = active.iter().any(|a| *a);
    if on_boundary {
        log::debug!("psi minimiser on the parameter box boundary: {:?}", run.theta.as_slice());
    }
    Ok(PsiResult {
        theta: run.theta.clone(),
        value: run.value_sq.max(T::zero()).sqrt(),
        diagnostics: PsiDiagnostics {
            starts: records,
            best_start: best,
            active_bounds: active,
            on_boundary,
            projected_gradient: run.projected_gradient.as_f64(),
        },
    })
}

/// Lowest objective among converged runs; ties (relative `1e-12`) go to the
/// lexicographically smallest parameter.
fn select_best<T: Real>(runs: &[LocalRun<T>]) -> Option<usize> {
    let min = runs
        .iter()
        .filter(|r| r.converged)
        .map(|r| r.value_sq)
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v))))?;
    let tie = T::lit(1e-12) * (T::one() + min.abs());
    runs.iter()
        .enumerate()
        .filter(|(_, r)| r.converged && r.value_sq <= min + tie)
        .min_by(|a, b| lexicographic(&a.1.theta, &b.1.theta))
        .map(|(i, _)| i)
}

fn lexicographic<T: Real>(a: &DVector<T>, b: &DVector<T>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

struct LocalRun<T: Real> {
    theta: DVector<T>,
    value_sq: T,
    projected_gradient: T,
    iterations: usize,
    converged: bool,
}

fn projected_gradient<T: Real>(bounds: &ParamBox<T>, x: &DVector<T>, g: &DVector<T>) -> T {
    (bounds.project(&(x - g)) - x).amax()
}

/// Projected Gauss-Newton search: Newton direction on the free variables,
/// Armijo backtracking along the projection arc, steepest descent fallback.
fn local_search<T: Real>(
    samples: &CurveSamples<T>,
    model: &dyn OdeModel<T>,
    bounds: &ParamBox<T>,
    start: &DVector<T>,
    cfg: &PsiConfig,
) -> Result<LocalRun<T>> {
    let p = start.len();
    let grad_tol = T::lit(cfg.grad_tol);
    let step_tol = T::lit(cfg.step_tol);
    let armijo = T::lit(1e-4);
    let mut x = bounds.project(start);
    let (mut fx, mut g, mut h) = samples.defect_sq_derivs(model, &x)?;
    let mut pg = projected_gradient(bounds, &x, &g);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        if pg <= grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let eps = T::lit(1e-12);
        let free: Vec<usize> = (0..p)
            .filter(|&i| {
                let span = bounds.upper()[i] - bounds.lower()[i];
                let at_lo = x[i] - bounds.lower()[i] <= eps * span && g[i] > T::zero();
                let at_hi = bounds.upper()[i] - x[i] <= eps * span && g[i] < T::zero();
                !(at_lo || at_hi)
            })
            .collect();
        let mut dir = DVector::zeros(p);
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
            let mut damping = T::zero();
            let scale = hf.diagonal().amax().max(T::default_epsilon());
            for _ in 0..8 {
                let mut m = hf.clone();
                for i in 0..free.len() {
                    m[(i, i)] += damping;
                }
                if let Some(ch) = m.cholesky() {
                    let sol = ch.solve(&gf);
                    for (a, &i) in free.iter().enumerate() {
                        dir[i] = sol[a];
                    }
                    break;
                }
                damping = if damping == T::zero() { T::lit(1e-10) * scale } else { damping * T::lit(100.0) };
            }
        }
        if !(dir.dot(&g) < T::zero()) {
            dir = -&g;
        }

        let mut alpha = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let trial = bounds.project(&(&x + &dir * alpha));
            let ftrial = samples.defect_sq(model, &trial)?;
            if ftrial <= fx + armijo * g.dot(&(&trial - &x)) {
                accepted = Some((trial, ftrial));
                break;
            }
            alpha *= T::lit(0.5);
        }
        let Some((next, fnext)) = accepted else {
            // no decrease possible at working precision
            converged = pg <= grad_tol.sqrt();
            break;
        };
        let step = (&next - &x).amax();
        let decrease = fx - fnext;
        x = next;
        let derivs = samples.defect_sq_derivs(model, &x)?;
        fx = derivs.0;
        g = derivs.1;
        h = derivs.2;
        pg = projected_gradient(bounds, &x, &g);
        if step <= step_tol * (T::one() + x.amax()) && decrease <= T::lit(1e-14) * (T::one() + fx.abs()) {
            converged = true;
            break;
        }
    }
    if !converged && pg <= grad_tol {
        converged = true;
    }
    Ok(LocalRun {
        theta: x,
        value_sq: fx,
        projected_gradient: pg,
        iterations,
        converged,
    })
}
