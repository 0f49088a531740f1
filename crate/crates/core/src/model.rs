//! ODE vector fields `F(t, f, theta)` with their partial derivatives, weight
//! functions, true mean curves, and the built-in example systems.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Central-difference step used when a model does not supply second partials.
pub const FD_STEP: f64 = 1e-5;

/// Axis-aligned compact parameter box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox<T: Real> {
    lower: DVector<T>,
    upper: DVector<T>,
}

impl<T: Real> ParamBox<T> {
    pub fn new(lower: DVector<T>, upper: DVector<T>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("parameter box bounds must be nonempty and of equal length"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("parameter box needs lower < upper in every coordinate"));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self::new(
            DVector::from_element(dim, T::lit(lo)),
            DVector::from_element(dim, T::lit(hi)),
        )
        .expect("valid cube")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<T> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<T> {
        &self.upper
    }

    pub fn contains(&self, theta: &DVector<T>) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (l, u))| x >= l && x <= u)
    }

    pub fn project(&self, theta: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            theta
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (l, u))| x.clamp(*l, *u)),
        )
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[T]) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(s, (l, h))| *l + *s * (*h - *l)),
        )
    }
}

/// A system `f'(t) = F(t, f(t), theta)` with `d` states and `p` parameters.
///
/// Matrix layouts: `d_theta` is `d x p` with entry `(i, k) = dF_i/dtheta_k`;
/// `d_state` is `d x d` with `(i, j) = dF_i/df_j`. The second partials return
/// one matrix per component `F_i`. Second partials and the time derivative of
/// `d_theta` default to central differences of the first partials.
pub trait OdeModel<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn bounds(&self) -> &ParamBox<T>;

    fn rhs(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<DVector<T>>;

    fn d_theta(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<DMatrix<T>>;

    fn d_state(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<DMatrix<T>>;

    /// Per component `i`, the `p x p` Hessian of `F_i` in `theta`.
    fn d_theta_theta(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        let p = self.param_dim();
        let d = self.state_dim();
        let mut out = vec![DMatrix::zeros(p, p); d];
        for l in 0..p {
            let h = fd_step(theta[l]);
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[l] += h;
            minus[l] -= h;
            let diff = (self.d_theta(t, f, &plus)? - self.d_theta(t, f, &minus)?) / (h + h);
            for (i, hess) in out.iter_mut().enumerate() {
                for k in 0..p {
                    hess[(k, l)] = diff[(i, k)];
                }
            }
        }
        Ok(symmetrize_all(out))
    }

    /// Per component `i`, the `d x p` matrix `d^2 F_i / (df_j dtheta_k)`.
    fn d_state_theta(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        let p = self.param_dim();
        let d = self.state_dim();
        let mut out = vec![DMatrix::zeros(d, p); d];
        for j in 0..d {
            let h = fd_step(f[j]);
            let mut plus = f.clone();
            let mut minus = f.clone();
            plus[j] += h;
            minus[j] -= h;
            let diff = (self.d_theta(t, &plus, theta)? - self.d_theta(t, &minus, theta)?) / (h + h);
            for (i, m) in out.iter_mut().enumerate() {
                for k in 0..p {
                    m[(j, k)] = diff[(i, k)];
                }
            }
        }
        Ok(out)
    }

    /// Per component `i`, the `d x d` Hessian of `F_i` in the state.
    fn d_state_state(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        let d = self.state_dim();
        let mut out = vec![DMatrix::zeros(d, d); d];
        for l in 0..d {
            let h = fd_step(f[l]);
            let mut plus = f.clone();
            let mut minus = f.clone();
            plus[l] += h;
            minus[l] -= h;
            let diff = (self.d_state(t, &plus, theta)? - self.d_state(t, &minus, theta)?) / (h + h);
            for (i, hess) in out.iter_mut().enumerate() {
                for j in 0..d {
                    hess[(j, l)] = diff[(i, j)];
                }
            }
        }
        Ok(symmetrize_all(out))
    }

    /// `d x p` matrix of explicit time derivatives `d^2 F_i / (dt dtheta_k)`.
    fn d_time_theta(&self, t: T, f: &DVector<T>, theta: &DVector<T>) -> Result<DMatrix<T>> {
        let h = fd_step(t);
        Ok((self.d_theta(t + h, f, theta)? - self.d_theta(t - h, f, theta)?) / (h + h))
    }

    /// Closed-form solution `(f_theta(t), f_theta'(t))`, when one is known.
    fn solution(&self, _t: T, _theta: &DVector<T>) -> Option<(DVector<T>, DVector<T>)> {
        None
    }

    fn has_solution(&self) -> bool {
        false
    }
}

pub(crate) fn fd_step<T: Real>(x: T) -> T {
    T::lit(FD_STEP) * T::one().max(x.abs())
}

fn symmetrize_all<T: Real>(ms: Vec<DMatrix<T>>) -> Vec<DMatrix<T>> {
    ms.into_iter()
        .map(|m| (&m + m.transpose()) * T::lit(0.5))
        .collect()
}

/// Names of the built-in systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    /// `F = theta t - theta t f`, solution `1 + exp(-theta t^2 / 2)`.
    Example1,
    /// `F_1 = theta_1 f_1`, `F_2 = 2 theta_2 f_1 + theta_1 f_2`.
    Example2,
    /// `p_1' = alpha p_1 + beta p_1 p_2`, `p_2' = gamma p_2 + delta p_1 p_2`.
    LotkaVolterra,
    /// `R' = k_in - k_out R (1 + M)`, `M' = k_tol (R - M)`.
    PkpdFeedback,
}

impl BuiltinModel {
    pub const ALL: [BuiltinModel; 4] = [
        BuiltinModel::Example1,
        BuiltinModel::Example2,
        BuiltinModel::LotkaVolterra,
        BuiltinModel::PkpdFeedback,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BuiltinModel::Example1 => "example1",
            BuiltinModel::Example2 => "example2",
            BuiltinModel::LotkaVolterra => "lotka_volterra",
            BuiltinModel::PkpdFeedback => "pkpd_feedback",
        }
    }

    pub fn build<T: Real>(self) -> Arc<dyn OdeModel<T>> {
        Arc::new(Builtin::new(self))
    }
}

impl fmt::Display for BuiltinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuiltinModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model '{s}'")))
    }
}

/// Looks up a built-in model by name.
pub fn builtin_model<T: Real>(name: &str) -> Result<Arc<dyn OdeModel<T>>> {
    Ok(name.parse::<BuiltinModel>()?.build())
}

struct Builtin<T: Real> {
    kind: BuiltinModel,
    bounds: ParamBox<T>,
}

impl<T: Real> Builtin<T> {
    fn new(kind: BuiltinModel) -> Self {
        let bounds = match kind {
            BuiltinModel::Example1 => ParamBox::cube(1, -10.0, 10.0),
            BuiltinModel::Example2 => ParamBox::cube(2, -10.0, 10.0),
            BuiltinModel::LotkaVolterra => ParamBox::cube(4, -10.0, 10.0),
            BuiltinModel::PkpdFeedback => ParamBox::cube(3, 0.0, 10.0),
        };
        Self { kind, bounds }
    }
}

impl<T: Real> OdeModel<T> for Builtin<T> {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn state_dim(&self) -> usize {
        match self.kind {
            BuiltinModel::Example1 => 1,
            _ => 2,
        }
    }

    fn param_dim(&self) -> usize {
        self.bounds.dim()
    }

    fn bounds(&self) -> &ParamBox<T> {
        &self.bounds
    }

    fn rhs(&self, t: T, f: &DVector<T>, th: &DVector<T>) -> Result<DVector<T>> {
        let two = T::lit(2.0);
        Ok(match self.kind {
            BuiltinModel::Example1 => DVector::from_element(1, th[0] * t * (T::one() - f[0])),
            BuiltinModel::Example2 => {
                DVector::from_vec(vec![th[0] * f[0], two * th[1] * f[0] + th[0] * f[1]])
            }
            BuiltinModel::LotkaVolterra => DVector::from_vec(vec![
                th[0] * f[0] + th[1] * f[0] * f[1],
                th[2] * f[1] + th[3] * f[0] * f[1],
            ]),
            BuiltinModel::PkpdFeedback => DVector::from_vec(vec![
                th[0] - th[1] * f[0] * (T::one() + f[1]),
                th[2] * (f[0] - f[1]),
            ]),
        })
    }

    fn d_theta(&self, t: T, f: &DVector<T>, th: &DVector<T>) -> Result<DMatrix<T>> {
        let z = T::zero();
        let two = T::lit(2.0);
        let _ = th;
        Ok(match self.kind {
            BuiltinModel::Example1 => DMatrix::from_element(1, 1, t * (T::one() - f[0])),
            BuiltinModel::Example2 => DMatrix::from_row_slice(2, 2, &[f[0], z, f[1], two * f[0]]),
            BuiltinModel::LotkaVolterra => DMatrix::from_row_slice(
                2,
                4,
                &[f[0], f[0] * f[1], z, z, z, z, f[1], f[0] * f[1]],
            ),
            BuiltinModel::PkpdFeedback => DMatrix::from_row_slice(
                2,
                3,
                &[T::one(), -f[0] * (T::one() + f[1]), z, z, z, f[0] - f[1]],
            ),
        })
    }

    fn d_state(&self, t: T, f: &DVector<T>, th: &DVector<T>) -> Result<DMatrix<T>> {
        let z = T::zero();
        let two = T::lit(2.0);
        Ok(match self.kind {
            BuiltinModel::Example1 => DMatrix::from_element(1, 1, -th[0] * t),
            BuiltinModel::Example2 => DMatrix::from_row_slice(2, 2, &[th[0], z, two * th[1], th[0]]),
            BuiltinModel::LotkaVolterra => DMatrix::from_row_slice(
                2,
                2,
                &[th[0] + th[1] * f[1], th[1] * f[0], th[3] * f[1], th[2] + th[3] * f[0]],
            ),
            BuiltinModel::PkpdFeedback => DMatrix::from_row_slice(
                2,
                2,
                &[-th[1] * (T::one() + f[1]), -th[1] * f[0], th[2], -th[2]],
            ),
        })
    }

    fn d_theta_theta(&self, _t: T, _f: &DVector<T>, _th: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        // every built-in is linear in theta
        let p = self.param_dim();
        Ok(vec![DMatrix::zeros(p, p); self.state_dim()])
    }

    fn d_state_theta(&self, t: T, f: &DVector<T>, _th: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        let z = T::zero();
        let o = T::one();
        let two = T::lit(2.0);
        Ok(match self.kind {
            BuiltinModel::Example1 => vec![DMatrix::from_element(1, 1, -t)],
            BuiltinModel::Example2 => vec![
                DMatrix::from_row_slice(2, 2, &[o, z, z, z]),
                DMatrix::from_row_slice(2, 2, &[z, two, o, z]),
            ],
            BuiltinModel::LotkaVolterra => vec![
                DMatrix::from_row_slice(2, 4, &[o, f[1], z, z, z, f[0], z, z]),
                DMatrix::from_row_slice(2, 4, &[z, z, z, f[1], z, z, o, f[0]]),
            ],
            BuiltinModel::PkpdFeedback => vec![
                DMatrix::from_row_slice(2, 3, &[z, -(o + f[1]), z, z, -f[0], z]),
                DMatrix::from_row_slice(2, 3, &[z, z, o, z, z, -o]),
            ],
        })
    }

    fn d_state_state(&self, _t: T, _f: &DVector<T>, th: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        let z = T::zero();
        Ok(match self.kind {
            BuiltinModel::Example1 => vec![DMatrix::zeros(1, 1)],
            BuiltinModel::Example2 => vec![DMatrix::zeros(2, 2); 2],
            BuiltinModel::LotkaVolterra => vec![
                DMatrix::from_row_slice(2, 2, &[z, th[1], th[1], z]),
                DMatrix::from_row_slice(2, 2, &[z, th[3], th[3], z]),
            ],
            BuiltinModel::PkpdFeedback => vec![
                DMatrix::from_row_slice(2, 2, &[z, -th[1], -th[1], z]),
                DMatrix::zeros(2, 2),
            ],
        })
    }

    fn d_time_theta(&self, _t: T, f: &DVector<T>, _th: &DVector<T>) -> Result<DMatrix<T>> {
        let (d, p) = (self.state_dim(), self.param_dim());
        Ok(match self.kind {
            BuiltinModel::Example1 => DMatrix::from_element(1, 1, T::one() - f[0]),
            _ => DMatrix::zeros(d, p),
        })
    }

    fn solution(&self, t: T, th: &DVector<T>) -> Option<(DVector<T>, DVector<T>)> {
        let two = T::lit(2.0);
        match self.kind {
            BuiltinModel::Example1 => {
                let e = (-th[0] * t * t / two).exp();
                Some((
                    DVector::from_element(1, T::one() + e),
                    DVector::from_element(1, -th[0] * t * e),
                ))
            }
            BuiltinModel::Example2 => {
                let e = (th[0] * t).exp();
                let lin = two * th[1] * t + T::one();
                Some((
                    DVector::from_vec(vec![e, lin * e]),
                    DVector::from_vec(vec![th[0] * e, (two * th[1] + th[0] * lin) * e]),
                ))
            }
            _ => None,
        }
    }

    fn has_solution(&self) -> bool {
        matches!(self.kind, BuiltinModel::Example1 | BuiltinModel::Example2)
    }
}

type ScalarFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
type VectorFn<T> = Arc<dyn Fn(T) -> DVector<T> + Send + Sync>;

/// Nonnegative weight `w` on `[0, 1]` with `w(0) = w(1) = 0`, and its derivative.
#[derive(Clone)]
pub struct WeightFn<T: Real> {
    kind: WeightKind<T>,
}

#[derive(Clone)]
enum WeightKind<T: Real> {
    Parabolic,
    Custom { w: ScalarFn<T>, dw: ScalarFn<T> },
}

impl<T: Real> WeightFn<T> {
    /// `w(t) = t (1 - t)`.
    pub fn parabolic() -> Self {
        Self {
            kind: WeightKind::Parabolic,
        }
    }

    /// User weight; endpoints must vanish exactly and `w` must be nonnegative
    /// on a 1001-point grid.
    pub fn custom(
        w: impl Fn(T) -> T + Send + Sync + 'static,
        dw: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> Result<Self> {
        if w(T::zero()) != T::zero() || w(T::one()) != T::zero() {
            return Err(Error::invalid("weight function must vanish at t = 0 and t = 1"));
        }
        for i in 0..=1000 {
            let t = T::from_index(i) / T::lit(1000.0);
            if !(w(t) >= T::zero()) {
                return Err(Error::invalid(format!("weight function negative at t = {t}")));
            }
        }
        Ok(Self {
            kind: WeightKind::Custom {
                w: Arc::new(w),
                dw: Arc::new(dw),
            },
        })
    }

    pub fn value(&self, t: T) -> T {
        match &self.kind {
            WeightKind::Parabolic => t * (T::one() - t),
            WeightKind::Custom { w, .. } => w(t),
        }
    }

    pub fn derivative(&self, t: T) -> T {
        match &self.kind {
            WeightKind::Parabolic => T::one() - T::lit(2.0) * t,
            WeightKind::Custom { dw, .. } => dw(t),
        }
    }
}

impl<T: Real> Default for WeightFn<T> {
    fn default() -> Self {
        Self::parabolic()
    }
}

impl<T: Real> fmt::Debug for WeightFn<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            WeightKind::Parabolic => f.write_str("WeightFn(t(1-t))"),
            WeightKind::Custom { .. } => f.write_str("WeightFn(custom)"),
        }
    }
}

/// A vector-valued curve on `[0, 1]` with a first derivative.
pub trait Curve<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: T) -> DVector<T>;
    fn derivative(&self, t: T) -> DVector<T>;
}

/// The true mean `f_0` together with its derivative.
#[derive(Clone)]
pub struct TrueFunction<T: Real> {
    dim: usize,
    value: VectorFn<T>,
    derivative: VectorFn<T>,
}

impl<T: Real> TrueFunction<T> {
    pub fn new(
        dim: usize,
        value: impl Fn(T) -> DVector<T> + Send + Sync + 'static,
        derivative: impl Fn(T) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            derivative: Arc::new(derivative),
        }
    }

    /// The model's own solution at `theta` (well-specified truth).
    pub fn from_solution(model: Arc<dyn OdeModel<T>>, theta: DVector<T>) -> Result<Self> {
        if !model.has_solution() {
            return Err(Error::invalid(format!(
                "model '{}' has no closed-form solution attached",
                model.name()
            )));
        }
        let d = model.state_dim();
        let (m1, th1) = (model.clone(), theta.clone());
        Ok(Self::new(
            d,
            move |t| m1.solution(t, &th1).expect("solution").0,
            move |t| model.solution(t, &theta).expect("solution").1,
        ))
    }
}

impl<T: Real> Curve<T> for TrueFunction<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, t: T) -> DVector<T> {
        (self.value)(t)
    }

    fn derivative(&self, t: T) -> DVector<T> {
        (self.derivative)(t)
    }
}

impl<T: Real> fmt::Debug for TrueFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TrueFunction(dim = {})", self.dim)
    }
}

/// Misspecified truths used in the simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisspecifiedTruth {
    /// `1 + exp(-t^2/2) + 0.02 sin(4 pi t)`.
    Example1Case2,
    /// `(exp(t) + 0.1 sin(4 pi t), (2t + 1) exp(t) + 0.45 cos(4 pi t))`.
    Example2Case2,
}

impl FromStr for MisspecifiedTruth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1_case2" => Ok(Self::Example1Case2),
            "example2_case2" => Ok(Self::Example2Case2),
            _ => Err(Error::invalid(format!("unknown misspecified truth '{s}'"))),
        }
    }
}

pub fn misspecified_truth<T: Real>(name: &str) -> Result<TrueFunction<T>> {
    Ok(name.parse::<MisspecifiedTruth>()?.build())
}

impl MisspecifiedTruth {
    pub fn build<T: Real>(self) -> TrueFunction<T> {
        let four_pi = T::lit(4.0 * std::f64::consts::PI);
        match self {
            MisspecifiedTruth::Example1Case2 => TrueFunction::new(
                1,
                move |t: T| {
                    DVector::from_element(
                        1,
                        T::one() + (-t * t / T::lit(2.0)).exp() + T::lit(0.02) * (four_pi * t).sin(),
                    )
                },
                move |t: T| {
                    DVector::from_element(
                        1,
                        -t * (-t * t / T::lit(2.0)).exp() + T::lit(0.02) * four_pi * (four_pi * t).cos(),
                    )
                },
            ),
            MisspecifiedTruth::Example2Case2 => TrueFunction::new(
                2,
                move |t: T| {
                    let e = t.exp();
                    DVector::from_vec(vec![
                        e + T::lit(0.1) * (four_pi * t).sin(),
                        (T::lit(2.0) * t + T::one()) * e + T::lit(0.45) * (four_pi * t).cos(),
                    ])
                },
                move |t: T| {
                    let e = t.exp();
                    DVector::from_vec(vec![
                        e + T::lit(0.1) * four_pi * (four_pi * t).cos(),
                        (T::lit(2.0) * t + T::lit(3.0)) * e - T::lit(0.45) * four_pi * (four_pi * t).sin(),
                    ])
                },
            ),
        }
    }
}

type MapFn<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
type JacFn<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;

/// Model for transformed observations `h = g(f)`:
/// `H(t, h, theta) = g'(g^{-1}(h)) F(t, g^{-1}(h), theta)`.
pub struct TransformedModel<T: Real> {
    base: Arc<dyn OdeModel<T>>,
    name: String,
    g: MapFn<T>,
    g_inv: MapFn<T>,
    g_jacobian: JacFn<T>,
}

/// Wraps `model` so that it describes `h = g(f)` instead of `f`.
pub fn transform_model<T: Real>(
    model: Arc<dyn OdeModel<T>>,
    g: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    g_inv: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    g_jacobian: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
) -> TransformedModel<T> {
    let name = format!("transformed({})", model.name());
    TransformedModel {
        base: model,
        name,
        g: Arc::new(g),
        g_inv: Arc::new(g_inv),
        g_jacobian: Arc::new(g_jacobian),
    }
}

impl<T: Real> TransformedModel<T> {
    fn jacobian_at(&self, t: T, h: &DVector<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        let f = (self.g_inv)(h);
        let jac = (self.g_jacobian)(&f);
        let singular = jac.clone().lu().determinant().abs() <= T::default_epsilon() * T::lit(1e3)
            || jac.iter().any(|v| !v.is_finite());
        if singular {
            return Err(Error::Numeric(format!(
                "singular transform Jacobian at t = {t}, h = {:?}",
                h.as_slice()
            )));
        }
        Ok((f, jac))
    }
}

impl<T: Real> OdeModel<T> for TransformedModel<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }

    fn param_dim(&self) -> usize {
        self.base.param_dim()
    }

    fn bounds(&self) -> &ParamBox<T> {
        self.base.bounds()
    }

    fn rhs(&self, t: T, h: &DVector<T>, theta: &DVector<T>) -> Result<DVector<T>> {
        let (f, jac) = self.jacobian_at(t, h)?;
        Ok(jac * self.base.rhs(t, &f, theta)?)
    }

    fn d_theta(&self, t: T, h: &DVector<T>, theta: &DVector<T>) -> Result<DMatrix<T>> {
        let (f, jac) = self.jacobian_at(t, h)?;
        Ok(jac * self.base.d_theta(t, &f, theta)?)
    }

    fn d_state(&self, t: T, h: &DVector<T>, theta: &DVector<T>) -> Result<DMatrix<T>> {
        let d = self.state_dim();
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            let step = fd_step(h[j]);
            let mut plus = h.clone();
            let mut minus = h.clone();
            plus[j] += step;
            minus[j] -= step;
            let col = (self.rhs(t, &plus, theta)? - self.rhs(t, &minus, theta)?) / (step + step);
            out.set_column(j, &col);
        }
        Ok(out)
    }

    fn d_time_theta(&self, t: T, h: &DVector<T>, theta: &DVector<T>) -> Result<DMatrix<T>> {
        let (f, jac) = self.jacobian_at(t, h)?;
        Ok(jac * self.base.d_time_theta(t, &f, theta)?)
    }

    fn solution(&self, t: T, theta: &DVector<T>) -> Option<(DVector<T>, DVector<T>)> {
        let (f, fp) = self.base.solution(t, theta)?;
        let jac = (self.g_jacobian)(&f);
        Some(((self.g)(&f), jac * fp))
    }

    fn has_solution(&self) -> bool {
        self.base.has_solution()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn fd_d_theta(m: &dyn OdeModel<f64>, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.state_dim(), m.param_dim());
        for k in 0..m.param_dim() {
            let h = 1e-6 * th[k].abs().max(1.0);
            let mut a = th.clone();
            let mut b = th.clone();
            a[k] += h;
            b[k] -= h;
            out.set_column(k, &((m.rhs(t, f, &a).unwrap() - m.rhs(t, f, &b).unwrap()) / (2.0 * h)));
        }
        out
    }

    fn fd_d_state(m: &dyn OdeModel<f64>, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> DMatrix<f64> {
        let d = m.state_dim();
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            let h = 1e-6 * f[j].abs().max(1.0);
            let mut a = f.clone();
            let mut b = f.clone();
            a[j] += h;
            b[j] -= h;
            out.set_column(j, &((m.rhs(t, &a, th).unwrap() - m.rhs(t, &b, th).unwrap()) / (2.0 * h)));
        }
        out
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64) -> bool {
        let scale = a.amax().max(b.amax()).max(1.0);
        (a - b).amax() <= rel * scale
    }

    #[test]
    fn example_values() {
        let m1 = builtin_model::<f64>("example1").unwrap();
        assert_eq!(m1.solution(0.0, &v(&[1.0])).unwrap().0[0], 2.0);
        assert_relative_eq!(m1.d_theta(0.5, &v(&[2.0]), &v(&[3.0])).unwrap()[(0, 0)], -0.5);

        let m2 = builtin_model::<f64>("example2").unwrap();
        let (f, _) = m2.solution(0.0, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 1.0]);
        let (f, _) = m2.solution(0.7, &v(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(f[1], (2.0 * 0.7 + 1.0) * 0.7f64.exp(), max_relative = 1e-14);

        assert!(matches!(builtin_model::<f64>("nope"), Err(Error::InvalidArgument(_))));
        assert!(!builtin_model::<f64>("lotka_volterra").unwrap().has_solution());
        assert!(builtin_model::<f64>("pkpd_feedback").unwrap().solution(0.1, &v(&[1.0, 1.0, 1.0])).is_none());
    }

    #[test]
    fn analytic_solutions_satisfy_the_ode() {
        for (name, th) in [("example1", v(&[1.0])), ("example1", v(&[-2.5])), ("example2", v(&[1.0, 1.0])), ("example2", v(&[-0.7, 2.0]))] {
            let m = builtin_model::<f64>(name).unwrap();
            for i in 0..1000 {
                let t = i as f64 / 999.0;
                let (f, fp) = m.solution(t, &th).unwrap();
                let rhs = m.rhs(t, &f, &th).unwrap();
                assert!((fp - rhs).amax() < 1e-8, "{name} t={t}");
            }
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in BuiltinModel::ALL {
            let m = kind.build::<f64>();
            for _ in 0..50 {
                let t: f64 = rng.random();
                let f = DVector::from_fn(m.state_dim(), |_, _| rng.random_range(0.2..3.0));
                let th = DVector::from_fn(m.param_dim(), |_, _| rng.random_range(0.1..3.0));
                assert!(close(&m.d_theta(t, &f, &th).unwrap(), &fd_d_theta(m.as_ref(), t, &f, &th), 1e-5));
                assert!(close(&m.d_state(t, &f, &th).unwrap(), &fd_d_state(m.as_ref(), t, &f, &th), 1e-5));
            }
        }
    }

    /// Analytic second partials of the built-ins against the generic
    /// finite-difference defaults of the trait.
    struct FirstOrderOnly(Arc<dyn OdeModel<f64>>);

    impl OdeModel<f64> for FirstOrderOnly {
        fn name(&self) -> &str {
            "first-order-only"
        }
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn param_dim(&self) -> usize {
            self.0.param_dim()
        }
        fn bounds(&self) -> &ParamBox<f64> {
            self.0.bounds()
        }
        fn rhs(&self, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> Result<DVector<f64>> {
            self.0.rhs(t, f, th)
        }
        fn d_theta(&self, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> Result<DMatrix<f64>> {
            self.0.d_theta(t, f, th)
        }
        fn d_state(&self, t: f64, f: &DVector<f64>, th: &DVector<f64>) -> Result<DMatrix<f64>> {
            self.0.d_state(t, f, th)
        }
    }

    #[test]
    fn second_partials_match_default_fallbacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in BuiltinModel::ALL {
            let m = kind.build::<f64>();
            let fallback = FirstOrderOnly(m.clone());
            for _ in 0..20 {
                let t: f64 = rng.random_range(0.05..0.95);
                let f = DVector::from_fn(m.state_dim(), |_, _| rng.random_range(0.2..3.0));
                let th = DVector::from_fn(m.param_dim(), |_, _| rng.random_range(0.1..3.0));
                for (a, b) in m.d_theta_theta(t, &f, &th).unwrap().iter().zip(fallback.d_theta_theta(t, &f, &th).unwrap()) {
                    assert!(close(a, &b, 1e-6));
                }
                for (a, b) in m.d_state_theta(t, &f, &th).unwrap().iter().zip(fallback.d_state_theta(t, &f, &th).unwrap()) {
                    assert!(close(a, &b, 1e-6));
                }
                for (a, b) in m.d_state_state(t, &f, &th).unwrap().iter().zip(fallback.d_state_state(t, &f, &th).unwrap()) {
                    assert!(close(a, &b, 1e-6));
                }
                assert!(close(&m.d_time_theta(t, &f, &th).unwrap(), &fallback.d_time_theta(t, &f, &th).unwrap(), 1e-6));
            }
        }
    }

    #[test]
    fn default_weight() {
        let w = WeightFn::<f64>::parabolic();
        assert_eq!(w.value(0.0), 0.0);
        assert_eq!(w.value(1.0), 0.0);
        assert_eq!(w.derivative(0.25), 0.5);
        assert!((0..=1000).all(|i| w.value(i as f64 / 1000.0) >= 0.0));
        assert!(WeightFn::<f64>::custom(|t| t, |_| 1.0).is_err());
        assert!(WeightFn::<f64>::custom(|t| t * (t - 1.0), |t| 2.0 * t - 1.0).is_err());
        let w = WeightFn::<f64>::custom(|t| (t * (1.0 - t)).powi(2), |t| 2.0 * t * (1.0 - t) * (1.0 - 2.0 * t)).unwrap();
        assert_relative_eq!(w.value(0.5), 0.0625);
    }

    #[test]
    fn misspecified_truth_values() {
        let f = misspecified_truth::<f64>("example1_case2").unwrap();
        assert_eq!(f.value(0.0)[0], 2.0);
        assert_relative_eq!(f.derivative(0.0)[0], 0.08 * std::f64::consts::PI, max_relative = 1e-14);

        let g = misspecified_truth::<f64>("example2_case2").unwrap();
        assert_relative_eq!(g.value(0.25)[0], 0.25f64.exp(), max_relative = 1e-14);
        assert!(misspecified_truth::<f64>("example3_case2").is_err());

        for truth in [f, g] {
            for i in 1..100 {
                let t = i as f64 / 100.0;
                let h = 1e-6;
                let fd = (truth.value(t + h) - truth.value(t - h)) / (2.0 * h);
                let d = truth.derivative(t);
                for j in 0..truth.dim() {
                    assert!((fd[j] - d[j]).abs() <= 1e-6 * d[j].abs().max(1.0));
                }
            }
        }
    }

    fn log_example1() -> TransformedModel<f64> {
        transform_model(
            builtin_model::<f64>("example1").unwrap(),
            |f| f.map(f64::ln),
            |h| h.map(f64::exp),
            |f| DMatrix::from_diagonal(&f.map(|x| 1.0 / x)),
        )
    }

    #[test]
    fn identity_transform_is_a_no_op() {
        let base = builtin_model::<f64>("example2").unwrap();
        let id = transform_model(base.clone(), |f| f.clone(), |h| h.clone(), |f| DMatrix::identity(f.len(), f.len()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t: f64 = rng.random();
            let h = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let th = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            assert_eq!(id.rhs(t, &h, &th).unwrap(), base.rhs(t, &h, &th).unwrap());
        }
    }

    #[test]
    fn log_transform_spot_value() {
        let m = log_example1();
        let h = m.rhs(0.5, &v(&[2f64.ln()]), &v(&[1.0])).unwrap();
        assert_relative_eq!(h[0], -0.25, max_relative = 1e-14);
        let (hv, hp) = m.solution(0.3, &v(&[1.0])).unwrap();
        assert!((hp - m.rhs(0.3, &hv, &v(&[1.0])).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn transformed_partials_match_finite_differences() {
        let m = log_example1();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let t: f64 = rng.random();
            let h = v(&[rng.random_range(-1.0..1.5)]);
            let th = v(&[rng.random_range(-3.0..3.0)]);
            assert!(close(&m.d_theta(t, &h, &th).unwrap(), &fd_d_theta(&m, t, &h, &th), 1e-5));
            assert!(close(&m.d_state(t, &h, &th).unwrap(), &fd_d_state(&m, t, &h, &th), 1e-5));
        }
    }

    #[test]
    fn singular_transform_jacobian_is_reported() {
        let m = transform_model(
            builtin_model::<f64>("example1").unwrap(),
            |f| f.map(|x| x * x * x),
            |h| h.map(f64::cbrt),
            |f| DMatrix::from_diagonal(&f.map(|x| 3.0 * x * x)),
        );
        let err = m.rhs(0.5, &v(&[0.0]), &v(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref s) if s.contains("t = 0.5")));
    }

    proptest! {
        #[test]
        fn prop_example2_partials(t in 0.0f64..1.0, f1 in -3.0f64..3.0, f2 in -3.0f64..3.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let m = builtin_model::<f64>("example2").unwrap();
            let (f, th) = (v(&[f1, f2]), v(&[a, b]));
            prop_assert!(close(&m.d_theta(t, &f, &th).unwrap(), &fd_d_theta(m.as_ref(), t, &f, &th), 1e-5));
            prop_assert!(close(&m.d_state(t, &f, &th).unwrap(), &fd_d_state(m.as_ref(), t, &f, &th), 1e-5));
        }
    }
}
