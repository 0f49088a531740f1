//! Bayesian two-step estimation of ODE parameters.
//!
//! Noisy observations of the states are smoothed by a B-spline regression with
//! a conjugate Gaussian prior on the coefficients. Every posterior draw of the
//! spline is mapped to the parameter space by minimising the weighted defect
//! `int |f'(t) - F(t, f(t), eta)|^2 w(t) dt`, which induces a posterior on
//! `theta`. The [`asymptotics`] module computes the normal law this induced
//! posterior approaches, and [`experiments`] runs coverage studies.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar. Sampling and the study harness work in `f64`.

pub mod asymptotics;
pub mod error;
pub mod experiments;
pub mod model;
pub mod posterior;
pub mod quadrature;
pub mod scalar;
pub mod spline;
pub mod theta_map;

pub use error::{Error, Result};
pub use scalar::Real;

pub type KnotVectorF64 = spline::KnotVector<f64>;
pub type DesignMatrixF64 = spline::DesignMatrix<f64>;
pub type GramFactorF64 = posterior::GramFactor<f64>;
pub type CoeffPosteriorF64 = posterior::CoeffPosterior<f64>;
pub type MatrixNormalPosteriorF64 = posterior::MatrixNormalPosterior<f64>;
pub type QuadratureRuleF64 = quadrature::QuadratureRule<f64>;
pub type WeightFnF64 = model::WeightFn<f64>;
pub type TrueFunctionF64 = model::TrueFunction<f64>;
pub type SplineFunctionF64 = theta_map::SplineFunction<f64>;
pub type BvmIngredientsF64 = asymptotics::BvmIngredients<f64>;
pub type AsymptoticNormalF64 = asymptotics::AsymptoticNormal<f64>;

pub type KnotVectorF32 = spline::KnotVector<f32>;
pub type DesignMatrixF32 = spline::DesignMatrix<f32>;
pub type GramFactorF32 = posterior::GramFactor<f32>;
pub type CoeffPosteriorF32 = posterior::CoeffPosterior<f32>;
pub type MatrixNormalPosteriorF32 = posterior::MatrixNormalPosterior<f32>;
pub type QuadratureRuleF32 = quadrature::QuadratureRule<f32>;
pub type WeightFnF32 = model::WeightFn<f32>;
pub type TrueFunctionF32 = model::TrueFunction<f32>;
pub type SplineFunctionF32 = theta_map::SplineFunction<f32>;
pub type BvmIngredientsF32 = asymptotics::BvmIngredients<f32>;
pub type AsymptoticNormalF32 = asymptotics::AsymptoticNormal<f32>;
