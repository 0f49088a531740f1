//! Monte-Carlo coverage studies: data generation, credible intervals from the
//! induced posterior, the frequentist two-step estimator and percentile
//! bootstrap intervals.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BuiltinModel, Curve, MisspecifiedTruth, OdeModel, TrueFunction, WeightFn};
use crate::posterior::{sample_with_mode, GramFactor, SigmaMode};
use crate::quadrature::{QuadratureRule, DEFAULT_ORDER};
use crate::spline::{midpoint_design, DesignMatrix, KnotVector};
use crate::theta_map::{psi, psi_samples, BasisTable, PsiConfig, PsiResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Replications per cell in the reference study; fewer marks a run as reduced-scale.
pub const FULL_SCALE_REPLICATIONS: usize = 1000;

/// Share of failed `psi` evaluations above which a replication is invalid.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

/// Share of invalid replications above which a cell is reported as failed.
pub const MAX_INVALID_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// `f_0` solves the ODE at the configured `theta_0`.
    #[default]
    WellSpecified,
    /// `f_0` is the model's perturbed truth; `theta_0 = psi(f_0)`.
    Misspecified,
}

impl Case {
    pub fn as_str(&self) -> &'static str {
        match self {
            Case::WellSpecified => "well_specified",
            Case::Misspecified => "misspecified",
        }
    }
}

/// Law of the i.i.d. measurement errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorLaw {
    /// `N(0, sigma^2)`; `sigma = 0` gives noiseless data.
    Normal { sigma: f64 },
    /// `scale * t_nu`, divided by `sqrt(nu / (nu - 2))` when `standardized`.
    StudentT {
        nu: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        standardized: bool,
    },
}

fn one() -> f64 {
    1.0
}

impl ErrorLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            ErrorLaw::Normal { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("error sigma must be >= 0, got {sigma}")))
            }
            ErrorLaw::StudentT { nu, scale, standardized } => {
                if !(nu > 0.0) || !(scale >= 0.0) {
                    return Err(Error::Config(format!("student_t needs nu > 0 and scale >= 0 (got {nu}, {scale})")));
                }
                if standardized && !(nu > 2.0) {
                    return Err(Error::Config("standardized student_t needs nu > 2".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Variance of one error, `None` when infinite.
    pub fn variance(&self) -> Option<f64> {
        match *self {
            ErrorLaw::Normal { sigma } => Some(sigma * sigma),
            ErrorLaw::StudentT { standardized: true, scale, .. } => Some(scale * scale),
            ErrorLaw::StudentT { nu, scale, .. } if nu > 2.0 => Some(scale * scale * nu / (nu - 2.0)),
            ErrorLaw::StudentT { .. } => None,
        }
    }

    fn sampler(&self) -> Result<ErrorSampler> {
        Ok(match *self {
            ErrorLaw::Normal { sigma } => ErrorSampler::Normal(
                Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?,
            ),
            ErrorLaw::StudentT { nu, scale, standardized } => {
                let factor = if standardized { scale * ((nu - 2.0) / nu).sqrt() } else { scale };
                ErrorSampler::T(StudentT::new(nu).map_err(|e| Error::Config(e.to_string()))?, factor)
            }
        })
    }
}

enum ErrorSampler {
    Normal(Normal<f64>),
    T(StudentT<f64>, f64),
}

impl ErrorSampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorSampler::Normal(d) => d.sample(rng),
            ErrorSampler::T(d, s) => s * d.sample(rng),
        }
    }
}

/// Number of spline segments `k_n` as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum KnotRule {
    Fixed { segments: usize },
    /// `max(2, ceil(c n^exponent))`.
    Power { c: f64, exponent: f64 },
}

impl Default for KnotRule {
    fn default() -> Self {
        KnotRule::Power { c: 3.0, exponent: 1.0 / 9.0 }
    }
}

impl KnotRule {
    pub fn segments(&self, n: usize) -> usize {
        match *self {
            KnotRule::Fixed { segments } => segments,
            KnotRule::Power { c, exponent } => ((c * (n as f64).powf(exponent)).ceil() as usize).max(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bayes,
    Bootstrap,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Bayes => "bayes",
            Method::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapScheme {
    /// Centered OLS residuals resampled by row onto the fitted values.
    #[default]
    Residual,
    /// Resample `(x_i, Y_i)` pairs and refit the design.
    Pairs,
}

fn default_order() -> usize {
    5
}

fn default_level() -> f64 {
    0.95
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_methods() -> Vec<Method> {
    vec![Method::Bayes, Method::Bootstrap]
}

/// `psi` settings used inside studies: one Halton start besides the warm start at the two-step estimate.
pub fn study_psi_default() -> PsiConfig {
    PsiConfig {
        starts: 1,
        ..PsiConfig::default()
    }
}

/// Monte-Carlo study description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model: BuiltinModel,
    #[serde(default)]
    pub case: Case,
    /// Truth in the well-specified case; defaults to all ones.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    pub error: ErrorLaw,
    pub n: Vec<usize>,
    pub replications: usize,
    pub draws: usize,
    pub bootstrap: usize,
    #[serde(default)]
    pub knots: KnotRule,
    #[serde(default = "default_order")]
    pub order: usize,
    /// Defaults to hierarchical `a = b = 1` for example1 and fixed `sigma^2 = 1` otherwise.
    #[serde(default)]
    pub sigma: Option<SigmaMode>,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
    #[serde(default = "study_psi_default")]
    pub psi: PsiConfig,
    #[serde(default)]
    pub bootstrap_scheme: BootstrapScheme,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: StudyConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON: defaults filled in, fixed field order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.resolved()).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with the model-dependent defaults made explicit.
    pub fn resolved(&self) -> StudyConfig {
        let mut out = self.clone();
        out.sigma = Some(self.sigma_mode());
        if self.case == Case::WellSpecified && out.theta0.is_none() {
            let p = self.model.build::<f64>().param_dim();
            out.theta0 = Some(vec![1.0; p]);
        }
        out
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma.unwrap_or(match self.model {
            BuiltinModel::Example1 => SigmaMode::Hierarchical { a: 1.0, b: 1.0 },
            _ => SigmaMode::Fixed { sigma2: 1.0 },
        })
    }

    pub fn reduced_scale(&self) -> bool {
        self.replications < FULL_SCALE_REPLICATIONS
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n.is_empty() {
            return Err(Error::Config("n list is empty".into()));
        }
        if self.replications == 0 || self.draws == 0 || self.bootstrap == 0 {
            return Err(Error::Config("replications, draws and bootstrap must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("credible level must lie in (0, 1), got {}", self.level)));
        }
        if self.order < 2 {
            return Err(Error::Config("spline order must be >= 2".into()));
        }
        if let KnotRule::Power { c, .. } = self.knots {
            if !(c > 0.0) {
                return Err(Error::Config("knot rule constant must be positive".into()));
            }
        }
        for &n in &self.n {
            let k = self.knots.segments(n);
            if k == 0 || k + self.order - 1 > n {
                return Err(Error::Config(format!(
                    "n = {n}: basis dimension k_n + m - 1 = {} exceeds n",
                    k + self.order - 1
                )));
            }
        }
        self.error.validate()?;
        self.sigma_mode().validate()?;
        self.psi.validate()?;
        let p = self.model.build::<f64>().param_dim();
        match self.case {
            Case::WellSpecified => {
                if !self.model.build::<f64>().has_solution() {
                    return Err(Error::Config(format!(
                        "model '{}' has no closed-form solution for the well-specified case",
                        self.model
                    )));
                }
                if let Some(t) = &self.theta0 {
                    if t.len() != p {
                        return Err(Error::Config(format!("theta0 has length {}, model expects {p}", t.len())));
                    }
                }
            }
            Case::Misspecified => {
                misspecified_for(self.model)?;
                if self.theta0.is_some() {
                    return Err(Error::Config("theta0 is derived as psi(f_0) in the misspecified case".into()));
                }
            }
        }
        Ok(())
    }

    /// True mean `f_0` and the parameter intervals are scored against.
    pub fn truth(&self) -> Result<Truth> {
        let model = self.model.build::<f64>();
        let weight = WeightFn::parabolic();
        match self.case {
            Case::WellSpecified => {
                let theta0 = DVector::from_vec(self.resolved().theta0.expect("resolved"));
                let f0 = TrueFunction::from_solution(model.clone(), theta0.clone())?;
                Ok(Truth { model, f0, theta0, weight })
            }
            Case::Misspecified => {
                let f0 = misspecified_for(self.model)?.build::<f64>();
                let quad = QuadratureRule::uniform(64, DEFAULT_ORDER)?;
                let theta0 = psi(&f0, model.as_ref(), &weight, &quad, &PsiConfig::default())?.theta;
                Ok(Truth { model, f0, theta0, weight })
            }
        }
    }
}

fn misspecified_for(model: BuiltinModel) -> Result<MisspecifiedTruth> {
    match model {
        BuiltinModel::Example1 => Ok(MisspecifiedTruth::Example1Case2),
        BuiltinModel::Example2 => Ok(MisspecifiedTruth::Example2Case2),
        other => Err(Error::Config(format!("no misspecified truth registered for '{other}'"))),
    }
}

/// Data-generating mean and the target parameter.
#[derive(Clone)]
pub struct Truth {
    pub model: Arc<dyn OdeModel<f64>>,
    pub f0: TrueFunction<f64>,
    pub theta0: DVector<f64>,
    pub weight: WeightFn<f64>,
}

/// Independent 64-bit seed for stream `tag` of replication `rep` at sample size `n`.
pub fn replication_seed(master: u64, n: usize, rep: usize, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((rep as u64).to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn stream(master: u64, n: usize, rep: usize, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(replication_seed(master, n, rep, tag))
}

/// `x_i = (2i - 1) / (2n)` and `Y = f_0(x) + eps`, deterministic in `(seed, n, rep)`.
pub fn simulate_data(cfg: &StudyConfig, n: usize, rep: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let truth = cfg.truth()?;
    simulate_with(&truth, &cfg.error, cfg.seed, n, rep)
}

fn simulate_with(truth: &Truth, law: &ErrorLaw, seed: u64, n: usize, rep: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let x: Vec<f64> = midpoint_design(n);
    let d = truth.f0.dim();
    let sampler = law.sampler()?;
    let mut rng = stream(seed, n, rep, "data");
    let mut y = DMatrix::zeros(n, d);
    for (i, &xi) in x.iter().enumerate() {
        let f = truth.f0.value(xi);
        for j in 0..d {
            y[(i, j)] = f[j] + sampler.sample(&mut rng);
        }
    }
    Ok((x, y))
}

/// Empirical inverse-CDF quantile of sorted data: `x_(ceil(N p))`, with `x_(1)` at `p = 0`.
pub fn quantile_type1(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let n = sorted.len();
    let k = ((n as f64) * p).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

/// Equal-tailed percentile interval per coordinate.
pub fn percentile_intervals(points: &[DVector<f64>], level: f64) -> Vec<[f64; 2]> {
    let p = points.first().map_or(0, |v| v.len());
    let alpha = 1.0 - level;
    (0..p)
        .map(|k| {
            let mut col: Vec<f64> = points.iter().map(|v| v[k]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            [quantile_type1(&col, alpha / 2.0), quantile_type1(&col, 1.0 - alpha / 2.0)]
        })
        .collect()
}

/// Everything needed to turn spline coefficients into `theta` for a fixed design.
pub struct TwoStep {
    model: Arc<dyn OdeModel<f64>>,
    weight: WeightFn<f64>,
    factor: GramFactor<f64>,
    table: BasisTable<f64>,
    psi: PsiConfig,
}

#[derive(Debug, Clone)]
pub struct BayesFit {
    pub intervals: Vec<[f64; 2]>,
    pub theta_draws: Vec<DVector<f64>>,
    pub sigma2_draws: Vec<f64>,
    pub failures: usize,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct BootstrapFit {
    pub intervals: Vec<[f64; 2]>,
    pub estimates: Vec<DVector<f64>>,
    pub failures: usize,
    pub valid: bool,
}

fn too_many_failures(failures: usize, attempts: usize) -> bool {
    failures as f64 > MAX_FAILURE_SHARE * attempts as f64
}

impl TwoStep {
    pub fn new(
        model: Arc<dyn OdeModel<f64>>,
        weight: WeightFn<f64>,
        x: &[f64],
        segments: usize,
        order: usize,
        psi: PsiConfig,
    ) -> Result<Self> {
        psi.validate()?;
        let knots = KnotVector::uniform(segments, order)?;
        let design = DesignMatrix::new(&knots, x)?;
        if design.is_coarse() {
            log::warn!(
                "design spread is coarse relative to the knot mesh: sup|Q_n(t) - t| = {}, 1/k_n = {}",
                design.ecdf_discrepancy(),
                knots.meshwidth()
            );
        }
        let factor = GramFactor::new(&design)?;
        let quad = QuadratureRule::for_basis(&knots, DEFAULT_ORDER)?;
        let table = BasisTable::new(&knots, &quad)?;
        Ok(Self { model, weight, factor, table, psi })
    }

    /// Two-step fit for a study configuration at the design `x`.
    pub fn for_study(cfg: &StudyConfig, model: Arc<dyn OdeModel<f64>>, x: &[f64]) -> Result<Self> {
        Self::new(model, WeightFn::parabolic(), x, cfg.knots.segments(x.len()), cfg.order, cfg.psi.clone())
    }

    pub fn factor(&self) -> &GramFactor<f64> {
        &self.factor
    }

    pub fn model(&self) -> &Arc<dyn OdeModel<f64>> {
        &self.model
    }

    fn check_response(&self, y: &DMatrix<f64>) -> Result<()> {
        if y.nrows() != self.factor.n() {
            return Err(Error::invalid(format!("response has {} rows, design has {}", y.nrows(), self.factor.n())));
        }
        if y.ncols() != self.model.state_dim() {
            return Err(Error::invalid(format!(
                "response has {} columns, model '{}' has {} states",
                y.ncols(),
                self.model.name(),
                self.model.state_dim()
            )));
        }
        Ok(())
    }

    /// `psi` of the spline with coefficient matrix `coeffs`.
    pub fn theta_of(&self, coeffs: &DMatrix<f64>, warm: Option<&DVector<f64>>) -> Result<PsiResult<f64>> {
        let samples = self.table.samples(coeffs, &self.weight);
        match warm {
            Some(w) => psi_samples(&samples, self.model.as_ref(), &self.psi.clone().with_warm_start(w.as_slice())),
            None => psi_samples(&samples, self.model.as_ref(), &self.psi),
        }
    }

    /// `theta_hat = psi` of the least-squares spline.
    pub fn frequentist(&self, y: &DMatrix<f64>) -> Result<PsiResult<f64>> {
        self.check_response(y)?;
        self.theta_of(&self.factor.ols(y)?, None)
    }

    /// Equal-tailed credible intervals of the induced posterior of `theta`.
    pub fn bayes<R: Rng>(&self, y: &DMatrix<f64>, mode: SigmaMode, draws: usize, level: f64, rng: &mut R) -> Result<BayesFit> {
        self.check_response(y)?;
        let warm = self.frequentist(y).ok().map(|r| r.theta);
        let (coeffs, sigmas) = sample_with_mode(&self.factor, y, mode, draws, rng)?;
        let mut theta_draws = Vec::with_capacity(draws);
        let mut sigma2_draws = Vec::with_capacity(draws);
        let mut failures = 0;
        for (b, s2) in coeffs.iter().zip(sigmas) {
            match self.theta_of(b, warm.as_ref()) {
                Ok(r) => {
                    theta_draws.push(r.theta);
                    sigma2_draws.push(s2);
                }
                Err(e) => {
                    log::debug!("discarding posterior draw: {e}");
                    failures += 1;
                }
            }
        }
        let valid = !theta_draws.is_empty() && !too_many_failures(failures, draws);
        Ok(BayesFit {
            intervals: if theta_draws.is_empty() { Vec::new() } else { percentile_intervals(&theta_draws, level) },
            theta_draws,
            sigma2_draws,
            failures,
            valid,
        })
    }

    /// Percentile bootstrap intervals around the two-step estimator.
    pub fn bootstrap<R: Rng>(
        &self,
        y: &DMatrix<f64>,
        scheme: BootstrapScheme,
        resamples: usize,
        level: f64,
        rng: &mut R,
    ) -> Result<BootstrapFit> {
        self.check_response(y)?;
        if resamples == 0 {
            return Err(Error::invalid("bootstrap needs at least one resample"));
        }
        let n = y.nrows();
        let ols = self.factor.ols(y)?;
        let warm = self.theta_of(&ols, None).ok().map(|r| r.theta);
        let fitted = self.factor.design().matrix() * &ols;
        let mut resid = y - &fitted;
        for mut col in resid.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        let mut estimates = Vec::with_capacity(resamples);
        let mut failures = 0;
        for _ in 0..resamples {
            let fit = match scheme {
                BootstrapScheme::Residual => {
                    let mut ystar = fitted.clone();
                    for i in 0..n {
                        let k = rng.random_range(0..n);
                        for j in 0..y.ncols() {
                            ystar[(i, j)] += resid[(k, j)];
                        }
                    }
                    self.factor.ols(&ystar).and_then(|b| self.theta_of(&b, warm.as_ref()))
                }
                BootstrapScheme::Pairs => {
                    let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                    idx.sort_by(|a, b| self.factor.design().points()[*a].total_cmp(&self.factor.design().points()[*b]));
                    let xs: Vec<f64> = idx.iter().map(|&i| self.factor.design().points()[i]).collect();
                    let ys = DMatrix::from_fn(n, y.ncols(), |i, j| y[(idx[i], j)]);
                    DesignMatrix::new(self.factor.design().knots(), &xs)
                        .and_then(|d| GramFactor::new(&d))
                        .and_then(|f| f.ols(&ys))
                        .and_then(|b| self.theta_of(&b, warm.as_ref()))
                }
            };
            match fit {
                Ok(r) => estimates.push(r.theta),
                Err(e) => {
                    log::debug!("discarding bootstrap refit: {e}");
                    failures += 1;
                }
            }
        }
        let valid = !estimates.is_empty() && !too_many_failures(failures, resamples);
        Ok(BootstrapFit {
            intervals: if estimates.is_empty() { Vec::new() } else { percentile_intervals(&estimates, level) },
            estimates,
            failures,
            valid,
        })
    }
}

/// `theta_hat` for data `(x, Y)` under a study configuration.
pub fn frequentist_two_step(x: &[f64], y: &DMatrix<f64>, cfg: &StudyConfig) -> Result<PsiResult<f64>> {
    TwoStep::for_study(cfg, cfg.model.build(), x)?.frequentist(y)
}

/// Credible intervals for data `(x, Y)`; `seed` drives the posterior sampler.
pub fn bayes_interval(x: &[f64], y: &DMatrix<f64>, cfg: &StudyConfig, seed: u64) -> Result<BayesFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TwoStep::for_study(cfg, cfg.model.build(), x)?.bayes(y, cfg.sigma_mode(), cfg.draws, cfg.level, &mut rng)
}

/// Bootstrap intervals for data `(x, Y)`; `seed` drives the resampling.
pub fn bootstrap_interval(x: &[f64], y: &DMatrix<f64>, cfg: &StudyConfig, seed: u64) -> Result<BootstrapFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TwoStep::for_study(cfg, cfg.model.build(), x)?.bootstrap(y, cfg.bootstrap_scheme, cfg.bootstrap, cfg.level, &mut rng)
}

/// Result of one method in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub valid: bool,
    pub intervals: Vec<[f64; 2]>,
    pub failures: usize,
}

/// One replication of one cell; also the checkpoint record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub n: usize,
    pub rep: usize,
    pub theta_hat: Option<Vec<f64>>,
    pub methods: BTreeMap<Method, MethodOutcome>,
}

/// Runs replication `rep` at sample size `n`.
pub fn run_replication(cfg: &StudyConfig, truth: &Truth, fit: &TwoStep, n: usize, rep: usize) -> Result<ReplicationOutcome> {
    let (_, y) = simulate_with(truth, &cfg.error, cfg.seed, n, rep)?;
    let theta_hat = fit.frequentist(&y).ok().map(|r| r.theta.as_slice().to_vec());
    let mut methods = BTreeMap::new();
    for &m in &cfg.methods {
        let outcome = match m {
            Method::Bayes => {
                let mut rng = stream(cfg.seed, n, rep, "posterior");
                let b = fit.bayes(&y, cfg.sigma_mode(), cfg.draws, cfg.level, &mut rng)?;
                MethodOutcome { valid: b.valid, intervals: b.intervals, failures: b.failures }
            }
            Method::Bootstrap => {
                let mut rng = stream(cfg.seed, n, rep, "bootstrap");
                let b = fit.bootstrap(&y, cfg.bootstrap_scheme, cfg.bootstrap, cfg.level, &mut rng)?;
                MethodOutcome { valid: b.valid, intervals: b.intervals, failures: b.failures }
            }
        };
        methods.insert(m, outcome);
    }
    Ok(ReplicationOutcome { n, rep, theta_hat, methods })
}

/// One output row: coverage and mean length for a coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub model: String,
    pub case: String,
    pub n: usize,
    pub method: String,
    pub coord: usize,
    pub coverage: f64,
    pub coverage_se: f64,
    pub length: f64,
    pub length_se: f64,
    #[serde(rename = "R_valid")]
    pub r_valid: usize,
}

/// Per-cell bookkeeping beyond the CSV rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub n: usize,
    pub segments: usize,
    pub method: Method,
    pub replications: usize,
    pub invalid: usize,
    pub failed: bool,
    /// Sampling standard deviation of `theta_hat` per coordinate.
    pub estimate_sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub config_hash: String,
    pub reduced_scale: bool,
    pub theta0: Vec<f64>,
    pub rows: Vec<IntervalSummary>,
    pub cells: Vec<CellReport>,
    pub elapsed_seconds: f64,
}

/// Execution options that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Directory for per-replication checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates replication outcomes (sorted by `rep`) into rows and cell reports.
pub fn summarize(
    cfg: &StudyConfig,
    theta0: &DVector<f64>,
    n: usize,
    outcomes: &[ReplicationOutcome],
) -> (Vec<IntervalSummary>, Vec<CellReport>) {
    let p = theta0.len();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let estimate_sd: Vec<f64> = (0..p)
        .map(|k| {
            let v: Vec<f64> = outcomes.iter().filter_map(|o| o.theta_hat.as_ref().map(|t| t[k])).collect();
            mean_sd(&v).1
        })
        .collect();
    for &m in &cfg.methods {
        let valid: Vec<&MethodOutcome> = outcomes
            .iter()
            .filter_map(|o| o.methods.get(&m))
            .filter(|o| o.valid)
            .collect();
        let invalid = outcomes.len() - valid.len();
        let failed = invalid as f64 > MAX_INVALID_SHARE * outcomes.len() as f64;
        if failed {
            log::warn!("cell n = {n}, method {}: {invalid} of {} replications invalid", m.as_str(), outcomes.len());
        }
        for k in 0..p {
            let hits: Vec<f64> = valid
                .iter()
                .map(|o| if o.intervals[k][0] <= theta0[k] && theta0[k] <= o.intervals[k][1] { 1.0 } else { 0.0 })
                .collect();
            let lengths: Vec<f64> = valid.iter().map(|o| o.intervals[k][1] - o.intervals[k][0]).collect();
            let r = valid.len();
            let coverage = mean_sd(&hits).0;
            let (length, length_sd) = mean_sd(&lengths);
            rows.push(IntervalSummary {
                model: cfg.model.as_str().to_string(),
                case: cfg.case.as_str().to_string(),
                n,
                method: m.as_str().to_string(),
                coord: k + 1,
                coverage,
                coverage_se: (coverage * (1.0 - coverage) / r as f64).sqrt(),
                length,
                length_se: length_sd / (r as f64).sqrt(),
                r_valid: r,
            });
        }
        cells.push(CellReport {
            n,
            segments: cfg.knots.segments(n),
            method: m,
            replications: outcomes.len(),
            invalid,
            failed,
            estimate_sd: estimate_sd.clone(),
        });
    }
    (rows, cells)
}

fn checkpoint_path(dir: &Path, hash: &str, n: usize) -> PathBuf {
    dir.join(hash).join(format!("n{n}.jsonl"))
}

fn load_checkpoint(path: &Path, n: usize, reps: usize) -> Result<BTreeMap<usize, ReplicationOutcome>> {
    let mut done = BTreeMap::new();
    let Ok(file) = fs::File::open(path) else {
        return Ok(done);
    };
    for line in BufReader::new(file).lines() {
        let line = line?;
        // a torn final line from an interrupted run is skipped
        if let Ok(o) = serde_json::from_str::<ReplicationOutcome>(&line) {
            if o.n == n && o.rep < reps {
                done.insert(o.rep, o);
            }
        }
    }
    Ok(done)
}

/// Runs every cell of the study; output does not depend on `opts.jobs`.
pub fn run_study(cfg: &StudyConfig, opts: &RunOptions) -> Result<StudyResult> {
    cfg.validate()?;
    let started = Instant::now();
    let cfg = cfg.resolved();
    let hash = cfg.hash();
    let truth = cfg.truth()?;
    let work = || -> Result<(Vec<IntervalSummary>, Vec<CellReport>)> {
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for &n in &cfg.n {
            let x: Vec<f64> = midpoint_design(n);
            let fit = TwoStep::for_study(&cfg, truth.model.clone(), &x)?;
            let ckpt = opts.checkpoint_dir.as_ref().map(|d| checkpoint_path(d, &hash, n));
            let mut done = match &ckpt {
                Some(p) => load_checkpoint(p, n, cfg.replications)?,
                None => BTreeMap::new(),
            };
            if !done.is_empty() {
                log::info!("n = {n}: resuming with {} of {} replications", done.len(), cfg.replications);
            }
            let writer = match &ckpt {
                Some(p) => {
                    fs::create_dir_all(p.parent().expect("checkpoint has a parent"))?;
                    Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?))
                }
                None => None,
            };
            let todo: Vec<usize> = (0..cfg.replications).filter(|r| !done.contains_key(r)).collect();
            let fresh: Vec<ReplicationOutcome> = todo
                .par_iter()
                .map(|&rep| {
                    let o = run_replication(&cfg, &truth, &fit, n, rep)?;
                    if let Some(w) = &writer {
                        let line = serde_json::to_string(&o).expect("outcome serializes");
                        let mut f = w.lock().expect("checkpoint lock");
                        writeln!(f, "{line}")?;
                    }
                    Ok(o)
                })
                .collect::<Result<_>>()?;
            for o in fresh {
                done.insert(o.rep, o);
            }
            let outcomes: Vec<ReplicationOutcome> = done.into_values().collect();
            let (r, c) = summarize(&cfg, &truth.theta0, n, &outcomes);
            rows.extend(r);
            cells.extend(c);
        }
        Ok((rows, cells))
    };
    let (rows, cells) = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    Ok(StudyResult {
        reduced_scale: cfg.reduced_scale(),
        theta0: truth.theta0.as_slice().to_vec(),
        config_hash: hash,
        config: cfg,
        rows,
        cells,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Writes the rows with header `model,case,n,method,coord,coverage,coverage_se,length,length_se,R_valid`.
pub fn write_csv<W: Write>(rows: &[IntervalSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    if rows.is_empty() {
        w.write_record(["model", "case", "n", "method", "coord", "coverage", "coverage_se", "length", "length_se", "R_valid"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
