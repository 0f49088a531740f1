use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use odebvm::asymptotics::{bvm_normal, compute_ingredients, tv_diagnostic, AsymptoticNormal, TimeDerivative, TvEstimate};
use odebvm::experiments::{
    run_study, simulate_data, write_csv, BootstrapScheme, KnotRule, Method, RunOptions, StudyConfig, SCHEMA_VERSION,
};
use odebvm::model::{BuiltinModel, TrueFunction, WeightFn};
use odebvm::posterior::{Sigma2Posterior, SigmaMode};
use odebvm::quadrature::{QuadratureRule, DEFAULT_ORDER};
use odebvm::spline::KnotVector;
use odebvm::theta_map::{PsiConfig, PsiDiagnostics, SplineFunction};
use odebvm::experiments::TwoStep;
use odebvm::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_dataset, write_dataset, Dataset};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config_path: PathBuf,
    pub data_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub library_version: String,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn parse_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn load_data(path: &Path, model: BuiltinModel) -> Result<Dataset> {
    let data = read_dataset(fs::File::open(path)?)?;
    let d = model.build::<f64>().state_dim();
    if data.states() != d {
        return Err(Error::InvalidArgument(format!(
            "data has {} response columns, model '{model}' has {d} states",
            data.states()
        )));
    }
    Ok(data)
}

/// Warnings about the spline order and knot growth relative to the rate window `n^{1/(2m)} << k_n << n^{1/8}`.
pub fn rate_warnings(order: usize, knots: &KnotRule) -> Vec<String> {
    let mut out = Vec::new();
    if order < 5 {
        out.push(format!(
            "spline order m = {order} < 5: the window n^(1/(2m)) << k_n << n^(1/8) is empty, the normal approximation is not covered"
        ));
    }
    if let KnotRule::Power { exponent, .. } = *knots {
        let lo = 1.0 / (2.0 * order as f64);
        if !(exponent > lo && exponent < 0.125) {
            out.push(format!("knot exponent {exponent} outside ({lo}, 0.125)"));
        }
    }
    for w in &out {
        log::warn!("{w}");
    }
    out
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_order() -> usize {
    5
}

fn default_level() -> f64 {
    0.95
}

fn default_draws() -> usize {
    1000
}

fn default_bootstrap() -> usize {
    200
}

fn default_methods() -> Vec<Method> {
    vec![Method::Bayes, Method::Bootstrap]
}

fn default_sigma(model: BuiltinModel) -> SigmaMode {
    match model {
        BuiltinModel::Example1 => SigmaMode::Hierarchical { a: 1.0, b: 1.0 },
        _ => SigmaMode::Fixed { sigma2: 1.0 },
    }
}

/// Settings for `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model: BuiltinModel,
    #[serde(default)]
    pub knots: KnotRule,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub sigma: Option<SigmaMode>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub bootstrap_scheme: BootstrapScheme,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub psi: PsiConfig,
    #[serde(default)]
    pub seed: u64,
}

fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Config(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sigma2Summary {
    pub mean: f64,
    pub sd: f64,
    pub q_lower: f64,
    pub q_upper: f64,
    /// Inverse-gamma parameters when `sigma^2` is not fixed.
    pub posterior: Option<Sigma2Posterior>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub intervals: Vec<[f64; 2]>,
    pub failures: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub manifest: RunManifest,
    pub config: FitConfig,
    pub n: usize,
    pub segments: usize,
    pub theta_hat: Vec<f64>,
    pub psi_diagnostics: PsiDiagnostics,
    pub bayes: Option<MethodReport>,
    pub bootstrap: Option<MethodReport>,
    pub sigma2: Option<Sigma2Summary>,
    pub warnings: Vec<String>,
}

fn sigma2_summary(draws: &[f64], posterior: Option<Sigma2Posterior>, level: f64) -> Sigma2Summary {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = if draws.len() > 1 {
        (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - level;
    Sigma2Summary {
        mean,
        sd,
        q_lower: odebvm::experiments::quantile_type1(&sorted, alpha / 2.0),
        q_upper: odebvm::experiments::quantile_type1(&sorted, 1.0 - alpha / 2.0),
        posterior,
    }
}

pub fn cmd_fit(config: &Path, data_path: &Path, out: &Path, seed: Option<u64>) -> Result<FitReport> {
    let started = now();
    let text = read_text(config)?;
    let mut cfg: FitConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    check_schema(cfg.schema_version)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mode = *cfg.sigma.get_or_insert(default_sigma(cfg.model));
    mode.validate()?;
    if !(cfg.level > 0.0 && cfg.level < 1.0) || cfg.draws == 0 || cfg.bootstrap == 0 {
        return Err(Error::Config("level must lie in (0, 1); draws and bootstrap must be positive".into()));
    }
    let warnings = rate_warnings(cfg.order, &cfg.knots);
    let data = load_data(data_path, cfg.model)?;
    let n = data.len();
    let segments = cfg.knots.segments(n);
    let model = cfg.model.build::<f64>();
    let fit = TwoStep::new(model, WeightFn::parabolic(), &data.t, segments, cfg.order, cfg.psi.clone())?;
    let hat = fit.frequentist(&data.y)?;
    fs::create_dir_all(out)?;

    let mut bayes = None;
    let mut sigma2 = None;
    if cfg.methods.contains(&Method::Bayes) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let b = fit.bayes(&data.y, mode, cfg.draws, cfg.level, &mut rng)?;
        let mut w = csv::Writer::from_path(out.join("theta_draws.csv")).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let p = hat.theta.len();
        let mut header: Vec<String> = (1..=p).map(|k| format!("theta{k}")).collect();
        header.push("sigma2".into());
        w.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (th, s2) in b.theta_draws.iter().zip(&b.sigma2_draws) {
            let mut rec: Vec<String> = th.iter().map(|v| v.to_string()).collect();
            rec.push(s2.to_string());
            w.write_record(&rec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        let posterior = match mode {
            SigmaMode::Fixed { .. } => None,
            SigmaMode::PlugIn { a, b } | SigmaMode::Hierarchical { a, b } => {
                Some(Sigma2Posterior::new(fit.factor(), &data.y, a, b)?)
            }
        };
        if !b.sigma2_draws.is_empty() {
            sigma2 = Some(sigma2_summary(&b.sigma2_draws, posterior, cfg.level));
        }
        bayes = Some(MethodReport { intervals: b.intervals, failures: b.failures, valid: b.valid });
    }
    let mut bootstrap = None;
    if cfg.methods.contains(&Method::Bootstrap) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let b = fit.bootstrap(&data.y, cfg.bootstrap_scheme, cfg.bootstrap, cfg.level, &mut rng)?;
        bootstrap = Some(MethodReport { intervals: b.intervals, failures: b.failures, valid: b.valid });
    }

    let canonical = serde_json::to_string(&cfg).expect("config serializes");
    let report = FitReport {
        manifest: RunManifest {
            command: "fit".into(),
            config_hash: sha256_hex(&canonical),
            config_path: config.to_path_buf(),
            data_path: Some(data_path.to_path_buf()),
            out_dir: out.to_path_buf(),
            seed: cfg.seed,
            started_unix: started,
            finished_unix: now(),
            library_version: env!("CARGO_PKG_VERSION").into(),
        },
        n,
        segments,
        theta_hat: hat.theta.as_slice().to_vec(),
        psi_diagnostics: hat.diagnostics,
        bayes,
        bootstrap,
        sigma2,
        warnings,
        config: cfg,
    };
    write_json(&out.join("fit_report.json"), &report)?;
    Ok(report)
}

/// Overrides for desk-scale runs.
#[derive(Debug, Clone, Default)]
pub struct SimulateOverrides {
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub draws: Option<usize>,
    pub bootstrap: Option<usize>,
    pub jobs: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write the data of the first `emit_data` replications per `n`.
    pub emit_data: usize,
}

pub fn cmd_simulate(config: &Path, out: &Path, ov: &SimulateOverrides) -> Result<RunManifest> {
    let started = now();
    let text = read_text(config)?;
    let mut cfg: StudyConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(r) = ov.replications {
        cfg.replications = r;
    }
    if let Some(d) = ov.draws {
        cfg.draws = d;
    }
    if let Some(b) = ov.bootstrap {
        cfg.bootstrap = b;
    }
    cfg.validate()?;
    rate_warnings(cfg.order, &cfg.knots);
    fs::create_dir_all(out)?;
    let opts = RunOptions { jobs: ov.jobs, checkpoint_dir: ov.checkpoint_dir.clone() };
    let result = run_study(&cfg, &opts)?;
    if result.reduced_scale {
        log::info!("reduced-scale run: {} replications per cell", cfg.replications);
    }
    write_csv(&result.rows, fs::File::create(out.join("results.csv"))?)?;
    write_json(&out.join("results.json"), &result)?;
    for &n in &cfg.n {
        for rep in 0..ov.emit_data.min(cfg.replications) {
            let (t, y) = simulate_data(&cfg, n, rep)?;
            write_dataset(&Dataset { t, y }, fs::File::create(out.join(format!("data_n{n}_rep{rep}.csv")))?)?;
        }
    }
    let manifest = RunManifest {
        command: "simulate".into(),
        config_hash: result.config_hash.clone(),
        config_path: config.to_path_buf(),
        data_path: None,
        out_dir: out.to_path_buf(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: now(),
        library_version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn default_tv_draws() -> usize {
    1000
}

/// Settings for `asymptotics`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticsConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model: BuiltinModel,
    #[serde(default)]
    pub knots: KnotRule,
    #[serde(default = "default_order")]
    pub order: usize,
    /// Truth; with a closed-form solution, `f_0` is that solution.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    /// Error variance for `sigma^2 Sigma_n`; the posterior mean under `(1, 1)` when absent.
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default)]
    pub sigma: Option<SigmaMode>,
    #[serde(default = "default_tv_draws")]
    pub draws: usize,
    #[serde(default)]
    pub time_derivative: TimeDerivative,
    #[serde(default)]
    pub psi: PsiConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymptoticsReport {
    pub manifest: RunManifest,
    pub config: AsymptoticsConfig,
    pub estimated_theta0: bool,
    pub theta0: Vec<f64>,
    pub n: usize,
    pub segments: usize,
    pub j: Vec<Vec<f64>>,
    pub misspecification_term: Vec<Vec<f64>>,
    pub gamma_f0: Vec<f64>,
    pub b_min_eigenvalues: Vec<f64>,
    pub sigma2: f64,
    pub mu_n: Vec<f64>,
    pub sigma_n: Vec<Vec<f64>>,
    pub sigma_n_spd: bool,
    pub tv: TvEstimate,
    pub warnings: Vec<String>,
}

pub fn cmd_asymptotics(config: &Path, data_path: &Path, out: &Path, seed: Option<u64>) -> Result<AsymptoticsReport> {
    let started = now();
    let mut cfg: AsymptoticsConfig = parse_config(config)?;
    check_schema(cfg.schema_version)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mode = *cfg.sigma.get_or_insert(default_sigma(cfg.model));
    mode.validate()?;
    let mut warnings = rate_warnings(cfg.order, &cfg.knots);
    let data = load_data(data_path, cfg.model)?;
    let n = data.len();
    let segments = cfg.knots.segments(n);
    let model = cfg.model.build::<f64>();
    let weight = WeightFn::parabolic();
    let fit = TwoStep::new(model.clone(), weight.clone(), &data.t, segments, cfg.order, cfg.psi.clone())?;
    let knots = KnotVector::uniform(segments, cfg.order)?;

    let p = model.param_dim();
    let (f0, theta0, estimated): (Box<dyn odebvm::model::Curve<f64>>, DVector<f64>, bool) = match &cfg.theta0 {
        Some(t) if model.has_solution() => {
            if t.len() != p {
                return Err(Error::InvalidArgument(format!("theta0 has length {}, model expects {p}", t.len())));
            }
            let th = DVector::from_column_slice(t);
            (Box::new(TrueFunction::from_solution(model.clone(), th.clone())?), th, false)
        }
        other => {
            if other.is_some() {
                warnings.push(format!("model '{}' has no closed-form solution; theta0 ignored", cfg.model));
            }
            warnings.push("theta_0 and f_0 estimated by the two-step fit".into());
            let ols = fit.factor().ols(&data.y)?;
            let th = fit.frequentist(&data.y)?.theta;
            (Box::new(SplineFunction::new(knots.clone(), ols)?), th, true)
        }
    };
    let quad = QuadratureRule::for_basis(&knots, DEFAULT_ORDER)?;
    let ing = compute_ingredients(model.as_ref(), f0.as_ref(), &theta0, &weight, &knots, &quad, cfg.time_derivative)?;
    let sigma2 = match cfg.sigma2 {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::Config(format!("sigma2 must be positive, got {s}"))),
        None => Sigma2Posterior::new(fit.factor(), &data.y, 1.0, 1.0)?
            .mean()
            .ok_or_else(|| Error::Numeric("too few observations for a posterior mean of sigma^2".into()))?,
    };
    let normal = bvm_normal(&ing, fit.factor(), &data.y, sigma2)?;
    let sigma_n_spd = normal.is_spd();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bayes = fit.bayes(&data.y, mode, cfg.draws, 0.95, &mut rng)?;
    let root_n = (n as f64).sqrt();
    let scaled: Vec<DVector<f64>> = bayes.theta_draws.iter().map(|t| (t - &theta0) * root_n).collect();
    let tv = tv_diagnostic(&scaled, &AsymptoticNormal::new(normal.mean.clone(), normal.covariance.clone())?)?;

    let canonical = serde_json::to_string(&cfg).expect("config serializes");
    let report = AsymptoticsReport {
        manifest: RunManifest {
            command: "asymptotics".into(),
            config_hash: sha256_hex(&canonical),
            config_path: config.to_path_buf(),
            data_path: Some(data_path.to_path_buf()),
            out_dir: out.to_path_buf(),
            seed: cfg.seed,
            started_unix: started,
            finished_unix: now(),
            library_version: env!("CARGO_PKG_VERSION").into(),
        },
        estimated_theta0: estimated,
        theta0: theta0.as_slice().to_vec(),
        n,
        segments,
        j: rows(ing.j()),
        misspecification_term: rows(ing.misspecification_term()),
        gamma_f0: ing.gamma_f0().as_slice().to_vec(),
        b_min_eigenvalues: ing.b_min_eigenvalues(),
        sigma2,
        mu_n: normal.mean.as_slice().to_vec(),
        sigma_n: rows(&(normal.covariance / sigma2)),
        sigma_n_spd,
        tv,
        warnings,
        config: cfg,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("asymptotics_report.json"), &report)?;
    Ok(report)
}
