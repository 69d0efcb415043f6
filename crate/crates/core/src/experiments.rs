//! End-to-end experiment runners behind the command-line interface.
//!
//! Each runner resolves an [`ExperimentConfig`], runs the solver, and writes
//! plot-ready CSV files plus `summary.json` and `manifest.json` into the
//! output directory. Runs are deterministic functions of the configuration.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{find_mnist_images, load_mnist_idx, make_dataset, sample_uniform_square, NoiseModel};
use crate::dual::{MonteCarloDual, SpectralQuadraticDual};
use crate::error::{invalid, Error, Result};
use crate::inverse::{
    as_image, fit_tikhonov_lambda, gaussian_kernel_3x3, mse, neumann_laplacian, ssim, ForwardOperator, TikhonovInverse,
    IMAGE_SIDE,
};
use crate::model::{DualProblem, EmpiricalJoint, Reconstructor};
use crate::optimizer::{bisect_lambda, BisectionConfig, BsmdConfig, IterationRecord, SolveReport};
use crate::ot::{perturbation_transport_cost, Coupling};
use crate::perturbation::{AnisotropicGaussianFamily, IsotropicGaussianFamily, PerturbationFamily};
use crate::rng::RngStream;

const STREAM_DATA: u64 = 1;
const STREAM_SOLVE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_AUDIT: u64 = 4;

/// Which experiment a configuration describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    InvertIso,
    InvertAniso,
    Deconv,
    Validate,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Self::InvertIso => "invert-iso",
            Self::InvertAniso => "invert-aniso",
            Self::Deconv => "deconv",
            Self::Validate => "validate",
        }
    }
}

/// Every tunable of a run. Fields left unset in a config file take the
/// defaults below; `None` fields resolve to per-experiment defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    /// Largest admissible covariance eigenvalue `M`; 10 for inversion, 1 for
    /// deconvolution.
    pub sigma_max: Option<f64>,
    /// Starting variance of the perturbation family; `M/2` when unset.
    pub initial_variance: Option<f64>,
    /// Training pairs: 400 (isotropic), 600 (anisotropic), 150 (deconvolution).
    pub samples: Option<usize>,
    pub bisection: BisectionConfig,
    /// Inner solver settings for the 2×2 inversions and the audit.
    pub bsmd: BsmdConfig,
    /// Inner solver settings for deconvolution. Its `lr_g` is replaced by
    /// `deconv_lr_g`, or when that is unset by `0.5/(ρ + M)` with `ρ` the top
    /// eigenvalue of the measurement second moment, which keeps the
    /// reconstructor step contractive.
    pub deconv_bsmd: BsmdConfig,
    pub deconv_lr_g: Option<f64>,
    pub noise_grid: Vec<NoiseModel>,
    pub mnist_dir: Option<PathBuf>,
    pub test_images: usize,
    /// Evaluate on every available test image.
    pub full: bool,
    pub kernel_bandwidth: f64,
    pub tikhonov_interval: [f64; 2],
    pub tikhonov_tolerance: f64,
    pub validation: ValidateConfig,
    pub out: PathBuf,
}

/// Sizes of the validation suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub gradient_configs: usize,
    pub audit_instances: usize,
    pub sinkhorn_instances: usize,
    pub mlmc_seeds: usize,
    pub entropy_draws: usize,
    /// Deliberately corrupts one component; used to check that the suites fail.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_fault: Option<Fault>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            gradient_configs: 50,
            audit_instances: 20,
            sinkhorn_instances: 10,
            mlmc_seeds: 3,
            entropy_draws: 1_000_000,
            inject_fault: None,
        }
    }
}

/// Mutations available to the validation suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    EntropyGradientSign,
}

fn default_noise_grid() -> Vec<NoiseModel> {
    let mut grid = Vec::new();
    for sigma in [0.01, 0.05, 0.1] {
        grid.push(NoiseModel::Gaussian { sigma });
    }
    for sigma in [0.01, 0.05, 0.1] {
        grid.push(NoiseModel::Poisson { sigma });
    }
    grid
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::InvertIso,
            seed: 0,
            epsilon: 0.001,
            delta: 0.1,
            sigma_max: None,
            initial_variance: None,
            samples: None,
            bisection: BisectionConfig::default(),
            bsmd: BsmdConfig::default(),
            deconv_bsmd: BsmdConfig {
                iters: 500,
                step_decay: false,
                final_samples: 64,
                ..BsmdConfig::default()
            },
            deconv_lr_g: None,
            noise_grid: default_noise_grid(),
            mnist_dir: None,
            test_images: 1000,
            full: false,
            kernel_bandwidth: 1.0,
            tikhonov_interval: [1e-6, 1e2],
            tikhonov_tolerance: 0.01,
            validation: ValidateConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn for_experiment(experiment: Experiment) -> Self {
        Self {
            experiment,
            out: PathBuf::from("runs").join(experiment.name()),
            ..Self::default()
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max.unwrap_or(match self.experiment {
            Experiment::Deconv => 1.0,
            _ => 10.0,
        })
    }

    pub fn initial_variance(&self) -> f64 {
        self.initial_variance.unwrap_or(0.5 * self.sigma_max())
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(match self.experiment {
            Experiment::InvertAniso => 600,
            Experiment::Deconv => 150,
            _ => 400,
        })
    }

    /// Checks ranges and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        DualProblem::new(self.epsilon, self.delta)?;
        let m = self.sigma_max();
        if !(m > 0.0 && m.is_finite()) {
            return Err(invalid("sigma_max", format!("must be positive, got {m}")));
        }
        let v0 = self.initial_variance();
        if !(v0 > 0.0 && v0 <= m) {
            return Err(invalid("initial_variance", format!("must lie in (0, {m}], got {v0}")));
        }
        if self.samples() == 0 || self.test_images == 0 {
            return Err(invalid("samples", "sample counts must be positive"));
        }
        self.bisection.validate()?;
        self.bsmd.validate()?;
        self.deconv_bsmd.validate()?;
        for n in &self.noise_grid {
            n.validate()?;
        }
        if let Some(dir) = &self.mnist_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "MNIST directory {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash of the resolved configuration.
    pub fn content_hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(&serde_json::to_value(self)?)?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }
}

/// Overlays the keys of `patch` onto `base`, recursing into objects.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Defaults for `experiment`, overlaid with a JSON config file if given.
pub fn load_config(experiment: Experiment, file: Option<&Path>) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(ExperimentConfig::for_experiment(experiment))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if let Some(exp) = patch.get("experiment") {
            if exp != &json!(experiment.name()) {
                return Err(Error::Config(format!(
                    "config {} is for experiment {exp}, not {}",
                    path.display(),
                    experiment.name()
                )));
            }
        }
        merge_json(&mut value, &patch);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub summary: Value,
}

impl RunOutput {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            ..Self::default()
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub(crate) fn write_csv_rows<S: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(name, &bytes)
    }

    fn write_rows(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(name, &bytes)
    }

    fn finish(mut self, cfg: &ExperimentConfig, summary: Value) -> Result<Self> {
        self.write("summary.json", &serde_json::to_vec_pretty(&summary)?)?;
        let hashes: serde_json::Map<String, Value> = self
            .files
            .iter()
            .map(|f| {
                Ok((
                    f.clone(),
                    json!(hex::encode(Sha256::digest(fs::read(self.dir.join(f))?))),
                ))
            })
            .collect::<Result<_>>()?;
        let manifest = json!({
            "tool": "padro",
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": cfg.experiment.name(),
            "seed": cfg.seed,
            "config_sha256": cfg.content_hash()?,
            "config": cfg,
            "outputs_sha256": hashes,
        });
        fs::write(self.dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        self.files.push("manifest.json".into());
        self.summary = summary;
        Ok(self)
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn trace_rows(
    trace: &[IterationRecord],
    q_names: &[String],
    extra: impl Fn(&[f64]) -> Vec<f64>,
    extra_names: &[&str],
) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["iteration", "lambda", "level"].iter().map(|s| s.to_string()).collect();
    let g_len = trace.first().map_or(0, |r| r.g.len());
    let side = (g_len as f64).sqrt() as usize;
    for i in 0..g_len {
        header.push(format!("g_{}{}", i / side.max(1), i % side.max(1)));
    }
    header.extend(q_names.iter().cloned());
    header.extend(extra_names.iter().map(|s| s.to_string()));
    header.push("g_norm".into());
    header.push("objective".into());
    let rows = trace
        .iter()
        .map(|r| {
            let mut row = vec![r.iteration.to_string(), r.lambda.to_string(), r.level.to_string()];
            row.extend(r.g.iter().map(f64::to_string));
            row.extend(r.q.iter().map(f64::to_string));
            row.extend(extra(&r.q).iter().map(f64::to_string));
            row.push(r.g_norm.to_string());
            row.push(r.objective.to_string());
            row
        })
        .collect();
    (header, rows)
}

/// Inputs shared by the two 2×2 inversion experiments.
pub struct InversionSetup {
    pub forward: DMatrix<f64>,
    pub data: EmpiricalJoint,
    pub problem: DualProblem,
}

pub fn inversion_setup(cfg: &ExperimentConfig, forward: DMatrix<f64>) -> Result<InversionSetup> {
    let xs = sample_uniform_square(cfg.samples(), forward.ncols(), RngStream::new(cfg.seed, STREAM_DATA))?;
    let data = make_dataset(
        &xs,
        &ForwardOperator::Dense(forward.clone()),
        NoiseModel::None,
        RngStream::new(cfg.seed, STREAM_DATA),
    )?;
    Ok(InversionSetup {
        forward,
        data,
        problem: DualProblem::new(cfg.epsilon, cfg.delta)?,
    })
}

/// Solves the 2×2 inversion problem for an arbitrary family.
pub fn solve_inversion<F: PerturbationFamily>(
    cfg: &ExperimentConfig,
    setup: &InversionSetup,
    family0: F,
) -> Result<SolveReport<F>> {
    let model = MonteCarloDual::new(setup.problem, &setup.data);
    bisect_lambda(
        &model,
        Reconstructor::scaled_adjoint(&setup.forward).into_matrix(),
        family0,
        &cfg.bisection,
        &cfg.bsmd,
        RngStream::new(cfg.seed, STREAM_SOLVE),
    )
}

fn transport_summary<F: PerturbationFamily>(
    cfg: &ExperimentConfig,
    data: &EmpiricalJoint,
    family: &F,
) -> Result<Value> {
    let stream = RngStream::new(cfg.seed, STREAM_AUDIT);
    let per_atom = perturbation_transport_cost(data, family, cfg.delta, 256, Coupling::PerAtom, stream)?;
    let product = perturbation_transport_cost(data, family, cfg.delta, 256, Coupling::Product, stream)?;
    Ok(json!({
        "epsilon": cfg.epsilon,
        "per_atom": per_atom,
        "product": product,
    }))
}

fn solve_summary<F>(cfg: &ExperimentConfig, report: &SolveReport<F>) -> Value {
    json!({
        "experiment": cfg.experiment.name(),
        "seed": cfg.seed,
        "lambda_opt": report.lambda_opt,
        "boundary": report.diagnostics.boundary,
        "value": report.value,
        "std_error": report.diagnostics.std_error,
        "g_opt": matrix_rows(report.g_opt.matrix()),
        "q_opt": report.q_opt,
        "outer_iterations": report.diagnostics.outer_iterations,
        "inner_solves": report.diagnostics.inner_solves,
        "evaluations": report.diagnostics.evaluations,
        "seconds": report.diagnostics.seconds,
    })
}

/// Isotropic inversion of `H = 2·I` from uniform samples on the unit square.
pub fn run_invert_iso(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let setup = inversion_setup(cfg, DMatrix::identity(2, 2) * 2.0)?;
    let family0 = IsotropicGaussianFamily::new(setup.forward.clone(), cfg.initial_variance(), cfg.sigma_max())?;
    let report = solve_inversion(cfg, &setup, family0)?;
    let mut out = RunOutput::new(&cfg.out)?;
    let (header, rows) = trace_rows(&report.trace, &["variance".into()], |q| vec![q[0].sqrt()], &["sigma"]);
    out.write_rows("trace.csv", &header, &rows)?;
    let mut summary = solve_summary(cfg, &report);
    summary["variance_opt"] = json!(report.family_opt.variance());
    summary["sigma_opt"] = json!(report.family_opt.std_dev());
    summary["transport_cost"] = transport_summary(cfg, &setup.data, &report.family_opt)?;
    out.finish(cfg, summary)
}

/// Angle in degrees in `[0, 90]` between two lines through the origin.
pub fn axis_angle_degrees(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}

/// Unit eigenvector of the largest eigenvalue of a symmetric matrix.
pub fn top_eigenvector(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = m.clone().symmetric_eigen();
    let k = eig.eigenvalues.imax();
    (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned())
}

/// Anisotropic inversion of `H = [[5, 1], [1, 2]]`.
pub fn run_invert_aniso(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let h = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 2.0]);
    let setup = inversion_setup(cfg, h.clone())?;
    let family0 = AnisotropicGaussianFamily::isotropic_start(h.clone(), cfg.initial_variance(), cfg.sigma_max())?;
    let report = solve_inversion(cfg, &setup, family0)?;
    let mut out = RunOutput::new(&cfg.out)?;
    let q_names: Vec<String> = ["l_00", "l_10", "l_11"].iter().map(|s| s.to_string()).collect();
    let (header, rows) = trace_rows(
        &report.trace,
        &q_names,
        |q| vec![q[0] * q[0], q[0] * q[1], q[1] * q[1] + q[2] * q[2]],
        &["sigma_00", "sigma_01", "sigma_11"],
    );
    out.write_rows("trace.csv", &header, &rows)?;

    #[derive(Serialize)]
    struct SampleRow {
        x1: f64,
        x2: f64,
        y1: f64,
        y2: f64,
    }
    out.write_csv_rows(
        "samples.csv",
        (0..setup.data.len()).map(|i| SampleRow {
            x1: setup.data.x(i)[0],
            x2: setup.data.x(i)[1],
            y1: setup.data.y(i)[0],
            y2: setup.data.y(i)[1],
        }),
    )?;

    let cov = report.family_opt.covariance();
    let (cov_top, cov_axis) = top_eigenvector(&cov);
    let (h_top, h_axis) = top_eigenvector(&h);
    let cov_eig = cov.clone().symmetric_eigen();
    let h_eig = h.clone().symmetric_eigen();
    let cov_sqrt = report.family_opt.cholesky_factor().clone();

    #[derive(Serialize)]
    struct EllipseRow {
        t: f64,
        sigma_x: f64,
        sigma_y: f64,
        h_x: f64,
        h_y: f64,
    }
    out.write_csv_rows(
        "ellipse.csv",
        (0..=128).map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / 128.0;
            let u = DVector::from_row_slice(&[t.cos(), t.sin()]);
            let s = &cov_sqrt * &u;
            let hu = &h * &u;
            EllipseRow {
                t,
                sigma_x: s[0],
                sigma_y: s[1],
                h_x: hu[0],
                h_y: hu[1],
            }
        }),
    )?;

    let mut summary = solve_summary(cfg, &report);
    summary["covariance_opt"] = json!(matrix_rows(&cov));
    summary["covariance_eigenvalues"] = json!(cov_eig.eigenvalues.as_slice());
    summary["covariance_eigenvectors"] = json!(matrix_rows(&cov_eig.eigenvectors));
    summary["covariance_top_eigenvalue"] = json!(cov_top);
    summary["forward_eigenvalues"] = json!(h_eig.eigenvalues.as_slice());
    summary["forward_eigenvectors"] = json!(matrix_rows(&h_eig.eigenvectors));
    summary["forward_top_eigenvalue"] = json!(h_top);
    summary["principal_axis_angle_deg"] = json!(axis_angle_degrees(&cov_axis, &h_axis));
    summary["transport_cost"] = transport_summary(cfg, &setup.data, &report.family_opt)?;
    out.finish(cfg, summary)
}

/// One row of the deconvolution results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub noise: String,
    pub sigma: f64,
    pub images: usize,
    pub mse: f64,
    pub ssim: f64,
    pub lambda_reg: Option<f64>,
}

fn noise_sigma(n: &NoiseModel) -> f64 {
    match *n {
        NoiseModel::None => 0.0,
        NoiseModel::Gaussian { sigma } | NoiseModel::Poisson { sigma } => sigma,
    }
}

fn noise_kind(n: &NoiseModel) -> &'static str {
    match n {
        NoiseModel::None => "none",
        NoiseModel::Gaussian { .. } => "gaussian",
        NoiseModel::Poisson { .. } => "poisson",
    }
}

/// Mean MSE and SSIM of `g·y` against `x` over a test set.
pub fn evaluate_reconstructor(
    g: &DMatrix<f64>,
    clean: &[DVector<f64>],
    measured: &[DVector<f64>],
) -> Result<(f64, f64)> {
    let scores: Vec<(f64, f64)> = clean
        .par_iter()
        .zip(measured.par_iter())
        .map(|(x, y)| {
            let r = g * y;
            let e = mse(r.as_slice(), x.as_slice())?;
            let s = ssim(&as_image(x, IMAGE_SIDE)?, &as_image(&r, IMAGE_SIDE)?)?;
            Ok((e, s))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

/// MNIST deconvolution: one robust inverse trained on noiseless blurred
/// pairs, compared with a per-setting tuned Tikhonov inverse.
pub fn run_deconv(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = cfg.mnist_dir.clone().ok_or_else(|| {
        Error::Config("deconv needs --mnist DIR holding t10k-images-idx3-ubyte (see scripts/fetch_mnist.sh)".into())
    })?;
    let images_path = find_mnist_images(&dir)?;
    let train_n = cfg.samples();
    let limit = if cfg.full {
        None
    } else {
        Some(train_n + cfg.test_images)
    };
    let (images, _) = load_mnist_idx(&images_path, None, limit)?;
    if images.len() <= train_n {
        return Err(Error::Config(format!(
            "{} holds {} images; need more than the {train_n} training images",
            images_path.display(),
            images.len()
        )));
    }
    let pixels: Vec<DVector<f64>> = images.iter().map(|i| i.pixels()).collect();
    let (train, test) = pixels.split_at(train_n);

    let op = ForwardOperator::blur(gaussian_kernel_3x3(cfg.kernel_bandwidth)?);
    let h = op.materialize();
    let data = make_dataset(train, &op, NoiseModel::None, RngStream::new(cfg.seed, STREAM_DATA))?;
    let problem = DualProblem::new(cfg.epsilon, cfg.delta)?;
    let model = SpectralQuadraticDual::new(problem, &data, &h)?;
    let family0 = IsotropicGaussianFamily::new(h.clone(), cfg.initial_variance(), cfg.sigma_max())?;
    let g0 = model.to_rotated(Reconstructor::scaled_adjoint(&h).matrix());
    let rho = model.eigenvalues().max();
    let bsmd = BsmdConfig {
        lr_g: cfg.deconv_lr_g.unwrap_or(0.5 / (rho + cfg.sigma_max())),
        ..cfg.deconv_bsmd
    };
    let report = bisect_lambda(
        &model,
        g0,
        family0,
        &cfg.bisection,
        &bsmd,
        RngStream::new(cfg.seed, STREAM_SOLVE),
    )?;
    let g_opt = model.from_rotated(report.g_opt.matrix());

    let laplacian = neumann_laplacian(IMAGE_SIDE);
    let tikhonov = TikhonovInverse::new(&h, &laplacian)?;
    let clean_meas: Vec<DVector<f64>> = test.par_iter().map(|x| &h * x).collect();

    let mut settings = vec![NoiseModel::None];
    settings.extend(cfg.noise_grid.iter().copied());
    let mut table = Vec::new();
    let mut sample_rows: Vec<Vec<String>> = Vec::new();
    let pixel_rows = |label: &str, noise: &str, v: &DVector<f64>| -> Vec<Vec<String>> {
        v.iter()
            .enumerate()
            .map(|(k, p)| {
                vec![
                    label.to_string(),
                    noise.to_string(),
                    (k / IMAGE_SIDE).to_string(),
                    (k % IMAGE_SIDE).to_string(),
                    p.to_string(),
                ]
            })
            .collect()
    };
    sample_rows.extend(pixel_rows("clean", "none", &test[0]));
    for (s, noise) in settings.iter().enumerate() {
        let measured: Vec<DVector<f64>> = clean_meas
            .par_iter()
            .enumerate()
            .map(|(i, y)| noise.apply(y, RngStream::new(cfg.seed, STREAM_NOISE).path(&[s as u64, i as u64])))
            .collect::<Result<_>>()?;
        let (pmse, pssim) = evaluate_reconstructor(&g_opt, test, &measured)?;
        let fit = fit_tikhonov_lambda(
            &h,
            &laplacian,
            test,
            &measured,
            (cfg.tikhonov_interval[0], cfg.tikhonov_interval[1]),
            cfg.tikhonov_tolerance,
        )?;
        let g_tik = tikhonov.solve(fit.lambda_reg)?;
        let (tmse, tssim) = evaluate_reconstructor(g_tik.matrix(), test, &measured)?;
        let label = noise.label();
        for (method, m, sv, lam) in [
            ("padro", pmse, pssim, None),
            ("tikhonov", tmse, tssim, Some(fit.lambda_reg)),
        ] {
            table.push(TableRow {
                method: method.into(),
                noise: noise_kind(noise).into(),
                sigma: noise_sigma(noise),
                images: test.len(),
                mse: m,
                ssim: sv,
                lambda_reg: lam,
            });
        }
        let y_img = DVector::from_fn(IMAGE_SIDE * IMAGE_SIDE, |k, _| {
            // measurement shown on the full grid with a zero border
            let (r, c) = (k / IMAGE_SIDE, k % IMAGE_SIDE);
            let inner = IMAGE_SIDE - 2;
            if (1..=inner).contains(&r) && (1..=inner).contains(&c) {
                measured[0][(r - 1) * inner + c - 1]
            } else {
                0.0
            }
        });
        sample_rows.extend(pixel_rows("measurement", &label, &y_img));
        sample_rows.extend(pixel_rows("padro", &label, &(&g_opt * &measured[0])));
        sample_rows.extend(pixel_rows("tikhonov", &label, &(g_tik.matrix() * &measured[0])));
    }

    let mut out = RunOutput::new(&cfg.out)?;
    let (header, rows) = trace_rows(&report.trace, &["variance".into()], |q| vec![q[0].sqrt()], &["sigma"]);
    out.write_rows("trace.csv", &header, &rows)?;
    out.write_csv_rows("table.csv", &table)?;
    let sample_header: Vec<String> = ["image", "noise", "row", "col", "value"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    out.write_rows("sample_digit.csv", &sample_header, &sample_rows)?;

    let summary = json!({
        "experiment": cfg.experiment.name(),
        "seed": cfg.seed,
        "train_images": train_n,
        "test_images": test.len(),
        "lambda_opt": report.lambda_opt,
        "boundary": report.diagnostics.boundary,
        "value": report.value,
        "variance_opt": report.family_opt.variance(),
        "sigma_opt": report.family_opt.std_dev(),
        "g_frobenius": g_opt.norm(),
        "table": table,
        "evaluations": report.diagnostics.evaluations,
        "solver_seconds": report.diagnostics.seconds,
        "lr_g": bsmd.lr_g,
    });
    out.finish(cfg, summary)
}

pub use crate::validation::run_validate;

/// Dispatches on `cfg.experiment`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.experiment {
        Experiment::InvertIso => run_invert_iso(cfg),
        Experiment::InvertAniso => run_invert_aniso(cfg),
        Experiment::Deconv => run_deconv(cfg),
        Experiment::Validate => run_validate(cfg),
    }
}

/// Used by the validation runner to write its report through the same
/// manifest machinery.
pub(crate) fn write_report(
    cfg: &ExperimentConfig,
    name: &str,
    report: &Value,
    summary: Value,
    extra: impl FnOnce(&mut RunOutput) -> Result<()>,
) -> Result<RunOutput> {
    let mut out = RunOutput::new(&cfg.out)?;
    out.write(name, &serde_json::to_vec_pretty(report)?)?;
    extra(&mut out)?;
    out.finish(cfg, summary)
}
