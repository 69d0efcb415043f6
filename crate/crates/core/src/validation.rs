//! Self-checks run by `padro validate`.
//!
//! Every suite compares a production code path with an independent
//! computation and reports the largest observed error next to its tolerance.
//! The report layout is described by `docs/validate-report.schema.json`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{make_dataset, sample_uniform_square, NoiseModel};
use crate::dual::{DualModel, MonteCarloDual};
use crate::error::{Error, Result};
use crate::experiments::{write_report, ExperimentConfig, Fault, RunOutput};
use crate::inverse::ForwardOperator;
use crate::model::{DualProblem, EmpiricalJoint, Reconstructor};
use crate::optimizer::{bisect_lambda, mlmc_level_gradient, BisectionConfig, BsmdConfig, MlmcConfig, STREAM_SAMPLES};
use crate::ot::{
    cost_matrix, entropic_w1, perturbation_transport_cost, plan_value, Coupling, DiscreteMeasure, SinkhornOptions,
};
use crate::perturbation::{AnisotropicGaussianFamily, IsotropicGaussianFamily, PerturbationFamily};
use crate::rng::RngStream;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub tolerance: f64,
    /// Largest error over all cases, in the units of `tolerance`.
    pub max_error: f64,
    /// First few failing cases, for diagnosis.
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: true,
            cases: 0,
            failures: 0,
            tolerance,
            max_error: 0.0,
            notes: Vec::new(),
        }
    }

    /// Records a case whose error is compared with the suite tolerance.
    fn record(&mut self, error: f64, label: impl FnOnce() -> String) {
        self.cases += 1;
        if error.is_nan() || error > self.max_error {
            self.max_error = if error.is_nan() { f64::INFINITY } else { error };
        }
        if !(error <= self.tolerance) {
            self.fail(label);
        }
    }

    /// Records a pass/fail case that has no scalar error.
    fn check(&mut self, ok: bool, label: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.fail(label);
        }
    }

    fn fail(&mut self, label: impl FnOnce() -> String) {
        self.failures += 1;
        self.passed = false;
        if self.notes.len() < 5 {
            self.notes.push(label());
        }
    }
}

/// Full `padro validate` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub passed: bool,
    pub fault: Option<Fault>,
    pub suites: Vec<SuiteReport>,
}

/// Delegates to the wrapped family but negates its entropy gradient.
#[derive(Debug, Clone)]
pub struct SignFlippedEntropy<F>(pub F);

impl<F: PerturbationFamily> PerturbationFamily for SignFlippedEntropy<F> {
    fn y_dim(&self) -> usize {
        self.0.y_dim()
    }
    fn x_dim(&self) -> usize {
        self.0.x_dim()
    }
    fn forward(&self) -> &DMatrix<f64> {
        self.0.forward()
    }
    fn sigma_max(&self) -> f64 {
        self.0.sigma_max()
    }
    fn params(&self) -> Vec<f64> {
        self.0.params()
    }
    fn with_params(&self, q: &[f64]) -> Result<Self> {
        self.0.with_params(q).map(Self)
    }
    fn project(&self, q: &[f64]) -> Vec<f64> {
        self.0.project(q)
    }
    fn projected_gradient(&self, grad: &[f64]) -> Vec<f64> {
        self.0.projected_gradient(grad)
    }
    fn apply_scale(&self, z: &DVector<f64>) -> DVector<f64> {
        self.0.apply_scale(z)
    }
    fn scale_gradient(&self, d_scale: &DMatrix<f64>) -> Vec<f64> {
        self.0.scale_gradient(d_scale)
    }
    fn covariance(&self) -> DMatrix<f64> {
        self.0.covariance()
    }
    fn log_det_covariance(&self) -> f64 {
        self.0.log_det_covariance()
    }
    fn mahalanobis_sq(&self, r: &DVector<f64>) -> f64 {
        self.0.mahalanobis_sq(r)
    }
    fn entropy_gradient(&self) -> Vec<f64> {
        self.0.entropy_gradient().iter().map(|v| -v).collect()
    }
    fn negative_differential_entropy(&self) -> f64 {
        self.0.negative_differential_entropy()
    }
}

/// `|a − b| / max(|a|, |b|, 1e−6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random well-conditioned 2×2 forward operator.
fn random_forward(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (a, b) = (uniform_in(rng, 1.0, 5.0), uniform_in(rng, 1.0, 5.0));
    let t = uniform_in(rng, 0.0, std::f64::consts::PI);
    let rot = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
    &rot * DMatrix::from_diagonal(&DVector::from_row_slice(&[a, b])) * rot.transpose()
}

fn random_chol(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        2,
        2,
        &[
            uniform_in(rng, 0.2, 0.8),
            0.0,
            uniform_in(rng, -0.3, 0.3),
            uniform_in(rng, 0.2, 0.8),
        ],
    )
}

fn square_data(n: usize, h: &DMatrix<f64>, seed: u64) -> Result<EmpiricalJoint> {
    let xs = sample_uniform_square(n, h.ncols(), RngStream::new(seed, 0))?;
    make_dataset(
        &xs,
        &ForwardOperator::Dense(h.clone()),
        NoiseModel::None,
        RngStream::new(seed, 1),
    )
}

/// Largest relative error between pathwise and central-difference gradients
/// of the sampled dual objective at one configuration, under common random
/// numbers.
pub fn gradient_error<F: PerturbationFamily>(
    g: &DMatrix<f64>,
    family: &F,
    lambda: f64,
    problem: DualProblem,
    mu_star: &EmpiricalJoint,
    samples: usize,
    rng: RngStream,
) -> Result<f64> {
    let model = MonteCarloDual::new(problem, mu_star);
    let anchors: Vec<usize> = (0..mu_star.len()).collect();
    let est = model.estimate(g, family, lambda, &anchors, samples, rng)?;
    let value =
        |g: &DMatrix<f64>, f: &F| -> Result<f64> { Ok(model.estimate(g, f, lambda, &anchors, samples, rng)?.value) };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..g.len() {
        let (mut gp, mut gm) = (g.clone(), g.clone());
        gp[k] += step;
        gm[k] -= step;
        let fd = (value(&gp, family)? - value(&gm, family)?) / (2.0 * step);
        worst = worst.max(relative_error(fd, est.grad_g[k]));
    }
    let q = family.params();
    for k in 0..q.len() {
        let (mut qp, mut qm) = (q.clone(), q.clone());
        qp[k] += step;
        qm[k] -= step;
        let fd = (value(g, &family.with_params(&qp)?)? - value(g, &family.with_params(&qm)?)?) / (2.0 * step);
        worst = worst.max(relative_error(fd, est.grad_q[k]));
    }
    Ok(worst)
}

/// Pathwise gradients against central differences on random configurations.
pub fn gradient_suite(seed: u64, configs: usize, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradients", 1e-4);
    let mut rng = RngStream::new(seed, 11).rng();
    for c in 0..configs {
        let h = random_forward(&mut rng);
        let n = rng.random_range(5..15);
        let mu = square_data(n, &h, seed.wrapping_add(c as u64))?;
        let problem = DualProblem::new(uniform_in(&mut rng, 0.0, 0.1), uniform_in(&mut rng, 0.05, 0.5))?;
        let lambda = uniform_in(&mut rng, 0.2, 3.0);
        let g = DMatrix::from_fn(2, 2, |_, _| uniform_in(&mut rng, -0.5, 0.5));
        let stream = RngStream::new(seed, 1000 + c as u64);
        let iso = c % 2 == 0;
        let err = match (iso, fault) {
            (true, None) => {
                let fam = IsotropicGaussianFamily::new(h, uniform_in(&mut rng, 0.05, 1.0), 10.0)?;
                gradient_error(&g, &fam, lambda, problem, &mu, 8, stream)?
            }
            (true, Some(Fault::EntropyGradientSign)) => {
                let fam = SignFlippedEntropy(IsotropicGaussianFamily::new(h, uniform_in(&mut rng, 0.05, 1.0), 10.0)?);
                gradient_error(&g, &fam, lambda, problem, &mu, 8, stream)?
            }
            (false, None) => {
                let fam = AnisotropicGaussianFamily::new(h, random_chol(&mut rng), 10.0)?;
                gradient_error(&g, &fam, lambda, problem, &mu, 8, stream)?
            }
            (false, Some(Fault::EntropyGradientSign)) => {
                let fam = SignFlippedEntropy(AnisotropicGaussianFamily::new(h, random_chol(&mut rng), 10.0)?);
                gradient_error(&g, &fam, lambda, problem, &mu, 8, stream)?
            }
        };
        report.record(err, || {
            format!(
                "config {c} ({}): relative error {err:.3e}",
                if iso { "isotropic" } else { "anisotropic" }
            )
        });
    }
    Ok(report)
}

/// Monte Carlo estimate of `E ‖g·y − x‖²` under `μ*_X ⊗ N(H·, Σ)` and its
/// standard error.
pub fn primal_loss<F: PerturbationFamily>(
    g: &DMatrix<f64>,
    family: &F,
    mu_star: &EmpiricalJoint,
    draws: usize,
    rng: RngStream,
) -> (f64, f64) {
    let mut gen = rng.rng();
    let d = family.y_dim();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let x = mu_star.x(gen.random_range(0..mu_star.len()));
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut gen));
        let y = family.forward() * x + family.apply_scale(&z);
        let l = (g * y - x).norm_squared();
        sum += l;
        sum_sq += l * l;
    }
    let k = draws as f64;
    let mean = sum / k;
    (mean, ((sum_sq / k - mean * mean).max(0.0) / k).sqrt())
}

/// Settings for one weak-duality instance.
#[derive(Debug, Clone)]
pub struct AuditSettings {
    pub anchors: usize,
    pub delta: f64,
    pub bisection: BisectionConfig,
    pub bsmd: BsmdConfig,
    pub cost_samples: usize,
    pub primal_draws: usize,
    pub candidates: usize,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            anchors: 30,
            delta: 0.1,
            bisection: BisectionConfig {
                lambda_lo: 1e-2,
                lambda_hi: 10.0,
                tolerance: 0.1,
                max_iters: 6,
                log_scale: true,
            },
            // the audit needs the inner maximum over q resolved well, which a
            // short run only reaches with a larger ascent step scaled by 1/λ
            bsmd: BsmdConfig {
                iters: 300,
                lr_q: 0.5,
                normalize_q_step: true,
                final_samples: 512,
                ..BsmdConfig::default()
            },
            cost_samples: 256,
            primal_draws: 20_000,
            candidates: 12,
        }
    }
}

/// One audited instance.
#[derive(Debug, Clone, Serialize)]
pub struct AuditInstance {
    pub epsilon: f64,
    pub lambda_opt: f64,
    pub dual_value: f64,
    pub dual_std_error: f64,
    pub feasible: usize,
    pub worst_primal: f64,
    /// Smallest `(dual + 3·SE − primal)` over feasible candidates.
    pub margin: f64,
}

/// Solves one random instance and checks the dual value against the primal
/// risk of feasible Gaussian perturbations.
pub fn audit_instance(seed: u64, index: u64, settings: &AuditSettings) -> Result<AuditInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let h = random_forward(&mut rng);
    let mu = square_data(settings.anchors, &h, seed.wrapping_add(7919 * index))?;
    let streams = RngStream::new(seed, 2000 + index);
    let cost = |fam: &AnisotropicGaussianFamily, k: u64| {
        perturbation_transport_cost(
            &mu,
            fam,
            settings.delta,
            settings.cost_samples,
            Coupling::Product,
            streams.path(&[0, k]),
        )
    };

    // Candidate perturbations: an isotropic ladder plus random shapes.
    let mut candidates = Vec::new();
    for k in 0..settings.candidates {
        let chol = if k % 2 == 0 {
            DMatrix::identity(2, 2) * 10f64.powf(-1.5 + 1.5 * k as f64 / settings.candidates as f64)
        } else {
            random_chol(&mut rng) * uniform_in(&mut rng, 0.1, 1.0)
        };
        candidates.push(AnisotropicGaussianFamily::new(h.clone(), chol, 10.0)?);
    }
    let costs: Vec<f64> = candidates
        .iter()
        .enumerate()
        .map(|(k, f)| cost(f, k as u64).map(|c| c.value))
        .collect::<Result<_>>()?;
    // Radius between the cheapest and the median candidate, so the ball is
    // nonempty but excludes some candidates.
    let mut sorted = costs.clone();
    sorted.sort_by(f64::total_cmp);
    let epsilon = sorted[0] + uniform_in(&mut rng, 0.2, 1.0) * (sorted[sorted.len() / 2] - sorted[0]);

    let problem = DualProblem::new(epsilon, settings.delta)?;
    let model = MonteCarloDual::new(problem, &mu);
    let family0 = AnisotropicGaussianFamily::isotropic_start(h.clone(), 0.1, 10.0)?;
    let report = bisect_lambda(
        &model,
        Reconstructor::scaled_adjoint(&h).into_matrix(),
        family0,
        &settings.bisection,
        &settings.bsmd,
        streams.substream(1),
    )?;
    let g = report.g_opt.matrix();
    let (dual, dual_se) = (report.value, report.diagnostics.std_error);

    let mut feasible = 0;
    let mut worst_primal = f64::NEG_INFINITY;
    let mut margin = f64::INFINITY;
    for (k, (fam, c)) in candidates.iter().zip(&costs).enumerate() {
        if *c > epsilon {
            continue;
        }
        feasible += 1;
        let (p, p_se) = primal_loss(g, fam, &mu, settings.primal_draws, streams.path(&[2, k as u64]));
        worst_primal = worst_primal.max(p);
        margin = margin.min(dual + 3.0 * (dual_se * dual_se + p_se * p_se).sqrt() - p);
    }
    Ok(AuditInstance {
        epsilon,
        lambda_opt: report.lambda_opt,
        dual_value: dual,
        dual_std_error: dual_se,
        feasible,
        worst_primal,
        margin,
    })
}

/// Weak-duality audit over `instances` random 2-D problems.
pub fn weak_duality_suite(
    seed: u64,
    instances: usize,
    settings: &AuditSettings,
) -> Result<(SuiteReport, Vec<AuditInstance>)> {
    let mut report = SuiteReport::new("weak_duality", 0.0);
    let mut rows = Vec::new();
    for i in 0..instances {
        let inst = audit_instance(seed, i as u64, settings)?;
        // error is the shortfall below the bound; vacuous instances fail
        let shortfall = if inst.feasible == 0 {
            f64::INFINITY
        } else {
            (-inst.margin).max(0.0)
        };
        report.record(shortfall, || {
            format!(
                "instance {i}: dual {:.5} ± {:.1e}, worst feasible primal {:.5}, {} feasible",
                inst.dual_value, inst.dual_std_error, inst.worst_primal, inst.feasible
            )
        });
        rows.push(inst);
    }
    Ok((report, rows))
}

/// Minimizes the entropic transport objective directly by damped Newton steps
/// on the affine space of plans with the right marginals.
///
/// Independent of the Sinkhorn scaling iterations; meant for small instances.
pub fn newton_entropic_w1(mu: &DiscreteMeasure, nu: &DiscreteMeasure, delta: f64) -> Result<f64> {
    let cost = cost_matrix(mu, nu)?;
    let (n, m) = cost.shape();
    let eta = DMatrix::from_fn(n, m, |i, j| mu.weights()[i] * nu.weights()[j]);
    if eta.iter().any(|v| *v <= 0.0) {
        return Err(Error::Config("direct solve needs strictly positive marginals".into()));
    }
    // null space of the marginal map: e_ij − e_im − e_nj + e_nm
    let mut basis = Vec::new();
    for i in 0..n - 1 {
        for j in 0..m - 1 {
            let mut e = DMatrix::zeros(n, m);
            e[(i, j)] = 1.0;
            e[(i, m - 1)] = -1.0;
            e[(n - 1, j)] = -1.0;
            e[(n - 1, m - 1)] = 1.0;
            basis.push(e);
        }
    }
    let k = basis.len();
    let objective = |p: &DMatrix<f64>| plan_value(p, &cost, &eta, delta);
    let mut plan = eta.clone();
    for _ in 0..200 {
        let grad_full = DMatrix::from_fn(n, m, |i, j| {
            cost[(i, j)] + delta * ((plan[(i, j)] / eta[(i, j)]).ln() + 1.0)
        });
        let grad = DVector::from_fn(k, |a, _| basis[a].dot(&grad_full));
        if grad.norm() < 1e-14 {
            break;
        }
        let hess = DMatrix::from_fn(k, k, |a, b| {
            basis[a]
                .iter()
                .zip(basis[b].iter())
                .zip(plan.iter())
                .map(|((x, y), p)| x * y * delta / p)
                .sum()
        });
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Singular("Newton system of the direct transport solve".into()))?
            .solve(&grad);
        let dir = basis
            .iter()
            .zip(step.iter())
            .fold(DMatrix::zeros(n, m), |acc, (e, s)| acc - e * *s);
        let f0 = objective(&plan);
        let slope = -grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &plan + &dir * t;
            if cand.iter().all(|p| *p > 0.0) && objective(&cand) <= f0 + 1e-4 * t * slope {
                plan = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return Ok(f0);
            }
        }
    }
    Ok(objective(&plan))
}

fn random_measure(n: usize, rng: &mut ChaCha8Rng) -> Result<DiscreteMeasure> {
    let atoms = (0..n)
        .map(|_| DVector::from_fn(2, |_, _| uniform_in(rng, -1.0, 1.0)))
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| uniform_in(rng, 0.2, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - head;
    DiscreteMeasure::new(atoms, w)
}

/// Sinkhorn against the direct Newton solve, plus point-mass identities.
pub fn sinkhorn_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("sinkhorn_oracle", 1e-6);
    let mut rng = RngStream::new(seed, 12).rng();
    let opts = SinkhornOptions::default();
    for i in 0..instances {
        let (mu, nu) = (random_measure(5, &mut rng)?, random_measure(5, &mut rng)?);
        for delta in [0.05, 0.3, 1.0] {
            let (value, _) = entropic_w1(&mu, &nu, delta, &opts)?;
            let oracle = newton_entropic_w1(&mu, &nu, delta)?;
            let err = (value - oracle).abs();
            report.record(err, || {
                format!("instance {i}, delta {delta}: sinkhorn {value} vs direct {oracle}")
            });
        }
    }
    let a = DVector::from_row_slice(&[0.3, -1.2]);
    let b = DVector::from_row_slice(&[2.0, 0.5]);
    let pa = DiscreteMeasure::uniform(vec![a.clone()])?;
    let pb = DiscreteMeasure::uniform(vec![b.clone()])?;
    let (same, _) = entropic_w1(&pa, &pa, 0.1, &opts)?;
    report.check(same == 0.0, || format!("identical point masses: {same}"));
    let (apart, _) = entropic_w1(&pa, &pb, 0.1, &opts)?;
    let expected = (a - b).norm();
    report.check(apart == expected, || {
        format!("distinct point masses: {apart} vs {expected}")
    });
    Ok(report)
}

/// Enumerates all levels and compares the probability-weighted estimator
/// with the deepest-level gradient read from the same stream.
pub fn telescoping_error<F: PerturbationFamily>(
    family: &F,
    mu: &EmpiricalJoint,
    cfg: &MlmcConfig,
    stream: RngStream,
) -> Result<f64> {
    let model = MonteCarloDual::new(DualProblem::new(0.01, 0.1)?, mu);
    let g = DMatrix::from_row_slice(2, 2, &[0.4, 0.05, -0.02, 0.45]);
    let anchors: Vec<usize> = (0..mu.len()).collect();
    let p = cfg.level_probabilities()?;
    let mut mean_g = DMatrix::zeros(2, 2);
    let mut mean_q = vec![0.0; family.params().len()];
    for l in 0..=cfg.max_level {
        let e = mlmc_level_gradient(&model, &g, family, 0.9, &anchors, cfg, l, stream)?;
        mean_g += &e.grad_g * p[l as usize];
        mean_q
            .iter_mut()
            .zip(&e.grad_q)
            .for_each(|(m, v)| *m += p[l as usize] * v);
    }
    let deepest = model.estimate(
        &g,
        family,
        0.9,
        &anchors,
        cfg.samples_at(cfg.max_level),
        stream.substream(STREAM_SAMPLES),
    )?;
    let mut err = (mean_g - &deepest.grad_g).amax() / deepest.grad_g.amax().max(1.0);
    for (a, b) in mean_q.iter().zip(&deepest.grad_q) {
        err = err.max((a - b).abs() / b.abs().max(1.0));
    }
    Ok(err)
}

pub fn telescoping_suite(seed: u64, seeds: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("mlmc_telescoping", 1e-10);
    let h = DMatrix::identity(2, 2) * 2.0;
    let cfg = MlmcConfig::default();
    for s in 0..seeds as u64 {
        let mu = square_data(15, &h, seed.wrapping_add(s))?;
        let stream = RngStream::new(seed, 3000 + s);
        let iso = telescoping_error(&IsotropicGaussianFamily::new(h.clone(), 0.25, 10.0)?, &mu, &cfg, stream)?;
        report.record(iso, || format!("seed {s}, isotropic: {iso:.3e}"));
        let an = telescoping_error(
            &AnisotropicGaussianFamily::isotropic_start(h.clone(), 0.25, 10.0)?,
            &mu,
            &cfg,
            stream,
        )?;
        report.record(an, || format!("seed {s}, anisotropic: {an:.3e}"));
    }
    Ok(report)
}

/// `∫ log p dp` estimated from `draws` samples of the family at `x = 0`.
pub fn entropy_monte_carlo<F: PerturbationFamily>(family: &F, draws: usize, rng: RngStream) -> Result<f64> {
    let x = DVector::zeros(family.x_dim());
    let mut gen = rng.rng();
    let d = family.y_dim();
    let mut sum = 0.0;
    for _ in 0..draws {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut gen));
        let y = family.forward() * &x + family.apply_scale(&z);
        sum += family.log_density(&x, &y)?;
    }
    Ok(sum / draws as f64)
}

/// Closed-form entropies against Monte Carlo and the analytic anchor.
pub fn entropy_suite(seed: u64, draws: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("entropy", 1e-2);
    let anchor_var = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
    let one = DMatrix::identity(1, 1);
    let anchor = IsotropicGaussianFamily::new(one.clone(), anchor_var, 10.0)?;
    let exact = anchor.negative_differential_entropy().abs();
    report.record(exact, || format!("analytic anchor: {exact:.3e}"));
    let h2 = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 2.0]);
    type Case = Box<dyn Fn(RngStream) -> Result<(f64, f64)>>;
    let cases: Vec<(String, Case)> = vec![
        ("isotropic d=1".into(), {
            let f = IsotropicGaussianFamily::new(one, 0.3, 10.0)?;
            Box::new(move |r| Ok((f.negative_differential_entropy(), entropy_monte_carlo(&f, draws, r)?)))
        }),
        ("isotropic d=2".into(), {
            let f = IsotropicGaussianFamily::new(h2.clone(), 0.08, 10.0)?;
            Box::new(move |r| Ok((f.negative_differential_entropy(), entropy_monte_carlo(&f, draws, r)?)))
        }),
        ("anisotropic d=2".into(), {
            let f = AnisotropicGaussianFamily::new(h2, DMatrix::from_row_slice(2, 2, &[0.33, 0.0, 0.1, 0.4]), 10.0)?;
            Box::new(move |r| Ok((f.negative_differential_entropy(), entropy_monte_carlo(&f, draws, r)?)))
        }),
    ];
    for (k, (name, case)) in cases.iter().enumerate() {
        let (closed, mc) = case(RngStream::new(seed, 4000 + k as u64))?;
        let err = (closed - mc).abs();
        report.record(err, || format!("{name}: closed form {closed} vs Monte Carlo {mc}"));
    }
    Ok(report)
}

/// Runs every suite.
pub fn validate(cfg: &ExperimentConfig) -> Result<(ValidationReport, Vec<AuditInstance>)> {
    let v = cfg.validation;
    let settings = AuditSettings {
        delta: cfg.delta,
        ..AuditSettings::default()
    };
    let (audit, rows) = weak_duality_suite(cfg.seed, v.audit_instances, &settings)?;
    let suites = vec![
        gradient_suite(cfg.seed, v.gradient_configs, v.inject_fault)?,
        audit,
        sinkhorn_suite(cfg.seed, v.sinkhorn_instances)?,
        telescoping_suite(cfg.seed, v.mlmc_seeds)?,
        entropy_suite(cfg.seed, v.entropy_draws)?,
    ];
    Ok((
        ValidationReport {
            seed: cfg.seed,
            passed: suites.iter().all(|s| s.passed),
            fault: v.inject_fault,
            suites,
        },
        rows,
    ))
}

/// Writes `report.json` and `audit.csv`; a failed suite is reported as
/// [`Error::ValidationFailed`] after the files are written.
pub fn run_validate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (report, rows) = validate(cfg)?;
    let value = serde_json::to_value(&report)?;
    let summary = json!({
        "experiment": "validate",
        "seed": cfg.seed,
        "passed": report.passed,
        "suites": report.suites.iter().map(|s| json!({"name": s.name, "passed": s.passed, "max_error": s.max_error, "tolerance": s.tolerance})).collect::<Vec<_>>(),
    });
    let out = write_report(cfg, "report.json", &value, summary, |out| {
        out.write_csv_rows("audit.csv", &rows)
    })?;
    if !report.passed {
        let failed: Vec<&str> = report
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect();
        return Err(Error::ValidationFailed(failed.join(", ")));
    }
    Ok(out)
}
