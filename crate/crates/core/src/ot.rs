//! Entropic optimal transport used to audit perturbations.
//!
//! [`entropic_w1`] solves the discrete entropy-regularized problem by
//! log-domain Sinkhorn iterations. [`perturbation_transport_cost`] estimates
//! the regularized cost of moving the empirical joint to its perturbed
//! counterpart, which is what the ball constraint bounds by `ε`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::model::EmpiricalJoint;
use crate::perturbation::PerturbationFamily;
use crate::rng::RngStream;

/// Finitely supported probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        check_dim("weights", atoms.len(), weights.len())?;
        if atoms.is_empty() {
            return Err(invalid("atoms", "measure needs at least one atom"));
        }
        let dim = atoms[0].len();
        if let Some(a) = atoms.iter().find(|a| a.len() != dim) {
            return Err(Error::DimensionMismatch {
                operand: "atom",
                expected: dim,
                found: a.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("weights", "must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", format!("must sum to 1, got {total}")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<DVector<f64>>) -> Result<Self> {
        let n = atoms.len().max(1);
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Joint masses with cached marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    matrix: DMatrix<f64>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
}

impl TransportPlan {
    fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let row_sums = matrix.row_iter().map(|r| r.sum()).collect();
        let col_sums = matrix.column_iter().map(|c| c.sum()).collect();
        Self {
            matrix,
            row_sums,
            col_sums,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    /// Largest absolute deviation of either marginal from the given weights.
    pub fn marginal_residual(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let rows = self.row_sums.iter().zip(mu.weights()).map(|(a, b)| (a - b).abs());
        let cols = self.col_sums.iter().zip(nu.weights()).map(|(a, b)| (a - b).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Euclidean distances between atoms.
pub fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<DMatrix<f64>> {
    check_dim("atom dimension", mu.atoms[0].len(), nu.atoms[0].len())?;
    Ok(DMatrix::from_fn(mu.len(), nu.len(), |i, j| {
        (&mu.atoms[i] - &nu.atoms[j]).norm()
    }))
}

/// Sinkhorn stopping rule and reference measure.
#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    /// Reference masses `η_ij`; `None` means `μ ⊗ ν`.
    pub reference: Option<DMatrix<f64>>,
    pub max_iters: usize,
    /// Bound on the largest marginal violation at termination.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            reference: None,
            max_iters: 100_000,
            tol: 1e-12,
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// `inf_π ∫ c dπ + δ·KL(π ‖ η)` over plans with marginals `μ`, `ν`.
///
/// Returns the value (transport plus relative-entropy term) and the plan.
pub fn entropic_w1(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    delta: f64,
    opts: &SinkhornOptions,
) -> Result<(f64, TransportPlan)> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid("delta", format!("must be > 0, got {delta}")));
    }
    let cost = cost_matrix(mu, nu)?;
    let (n, m) = cost.shape();
    let eta = match &opts.reference {
        Some(r) => {
            if r.shape() != (n, m) {
                return Err(Error::DimensionMismatch {
                    operand: "reference",
                    expected: n * m,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(invalid("reference", "masses must be finite and nonnegative"));
            }
            r.clone()
        }
        None => DMatrix::from_fn(n, m, |i, j| mu.weights[i] * nu.weights[j]),
    };
    // log kernel: log η_ij − c_ij/δ; zero-mass entries are excluded
    let log_k = DMatrix::from_fn(n, m, |i, j| eta[(i, j)].ln() - cost[(i, j)] / delta);
    let log_mu: Vec<f64> = mu.weights.iter().map(|w| w.ln()).collect();
    let log_nu: Vec<f64> = nu.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan_of = |f: &[f64], g: &[f64]| DMatrix::from_fn(n, m, |i, j| (f[i] + g[j] + log_k[(i, j)]).exp());
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iters {
        for i in 0..n {
            f[i] = if mu.weights[i] > 0.0 {
                log_mu[i] - log_sum_exp((0..m).map(|j| g[j] + log_k[(i, j)]))
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..m {
            g[j] = if nu.weights[j] > 0.0 {
                log_nu[j] - log_sum_exp((0..n).map(|i| f[i] + log_k[(i, j)]))
            } else {
                f64::NEG_INFINITY
            };
        }
        // columns are exact after the g-update; rows carry the violation
        residual = (0..n)
            .map(|i| {
                let row = if mu.weights[i] > 0.0 {
                    log_sum_exp((0..m).map(|j| f[i] + g[j] + log_k[(i, j)])).exp()
                } else {
                    0.0
                };
                (row - mu.weights[i]).abs()
            })
            .fold(0.0, f64::max);
        if residual.is_nan() {
            return Err(invalid("reference", "plan support is empty for some marginal atom"));
        }
        if residual < opts.tol {
            let plan = TransportPlan::from_matrix(plan_of(&f, &g));
            let value = plan_value(plan.matrix(), &cost, &eta, delta);
            return Ok((value, plan));
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iters,
        residual,
    })
}

/// `Σ π_ij c_ij + δ·Σ π_ij log(π_ij/η_ij)` with `0·log 0 = 0`.
pub fn plan_value(plan: &DMatrix<f64>, cost: &DMatrix<f64>, reference: &DMatrix<f64>, delta: f64) -> f64 {
    plan.iter()
        .zip(cost.iter())
        .zip(reference.iter())
        .map(|((&p, &c), &e)| if p > 0.0 { p * c + delta * p * (p / e).ln() } else { 0.0 })
        .sum()
}

/// How the perturbed point is paired with its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `(x_i, y_i) ↦ (x_i, y)` with `y ~ N(H·x_i, Σ)`.
    #[default]
    PerAtom,
    /// `(x_i, y_i) ↦ (x, y)` with `x ~ μ*_X` drawn independently of the anchor,
    /// the coupling whose cost the dual objective penalizes.
    Product,
}

/// Monte Carlo estimate of the regularized transport cost of a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportCost {
    /// Transport term plus `δ·∫ log p dp`.
    pub value: f64,
    pub transport: f64,
    pub entropy_term: f64,
    pub std_error: f64,
}

/// Estimates `(1/N)·Σ_i E[c((x_i, y_i), r)] + δ·∫ log p_q dp_q` for the
/// perturbation `family`, with `r` paired to the anchor by `coupling`.
pub fn perturbation_transport_cost<F: PerturbationFamily>(
    mu_star: &EmpiricalJoint,
    family: &F,
    delta: f64,
    samples_per_atom: usize,
    coupling: Coupling,
    rng: RngStream,
) -> Result<TransportCost> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid("delta", format!("must be > 0, got {delta}")));
    }
    if samples_per_atom == 0 {
        return Err(invalid("samples_per_atom", "need at least one sample"));
    }
    check_dim("family x_dim", mu_star.x_dim(), family.x_dim())?;
    check_dim("family y_dim", mu_star.y_dim(), family.y_dim())?;
    let n = mu_star.len();
    let d = family.y_dim();
    let mut per_atom = Vec::with_capacity(n);
    let mut var_sum = 0.0;
    for i in 0..n {
        let mut gen = rng.substream(i as u64).rng();
        let (xa, ya) = (mu_star.x(i), mu_star.y(i));
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples_per_atom {
            let u = match coupling {
                Coupling::PerAtom => i,
                Coupling::Product => gen.random_range(0..n),
            };
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut gen));
            let x = mu_star.x(u);
            let y = family.forward() * x + family.apply_scale(&z);
            let c = ((xa - x).norm_squared() + (ya - y).norm_squared()).sqrt();
            sum += c;
            sum_sq += c * c;
        }
        let k = samples_per_atom as f64;
        let mean = sum / k;
        if samples_per_atom > 1 {
            var_sum += ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0) / k;
        }
        per_atom.push(mean);
    }
    let transport = per_atom.iter().sum::<f64>() / n as f64;
    let entropy_term = delta * family.negative_differential_entropy();
    Ok(TransportCost {
        value: transport + entropy_term,
        transport,
        entropy_term,
        std_error: var_sum.sqrt() / n as f64,
    })
}
