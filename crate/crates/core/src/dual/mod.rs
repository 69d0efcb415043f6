//! Weak-dual objective of the perturbation-aware robust problem.
//!
//! For a multiplier `λ ≥ 0` the dual value is
//!
//! ```text
//! λ·ε + (1/N)·Σ_i h_{s_i}(λ),
//! h_s(λ) = ∫∫ ℓ((x, y), g) − λ·c(s, (x, y)) dπ_q(y | x) dμ*_X(x) − λ·δ·∫ log p_q dπ_q
//! ```
//!
//! evaluated at a shared perturbation parameter `q`. The transport and loss
//! parts are Monte Carlo averages over `x` drawn uniformly from the atoms of
//! `μ*_X` and reparametrized Gaussian draws for `y`; the entropy part uses the
//! closed form. All draws for anchor `i` come from `rng.substream(i)`, so an
//! estimate with `k` samples reuses the first `k/2` draws of one with `k`
//! samples (common random numbers across sample sizes).

mod spectral;

pub use spectral::SpectralQuadraticDual;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, invalid, Result};
use crate::model::{pair_cost_unchecked, quadratic_loss, DualProblem, EmpiricalJoint, Reconstructor};
use crate::perturbation::PerturbationFamily;
use crate::rng::RngStream;

/// One integration point of `h_s`: the anchor `s`, the drawn `x`, the
/// standard normal `z` and the perturbed measurement `y = H·x + A(q)·z`.
#[derive(Debug, Clone)]
pub struct InnerIntegrandSample {
    pub anchor: usize,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

/// Monte Carlo estimate of the dual objective and its pathwise gradients.
#[derive(Debug, Clone)]
pub struct DualEstimate {
    pub value: f64,
    /// Monte Carlo standard error of `value` (inner sampling only).
    pub std_error: f64,
    pub grad_g: DMatrix<f64>,
    /// Total gradient in `q`, entropy term included.
    pub grad_q: Vec<f64>,
    /// The closed-form entropy contribution to `grad_q`.
    pub grad_q_entropy: Vec<f64>,
    /// `h` estimate per evaluated anchor, in the order the anchors were given.
    pub per_anchor: Vec<f64>,
    pub samples_per_anchor: usize,
}

/// Anything that can produce common-random-number estimates of the dual
/// objective for a batch of anchors.
pub trait DualModel<F: PerturbationFamily>: Sync {
    fn problem(&self) -> &DualProblem;
    fn anchor_count(&self) -> usize;
    fn estimate(
        &self,
        g: &DMatrix<f64>,
        family: &F,
        lambda: f64,
        anchors: &[usize],
        samples: usize,
        rng: RngStream,
    ) -> Result<DualEstimate>;
}

/// The plain sampled estimator: loss, transport cost and their gradients are
/// all averaged over reparametrized draws.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloDual<'a> {
    pub problem: DualProblem,
    pub mu_star: &'a EmpiricalJoint,
}

impl<'a> MonteCarloDual<'a> {
    pub fn new(problem: DualProblem, mu_star: &'a EmpiricalJoint) -> Self {
        Self { problem, mu_star }
    }
}

struct AnchorAccum {
    mean: f64,
    var: f64,
    grad_g: DMatrix<f64>,
    grad_scale: DMatrix<f64>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            "lambda",
            format!("multiplier must be finite and >= 0, got {lambda}"),
        ))
    }
}

fn check_shapes<F: PerturbationFamily>(g: &DMatrix<f64>, family: &F, mu: &EmpiricalJoint) -> Result<()> {
    check_dim("g rows", mu.x_dim(), g.nrows())?;
    check_dim("g cols", mu.y_dim(), g.ncols())?;
    check_dim("family x_dim", mu.x_dim(), family.x_dim())?;
    check_dim("family y_dim", mu.y_dim(), family.y_dim())
}

/// Draws the `k` integration points used for `anchor` from `rng`.
pub fn draw_inner_samples<F: PerturbationFamily>(
    anchor: usize,
    family: &F,
    mu_star: &EmpiricalJoint,
    samples: usize,
    rng: RngStream,
) -> Vec<InnerIntegrandSample> {
    let mut gen = rng.rng();
    let n = mu_star.len();
    let d = family.y_dim();
    (0..samples)
        .map(|_| {
            let u = gen.random_range(0..n);
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut gen));
            let x = mu_star.x(u).clone();
            let y = family.forward() * &x + family.apply_scale(&z);
            InnerIntegrandSample { anchor, x, z, y }
        })
        .collect()
}

fn anchor_accumulate<F: PerturbationFamily>(
    anchor: usize,
    g: &DMatrix<f64>,
    family: &F,
    lambda: f64,
    mu: &EmpiricalJoint,
    samples: usize,
    rng: RngStream,
) -> AnchorAccum {
    let (xa, ya) = (mu.x(anchor), mu.y(anchor));
    let d = family.y_dim();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut grad_g = DMatrix::zeros(g.nrows(), g.ncols());
    let mut grad_scale = DMatrix::zeros(d, d);
    for s in draw_inner_samples(anchor, family, mu, samples, rng) {
        let residual = g * &s.y - &s.x;
        let cost = pair_cost_unchecked(xa, ya, &s.x, &s.y);
        let f = residual.norm_squared() - lambda * cost;
        sum += f;
        sum_sq += f * f;
        grad_g.ger(2.0, &residual, &s.y, 1.0);
        let mut d_y = g.tr_mul(&residual) * 2.0;
        if cost > 0.0 {
            d_y.axpy(-lambda / cost, &(&s.y - ya), 1.0);
        }
        grad_scale.ger(1.0, &d_y, &s.z, 1.0);
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = if samples > 1 {
        ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
    } else {
        0.0
    };
    AnchorAccum {
        mean,
        var,
        grad_g: grad_g / k,
        grad_scale: grad_scale / k,
    }
}

impl<F: PerturbationFamily> DualModel<F> for MonteCarloDual<'_> {
    fn problem(&self) -> &DualProblem {
        &self.problem
    }

    fn anchor_count(&self) -> usize {
        self.mu_star.len()
    }

    fn estimate(
        &self,
        g: &DMatrix<f64>,
        family: &F,
        lambda: f64,
        anchors: &[usize],
        samples: usize,
        rng: RngStream,
    ) -> Result<DualEstimate> {
        check_lambda(lambda)?;
        if samples == 0 {
            return Err(invalid("samples", "need at least one inner sample"));
        }
        if anchors.is_empty() {
            return Err(invalid("anchors", "need at least one anchor"));
        }
        check_shapes(g, family, self.mu_star)?;
        if let Some(&bad) = anchors.iter().find(|&&a| a >= self.mu_star.len()) {
            return Err(invalid("anchors", format!("index {bad} out of range")));
        }
        let accums: Vec<AnchorAccum> = anchors
            .par_iter()
            .map(|&a| anchor_accumulate(a, g, family, lambda, self.mu_star, samples, rng.substream(a as u64)))
            .collect();

        let entropy_term = -lambda * self.problem.delta * family.negative_differential_entropy();
        let b = anchors.len() as f64;
        let mut grad_g = DMatrix::zeros(g.nrows(), g.ncols());
        let mut grad_scale = DMatrix::zeros(family.y_dim(), family.y_dim());
        let mut per_anchor = Vec::with_capacity(anchors.len());
        let mut var_sum = 0.0;
        for acc in &accums {
            per_anchor.push(acc.mean + entropy_term);
            grad_g += &acc.grad_g;
            grad_scale += &acc.grad_scale;
            var_sum += acc.var;
        }
        grad_g /= b;
        grad_scale /= b;
        let value = lambda * self.problem.epsilon + per_anchor.iter().sum::<f64>() / b;
        let grad_q_entropy: Vec<f64> = family
            .entropy_gradient()
            .iter()
            .map(|e| -lambda * self.problem.delta * e)
            .collect();
        let grad_q = family
            .scale_gradient(&grad_scale)
            .iter()
            .zip(&grad_q_entropy)
            .map(|(s, e)| s + e)
            .collect();
        Ok(DualEstimate {
            value,
            std_error: (var_sum / samples as f64).sqrt() / b,
            grad_g,
            grad_q,
            grad_q_entropy,
            per_anchor,
            samples_per_anchor: samples,
        })
    }
}

/// `ℓ(x, y, g) − λ·c(s, (x, y)) − λ·δ·log p_q(y | x)` at a single point.
pub fn inner_integrand<F: PerturbationFamily>(
    anchor: (&DVector<f64>, &DVector<f64>),
    x: &DVector<f64>,
    y: &DVector<f64>,
    g: &Reconstructor,
    family: &F,
    lambda: f64,
    problem: &DualProblem,
) -> Result<f64> {
    check_lambda(lambda)?;
    let loss = quadratic_loss(x, y, g)?;
    let cost = crate::model::euclidean_pair_cost(anchor, (x, y))?;
    let log_p = family.log_density(x, y)?;
    Ok(loss - lambda * cost - lambda * problem.delta * log_p)
}

/// Per-anchor estimate of `h_s(λ)` at the family's current parameter.
#[derive(Debug, Clone, Copy)]
pub struct HEstimate {
    pub value: f64,
    pub std_error: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_h<F: PerturbationFamily>(
    anchor: usize,
    g: &Reconstructor,
    family: &F,
    lambda: f64,
    problem: &DualProblem,
    mu_star: &EmpiricalJoint,
    samples: usize,
    rng: RngStream,
) -> Result<HEstimate> {
    let est = MonteCarloDual::new(*problem, mu_star).estimate(g.matrix(), family, lambda, &[anchor], samples, rng)?;
    Ok(HEstimate {
        value: est.per_anchor[0],
        std_error: est.std_error,
    })
}

/// Dual objective over all anchors of `μ*`.
pub fn dual_objective<F: PerturbationFamily>(
    g: &Reconstructor,
    family: &F,
    lambda: f64,
    problem: &DualProblem,
    mu_star: &EmpiricalJoint,
    samples: usize,
    rng: RngStream,
) -> Result<DualEstimate> {
    let anchors: Vec<usize> = (0..mu_star.len()).collect();
    MonteCarloDual::new(*problem, mu_star).estimate(g.matrix(), family, lambda, &anchors, samples, rng)
}

/// Axis-aligned box in `Y` used as a finite stand-in for Lebesgue measure.
#[derive(Debug, Clone)]
pub struct BoxReference {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxReference {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("upper", lower.len(), upper.len())?;
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(u > l)) {
            return Err(invalid("box", "upper must exceed lower in every coordinate"));
        }
        Ok(Self { lower, upper })
    }

    pub fn log_volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(l, u)| (u - l).ln())
            .sum()
    }
}

/// Closed-form inner value when the perturbation set is unconstrained:
/// `λδ·log ∫ exp((ℓ − λc)/(λδ)) dη_s`, with `η_s = μ*_X ⊗ Lebesgue(box)`.
///
/// The integral is estimated by uniform sampling on the box and a stabilized
/// log-sum-exp, then rescaled by the box volume so the result is comparable
/// with [`estimate_h`] (whose entropy is measured against Lebesgue measure).
#[allow(clippy::too_many_arguments)]
pub fn sinkhorn_dual_reference(
    anchor: usize,
    g: &Reconstructor,
    lambda: f64,
    problem: &DualProblem,
    mu_star: &EmpiricalJoint,
    reference: &BoxReference,
    samples: usize,
    rng: RngStream,
) -> Result<f64> {
    sinkhorn_reference_impl(anchor, g, lambda, problem, mu_star, reference, samples, rng, true)
}

#[allow(clippy::too_many_arguments)]
fn sinkhorn_reference_impl(
    anchor: usize,
    g: &Reconstructor,
    lambda: f64,
    problem: &DualProblem,
    mu_star: &EmpiricalJoint,
    reference: &BoxReference,
    samples: usize,
    rng: RngStream,
    stabilized: bool,
) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(invalid(
            "lambda",
            format!("must be > 0 for the unconstrained dual, got {lambda}"),
        ));
    }
    if samples == 0 {
        return Err(invalid("samples", "need at least one sample"));
    }
    check_dim("box", mu_star.y_dim(), reference.lower.len())?;
    let temp = lambda * problem.delta;
    let (xa, ya) = (mu_star.x(anchor), mu_star.y(anchor));
    let mut gen = rng.rng();
    let exponents: Vec<f64> = (0..samples)
        .map(|_| {
            let x = mu_star.x(gen.random_range(0..mu_star.len()));
            let y = DVector::from_fn(reference.lower.len(), |i, _| {
                gen.random_range(reference.lower[i]..reference.upper[i])
            });
            let loss = (g.matrix() * &y - x).norm_squared();
            (loss - lambda * pair_cost_unchecked(xa, ya, x, &y)) / temp
        })
        .collect();
    let log_mean = if stabilized {
        let top = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + (exponents.iter().map(|e| (e - top).exp()).sum::<f64>() / samples as f64).ln()
    } else {
        (exponents.iter().map(|e| e.exp()).sum::<f64>() / samples as f64).ln()
    };
    Ok(temp * (log_mean + reference.log_volume()))
}

#[cfg(test)]
mod tests;
