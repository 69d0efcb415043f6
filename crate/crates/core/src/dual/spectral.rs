//! Dual estimator for large quadratic problems with isotropic perturbations.
//!
//! With `ℓ = ‖g·y − x‖²`, `x ~ μ*_X` and `y = H·x + √v·z`, the loss expectation
//! is available in closed form:
//!
//! ```text
//! E ℓ = tr(g·(H·A·Hᵀ + v·I)·gᵀ) − 2·tr(gᵀ·A·Hᵀ) + tr(A),   A = E[x·xᵀ]
//! ```
//!
//! Rotating the columns of `g` into the eigenbasis `V` of `H·A·Hᵀ`
//! (`g̃ = g·V`) makes the loss separable per column, so the loss and its
//! gradient cost `O(n·m)` instead of a dense product per sample. Only the
//! transport term, which does not depend on `g`, is sampled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use super::{check_lambda, DualEstimate, DualModel};
use crate::error::{check_dim, invalid, Result};
use crate::model::{DualProblem, EmpiricalJoint};
use crate::perturbation::{IsotropicGaussianFamily, PerturbationFamily};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct SpectralQuadraticDual {
    problem: DualProblem,
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
    /// `A·Hᵀ·V`.
    cross: DMatrix<f64>,
    trace_second_moment: f64,
    y_dim: usize,
    /// `‖x̄_i − x_u‖²` for every anchor `i` and atom `u`.
    x_gap_sq: DMatrix<f64>,
    /// `‖ȳ_i − H·x_u‖²`.
    y_gap_sq: DMatrix<f64>,
}

impl SpectralQuadraticDual {
    pub fn new(problem: DualProblem, mu_star: &EmpiricalJoint, forward: &DMatrix<f64>) -> Result<Self> {
        check_dim("forward cols", mu_star.x_dim(), forward.ncols())?;
        check_dim("forward rows", mu_star.y_dim(), forward.nrows())?;
        let n = mu_star.len();
        // A = X·Xᵀ/N with X the n×N atom matrix; H·A·Hᵀ = (H·X)(H·X)ᵀ/N.
        let x_mat = DMatrix::from_columns(mu_star.xs());
        let hx_mat = forward * &x_mat;
        let moment_y = &hx_mat * hx_mat.transpose() / n as f64;
        let eig = moment_y.symmetric_eigen();
        let basis = eig.eigenvectors;
        let cross = &x_mat * (hx_mat.transpose() * &basis) / n as f64;
        let trace_second_moment = x_mat.norm_squared() / n as f64;
        let atoms_hx: Vec<DVector<f64>> = hx_mat.column_iter().map(|c| c.into_owned()).collect();
        let anchors_y = mu_star.ys();
        let x_gap_sq = DMatrix::from_fn(n, n, |i, u| (mu_star.x(i) - mu_star.x(u)).norm_squared());
        let y_gap_sq = DMatrix::from_fn(n, n, |i, u| (&anchors_y[i] - &atoms_hx[u]).norm_squared());
        Ok(Self {
            problem,
            eigenvalues: eig.eigenvalues,
            basis,
            cross,
            trace_second_moment,
            y_dim: forward.nrows(),
            x_gap_sq,
            y_gap_sq,
        })
    }

    /// Eigenvalues of `H·A·Hᵀ`, matching the rotated columns of `g`.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// `g ↦ g·V`.
    pub fn to_rotated(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        g * &self.basis
    }

    /// `g̃ ↦ g̃·Vᵀ`.
    pub fn from_rotated(&self, g_rot: &DMatrix<f64>) -> DMatrix<f64> {
        g_rot * self.basis.transpose()
    }

    /// Exact `E ℓ` and its gradient in rotated coordinates.
    pub fn loss_moments(&self, g_rot: &DMatrix<f64>, variance: f64) -> (f64, DMatrix<f64>) {
        let mut loss = self.trace_second_moment;
        let mut grad = DMatrix::zeros(g_rot.nrows(), g_rot.ncols());
        for j in 0..g_rot.ncols() {
            let w = self.eigenvalues[j].max(0.0) + variance;
            let (col, cross) = (g_rot.column(j), self.cross.column(j));
            let mut out = grad.column_mut(j);
            for k in 0..col.len() {
                let (a, c) = (col[k], cross[k]);
                loss += w * a * a - 2.0 * a * c;
                out[k] = 2.0 * (w * a - c);
            }
        }
        (loss, grad)
    }

    /// Sampled transport cost for one anchor: mean, variance and `∂/∂v` of the mean.
    ///
    /// Writing `z = ξ·ŵ + z⊥` with `ŵ = w/‖w‖` gives `w·z = ‖w‖·ξ` and
    /// `‖z‖² = ξ² + χ²_{d−1}` with independent `ξ ~ N(0, 1)`, so each draw
    /// needs two scalars instead of a `d`-vector.
    fn anchor_cost(&self, anchor: usize, variance: f64, samples: usize, rng: RngStream) -> (f64, f64, f64) {
        let mut gen = rng.rng();
        let n = self.x_gap_sq.ncols();
        let d = self.y_dim;
        let chi = (d > 1).then(|| ChiSquared::new((d - 1) as f64).expect("positive degrees of freedom"));
        let sd = variance.sqrt();
        let (mut sum, mut sum_sq, mut dsum) = (0.0, 0.0, 0.0);
        for _ in 0..samples {
            let u = gen.random_range(0..n);
            let xi: f64 = StandardNormal.sample(&mut gen);
            let rest = chi.as_ref().map_or(0.0, |c| c.sample(&mut gen));
            // w = ȳ − H·x_u;  ‖w − √v·z‖² = ‖w‖² − 2√v·w·z + v·‖z‖²
            let wz = self.y_gap_sq[(anchor, u)].sqrt() * xi;
            let zz = xi * xi + rest;
            let sq = self.x_gap_sq[(anchor, u)] + self.y_gap_sq[(anchor, u)] - 2.0 * sd * wz + variance * zz;
            let c = sq.max(0.0).sqrt();
            sum += c;
            sum_sq += c * c;
            if c > 0.0 {
                dsum += (variance * zz - sd * wz) / (2.0 * variance * c);
            }
        }
        let k = samples as f64;
        let mean = sum / k;
        let var = if samples > 1 {
            ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
        } else {
            0.0
        };
        (mean, var, dsum / k)
    }
}

impl DualModel<IsotropicGaussianFamily> for SpectralQuadraticDual {
    fn problem(&self) -> &DualProblem {
        &self.problem
    }

    fn anchor_count(&self) -> usize {
        self.x_gap_sq.nrows()
    }

    /// `g` is expected in rotated coordinates (see [`Self::to_rotated`]); the
    /// returned `grad_g` is in the same coordinates.
    fn estimate(
        &self,
        g: &DMatrix<f64>,
        family: &IsotropicGaussianFamily,
        lambda: f64,
        anchors: &[usize],
        samples: usize,
        rng: RngStream,
    ) -> Result<DualEstimate> {
        check_lambda(lambda)?;
        if samples == 0 || anchors.is_empty() {
            return Err(invalid("samples", "need at least one anchor and one sample"));
        }
        check_dim("g cols", self.eigenvalues.len(), g.ncols())?;
        check_dim("g rows", self.cross.nrows(), g.nrows())?;
        if let Some(&bad) = anchors.iter().find(|&&a| a >= self.anchor_count()) {
            return Err(invalid("anchors", format!("index {bad} out of range")));
        }
        let v = family.variance();
        let (loss, grad_g) = self.loss_moments(g, v);
        let costs: Vec<(f64, f64, f64)> = anchors
            .par_iter()
            .map(|&a| self.anchor_cost(a, v, samples, rng.substream(a as u64)))
            .collect();
        let entropy_term = -lambda * self.problem.delta * family.negative_differential_entropy();
        let b = anchors.len() as f64;
        let per_anchor: Vec<f64> = costs.iter().map(|c| loss - lambda * c.0 + entropy_term).collect();
        let var_sum: f64 = costs.iter().map(|c| c.1).sum();
        let dcost: f64 = costs.iter().map(|c| c.2).sum::<f64>() / b;
        let grad_q_entropy = vec![-lambda * self.problem.delta * family.entropy_gradient()[0]];
        let grad_q = vec![g.norm_squared() - lambda * dcost + grad_q_entropy[0]];
        Ok(DualEstimate {
            value: lambda * self.problem.epsilon + per_anchor.iter().sum::<f64>() / b,
            std_error: lambda * (var_sum / samples as f64).sqrt() / b,
            grad_g,
            grad_q,
            grad_q_entropy,
            per_anchor,
            samples_per_anchor: samples,
        })
    }
}
