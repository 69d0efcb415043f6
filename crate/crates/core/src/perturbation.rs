//! Admissible perturbation sets for `Y | X`.
//!
//! A family describes conditional laws `π(· | x)` on `Y` parametrized by a
//! vector `q` living in a box-like domain `Q`. The two concrete families are
//! location-scale Gaussians centred at the noiseless measurement `H·x`:
//! `y = H·x + A(q)·z` with `z ~ N(0, I)` and covariance `Σ = A·Aᵀ`.
//! Gradients with respect to `q` are pathwise through `A(q)`.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::RngStream;

/// Smallest admissible variance (isotropic) or diagonal Cholesky entry squared.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// One reparametrized draw: the standard normal `z` and `y = H·x + A·z`.
#[derive(Debug, Clone)]
pub struct ConditionalDraw {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

pub trait PerturbationFamily: Clone + Send + Sync {
    /// Dimension of `Y`.
    fn y_dim(&self) -> usize;
    /// Dimension of `X`.
    fn x_dim(&self) -> usize;
    fn forward(&self) -> &DMatrix<f64>;
    fn sigma_max(&self) -> f64;

    fn params(&self) -> Vec<f64>;
    /// Same family at a new parameter; errors if `q` is not admissible.
    fn with_params(&self, q: &[f64]) -> Result<Self>;
    /// Euclidean-style projection onto the admissible domain.
    fn project(&self, q: &[f64]) -> Vec<f64>;
    /// Zeroes the components of an ascent direction that would leave the
    /// domain at the current (boundary) parameter.
    fn projected_gradient(&self, grad: &[f64]) -> Vec<f64>;

    /// `A·z`.
    fn apply_scale(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Chain rule through `A(q)`: maps `∂f/∂A` to `∂f/∂q`.
    fn scale_gradient(&self, d_scale: &DMatrix<f64>) -> Vec<f64>;
    fn covariance(&self) -> DMatrix<f64>;
    fn log_det_covariance(&self) -> f64;
    /// `rᵀ Σ⁻¹ r`.
    fn mahalanobis_sq(&self, r: &DVector<f64>) -> f64;
    /// `∂/∂q` of [`negative_differential_entropy`](Self::negative_differential_entropy).
    fn entropy_gradient(&self) -> Vec<f64>;

    fn mean(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", self.x_dim(), x.len())?;
        Ok(self.forward() * x)
    }

    fn sample_conditional(&self, x: &DVector<f64>, count: usize, rng: RngStream) -> Result<Vec<ConditionalDraw>> {
        let mean = self.mean(x)?;
        let mut gen = rng.rng();
        let d = self.y_dim();
        Ok((0..count)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut gen));
                let y = &mean + self.apply_scale(&z);
                ConditionalDraw { z, y }
            })
            .collect())
    }

    /// `log N(H·x, Σ)(y)`, the log-density against Lebesgue measure on `Y`.
    fn log_density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_dim("y", self.y_dim(), y.len())?;
        let r = y - self.mean(x)?;
        let d = self.y_dim() as f64;
        Ok(-0.5 * d * (2.0 * PI).ln() - 0.5 * self.log_det_covariance() - 0.5 * self.mahalanobis_sq(&r))
    }

    /// `∫ log p · p dy = −(d/2)·log(2πe) − ½·log det Σ`; independent of the mean.
    fn negative_differential_entropy(&self) -> f64 {
        let d = self.y_dim() as f64;
        -0.5 * d * (2.0 * PI * E).ln() - 0.5 * self.log_det_covariance()
    }
}

/// `N(H·x, v·I)` with scalar variance `v ∈ [VARIANCE_FLOOR, M]`.
#[derive(Debug, Clone)]
pub struct IsotropicGaussianFamily {
    forward: DMatrix<f64>,
    variance: f64,
    sigma_max: f64,
}

impl IsotropicGaussianFamily {
    pub fn new(forward: DMatrix<f64>, variance: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_max > VARIANCE_FLOOR) || !sigma_max.is_finite() {
            return Err(invalid(
                "sigma_max",
                format!("must exceed {VARIANCE_FLOOR}, got {sigma_max}"),
            ));
        }
        let family = Self {
            forward,
            variance: 1.0,
            sigma_max,
        };
        family.with_params(&[variance])
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Standard deviation `√v` of each coordinate.
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

impl PerturbationFamily for IsotropicGaussianFamily {
    fn y_dim(&self) -> usize {
        self.forward.nrows()
    }

    fn x_dim(&self) -> usize {
        self.forward.ncols()
    }

    fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn params(&self) -> Vec<f64> {
        vec![self.variance]
    }

    fn with_params(&self, q: &[f64]) -> Result<Self> {
        check_dim("q", 1, q.len())?;
        let v = q[0];
        if !(v > 0.0) || v > self.sigma_max || !v.is_finite() {
            return Err(invalid(
                "variance",
                format!("must lie in (0, {}], got {v}", self.sigma_max),
            ));
        }
        Ok(Self {
            forward: self.forward.clone(),
            variance: v,
            sigma_max: self.sigma_max,
        })
    }

    fn project(&self, q: &[f64]) -> Vec<f64> {
        let v = if q[0].is_nan() { VARIANCE_FLOOR } else { q[0] };
        vec![v.clamp(VARIANCE_FLOOR, self.sigma_max)]
    }

    fn projected_gradient(&self, grad: &[f64]) -> Vec<f64> {
        let g = grad[0];
        let blocked = (self.variance >= self.sigma_max && g > 0.0) || (self.variance <= VARIANCE_FLOOR && g < 0.0);
        vec![if blocked { 0.0 } else { g }]
    }

    fn apply_scale(&self, z: &DVector<f64>) -> DVector<f64> {
        z * self.variance.sqrt()
    }

    fn scale_gradient(&self, d_scale: &DMatrix<f64>) -> Vec<f64> {
        // A = √v·I, so ∂f/∂v = tr(∂f/∂A) / (2√v).
        vec![d_scale.trace() / (2.0 * self.variance.sqrt())]
    }

    fn covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.y_dim(), self.y_dim()) * self.variance
    }

    fn log_det_covariance(&self) -> f64 {
        self.y_dim() as f64 * self.variance.ln()
    }

    fn mahalanobis_sq(&self, r: &DVector<f64>) -> f64 {
        r.norm_squared() / self.variance
    }

    fn entropy_gradient(&self) -> Vec<f64> {
        vec![-(self.y_dim() as f64) / (2.0 * self.variance)]
    }
}

/// `N(H·x, L·Lᵀ)` with lower-triangular `L`, positive diagonal and
/// `λ_max(L·Lᵀ) ≤ M`. The parameter vector packs the lower triangle row by row:
/// `(L₀₀, L₁₀, L₁₁, L₂₀, …)`.
#[derive(Debug, Clone)]
pub struct AnisotropicGaussianFamily {
    forward: DMatrix<f64>,
    chol: DMatrix<f64>,
    sigma_max: f64,
}

impl AnisotropicGaussianFamily {
    pub fn new(forward: DMatrix<f64>, chol: DMatrix<f64>, sigma_max: f64) -> Result<Self> {
        let d = forward.nrows();
        if chol.nrows() != d || chol.ncols() != d {
            return Err(Error::DimensionMismatch {
                operand: "chol",
                expected: d,
                found: chol.nrows().max(chol.ncols()),
            });
        }
        if !(sigma_max > VARIANCE_FLOOR) || !sigma_max.is_finite() {
            return Err(invalid(
                "sigma_max",
                format!("must exceed {VARIANCE_FLOOR}, got {sigma_max}"),
            ));
        }
        let family = Self {
            forward,
            chol: DMatrix::identity(d, d),
            sigma_max,
        };
        family.with_params(&pack_lower(&chol))
    }

    /// Starts from `Σ = v·I`.
    pub fn isotropic_start(forward: DMatrix<f64>, variance: f64, sigma_max: f64) -> Result<Self> {
        let d = forward.nrows();
        Self::new(forward, DMatrix::identity(d, d) * variance.sqrt(), sigma_max)
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    fn diag_floor() -> f64 {
        VARIANCE_FLOOR.sqrt()
    }

    fn max_eigenvalue(chol: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let sigma = chol * chol.transpose();
        let eig = sigma.symmetric_eigen();
        let (idx, &val) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        (val, eig.eigenvectors.column(idx).into_owned())
    }
}

pub(crate) fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn unpack_lower(q: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            m[(i, j)] = q[k];
            k += 1;
        }
    }
    m
}

impl PerturbationFamily for AnisotropicGaussianFamily {
    fn y_dim(&self) -> usize {
        self.forward.nrows()
    }

    fn x_dim(&self) -> usize {
        self.forward.ncols()
    }

    fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn params(&self) -> Vec<f64> {
        pack_lower(&self.chol)
    }

    fn with_params(&self, q: &[f64]) -> Result<Self> {
        let d = self.y_dim();
        check_dim("q", d * (d + 1) / 2, q.len())?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(invalid("chol", "entries must be finite"));
        }
        let chol = unpack_lower(q, d);
        if let Some(i) = (0..d).find(|&i| !(chol[(i, i)] > 0.0)) {
            return Err(invalid("chol", format!("diagonal entry {i} must be positive")));
        }
        let (top, _) = Self::max_eigenvalue(&chol);
        if top > self.sigma_max * (1.0 + 1e-12) {
            return Err(invalid(
                "chol",
                format!("largest covariance eigenvalue {top} exceeds {}", self.sigma_max),
            ));
        }
        Ok(Self {
            forward: self.forward.clone(),
            chol,
            sigma_max: self.sigma_max,
        })
    }

    fn project(&self, q: &[f64]) -> Vec<f64> {
        let d = self.y_dim();
        let mut chol = unpack_lower(q, d);
        chol.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = 0.0);
        for i in 0..d {
            chol[(i, i)] = chol[(i, i)].max(Self::diag_floor());
        }
        // re-clamping after a rescale raises λ_max by a vanishing amount, so a
        // few rounds settle within the admissibility tolerance
        for _ in 0..8 {
            let (top, _) = Self::max_eigenvalue(&chol);
            if top <= self.sigma_max {
                break;
            }
            chol *= (self.sigma_max / top).sqrt();
            for i in 0..d {
                chol[(i, i)] = chol[(i, i)].max(Self::diag_floor());
            }
        }
        pack_lower(&chol)
    }

    fn projected_gradient(&self, grad: &[f64]) -> Vec<f64> {
        let d = self.y_dim();
        let mut g = unpack_lower(grad, d);
        for i in 0..d {
            if self.chol[(i, i)] <= Self::diag_floor() && g[(i, i)] < 0.0 {
                g[(i, i)] = 0.0;
            }
        }
        // every eigenvalue on the boundary contributes a constraint normal
        // ∂λ_k/∂L = 2·u_k·u_kᵀ·L (lower triangle); outward components along an
        // orthonormalized set of normals are removed
        let eig = (&self.chol * self.chol.transpose()).symmetric_eigen();
        let mut basis: Vec<DMatrix<f64>> = Vec::new();
        for (k, &val) in eig.eigenvalues.iter().enumerate() {
            if val < self.sigma_max * (1.0 - 1e-9) {
                continue;
            }
            let u = eig.eigenvectors.column(k);
            let mut normal = unpack_lower(&pack_lower(&(u * u.transpose() * &self.chol * 2.0)), d);
            for b in &basis {
                normal -= b * b.dot(&normal);
            }
            let nn = normal.norm();
            if nn > 1e-12 {
                normal /= nn;
                let outward = g.dot(&normal);
                if outward > 0.0 {
                    g -= &normal * outward;
                }
                basis.push(normal);
            }
        }
        pack_lower(&g)
    }

    fn apply_scale(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.chol * z
    }

    fn scale_gradient(&self, d_scale: &DMatrix<f64>) -> Vec<f64> {
        pack_lower(d_scale)
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    fn log_det_covariance(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    fn mahalanobis_sq(&self, r: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .solve_lower_triangular(r)
            .expect("positive diagonal makes L invertible");
        w.norm_squared()
    }

    fn entropy_gradient(&self) -> Vec<f64> {
        let d = self.y_dim();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            g[(i, i)] = -1.0 / self.chol[(i, i)];
        }
        pack_lower(&g)
    }
}
