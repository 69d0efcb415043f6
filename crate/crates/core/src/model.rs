//! Shared domain types: the empirical joint measure, the linear reconstructor
//! and the ingredients of the robust dual problem, plus the squared-error loss
//! and the Euclidean ground cost on `X × Y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// Finite sample cloud `{(x_i, y_i)}` with uniform weights `1/N`.
#[derive(Debug, Clone)]
pub struct EmpiricalJoint {
    xs: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
}

impl EmpiricalJoint {
    pub fn new(xs: Vec<DVector<f64>>, ys: Vec<DVector<f64>>) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("samples", "need at least one (x, y) pair"));
        }
        check_dim("y_samples (count)", xs.len(), ys.len())?;
        let n = xs[0].len();
        let m = ys[0].len();
        for x in &xs {
            check_dim("x_samples", n, x.len())?;
        }
        for y in &ys {
            check_dim("y_samples", m, y.len())?;
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.xs[0].len()
    }

    pub fn y_dim(&self) -> usize {
        self.ys[0].len()
    }

    pub fn x(&self, i: usize) -> &DVector<f64> {
        &self.xs[i]
    }

    pub fn y(&self, i: usize) -> &DVector<f64> {
        &self.ys[i]
    }

    pub fn xs(&self) -> &[DVector<f64>] {
        &self.xs
    }

    pub fn ys(&self) -> &[DVector<f64>] {
        &self.ys
    }

    /// Second moment `E[x xᵀ]` of the X-marginal.
    pub fn x_second_moment(&self) -> DMatrix<f64> {
        let n = self.x_dim();
        let mut acc = DMatrix::zeros(n, n);
        for x in &self.xs {
            acc.ger(1.0, x, x, 1.0);
        }
        acc / self.len() as f64
    }
}

/// Linear reconstructor `g: Y → X`, stored as an `n × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    matrix: DMatrix<f64>,
}

impl Reconstructor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("reconstructor", "entries must be finite"));
        }
        Ok(Self { matrix })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(n, m),
        }
    }

    /// Scaled adjoint `Hᵀ / ‖H‖²_F`, the default starting point of the solver.
    pub fn scaled_adjoint(forward: &DMatrix<f64>) -> Self {
        let fro2 = forward.norm_squared();
        let scale = if fro2 > 0.0 { 1.0 / fro2 } else { 0.0 };
        Self {
            matrix: forward.transpose() * scale,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn x_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn y_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("y", self.y_dim(), y.len())?;
        Ok(&self.matrix * y)
    }
}

/// Ground cost on `S = X × Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundCost {
    /// Unsquared Euclidean norm of the concatenated difference.
    #[default]
    Euclidean,
}

/// Reconstruction loss `ℓ((x, y), g)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `‖g·y − x‖²`.
    #[default]
    Quadratic,
}

/// Reference conditional `η_s` against which entropies are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// `μ*_X ⊗ dy`: the X-marginal of the data times Lebesgue measure on Y.
    #[default]
    DataTimesLebesgue,
}

/// Constants of the entropic Wasserstein-ball problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualProblem {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub cost: GroundCost,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default)]
    pub reference: Reference,
}

impl DualProblem {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(invalid("epsilon", format!("must be finite and >= 0, got {epsilon}")));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(invalid("delta", format!("must be finite and > 0, got {delta}")));
        }
        Ok(Self {
            epsilon,
            delta,
            cost: GroundCost::Euclidean,
            loss: Loss::Quadratic,
            reference: Reference::DataTimesLebesgue,
        })
    }
}

/// `‖g·y − x‖²₂`.
pub fn quadratic_loss(x: &DVector<f64>, y: &DVector<f64>, g: &Reconstructor) -> Result<f64> {
    check_dim("x", g.x_dim(), x.len())?;
    check_dim("y", g.y_dim(), y.len())?;
    Ok((g.matrix() * y - x).norm_squared())
}

/// `2·(g·y − x)·yᵀ`, the gradient of [`quadratic_loss`] with respect to `g`.
pub fn loss_gradient_g(x: &DVector<f64>, y: &DVector<f64>, g: &Reconstructor) -> Result<DMatrix<f64>> {
    check_dim("x", g.x_dim(), x.len())?;
    check_dim("y", g.y_dim(), y.len())?;
    let residual = g.matrix() * y - x;
    Ok(residual * y.transpose() * 2.0)
}

/// Euclidean distance between `(x̄, ȳ)` and `(x, y)` viewed as concatenated vectors.
pub fn euclidean_pair_cost(
    anchor: (&DVector<f64>, &DVector<f64>),
    point: (&DVector<f64>, &DVector<f64>),
) -> Result<f64> {
    check_dim("x", anchor.0.len(), point.0.len())?;
    check_dim("y", anchor.1.len(), point.1.len())?;
    Ok(pair_cost_unchecked(anchor.0, anchor.1, point.0, point.1))
}

pub(crate) fn pair_cost_unchecked(xa: &DVector<f64>, ya: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let dx: f64 = xa.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let dy: f64 = ya.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    (dx + dy).sqrt()
}

impl From<Reconstructor> for DMatrix<f64> {
    fn from(g: Reconstructor) -> Self {
        g.matrix
    }
}

impl TryFrom<DMatrix<f64>> for Reconstructor {
    type Error = Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Reconstructor::new(m)
    }
}
