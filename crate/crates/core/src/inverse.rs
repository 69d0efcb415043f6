//! Forward operators, the Laplacian-regularized Tikhonov baseline, and image
//! quality metrics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::model::Reconstructor;
use crate::optimizer::{trisect, Boundary};

/// Side length of MNIST images.
pub const IMAGE_SIDE: usize = 28;

/// Linear map `X → Y`.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOperator {
    Dense(DMatrix<f64>),
    /// Valid-mode 2-D correlation of a `side × side` image with a 3×3 kernel,
    /// producing a `(side−2) × (side−2)` image. Images are row-major vectors.
    Convolution {
        kernel: [[f64; 3]; 3],
        side: usize,
    },
}

impl ForwardOperator {
    pub fn blur(kernel: [[f64; 3]; 3]) -> Self {
        Self::Convolution {
            kernel,
            side: IMAGE_SIDE,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Dense(h) => h.ncols(),
            Self::Convolution { side, .. } => side * side,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Dense(h) => h.nrows(),
            Self::Convolution { side, .. } => (side - 2) * (side - 2),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", self.in_dim(), x.len())?;
        Ok(match self {
            Self::Dense(h) => h * x,
            Self::Convolution { kernel, side } => {
                let out = side - 2;
                DVector::from_fn(out * out, |k, _| {
                    let (r, c) = (k / out, k % out);
                    let mut acc = 0.0;
                    for (dr, row) in kernel.iter().enumerate() {
                        for (dc, w) in row.iter().enumerate() {
                            acc += w * x[(r + dr) * side + c + dc];
                        }
                    }
                    acc
                })
            }
        })
    }

    /// The operator as an explicit `out_dim × in_dim` matrix.
    pub fn materialize(&self) -> DMatrix<f64> {
        match self {
            Self::Dense(h) => h.clone(),
            Self::Convolution { kernel, side } => {
                let out = side - 2;
                let mut m = DMatrix::zeros(out * out, side * side);
                for r in 0..out {
                    for c in 0..out {
                        for (dr, row) in kernel.iter().enumerate() {
                            for (dc, w) in row.iter().enumerate() {
                                m[(r * out + c, (r + dr) * side + c + dc)] = *w;
                            }
                        }
                    }
                }
                m
            }
        }
    }
}

/// Normalized samples of `exp(−(i²+j²)/(2·bandwidth²))` on `{−1,0,1}²`.
pub fn gaussian_kernel_3x3(bandwidth: f64) -> Result<[[f64; 3]; 3]> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid(
            "bandwidth",
            format!("must be positive and finite, got {bandwidth}"),
        ));
    }
    let mut k = [[0.0; 3]; 3];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
            *w = (-(di * di + dj * dj) / (2.0 * bandwidth * bandwidth)).exp();
        }
    }
    let total: f64 = k.iter().flatten().sum();
    k.iter_mut().flatten().for_each(|w| *w /= total);
    Ok(k)
}

/// 5-point Laplacian on a `side × side` grid with replicate (Neumann)
/// boundaries: out-of-grid neighbours equal the centre pixel, so constants
/// span the null space.
pub fn neumann_laplacian(side: usize) -> DMatrix<f64> {
    let n = side * side;
    let mut l = DMatrix::zeros(n, n);
    for r in 0..side {
        for c in 0..side {
            let k = r * side + c;
            let neighbours = [
                (r > 0).then(|| k - side),
                (r + 1 < side).then(|| k + side),
                (c > 0).then(|| k - 1),
                (c + 1 < side).then(|| k + 1),
            ];
            for nb in neighbours.into_iter().flatten() {
                l[(k, nb)] += 1.0;
                l[(k, k)] -= 1.0;
            }
        }
    }
    l
}

/// Precomputed normal-equation blocks for `g = (HᵀH + λ·LᵀL)⁻¹·Hᵀ`.
#[derive(Debug, Clone)]
pub struct TikhonovInverse {
    hth: DMatrix<f64>,
    ltl: DMatrix<f64>,
    ht: DMatrix<f64>,
}

impl TikhonovInverse {
    pub fn new(h: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<Self> {
        check_dim("regularizer cols", h.ncols(), l.ncols())?;
        Ok(Self {
            hth: h.tr_mul(h),
            ltl: l.tr_mul(l),
            ht: h.transpose(),
        })
    }

    pub fn solve(&self, lambda_reg: f64) -> Result<Reconstructor> {
        if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
            return Err(invalid(
                "lambda_reg",
                format!("must be finite and >= 0, got {lambda_reg}"),
            ));
        }
        let system = &self.hth + &self.ltl * lambda_reg;
        let chol = system
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("HᵀH + {lambda_reg}·LᵀL is not positive definite")))?;
        Reconstructor::new(chol.solve(&self.ht))
    }
}

/// `(HᵀH + λ·LᵀL)⁻¹·Hᵀ`.
pub fn tikhonov_inverse(h: &DMatrix<f64>, l: &DMatrix<f64>, lambda_reg: f64) -> Result<Reconstructor> {
    TikhonovInverse::new(h, l)?.solve(lambda_reg)
}

/// Result of the regularization-parameter search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TikhonovFit {
    pub lambda_reg: f64,
    pub mse: f64,
    pub boundary: Option<Boundary>,
}

/// Mean over pairs of `mse(g·y, x)`.
pub fn dataset_mse(g: &Reconstructor, clean: &[DVector<f64>], measured: &[DVector<f64>]) -> Result<f64> {
    check_dim("measured", clean.len(), measured.len())?;
    if clean.is_empty() {
        return Err(invalid("dataset", "need at least one pair"));
    }
    let errs: Vec<f64> = clean
        .par_iter()
        .zip(measured.par_iter())
        .map(|(x, y)| g.apply(y).and_then(|r| mse(r.as_slice(), x.as_slice())))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Trisection on `log λ` over `interval` minimizing the dataset MSE of the
/// Tikhonov inverse applied to `measured`.
pub fn fit_tikhonov_lambda(
    h: &DMatrix<f64>,
    l: &DMatrix<f64>,
    clean: &[DVector<f64>],
    measured: &[DVector<f64>],
    interval: (f64, f64),
    tol: f64,
) -> Result<TikhonovFit> {
    if clean.is_empty() {
        return Err(invalid("dataset", "need at least one pair"));
    }
    let (lo, hi) = interval;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) || !(tol > 0.0) {
        return Err(invalid(
            "interval",
            format!("need 0 < lo < hi and tol > 0, got [{lo}, {hi}], {tol}"),
        ));
    }
    let system = TikhonovInverse::new(h, l)?;
    let out = trisect(lo, hi, tol, 200, true, |lambda| {
        let g = system.solve(lambda)?;
        Ok((dataset_mse(&g, clean, measured)?, 0.0))
    })?;
    Ok(TikhonovFit {
        lambda_reg: out.best,
        mse: out.value,
        boundary: out.boundary,
    })
}

/// Mean squared entrywise difference.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("b", a.len(), b.len())?;
    if a.is_empty() {
        return Err(invalid("a", "empty input"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let t = i as f64 - SSIM_RADIUS as f64;
        *v = (-0.5 * t * t / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean local structural similarity over all fully contained 11×11 Gaussian
/// windows (σ = 1.5), with `C1 = 0.01²`, `C2 = 0.03²` and unit dynamic range.
pub fn ssim(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            operand: "ssim image",
            expected: a.len(),
            found: b.len(),
        });
    }
    let (rows, cols) = a.shape();
    let span = 2 * SSIM_RADIUS + 1;
    if rows < span || cols < span {
        return Err(invalid("ssim image", format!("needs at least {span}×{span} pixels")));
    }
    let w = ssim_window();
    let (out_r, out_c) = (rows - span + 1, cols - span + 1);
    let mut total = 0.0;
    for r in 0..out_r {
        for c in 0..out_c {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..span {
                for j in 0..span {
                    let wt = w[i] * w[j];
                    let (x, y) = (a[(r + i, c + j)], b[(r + i, c + j)]);
                    ma += wt * x;
                    mb += wt * y;
                    aa += wt * x * x;
                    bb += wt * y * y;
                    ab += wt * x * y;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (out_r * out_c) as f64)
}

/// Reshapes a row-major vector into a `side × side` image.
pub fn as_image(v: &DVector<f64>, side: usize) -> Result<DMatrix<f64>> {
    check_dim("image", side * side, v.len())?;
    Ok(DMatrix::from_row_slice(side, side, v.as_slice()))
}

#[cfg(test)]
mod tests;
