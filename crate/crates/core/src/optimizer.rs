//! Outer search over the dual multiplier and inner stochastic saddle-point
//! descent over the reconstructor and the perturbation parameter.
//!
//! For fixed `λ` the inner problem `min_g max_q λε + mean_s h_s(λ)` is solved
//! by alternating projected stochastic steps (ascent in `q`, descent in `g`)
//! driven by randomized-truncation multilevel gradient estimates. The outer
//! search over `λ` compares inner-solved objective values at the ends and the
//! middle of a shrinking interval.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dual::{DualEstimate, DualModel};
use crate::error::{invalid, Error, Result};
use crate::model::Reconstructor;
use crate::perturbation::PerturbationFamily;
use crate::rng::RngStream;

const STREAM_BATCH: u64 = 0;
const STREAM_LEVEL: u64 = 1;
/// Substream of an iteration stream that feeds the inner samples.
pub const STREAM_SAMPLES: u64 = 2;
const STREAM_FINAL: u64 = u64::MAX;

/// Objective magnitude beyond which an inner solve is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Level distribution and sample sizes of the multilevel gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmcConfig {
    pub max_level: u32,
    /// `p_ℓ ∝ 2^(−level_decay·ℓ)`. The default 1.0 keeps the weight `1/p_ℓ`
    /// on the deepest level near 7; steeper decay lets a rare deep draw
    /// throw `q` across its whole domain in one step.
    pub level_decay: f64,
    /// Inner samples per anchor at level 0; level `ℓ` uses `base_samples·2^ℓ`.
    pub base_samples: usize,
}

impl Default for MlmcConfig {
    fn default() -> Self {
        Self {
            max_level: 6,
            level_decay: 1.0,
            base_samples: 8,
        }
    }
}

impl MlmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_samples == 0 {
            return Err(invalid("base_samples", "must be at least 1"));
        }
        if self.max_level > 30 {
            return Err(invalid("max_level", format!("{} exceeds 30", self.max_level)));
        }
        if !self.level_decay.is_finite() {
            return Err(invalid("level_decay", "must be finite"));
        }
        let p = self.raw_weights();
        if p.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid(
                "level_decay",
                "level probabilities must be positive and finite",
            ));
        }
        Ok(())
    }

    fn raw_weights(&self) -> Vec<f64> {
        (0..=self.max_level)
            .map(|l| (-self.level_decay * l as f64 * std::f64::consts::LN_2).exp())
            .collect()
    }

    /// Normalized `p_0..p_Lmax`.
    pub fn level_probabilities(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let w = self.raw_weights();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / total).collect())
    }

    pub fn samples_at(&self, level: u32) -> usize {
        self.base_samples << level
    }
}

/// Inner alternating descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsmdConfig {
    pub lr_g: f64,
    pub lr_q: f64,
    pub iters: usize,
    /// Anchors per stochastic step; all anchors when this exceeds `N`.
    pub batch_anchors: usize,
    /// Scale step sizes by `1/√(t+1)`.
    pub step_decay: bool,
    /// Inner samples per anchor for the final full-data objective estimate.
    pub final_samples: usize,
    /// Divide the `q` step by `max(1, λ)`. The transport and entropy parts of
    /// the `q`-gradient grow linearly in `λ`, so without this a fixed step
    /// overshoots at large multipliers. Off by default; the validation audit
    /// turns it on together with a larger `lr_q`.
    pub normalize_q_step: bool,
    pub mlmc: MlmcConfig,
}

impl Default for BsmdConfig {
    fn default() -> Self {
        Self {
            lr_g: 0.05,
            lr_q: 0.05,
            iters: 2000,
            batch_anchors: 32,
            step_decay: true,
            final_samples: 256,
            normalize_q_step: false,
            mlmc: MlmcConfig::default(),
        }
    }
}

impl BsmdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_g", self.lr_g), ("lr_q", self.lr_q)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(invalid(name, format!("must be finite and >= 0, got {lr}")));
            }
        }
        if self.batch_anchors == 0 || self.final_samples == 0 {
            return Err(invalid(
                "batch_anchors",
                "batch and final sample counts must be positive",
            ));
        }
        self.mlmc.validate()
    }

    fn step(&self, base: f64, t: usize) -> f64 {
        if self.step_decay {
            base / ((t + 1) as f64).sqrt()
        } else {
            base
        }
    }
}

/// Outer interval search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BisectionConfig {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Stop once the interval width drops below this, measured in the search
    /// coordinate (`log λ` when `log_scale`).
    pub tolerance: f64,
    pub max_iters: usize,
    pub log_scale: bool,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        Self {
            lambda_lo: 1e-3,
            lambda_hi: 10.0,
            tolerance: 0.05,
            max_iters: 12,
            log_scale: true,
        }
    }
}

impl BisectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lo > 0.0 && self.lambda_lo < self.lambda_hi && self.lambda_hi.is_finite()) {
            return Err(invalid(
                "lambda interval",
                format!("need 0 < lo < hi, got [{}, {}]", self.lambda_lo, self.lambda_hi),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// One multilevel gradient draw.
#[derive(Debug, Clone)]
pub struct MlmcGradient {
    pub level: u32,
    pub probability: f64,
    pub grad_g: DMatrix<f64>,
    pub grad_q: Vec<f64>,
    /// Objective estimate at the drawn level (not importance weighted).
    pub value: f64,
}

fn gradient_pair(e: &DualEstimate) -> (DMatrix<f64>, Vec<f64>) {
    (e.grad_g.clone(), e.grad_q.clone())
}

/// The estimator at a fixed `level`: `(G_ℓ − G_{ℓ−1})/p_ℓ` with `G_{−1} = 0`.
///
/// Both terms read the same sample stream, and the coarse level consumes a
/// prefix of the fine level's draws.
#[allow(clippy::too_many_arguments)]
pub fn mlmc_level_gradient<F: PerturbationFamily, M: DualModel<F>>(
    model: &M,
    g: &DMatrix<f64>,
    family: &F,
    lambda: f64,
    anchors: &[usize],
    cfg: &MlmcConfig,
    level: u32,
    rng: RngStream,
) -> Result<MlmcGradient> {
    let probs = cfg.level_probabilities()?;
    let p = *probs
        .get(level as usize)
        .ok_or_else(|| invalid("level", format!("{level} exceeds max_level {}", cfg.max_level)))?;
    let stream = rng.substream(STREAM_SAMPLES);
    let fine = model.estimate(g, family, lambda, anchors, cfg.samples_at(level), stream)?;
    let (mut grad_g, mut grad_q) = gradient_pair(&fine);
    if level > 0 {
        let coarse = model.estimate(g, family, lambda, anchors, cfg.samples_at(level - 1), stream)?;
        grad_g -= &coarse.grad_g;
        grad_q.iter_mut().zip(&coarse.grad_q).for_each(|(a, b)| *a -= b);
    }
    grad_g /= p;
    grad_q.iter_mut().for_each(|v| *v /= p);
    Ok(MlmcGradient {
        level,
        probability: p,
        grad_g,
        grad_q,
        value: fine.value,
    })
}

/// Draws a level from `rng` and returns the importance-weighted telescoping
/// difference; unbiased for the deepest-level gradient.
pub fn rt_mlmc_gradient<F: PerturbationFamily, M: DualModel<F>>(
    model: &M,
    g: &DMatrix<f64>,
    family: &F,
    lambda: f64,
    anchors: &[usize],
    cfg: &MlmcConfig,
    rng: RngStream,
) -> Result<MlmcGradient> {
    let level = draw_level(cfg, rng)?;
    mlmc_level_gradient(model, g, family, lambda, anchors, cfg, level, rng)
}

/// The level that [`rt_mlmc_gradient`] would use for `rng`.
pub fn draw_level(cfg: &MlmcConfig, rng: RngStream) -> Result<u32> {
    let probs = cfg.level_probabilities()?;
    let dist = WeightedIndex::new(&probs).map_err(|e| invalid("level_decay", e.to_string()))?;
    Ok(dist.sample(&mut rng.substream(STREAM_LEVEL).rng()) as u32)
}

/// Largest reconstructor recorded entrywise in a trace.
pub const TRACE_G_ENTRIES: usize = 64;

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub level: u32,
    /// Row-major entries of `g` after the step; empty when `g` has more than
    /// [`TRACE_G_ENTRIES`] entries.
    pub g: Vec<f64>,
    pub g_norm: f64,
    pub q: Vec<f64>,
    pub objective: f64,
}

/// Result of one inner solve at fixed `λ`.
#[derive(Debug, Clone)]
pub struct BsmdOutcome<F> {
    pub g: DMatrix<f64>,
    pub family: F,
    pub value: f64,
    pub std_error: f64,
    pub trace: Vec<IterationRecord>,
}

fn batch_for(n: usize, batch: usize, rng: RngStream) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(&mut rng.rng(), n, batch).into_vec();
    idx.sort_unstable();
    idx
}

fn check_finite(lambda: f64, iteration: usize, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged {
            lambda,
            iteration,
            value,
        });
    }
    Ok(())
}

/// Alternating projected stochastic steps at fixed `λ`.
///
/// Iteration `t` reads `rng.substream(t)`; the final objective is estimated on
/// every anchor from a stream that does not depend on `t`, so two solves that
/// share `rng` are compared under common random numbers.
pub fn bsmd_solve<F: PerturbationFamily, M: DualModel<F>>(
    model: &M,
    lambda: f64,
    g0: DMatrix<f64>,
    family0: F,
    cfg: &BsmdConfig,
    rng: RngStream,
) -> Result<BsmdOutcome<F>> {
    cfg.validate()?;
    let n = model.anchor_count();
    let mut g = g0;
    let mut family = family0.with_params(&family0.project(&family0.params()))?;
    let mut trace = Vec::with_capacity(cfg.iters);
    for t in 0..cfg.iters {
        let it = rng.substream(t as u64);
        let anchors = batch_for(n, cfg.batch_anchors, it.substream(STREAM_BATCH));

        let ascent = rt_mlmc_gradient(model, &g, &family, lambda, &anchors, &cfg.mlmc, it)?;
        check_finite(lambda, t, ascent.value)?;
        let lr_q = cfg.step(cfg.lr_q, t) / if cfg.normalize_q_step { lambda.max(1.0) } else { 1.0 };
        let q: Vec<f64> = family
            .params()
            .iter()
            .zip(family.projected_gradient(&ascent.grad_q))
            .map(|(q, d)| q + lr_q * d)
            .collect();
        family = family.with_params(&family.project(&q))?;

        let descent = rt_mlmc_gradient(model, &g, &family, lambda, &anchors, &cfg.mlmc, it)?;
        check_finite(lambda, t, descent.value)?;
        if descent.grad_g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                lambda,
                iteration: t,
                value: f64::NAN,
            });
        }
        g -= &descent.grad_g * cfg.step(cfg.lr_g, t);

        trace.push(IterationRecord {
            iteration: t,
            lambda,
            level: descent.level,
            g: if g.len() <= TRACE_G_ENTRIES {
                g.transpose().iter().copied().collect()
            } else {
                Vec::new()
            },
            g_norm: g.norm(),
            q: family.params(),
            objective: descent.value,
        });
    }
    let all: Vec<usize> = (0..n).collect();
    let fin = model.estimate(
        &g,
        &family,
        lambda,
        &all,
        cfg.final_samples,
        rng.substream(STREAM_FINAL),
    )?;
    check_finite(lambda, cfg.iters, fin.value)?;
    Ok(BsmdOutcome {
        g,
        family,
        value: fin.value,
        std_error: fin.std_error,
        trace,
    })
}

/// Which end of the search interval the result sits on, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Lower,
    Upper,
}

/// One objective evaluation made by the interval search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub lambda: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStep {
    pub iteration: usize,
    pub lo: f64,
    pub mid: f64,
    pub hi: f64,
}

/// Outcome of [`trisect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrisectOutcome {
    pub best: f64,
    pub value: f64,
    pub boundary: Option<Boundary>,
    pub iterations: usize,
    pub evaluations: Vec<Evaluation>,
    pub intervals: Vec<IntervalStep>,
}

/// Derivative-free interval search on `[lo, hi]`.
///
/// Each round compares the objective at `lo`, the midpoint, `hi` and the two
/// quarter points, and keeps the neighbours of the smallest value as the new
/// interval, so the width at least halves per round and a unimodal minimizer
/// is never discarded. Values are cached so every point is evaluated once.
/// `objective` returns `(value, std_error)`. With `log_scale` the midpoint and
/// the width are taken in `log λ`, which needs `lo > 0`.
pub fn trisect<O>(
    lo: f64,
    hi: f64,
    tolerance: f64,
    max_iters: usize,
    log_scale: bool,
    mut objective: O,
) -> Result<TrisectOutcome>
where
    O: FnMut(f64) -> Result<(f64, f64)>,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || (log_scale && !(lo > 0.0)) {
        return Err(invalid("interval", format!("invalid search interval [{lo}, {hi}]")));
    }
    type Map = fn(f64) -> f64;
    let (to, from): (Map, Map) = if log_scale { (f64::ln, f64::exp) } else { (|v| v, |v| v) };
    let (orig_lo, orig_hi) = (to(lo), to(hi));
    let (mut a, mut b) = (orig_lo, orig_hi);
    let mut evaluations: Vec<Evaluation> = Vec::new();
    let mut cache: Vec<(f64, f64)> = Vec::new();
    let mut intervals = Vec::new();
    let mut eval = |u: f64, evaluations: &mut Vec<Evaluation>| -> Result<f64> {
        if let Some(&(_, v)) = cache.iter().find(|(c, _)| c.to_bits() == u.to_bits()) {
            return Ok(v);
        }
        // exp(ln x) may round past the interval ends
        let lambda = from(u).clamp(lo, hi);
        let (value, std_error) = objective(lambda)?;
        cache.push((u, value));
        evaluations.push(Evaluation {
            lambda,
            value,
            std_error,
        });
        Ok(value)
    };
    let mut iterations = 0;
    while iterations < max_iters && b - a >= tolerance {
        let m = 0.5 * (a + b);
        intervals.push(IntervalStep {
            iteration: iterations,
            lo: from(a),
            mid: from(m),
            hi: from(b),
        });
        let grid = [a, 0.5 * (a + m), m, 0.5 * (m + b), b];
        let mut values = [0.0; 5];
        for (v, &u) in values.iter_mut().zip(&grid) {
            *v = eval(u, &mut evaluations)?;
        }
        // first minimizer; a unimodal objective has its minimum next to it
        let k = (0..5).fold(0, |best, i| if values[i] < values[best] { i } else { best });
        (a, b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(4)]);
        iterations += 1;
    }
    if evaluations.is_empty() {
        eval(0.5 * (a + b), &mut evaluations)?;
    }
    let best = *evaluations
        .iter()
        .min_by(|x, y| x.value.total_cmp(&y.value))
        .expect("at least one evaluation");
    let width = orig_hi - orig_lo;
    let near = |u: f64, edge: f64| (u - edge).abs() <= 1e-9 * width.max(1.0);
    let boundary = if near(to(best.lambda), orig_lo) {
        Some(Boundary::Lower)
    } else if near(to(best.lambda), orig_hi) {
        Some(Boundary::Upper)
    } else {
        None
    };
    Ok(TrisectOutcome {
        best: best.lambda,
        value: best.value,
        boundary,
        iterations,
        evaluations,
        intervals,
    })
}

/// Run statistics attached to a [`SolveReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub boundary: Option<Boundary>,
    pub outer_iterations: usize,
    pub inner_solves: usize,
    pub evaluations: Vec<Evaluation>,
    pub intervals: Vec<IntervalStep>,
    pub std_error: f64,
    pub seconds: f64,
}

/// Solution of the full problem.
#[derive(Debug, Clone)]
pub struct SolveReport<F> {
    pub g_opt: Reconstructor,
    pub family_opt: F,
    pub q_opt: Vec<f64>,
    pub lambda_opt: f64,
    pub value: f64,
    /// Inner trace of the solve that produced the incumbent.
    pub trace: Vec<IterationRecord>,
    pub diagnostics: Diagnostics,
}

struct Incumbent<F> {
    g: DMatrix<f64>,
    family: F,
    lambda: f64,
    value: f64,
    std_error: f64,
    trace: Vec<IterationRecord>,
}

/// Searches `λ` by [`trisect`], solving the inner problem with [`bsmd_solve`]
/// at each new point.
///
/// Each inner solve starts from the best `(g, q)` found so far and all solves
/// share `rng`, so objective values at different `λ` use common random numbers.
pub fn bisect_lambda<F: PerturbationFamily, M: DualModel<F>>(
    model: &M,
    g0: DMatrix<f64>,
    family0: F,
    bisection: &BisectionConfig,
    bsmd: &BsmdConfig,
    rng: RngStream,
) -> Result<SolveReport<F>> {
    bisection.validate()?;
    bsmd.validate()?;
    let start = Instant::now();
    let mut incumbent: Option<Incumbent<F>> = None;
    let mut solves = 0;
    let outcome = trisect(
        bisection.lambda_lo,
        bisection.lambda_hi,
        bisection.tolerance,
        bisection.max_iters,
        bisection.log_scale,
        |lambda| {
            let (g, fam) = match &incumbent {
                Some(inc) => (inc.g.clone(), inc.family.clone()),
                None => (g0.clone(), family0.clone()),
            };
            let out = bsmd_solve(model, lambda, g, fam, bsmd, rng)?;
            solves += 1;
            let (value, se) = (out.value, out.std_error);
            if incumbent.as_ref().is_none_or(|inc| value < inc.value) {
                incumbent = Some(Incumbent {
                    g: out.g,
                    family: out.family,
                    lambda,
                    value,
                    std_error: se,
                    trace: out.trace,
                });
            }
            Ok((value, se))
        },
    )?;
    let inc = incumbent.expect("trisect evaluates at least once");
    debug_assert_eq!(inc.lambda, outcome.best);
    Ok(SolveReport {
        g_opt: Reconstructor::new(inc.g)?,
        q_opt: inc.family.params(),
        family_opt: inc.family,
        lambda_opt: inc.lambda,
        value: inc.value,
        trace: inc.trace,
        diagnostics: Diagnostics {
            boundary: outcome.boundary,
            outer_iterations: outcome.iterations,
            inner_solves: solves,
            evaluations: outcome.evaluations,
            intervals: outcome.intervals,
            std_error: inc.std_error,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}
