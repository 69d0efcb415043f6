use std::f64::consts::{E, PI};

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

use super::*;
use crate::perturbation::{AnisotropicGaussianFamily, IsotropicGaussianFamily, PerturbationFamily, VARIANCE_FLOOR};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

fn square_data(n: usize, h: &DMatrix<f64>, seed: u64) -> EmpiricalJoint {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<DVector<f64>> = (0..n)
        .map(|_| DVector::from_fn(h.ncols(), |_, _| rng.random::<f64>()))
        .collect();
    let ys = xs.iter().map(|x| h * x).collect();
    EmpiricalJoint::new(xs, ys).unwrap()
}

#[test]
fn integrand_reduces_to_loss_without_multiplier() {
    let problem = DualProblem::new(0.01, 0.1).unwrap();
    let fam = IsotropicGaussianFamily::new(DMatrix::identity(2, 2), 0.3, 10.0).unwrap();
    let g = Reconstructor::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.7])).unwrap();
    let (xa, ya, x, y) = (v(&[0.1, 0.2]), v(&[0.3, 0.4]), v(&[0.9, 0.0]), v(&[1.5, -0.5]));
    let val = inner_integrand((&xa, &ya), &x, &y, &g, &fam, 0.0, &problem).unwrap();
    assert_eq!(val, quadratic_loss(&x, &y, &g).unwrap());
    assert!(inner_integrand((&xa, &ya), &x, &y, &g, &fam, -1.0, &problem).is_err());
}

#[test]
fn integrand_vanishes_at_the_degenerate_point() {
    let problem = DualProblem::new(0.0, 1.0).unwrap();
    let fam = IsotropicGaussianFamily::new(DMatrix::identity(1, 1), 1.0 / (2.0 * PI), 10.0).unwrap();
    let g = Reconstructor::identity(1);
    let x = v(&[0.37]);
    let val = inner_integrand((&x, &x), &x, &x, &g, &fam, 1.0, &problem).unwrap();
    assert_relative_eq!(val, 0.0, epsilon = 1e-14);
}

#[test]
fn integrand_is_sum_of_its_terms() {
    let problem = DualProblem::new(0.2, 0.3).unwrap();
    let chol = DMatrix::from_row_slice(2, 2, &[0.7, 0.0, -0.2, 0.4]);
    let h = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 2.0]);
    let fam = AnisotropicGaussianFamily::new(h, chol, 10.0).unwrap();
    let g = Reconstructor::new(DMatrix::from_row_slice(2, 2, &[0.2, -0.06, -0.03, 0.38])).unwrap();
    let (xa, ya, x, y) = (v(&[0.4, 0.1]), v(&[2.1, 0.6]), v(&[0.8, 0.3]), v(&[4.0, 1.9]));
    let lambda = 1.7;
    let val = inner_integrand((&xa, &ya), &x, &y, &g, &fam, lambda, &problem).unwrap();
    let expected = quadratic_loss(&x, &y, &g).unwrap()
        - lambda * crate::model::euclidean_pair_cost((&xa, &ya), (&x, &y)).unwrap()
        - lambda * problem.delta * fam.log_density(&x, &y).unwrap();
    assert!((val - expected).abs() < 1e-12);
}

#[test]
fn h_vanishes_for_exact_inverse_without_multiplier() {
    let h = DMatrix::identity(2, 2) * 2.0;
    let mu = square_data(50, &h, 1);
    let problem = DualProblem::new(0.001, 0.1).unwrap();
    let fam = IsotropicGaussianFamily::new(h.clone(), VARIANCE_FLOOR, 10.0).unwrap();
    let g = Reconstructor::new(h.try_inverse().unwrap()).unwrap();
    let est = estimate_h(0, &g, &fam, 0.0, &problem, &mu, 2000, RngStream::new(5, 0)).unwrap();
    // E = v·‖H⁻¹‖²_F = 5e-7
    assert!(est.value.abs() < 3.0 * est.std_error + 1e-6, "{est:?}");
    assert!(estimate_h(0, &g, &fam, 0.0, &problem, &mu, 0, RngStream::new(5, 0)).is_err());
}

#[test]
fn h_entropy_contribution_uses_closed_form() {
    let h = DMatrix::identity(2, 2);
    let mu = square_data(20, &h, 2);
    let problem = DualProblem::new(0.0, 0.1).unwrap();
    let fam = IsotropicGaussianFamily::new(h, 1.0, 10.0).unwrap();
    let entropy_term = -problem.delta * fam.negative_differential_entropy();
    assert_relative_eq!(entropy_term, 0.1 * (2.0 * PI * E).ln(), epsilon = 1e-14);
    assert_relative_eq!(entropy_term, 0.28379, epsilon = 1e-5);

    let g = Reconstructor::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.4])).unwrap();
    let stream = RngStream::new(6, 1);
    let est = estimate_h(3, &g, &fam, 1.0, &problem, &mu, 64, stream).unwrap();
    let draws = draw_inner_samples(3, &fam, &mu, 64, stream.substream(3));
    let sampled: f64 = draws
        .iter()
        .map(|s| {
            quadratic_loss(&s.x, &s.y, &g).unwrap()
                - crate::model::euclidean_pair_cost((mu.x(3), mu.y(3)), (&s.x, &s.y)).unwrap()
        })
        .sum::<f64>()
        / 64.0;
    assert!((est.value - (sampled + entropy_term)).abs() < 1e-12);
}

/// Trapezoid rule over y for the one-dimensional inner integral.
fn quadrature_h(
    anchor: usize,
    g: f64,
    fam: &IsotropicGaussianFamily,
    lambda: f64,
    problem: &DualProblem,
    mu: &EmpiricalJoint,
) -> f64 {
    let hmat = fam.forward()[(0, 0)];
    let sd = fam.variance().sqrt();
    let (xa, ya) = (mu.x(anchor)[0], mu.y(anchor)[0]);
    let mut total = 0.0;
    for u in 0..mu.len() {
        let xu = mu.x(u)[0];
        let mean = hmat * xu;
        let (lo, hi, n) = (mean - 12.0 * sd, mean + 12.0 * sd, 20_000);
        let step = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let y = lo + step * i as f64;
            let dens = (-(y - mean).powi(2) / (2.0 * fam.variance())).exp() / (2.0 * PI * fam.variance()).sqrt();
            let f = (g * y - xu).powi(2) - lambda * ((xa - xu).powi(2) + (ya - y).powi(2)).sqrt();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * f * dens;
        }
        total += acc * step;
    }
    total / mu.len() as f64 - lambda * problem.delta * fam.negative_differential_entropy()
}

#[test]
fn h_matches_quadrature_in_one_dimension() {
    let h = DMatrix::from_element(1, 1, 1.5);
    let mu = square_data(7, &h, 3);
    let problem = DualProblem::new(0.0, 0.1).unwrap();
    let fam = IsotropicGaussianFamily::new(h, 0.2, 10.0).unwrap();
    let g = 0.6;
    let lambda = 0.7;
    for anchor in [0, 4] {
        let oracle = quadrature_h(anchor, g, &fam, lambda, &problem, &mu);
        let gr = Reconstructor::new(DMatrix::from_element(1, 1, g)).unwrap();
        let est = estimate_h(anchor, &gr, &fam, lambda, &problem, &mu, 200_000, RngStream::new(8, 0)).unwrap();
        assert!(
            (est.value - oracle).abs() < 3.0 * est.std_error,
            "{} vs {oracle} (se {})",
            est.value,
            est.std_error
        );
    }
}

#[test]
fn dual_objective_structure() {
    let h = DMatrix::identity(2, 2) * 2.0;
    let mu = square_data(30, &h, 4);
    let fam = IsotropicGaussianFamily::new(h, 0.4, 10.0).unwrap();
    let g = Reconstructor::new(DMatrix::identity(2, 2) * 0.45).unwrap();
    let stream = RngStream::new(10, 0);

    let p0 = DualProblem::new(0.0, 0.1).unwrap();
    let e0 = dual_objective(&g, &fam, 1.3, &p0, &mu, 16, stream).unwrap();
    let mean_h = e0.per_anchor.iter().sum::<f64>() / e0.per_anchor.len() as f64;
    assert_eq!(e0.value, mean_h);

    // affine in epsilon
    let p1 = DualProblem::new(0.25, 0.1).unwrap();
    let e1 = dual_objective(&g, &fam, 1.3, &p1, &mu, 16, stream).unwrap();
    assert!((e1.value - e0.value - 1.3 * 0.25).abs() < 1e-12);

    // bitwise reproducible
    let again = dual_objective(&g, &fam, 1.3, &p1, &mu, 16, stream).unwrap();
    assert_eq!(e1.value.to_bits(), again.value.to_bits());
    assert_eq!(e1.grad_g, again.grad_g);
    assert_eq!(e1.grad_q, again.grad_q);
}

#[test]
fn dual_objective_monotone_in_large_multiplier() {
    let h = DMatrix::identity(2, 2);
    let mu = square_data(25, &h, 5);
    let fam = IsotropicGaussianFamily::new(h, VARIANCE_FLOOR, 10.0).unwrap();
    let g = Reconstructor::identity(2);
    let problem = DualProblem::new(0.001, 0.1).unwrap();
    let stream = RngStream::new(12, 0);
    let values: Vec<f64> = [10.0, 20.0, 40.0]
        .iter()
        .map(|&l| dual_objective(&g, &fam, l, &problem, &mu, 32, stream).unwrap().value)
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_gradients<F: PerturbationFamily>(
    g: &DMatrix<f64>,
    fam: &F,
    lambda: f64,
    problem: &DualProblem,
    mu: &EmpiricalJoint,
    stream: RngStream,
) {
    let model = MonteCarloDual::new(*problem, mu);
    let anchors: Vec<usize> = (0..mu.len()).collect();
    let est = model.estimate(g, fam, lambda, &anchors, 8, stream).unwrap();
    let value = |g: &DMatrix<f64>, f: &F| model.estimate(g, f, lambda, &anchors, 8, stream).unwrap().value;
    let h = 1e-5;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let mut gp = g.clone();
            gp[(i, j)] += h;
            let mut gm = g.clone();
            gm[(i, j)] -= h;
            let fd = (value(&gp, fam) - value(&gm, fam)) / (2.0 * h);
            assert!(
                rel_err(fd, est.grad_g[(i, j)]) < 1e-4,
                "g[{i},{j}]: fd {fd} vs {}",
                est.grad_g[(i, j)]
            );
        }
    }
    let q = fam.params();
    for k in 0..q.len() {
        let mut qp = q.clone();
        qp[k] += h;
        let mut qm = q.clone();
        qm[k] -= h;
        let fd = (value(g, &fam.with_params(&qp).unwrap()) - value(g, &fam.with_params(&qm).unwrap())) / (2.0 * h);
        assert!(
            rel_err(fd, est.grad_q[k]) < 1e-4,
            "q[{k}]: fd {fd} vs {}",
            est.grad_q[k]
        );
    }
}

#[test]
fn pathwise_gradients_match_finite_differences() {
    let h = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 2.0]);
    let mu = square_data(12, &h, 6);
    let problem = DualProblem::new(0.01, 0.1).unwrap();
    let g = DMatrix::from_row_slice(2, 2, &[0.2, -0.05, -0.03, 0.4]);
    let iso = IsotropicGaussianFamily::new(h.clone(), 0.3, 10.0).unwrap();
    check_gradients(&g, &iso, 0.8, &problem, &mu, RngStream::new(13, 0));
    let chol = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.1, 0.5]);
    let an = AnisotropicGaussianFamily::new(h, chol, 10.0).unwrap();
    check_gradients(&g, &an, 2.5, &problem, &mu, RngStream::new(14, 0));
}

#[test]
fn log_sum_exp_matches_naive_for_small_exponents() {
    let h = DMatrix::identity(2, 2);
    let mu = square_data(10, &h, 7);
    let problem = DualProblem::new(0.0, 1.0).unwrap();
    let g = Reconstructor::new(DMatrix::identity(2, 2) * 0.1).unwrap();
    let bx = BoxReference::new(v(&[-1.0, -1.0]), v(&[2.0, 2.0])).unwrap();
    let s = RngStream::new(15, 0);
    let a = sinkhorn_reference_impl(0, &g, 2.0, &problem, &mu, &bx, 1000, s, true).unwrap();
    let b = sinkhorn_reference_impl(0, &g, 2.0, &problem, &mu, &bx, 1000, s, false).unwrap();
    assert!((a - b).abs() < 1e-10);
    assert!(sinkhorn_dual_reference(0, &g, 0.0, &problem, &mu, &bx, 10, s).is_err());
}

#[test]
fn unconstrained_value_of_constant_integrand() {
    // g = 0 and a single atom make ℓ ≡ ‖x₀‖²; as λ → 0⁺ the cost term vanishes.
    let c = 0.8125;
    let mu = EmpiricalJoint::new(vec![v(&[0.5, 0.75])], vec![v(&[0.0, 0.0])]).unwrap();
    let problem = DualProblem::new(0.0, 1.0).unwrap();
    let g = Reconstructor::zeros(2, 2);
    let bx = BoxReference::new(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
    let lambda = 1e-12;
    let val = sinkhorn_dual_reference(0, &g, lambda, &problem, &mu, &bx, 100, RngStream::new(16, 0)).unwrap();
    assert!((val - c).abs() < 1e-10, "{val}");
}

#[test]
fn unconstrained_value_dominates_constrained_h() {
    let h = DMatrix::identity(2, 2) * 2.0;
    let mu = square_data(10, &h, 8);
    let problem = DualProblem::new(0.0, 1.0).unwrap();
    let g = Reconstructor::new(DMatrix::identity(2, 2) * 0.2).unwrap();
    let lambda = 2.0;
    let bx = BoxReference::new(v(&[-4.0, -4.0]), v(&[6.0, 6.0])).unwrap();
    for anchor in [0, 5] {
        let upper =
            sinkhorn_dual_reference(anchor, &g, lambda, &problem, &mu, &bx, 400_000, RngStream::new(17, 0)).unwrap();
        for var in [0.05, 0.3, 1.0] {
            let fam = IsotropicGaussianFamily::new(h.clone(), var, 10.0).unwrap();
            let est = estimate_h(anchor, &g, &fam, lambda, &problem, &mu, 20_000, RngStream::new(18, 0)).unwrap();
            assert!(
                upper >= est.value - 3.0 * est.std_error,
                "anchor {anchor}, v {var}: {upper} < {}",
                est.value
            );
        }
    }
}

#[test]
fn spectral_model_agrees_with_sampled_model() {
    let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.2, 1.0, 0.3]);
    let mu = square_data(15, &h, 9);
    let problem = DualProblem::new(0.05, 0.1).unwrap();
    let fam = IsotropicGaussianFamily::new(h.clone(), 0.2, 10.0).unwrap();
    let g = DMatrix::from_row_slice(3, 2, &[0.6, 0.1, -0.2, 0.5, 0.1, 0.3]);
    let spectral = SpectralQuadraticDual::new(problem, &mu, &h).unwrap();
    let mc = MonteCarloDual::new(problem, &mu);
    let anchors: Vec<usize> = (0..mu.len()).collect();
    let lambda = 0.9;
    let g_rot = spectral.to_rotated(&g);
    assert!((spectral.from_rotated(&g_rot) - &g).amax() < 1e-12);

    let a = spectral
        .estimate(&g_rot, &fam, lambda, &anchors, 20_000, RngStream::new(19, 0))
        .unwrap();
    let b = mc
        .estimate(&g, &fam, lambda, &anchors, 20_000, RngStream::new(20, 0))
        .unwrap();
    // spectral loss is exact, so its standard error covers only the cost; the sampled
    // estimator's error dominates the comparison
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!(
        (a.value - b.value).abs() < 4.0 * se,
        "{} vs {} (se {se})",
        a.value,
        b.value
    );
    let grad = spectral.from_rotated(&a.grad_g);
    assert!((grad - &b.grad_g).amax() < 0.02, "{}", b.grad_g);
    assert!((a.grad_q[0] - b.grad_q[0]).abs() < 0.05 * b.grad_q[0].abs().max(1.0));

    // exact loss expectation against brute force over atoms and many normals
    let (loss, _) = spectral.loss_moments(&g_rot, 0.2);
    let mut gen = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let draws = 200_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let x = mu.x(gen.random_range(0..mu.len()));
        let z = DVector::from_fn(2, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut gen)
        });
        let y = &h * x + z * 0.2f64.sqrt();
        acc += (&g * y - x).norm_squared();
    }
    assert!((acc / draws as f64 - loss).abs() < 0.01 * loss);
}

#[test]
fn spectral_gradients_match_finite_differences() {
    let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.2, 1.0, 0.3]);
    let mu = square_data(9, &h, 10);
    let problem = DualProblem::new(0.05, 0.1).unwrap();
    let fam = IsotropicGaussianFamily::new(h.clone(), 0.2, 10.0).unwrap();
    let model = SpectralQuadraticDual::new(problem, &mu, &h).unwrap();
    let g = model.to_rotated(&DMatrix::from_row_slice(3, 2, &[0.6, 0.1, -0.2, 0.5, 0.1, 0.3]));
    let anchors: Vec<usize> = (0..mu.len()).collect();
    let s = RngStream::new(21, 0);
    let est = model.estimate(&g, &fam, 1.1, &anchors, 16, s).unwrap();
    let value =
        |g: &DMatrix<f64>, f: &IsotropicGaussianFamily| model.estimate(g, f, 1.1, &anchors, 16, s).unwrap().value;
    let h = 1e-5;
    for i in 0..3 {
        for j in 0..2 {
            let mut gp = g.clone();
            gp[(i, j)] += h;
            let mut gm = g.clone();
            gm[(i, j)] -= h;
            let fd = (value(&gp, &fam) - value(&gm, &fam)) / (2.0 * h);
            assert!(rel_err(fd, est.grad_g[(i, j)]) < 1e-4);
        }
    }
    let fd = (value(&g, &fam.with_params(&[0.2 + h]).unwrap()) - value(&g, &fam.with_params(&[0.2 - h]).unwrap()))
        / (2.0 * h);
    assert!(rel_err(fd, est.grad_q[0]) < 1e-4, "{fd} vs {}", est.grad_q[0]);
}
