use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_image(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(IMAGE_SIDE * IMAGE_SIDE, |_, _| rng.random::<f64>())
}

#[test]
fn dense_forward() {
    let h = ForwardOperator::Dense(DMatrix::identity(2, 2) * 2.0);
    assert_eq!(
        h.apply(&DVector::from_row_slice(&[1.0, 2.0])).unwrap(),
        DVector::from_row_slice(&[2.0, 4.0])
    );
    assert!(h.apply(&DVector::zeros(3)).is_err());
}

#[test]
fn blur_preserves_constants_and_matches_matrix() {
    let op = ForwardOperator::blur(gaussian_kernel_3x3(1.0).unwrap());
    assert_eq!((op.in_dim(), op.out_dim()), (784, 676));
    let flat = op.apply(&DVector::from_element(784, 0.3)).unwrap();
    assert!(flat.iter().all(|v| (v - 0.3).abs() < 1e-15));
    let m = op.materialize();
    assert_eq!(m.shape(), (676, 784));
    for row in m.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-14);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = random_image(&mut rng);
        assert!((op.apply(&x).unwrap() - &m * &x).amax() < 1e-12);
    }
}

#[test]
fn blur_is_a_correlation() {
    // an asymmetric kernel distinguishes correlation from convolution
    let mut kernel = [[0.0; 3]; 3];
    kernel[0][2] = 1.0;
    let op = ForwardOperator::Convolution { kernel, side: 4 };
    let x = DVector::from_fn(16, |k, _| k as f64);
    // output (r, c) reads input (r, c + 2)
    assert_eq!(op.apply(&x).unwrap().as_slice(), &[2.0, 3.0, 6.0, 7.0]);
}

#[test]
fn gaussian_kernel_shape() {
    let k = gaussian_kernel_3x3(1.0).unwrap();
    assert!((k.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((k[1][1] / k[0][0] - std::f64::consts::E).abs() < 1e-12);
    let flat = gaussian_kernel_3x3(1e3).unwrap();
    assert!(flat.iter().flatten().all(|w| (w - 1.0 / 9.0).abs() < 1e-6));
    for bw in [0.1, 0.5, 2.0, 7.0] {
        assert!((gaussian_kernel_3x3(bw).unwrap().iter().flatten().sum::<f64>() - 1.0).abs() < 1e-15);
    }
    assert!(gaussian_kernel_3x3(0.0).is_err());
}

#[test]
fn laplacian_annihilates_constants() {
    let l = neumann_laplacian(5);
    assert!((&l * DVector::from_element(25, 1.7)).amax() < 1e-15);
    assert_eq!(l[(0, 0)], -2.0);
    assert_eq!(l[(6, 6)], -4.0);
    assert_eq!(l, l.transpose());
}

#[test]
fn tikhonov_closed_forms() {
    let id = DMatrix::identity(3, 3);
    let g = tikhonov_inverse(&id, &id, 1.0).unwrap();
    assert!((g.matrix() - &id * 0.5).amax() < 1e-15);
    let h = DMatrix::identity(2, 2) * 2.0;
    let g = tikhonov_inverse(&h, &DMatrix::identity(2, 2), 0.0).unwrap();
    assert!((g.matrix() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
    assert!(tikhonov_inverse(&DMatrix::zeros(2, 2), &neumann_laplacian(1).resize(2, 2, 0.0), 0.0).is_err());
    assert!(tikhonov_inverse(&h, &h, -1.0).is_err());
}

#[test]
fn heavy_regularization_shrinks_the_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = DMatrix::from_fn(6, 5, |_, _| rng.random::<f64>());
    let l = DMatrix::from_fn(5, 5, |i, j| {
        if i == j {
            2.0
        } else if j == i + 1 {
            -1.0
        } else {
            0.0
        }
    });
    let g0 = tikhonov_inverse(&h, &l, 0.0).unwrap().into_matrix();
    let g = tikhonov_inverse(&h, &l, 1e6).unwrap().into_matrix();
    assert!(g.norm() < 1e-3 * g0.norm());
}

#[test]
fn tikhonov_satisfies_normal_equations() {
    let op = ForwardOperator::blur(gaussian_kernel_3x3(1.0).unwrap());
    let h = op.materialize();
    let l = neumann_laplacian(IMAGE_SIDE);
    let lambda = 0.03;
    let g = tikhonov_inverse(&h, &l, lambda).unwrap().into_matrix();
    let lhs = (h.tr_mul(&h) + l.tr_mul(&l) * lambda) * &g;
    assert!((lhs - h.transpose()).amax() < 1e-10);
}

#[test]
fn noiseless_fit_prefers_no_regularization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = DMatrix::from_fn(8, 6, |_, _| rng.random::<f64>());
    let l = neumann_laplacian(2).resize(6, 6, 0.0);
    let xs: Vec<DVector<f64>> = (0..20)
        .map(|_| DVector::from_fn(6, |_, _| rng.random::<f64>()))
        .collect();
    let ys: Vec<DVector<f64>> = xs.iter().map(|x| &h * x).collect();
    let fit = fit_tikhonov_lambda(&h, &l, &xs, &ys, (1e-6, 1e2), 1e-3).unwrap();
    assert_eq!(fit.boundary, Some(crate::optimizer::Boundary::Lower));
    assert!(fit.mse < 1e-8, "{}", fit.mse);
    assert!(fit_tikhonov_lambda(&h, &l, &xs, &ys, (0.0, 1.0), 1e-3).is_err());
    assert!(fit_tikhonov_lambda(&h, &l, &[], &[], (1e-6, 1.0), 1e-3).is_err());
}

#[test]
fn noisy_fit_finds_interior_optimum() {
    // scalar model: x ~ N(0, 1) coordinates, y = x + noise; the best ridge
    // parameter for L = I is the noise-to-signal ratio
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 4;
    let h = DMatrix::identity(n, n);
    let l = DMatrix::identity(n, n);
    let noise = 0.5;
    let normal = rand_distr::StandardNormal;
    let xs: Vec<DVector<f64>> = (0..20_000)
        .map(|_| DVector::from_fn(n, |_, _| rand_distr::Distribution::<f64>::sample(&normal, &mut rng)))
        .collect();
    let ys: Vec<DVector<f64>> = xs
        .iter()
        .map(|x| {
            x + DVector::from_fn(n, |_, _| {
                noise * rand_distr::Distribution::<f64>::sample(&normal, &mut rng)
            })
        })
        .collect();
    let fit = fit_tikhonov_lambda(&h, &l, &xs, &ys, (1e-6, 1e2), 1e-4).unwrap();
    assert_eq!(fit.boundary, None);
    assert!((fit.lambda_reg - noise * noise).abs() < 0.03, "{}", fit.lambda_reg);
}

#[test]
fn mse_values() {
    assert_eq!(mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
    assert_eq!(mse(&[0.0; 9], &[1.0; 9]).unwrap(), 1.0);
    assert!(mse(&[0.0; 2], &[0.0; 3]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Vec<f64> = (0..100).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..100).map(|_| rng.random()).collect();
    // independent form: mean of squares minus twice the mean cross term
    let alt = a.iter().map(|x| x * x).sum::<f64>() / 100.0 + b.iter().map(|x| x * x).sum::<f64>() / 100.0
        - 2.0 * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / 100.0;
    assert!((mse(&a, &b).unwrap() - alt).abs() < 1e-12);
}

#[test]
fn ssim_anchor_values() {
    let a = DMatrix::from_fn(28, 28, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let (c1, c2) = (1e-4, 9e-4);
    let closed = (2.0 * 0.16 + c1) * c2 / ((0.04 + 0.64 + c1) * c2);
    let s = ssim(&DMatrix::from_element(28, 28, 0.2), &DMatrix::from_element(28, 28, 0.8)).unwrap();
    assert!((s - closed).abs() < 1e-12);
    assert!(ssim(&a, &DMatrix::zeros(27, 28)).is_err());
    assert!(ssim(&DMatrix::zeros(10, 10), &DMatrix::zeros(10, 10)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ssim_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(12, 12, |_, _| rng.random::<f64>());
        let b = DMatrix::from_fn(12, 12, |_, _| rng.random::<f64>());
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..1.0).contains(&ab));
    }

    #[test]
    fn mse_symmetric_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 1..40), shift in -1.0f64..1.0) {
        let b: Vec<f64> = a.iter().map(|v| v + shift * v.sin()).collect();
        let (ab, ba) = (mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
    }
}
