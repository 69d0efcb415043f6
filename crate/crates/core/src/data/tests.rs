use nalgebra::{DMatrix, DVector};

use super::*;

#[test]
fn uniform_points_are_in_the_square() {
    let xs = sample_uniform_square(100_000, 2, RngStream::new(1, 0)).unwrap();
    assert!(xs.iter().all(|x| x.iter().all(|v| (0.0..=1.0).contains(v))));
    let mean = xs.iter().fold(DVector::zeros(2), |acc, x| acc + x) / xs.len() as f64;
    assert!(mean.iter().all(|m| (m - 0.5).abs() < 0.01));
    let again = sample_uniform_square(3, 2, RngStream::new(1, 0)).unwrap();
    assert_eq!(again[0], xs[0]);
    assert!(sample_uniform_square(0, 2, RngStream::new(1, 0)).is_err());
}

#[test]
fn noiseless_dataset_is_exact() {
    let h = ForwardOperator::Dense(DMatrix::identity(2, 2) * 2.0);
    let ds = make_dataset(
        &[DVector::from_row_slice(&[1.0, 1.0])],
        &h,
        NoiseModel::None,
        RngStream::new(0, 0),
    )
    .unwrap();
    assert_eq!(ds.y(0), &DVector::from_row_slice(&[2.0, 2.0]));
}

#[test]
fn gaussian_residuals_have_requested_spread() {
    let h = ForwardOperator::Dense(DMatrix::identity(1, 1));
    let xs = sample_uniform_square(100_000, 1, RngStream::new(2, 0)).unwrap();
    let ds = make_dataset(&xs, &h, NoiseModel::Gaussian { sigma: 0.05 }, RngStream::new(2, 1)).unwrap();
    let r: Vec<f64> = (0..ds.len()).map(|i| ds.y(i)[0] - ds.x(i)[0]).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
    assert!((sd / 0.05 - 1.0).abs() < 0.02, "{sd}");
}

#[test]
fn poisson_moments() {
    let clean = DVector::from_element(100_000, 1.0);
    let y = poisson_noise(&clean, 0.1, RngStream::new(3, 0)).unwrap();
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 1.0).abs() < 3.0 * (var / n).sqrt());
    assert!((var / 0.1 - 1.0).abs() < 0.03, "{var}");
    // every draw is a nonnegative multiple of σ
    assert!(y
        .iter()
        .all(|v| *v >= 0.0 && ((v / 0.1) - (v / 0.1).round()).abs() < 1e-9));
    assert_eq!(
        poisson_noise(&DVector::zeros(4), 0.1, RngStream::new(3, 1)).unwrap(),
        DVector::zeros(4)
    );
    assert!(poisson_noise(&DVector::from_element(1, -0.1), 0.1, RngStream::new(3, 1)).is_err());
}

#[test]
fn poisson_dataset_on_constant_image() {
    let h = ForwardOperator::Dense(DMatrix::identity(784, 784));
    let ds = make_dataset(
        &[DVector::from_element(784, 0.5)],
        &h,
        NoiseModel::Poisson { sigma: 0.1 },
        RngStream::new(4, 0),
    )
    .unwrap();
    let y = ds.y(0);
    let mean = y.sum() / 784.0;
    let se = (0.1 * 0.5 / 784.0f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se);
}

#[test]
fn noise_validation_and_labels() {
    assert!(NoiseModel::Gaussian { sigma: 0.0 }.validate().is_err());
    assert!(NoiseModel::Poisson { sigma: f64::NAN }.validate().is_err());
    assert_eq!(NoiseModel::Poisson { sigma: 0.05 }.label(), "poisson-0.05");
    let json = serde_json::to_string(&NoiseModel::Gaussian { sigma: 0.01 }).unwrap();
    assert_eq!(json, r#"{"kind":"gaussian","sigma":0.01}"#);
}

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

#[test]
fn parses_synthetic_idx() {
    let mut buf = header(IDX_IMAGES_MAGIC, &[1, 28, 28]);
    buf.extend(std::iter::repeat_n(0u8, 784));
    let imgs = parse_idx_images(&buf, None).unwrap();
    assert_eq!(imgs.len(), 1);
    assert!(imgs[0].pixels().iter().all(|v| *v == 0.0));
}

#[test]
fn malformed_idx_reports_offsets() {
    match parse_idx_images(&[0, 0, 8, 3, 0, 0], None) {
        Err(Error::Idx { offset, .. }) => assert!(offset < 16),
        other => panic!("{other:?}"),
    }
    match parse_idx_images(&header(0x0000_0801, &[1, 28, 28]), None) {
        Err(Error::Idx { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
    match parse_idx_images(&header(IDX_IMAGES_MAGIC, &[1, 27, 28]), None) {
        Err(Error::Idx { offset, .. }) => assert_eq!(offset, 8),
        other => panic!("{other:?}"),
    }
    let mut short = header(IDX_IMAGES_MAGIC, &[2, 28, 28]);
    short.extend(std::iter::repeat_n(1u8, 784 + 10));
    match parse_idx_images(&short, None) {
        Err(Error::Idx { offset, .. }) => assert_eq!(offset, 16 + 794),
        other => panic!("{other:?}"),
    }
    assert!(parse_idx_labels(&header(IDX_LABELS_MAGIC, &[3]), None).is_err());
}

#[test]
fn idx_round_trip_and_limit() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<MnistImage> = (0..3u8)
        .map(|k| MnistImage::from_bytes((0..784).map(|i| ((i * 7 + k as usize * 31) % 256) as u8).collect()).unwrap())
        .collect();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx_images(&ip, &images).unwrap();
    write_idx_labels(&lp, &[4, 2, 9]).unwrap();
    let (back, labels) = load_mnist_idx(&ip, Some(&lp), None).unwrap();
    assert_eq!(back, images);
    assert_eq!(labels.unwrap(), vec![4, 2, 9]);
    let (two, labels) = load_mnist_idx(&ip, Some(&lp), Some(2)).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(labels.unwrap().len(), 2);
    assert!(MnistImage::from_bytes(vec![0; 10]).is_err());
    let missing = find_mnist_images(dir.path()).unwrap_err().to_string();
    assert!(missing.contains("t10k-images-idx3-ubyte"));
}
