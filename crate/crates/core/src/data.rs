//! Synthetic training pairs, measurement noise, and the MNIST IDX reader.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::inverse::{ForwardOperator, IMAGE_SIDE};
use crate::model::EmpiricalJoint;
use crate::rng::RngStream;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// I.i.d. uniform points on `[0, 1]^dim`.
pub fn sample_uniform_square(count: usize, dim: usize, rng: RngStream) -> Result<Vec<DVector<f64>>> {
    if count == 0 || dim == 0 {
        return Err(invalid("count", "need at least one point of positive dimension"));
    }
    let mut gen = rng.rng();
    Ok((0..count)
        .map(|_| DVector::from_fn(dim, |_, _| gen.random::<f64>()))
        .collect())
}

/// Measurement noise applied after the forward operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    /// Additive `N(0, σ²)` per entry.
    Gaussian {
        sigma: f64,
    },
    /// `σ·Pois(y/σ)` per entry, so the mean is the clean value.
    Poisson {
        sigma: f64,
    },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::None => Ok(()),
            Self::Gaussian { sigma } | Self::Poisson { sigma } => {
                if sigma > 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(invalid("sigma", format!("noise level must be positive, got {sigma}")))
                }
            }
        }
    }

    /// Short label such as `gaussian-0.05`.
    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Gaussian { sigma } => format!("gaussian-{sigma}"),
            Self::Poisson { sigma } => format!("poisson-{sigma}"),
        }
    }

    pub fn apply(&self, clean: &DVector<f64>, rng: RngStream) -> Result<DVector<f64>> {
        self.validate()?;
        match *self {
            Self::None => Ok(clean.clone()),
            Self::Gaussian { sigma } => {
                let normal = Normal::new(0.0, sigma).map_err(|e| invalid("sigma", e.to_string()))?;
                let mut gen = rng.rng();
                Ok(clean.map(|v| v + normal.sample(&mut gen)))
            }
            Self::Poisson { sigma } => poisson_noise(clean, sigma, rng),
        }
    }
}

/// `σ·Pois(clean/σ)` entrywise.
pub fn poisson_noise(clean: &DVector<f64>, sigma: f64, rng: RngStream) -> Result<DVector<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if let Some(i) = clean.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(invalid("clean", format!("entry {i} is negative or not finite")));
    }
    let mut gen = rng.rng();
    clean
        .iter()
        .map(|&c| {
            if c == 0.0 {
                return Ok(0.0);
            }
            let pois = Poisson::new(c / sigma).map_err(|e| invalid("clean", e.to_string()))?;
            Ok(sigma * pois.sample(&mut gen))
        })
        .collect::<Result<Vec<f64>>>()
        .map(DVector::from_vec)
}

/// Pairs `(x_i, noise(H·x_i))`; pair `i` draws its noise from `rng.substream(i)`.
pub fn make_dataset(
    xs: &[DVector<f64>],
    forward: &ForwardOperator,
    noise: NoiseModel,
    rng: RngStream,
) -> Result<EmpiricalJoint> {
    noise.validate()?;
    let ys = xs
        .iter()
        .enumerate()
        .map(|(i, x)| noise.apply(&forward.apply(x)?, rng.substream(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    EmpiricalJoint::new(xs.to_vec(), ys)
}

/// A 28×28 grayscale digit with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistImage {
    bytes: Vec<u8>,
}

impl MnistImage {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != PIXELS {
            return Err(Error::DimensionMismatch {
                operand: "image bytes",
                expected: PIXELS,
                found: bytes.len(),
            });
        }
        Ok(Self { bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Row-major pixels scaled to `[0, 1]`.
    pub fn pixels(&self) -> DVector<f64> {
        DVector::from_iterator(PIXELS, self.bytes.iter().map(|&b| f64::from(b) / 255.0))
    }
}

fn read_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            offset: buf.len() as u64,
            reason: format!("header truncated while reading the field at byte {offset}"),
        })
}

fn check_magic(buf: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(buf, 0)?;
    if magic != expected {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file held in memory.
pub fn parse_idx_images(buf: &[u8], limit: Option<usize>) -> Result<Vec<MnistImage>> {
    check_magic(buf, IDX_IMAGES_MAGIC)?;
    let count = read_u32(buf, 4)? as usize;
    let (rows, cols) = (read_u32(buf, 8)?, read_u32(buf, 12)?);
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(Error::Idx {
            offset: 8,
            reason: format!("image dims {rows}×{cols}, expected {IMAGE_SIDE}×{IMAGE_SIDE}"),
        });
    }
    let take = limit.map_or(count, |l| l.min(count));
    let need = 16 + count * PIXELS;
    if buf.len() < need {
        return Err(Error::Idx {
            offset: buf.len() as u64,
            reason: format!("payload truncated: header announces {count} images ({need} bytes)"),
        });
    }
    (0..take)
        .map(|i| MnistImage::from_bytes(buf[16 + i * PIXELS..16 + (i + 1) * PIXELS].to_vec()))
        .collect()
}

/// Parses an IDX label file held in memory.
pub fn parse_idx_labels(buf: &[u8], limit: Option<usize>) -> Result<Vec<u8>> {
    check_magic(buf, IDX_LABELS_MAGIC)?;
    let count = read_u32(buf, 4)? as usize;
    if buf.len() < 8 + count {
        return Err(Error::Idx {
            offset: buf.len() as u64,
            reason: format!("payload truncated: header announces {count} labels"),
        });
    }
    let take = limit.map_or(count, |l| l.min(count));
    Ok(buf[8..8 + take].to_vec())
}

/// Reads images (and optionally labels) from IDX files, keeping at most `limit`.
pub fn load_mnist_idx(
    images: &Path,
    labels: Option<&Path>,
    limit: Option<usize>,
) -> Result<(Vec<MnistImage>, Option<Vec<u8>>)> {
    let imgs = parse_idx_images(&fs::read(images)?, limit)?;
    let labs = match labels {
        Some(p) => {
            let l = parse_idx_labels(&fs::read(p)?, limit)?;
            if l.len() != imgs.len() {
                return Err(Error::Idx {
                    offset: 4,
                    reason: format!("{} labels for {} images", l.len(), imgs.len()),
                });
            }
            Some(l)
        }
        None => None,
    };
    Ok((imgs, labs))
}

/// Serializes images in the IDX image format.
pub fn write_idx_images(path: &Path, images: &[MnistImage]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * PIXELS);
    for v in [
        IDX_IMAGES_MAGIC,
        images.len() as u32,
        IMAGE_SIDE as u32,
        IMAGE_SIDE as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img.bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Serializes labels in the IDX label format.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// File names looked up inside an MNIST directory, preferred first.
pub const MNIST_IMAGE_FILES: [&str; 2] = ["t10k-images-idx3-ubyte", "train-images-idx3-ubyte"];

/// Locates the image file in `dir`, or explains what is expected there.
pub fn find_mnist_images(dir: &Path) -> Result<std::path::PathBuf> {
    MNIST_IMAGE_FILES
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::Config(format!(
                "no MNIST images in {}: expected one of {} (uncompressed IDX); \
                 scripts/fetch_mnist.sh downloads and verifies them",
                dir.display(),
                MNIST_IMAGE_FILES.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests;
