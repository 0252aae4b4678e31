//! Dataset sources: seeded synthetic blobs and IDX (MNIST-layout) files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::models::Example;
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("cannot resample {from:?} to {to:?}: {reason}")]
    Resample { from: [usize; 3], to: [usize; 3], reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, DataError>;

/// Gaussian-blob image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub blobs: usize,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blobs == 0 {
            return Err(DataError::InvalidSpec("blobs must be at least 1".into()));
        }
        if self.shape.contains(&0) {
            return Err(DataError::InvalidSpec(format!("shape {:?} has a zero extent", self.shape)));
        }
        if self.classes == 0 {
            return Err(DataError::InvalidSpec("classes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One synthetic example; depends only on `(seed, index)`.
pub fn synth_example(spec: &SynthSpec, seed: u64, index: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, index));
    let [c, h, w] = spec.shape;
    let mut data = vec![0.0; c * h * w];
    for _ in 0..spec.blobs {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let sigma: f64 = rng.gen_range(1.0..=3.0);
        let amps: Vec<f64> = (0..c).map(|_| rng.gen_range(0.3..=1.0)).collect();
        let denom = 2.0 * sigma * sigma;
        for (ch, amp) in amps.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    data[(ch * h + y) * w + x] += amp * (-d2 / denom).exp();
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    let label = rng.gen_range(0..spec.classes);
    Example {
        image: Tensor::new(vec![c, h, w], data),
        label,
    }
}

/// `count` synthetic examples with indices `0..count`.
pub fn synth_dataset(spec: &SynthSpec, count: usize, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    Ok((0..count as u64).map(|i| synth_example(spec, seed, i)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], path: &Path, expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair, scaling pixels to `[0, 1]`.
///
/// With `target = Some([1, H, W])` each image is reduced by the largest integer
/// factor `f` with `H*f <= rows` and `W*f <= cols`: a centered `H*f x W*f`
/// crop is mean-pooled in `f x f` blocks.
pub fn load_idx(images: &Path, labels: &Path, target: Option<[usize; 3]>) -> Result<Vec<Example>> {
    let img = read(images)?;
    let lab = read(labels)?;
    check_magic(&img, images, IDX_IMAGES_MAGIC)?;
    check_magic(&lab, labels, IDX_LABELS_MAGIC)?;
    let n_img = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let n_lab = be_u32(&lab, 4, labels)? as usize;
    if n_img != n_lab {
        return Err(DataError::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let pixels = rows * cols;
    check_len(&img, images, 16 + n_img * pixels)?;
    check_len(&lab, labels, 8 + n_lab)?;

    let source = [1, rows, cols];
    let (shape, factor, top, left) = match target {
        None => (source, 1, 0, 0),
        Some(t) => {
            let bad = |reason: &str| DataError::Resample {
                from: source,
                to: t,
                reason: reason.into(),
            };
            if t[0] != 1 {
                return Err(bad("IDX images have one channel"));
            }
            if t[1] == 0 || t[2] == 0 || t[1] > rows || t[2] > cols {
                return Err(bad("target must be non-empty and no larger than the source"));
            }
            let f = (rows / t[1]).min(cols / t[2]);
            (t, f, (rows - t[1] * f) / 2, (cols - t[2] * f) / 2)
        }
    };
    let [_, h, w] = shape;
    let norm = 1.0 / (255.0 * (factor * factor) as f64);
    let mut out = Vec::with_capacity(n_img);
    for i in 0..n_img {
        let src = &img[16 + i * pixels..16 + (i + 1) * pixels];
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0u32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(top + y * factor + dy) * cols + left + x * factor + dx] as u32;
                    }
                }
                data.push(acc as f64 * norm);
            }
        }
        out.push(Example {
            image: Tensor::new(vec![1, h, w], data),
            label: lab[8 + i] as usize,
        });
    }
    Ok(out)
}

/// Serializes examples as an IDX image/label pair (pixels rounded to bytes).
pub fn write_idx(images: &Path, labels: &Path, examples: &[Example]) -> Result<()> {
    let (rows, cols) = match examples.first() {
        Some(z) => (z.image.shape()[1], z.image.shape()[2]),
        None => (0, 0),
    };
    let mut img = Vec::with_capacity(16 + examples.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + examples.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(examples.len() as u32).to_be_bytes());
    for z in examples {
        img.extend(z.image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8));
        lab.push(z.label as u8);
    }
    fs::write(images, img).map_err(|source| DataError::Io {
        path: images.to_path_buf(),
        source,
    })?;
    fs::write(labels, lab).map_err(|source| DataError::Io {
        path: labels.to_path_buf(),
        source,
    })
}
