//! Bicubic upsampling by an integer factor as a fixed linear operator.
//!
//! Catmull-Rom kernel (`a = -0.5`), half-pixel centers, edge-clamped taps.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::sparse::SparseMap;
use super::tensor::Tensor;
use super::AutodiffError;

const A: f64 = -0.5;

fn kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for every output coordinate along one axis.
fn axis_taps(src: usize, factor: usize) -> Vec<[(usize, f64); 4]> {
    let f = factor as f64;
    (0..src * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / f - 0.5;
            let base = s.floor();
            let t = s - base;
            let mut taps = [(0usize, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as f64 - 1.0;
                let idx = (base + offset).clamp(0.0, (src - 1) as f64) as usize;
                *tap = (idx, kernel(t - offset));
            }
            taps
        })
        .collect()
}

/// Row-wise map from a flattened `C x h x w` image to `C x (h*f) x (w*f)`.
pub fn bicubic_map(channels: usize, height: usize, width: usize, factor: usize) -> Result<Arc<SparseMap>, AutodiffError> {
    if factor == 0 {
        return Err(AutodiffError::ZeroFactor);
    }
    let ys = axis_taps(height, factor);
    let xs = axis_taps(width, factor);
    let (oh, ow) = (height * factor, width * factor);
    let mut rows = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for ty in &ys {
            for tx in &xs {
                let mut row = Vec::with_capacity(16);
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        let w = wy * wx;
                        if w != 0.0 {
                            row.push((c * height * width + iy * width + ix, w));
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    Ok(SparseMap::from_rows(
        format!("bicubic{factor}x_{channels}x{height}x{width}"),
        channels * height * width,
        rows,
    ))
}

/// Upsamples a `C x h x w` or `N x C x h x w` tensor.
pub fn bicubic_upsample(x: &Tensor, factor: usize) -> Result<Tensor, AutodiffError> {
    let (n, c, h, w, batched) = match x.shape() {
        [c, h, w] => (1, *c, *h, *w, false),
        [n, c, h, w] => (*n, *c, *h, *w, true),
        s => {
            return Err(AutodiffError::ShapeMismatch {
                node: 0,
                op: "bicubic_upsample",
                detail: format!("expected C x H x W or N x C x H x W, got {s:?}"),
            })
        }
    };
    let map = bicubic_map(c, h, w, factor)?;
    let data = map.apply(x.data(), n, false);
    let shape = if batched {
        vec![n, c, h * factor, w * factor]
    } else {
        vec![c, h * factor, w * factor]
    };
    Ok(Tensor::new(shape, data))
}

impl Graph {
    /// Differentiable upsampling of a `[batch, C*h*w]` node.
    pub fn bicubic_upsample(&mut self, x: Var, channels: usize, height: usize, width: usize, factor: usize) -> Result<Var, AutodiffError> {
        let map = bicubic_map(channels, height, width, factor)?;
        self.sparse(x, &map)
    }
}
