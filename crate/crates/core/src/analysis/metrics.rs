//! Image quality metrics and label-aware reconstruction scoring.

use std::collections::BTreeMap;

use serde::Serialize;

use super::hungarian::hungarian;
use super::AnalysisError;
use crate::autodiff::Tensor;

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean squared error over all entries.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Peak-1 PSNR in dB; `+inf` at zero error.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mean SSIM of two `[C, H, W]` images with dynamic range 1.
///
/// Gaussian 7x7 window (sigma 1.5) over all fully contained positions, shrunk
/// to `min(H, W)` for small images; averaged over positions and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim needs equal shapes");
    let (c, h, w) = match a.shape() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        s => panic!("ssim needs a [C, H, W] or [H, W] image, got {s:?}"),
    };
    let size = SSIM_WINDOW.min(h).min(w);
    let win = gaussian_window(size);
    let (x, y) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let base = ch * h * w;
        for top in 0..=h - size {
            for left in 0..=w - size {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let k = base + (top + i) * w + left + j;
                        let g = win[i * size + j];
                        mx += g * x[k];
                        my += g * y[k];
                        xx += g * (x[k] * x[k]);
                        yy += g * (y[k] * y[k]);
                        xy += g * (x[k] * y[k]);
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cxy = xy - mx * my;
                let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub recon: usize,
    pub truth: usize,
    pub label: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image metrics under the optimal within-label assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Indexed by reconstruction.
    pub images: Vec<ImageScore>,
    /// `assignment[recon] = truth`.
    pub assignment: Vec<usize>,
    pub mean_mse: f64,
    /// `+inf` if any image is reconstructed exactly.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn split_images(t: &Tensor) -> Result<(usize, Vec<usize>), AnalysisError> {
    match t.shape() {
        [n, rest @ ..] if rest.len() == 3 => Ok((*n, rest.to_vec())),
        s => Err(AnalysisError::Shape(format!("expected [N, C, H, W], got {s:?}"))),
    }
}

/// Matches reconstructions to ground truth within each label group by
/// minimum total MSE, then scores each pair.
pub fn score_reconstructions(
    recon: &Tensor,
    truth: &Tensor,
    recon_labels: &[usize],
    truth_labels: &[usize],
) -> Result<MetricReport, AnalysisError> {
    let (n, shape) = split_images(recon)?;
    let (nt, tshape) = split_images(truth)?;
    if n != nt || shape != tshape {
        return Err(AnalysisError::Shape(format!(
            "reconstruction {:?} and truth {:?} differ",
            recon.shape(),
            truth.shape()
        )));
    }
    if recon_labels.len() != n || truth_labels.len() != n {
        return Err(AnalysisError::Shape(format!(
            "{n} images but {} / {} labels",
            recon_labels.len(),
            truth_labels.len()
        )));
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, &l) in recon_labels.iter().enumerate() {
        groups.entry(l).or_default().0.push(i);
    }
    for (i, &l) in truth_labels.iter().enumerate() {
        groups.entry(l).or_default().1.push(i);
    }
    if let Some((&label, (r, t))) = groups.iter().find(|(_, (r, t))| r.len() != t.len()) {
        return Err(AnalysisError::LabelMismatch {
            label,
            recon: r.len(),
            truth: t.len(),
        });
    }
    let d: usize = shape.iter().product();
    let image = |t: &Tensor, i: usize| Tensor::new(shape.clone(), t.data()[i * d..(i + 1) * d].to_vec());
    let mut assignment = vec![0; n];
    for (r, t) in groups.values() {
        let cost: Vec<Vec<f64>> = r
            .iter()
            .map(|&ri| {
                t.iter()
                    .map(|&ti| mse(&recon.data()[ri * d..(ri + 1) * d], &truth.data()[ti * d..(ti + 1) * d]))
                    .collect()
            })
            .collect();
        for (row, col) in hungarian(&cost).into_iter().enumerate() {
            assignment[r[row]] = t[col];
        }
    }
    let images: Vec<ImageScore> = (0..n)
        .map(|i| {
            let (a, b) = (image(recon, i), image(truth, assignment[i]));
            let e = mse(a.data(), b.data());
            ImageScore {
                recon: i,
                truth: assignment[i],
                label: recon_labels[i],
                mse: e,
                psnr: psnr(e),
                ssim: ssim(&a, &b),
            }
        })
        .collect();
    let mean = |f: fn(&ImageScore) -> f64| images.iter().map(f).sum::<f64>() / n.max(1) as f64;
    Ok(MetricReport {
        mean_mse: mean(|s| s.mse),
        mean_psnr: mean(|s| s.psnr),
        mean_ssim: mean(|s| s.ssim),
        images,
        assignment,
    })
}
