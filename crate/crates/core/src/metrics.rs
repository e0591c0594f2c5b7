//! Reconstruction quality: PSNR, SSIM and optimal reconstruction-to-truth
//! matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBatch;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Reconstructions below this PSNR count as visually corrupted.
pub const CORRUPTION_PSNR: f64 = 18.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("images differ in size: {0} vs {1} values")]
    ShapeMismatch(usize, usize),
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("batches differ: {0} reconstructions vs {1} ground-truth images")]
    BatchSize(usize, usize),
    #[error("batches have different image dimensions")]
    Dims,
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`] when
/// `MSE < 1e-10`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM over every `8×8` window (stride 1) of each channel, averaged
/// over channels. Dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], (channels, height, width): (usize, usize, usize)) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(a.len(), b.len()));
    }
    if a.len() != channels * height * width {
        return Err(MetricsError::ShapeMismatch(a.len(), channels * height * width));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { height, width, window: SSIM_WINDOW });
    }
    let plane = height * width;
    let total: f64 = (0..channels)
        .map(|c| ssim_plane(&a[c * plane..(c + 1) * plane], &b[c * plane..(c + 1) * plane], height, width))
        .sum();
    Ok(total / channels as f64)
}

fn ssim_plane(a: &[f64], b: &[f64], height: usize, width: usize) -> f64 {
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - k {
        for x0 in 0..=width - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let (p, q) = (a[y * width + x], b[y * width + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ssim_from_stats(ma, mb, va, vb, cov);
            count += 1;
        }
    }
    total / count as f64
}

/// SSIM of one window from its means, variances and covariance.
pub fn ssim_from_stats(mean_a: f64, mean_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mean_a * mean_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mean_a * mean_a + mean_b * mean_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Minimum-cost perfect assignment on a square cost matrix given row-major.
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    if n == 0 {
        return Vec::new();
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `permutation[r]` is the ground-truth index matched to reconstruction `r`.
    pub permutation: Vec<usize>,
    pub per_image_psnr: Vec<f64>,
    pub per_image_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Pairs reconstructions with ground-truth images to maximize total PSNR,
/// then scores each pair.
pub fn match_batch(recon: &ImageBatch, truth: &ImageBatch) -> Result<MatchResult, MetricsError> {
    if recon.len() != truth.len() {
        return Err(MetricsError::BatchSize(recon.len(), truth.len()));
    }
    if recon.dims() != truth.dims() {
        return Err(MetricsError::Dims);
    }
    let n = recon.len();
    let mut cost = Vec::with_capacity(n * n);
    for r in 0..n {
        for g in 0..n {
            cost.push(-psnr(recon.image(r), truth.image(g))?);
        }
    }
    let permutation = hungarian(&cost, n);
    let per_image_psnr: Vec<f64> = permutation.iter().enumerate().map(|(r, &g)| -cost[r * n + g]).collect();
    let per_image_ssim = permutation
        .iter()
        .enumerate()
        .map(|(r, &g)| ssim(recon.image(r), truth.image(g), truth.dims()))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(MatchResult {
        mean_psnr: mean(&per_image_psnr),
        mean_ssim: mean(&per_image_ssim),
        permutation,
        per_image_psnr,
        per_image_ssim,
    })
}
