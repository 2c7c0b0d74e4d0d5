//! Reconstruction and generation metrics.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f32 = 100.0;

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn image_dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid(format!("expected B×C×H×W images, got {:?}", t.shape()))),
    }
}

#[inline]
fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) * 0.5
}

/// PSNR of one image pair given in `[−1, 1]`, computed on the `[0, 1]` scale.
pub fn psnr_single(a: &[f32], b: &[f32]) -> f32 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = unit(x) - unit(y);
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        ((10.0 * (1.0 / mse).log10()) as f32).min(PSNR_CAP)
    }
}

/// Mean per-image PSNR in dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.expect_same_shape(b)?;
    let n = a.dim0();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let per = kernels::map_collect(n, |i| psnr_single(a.row(i), b.row(i)) as f64);
    Ok((per.iter().sum::<f64>() / n as f64) as f32)
}

/// SSIM of one channel plane, averaged over all 7×7 windows at stride 1.
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let np = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sa, mut sb) = (0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let i = (y + dy) * w + x + dx;
                    sa += unit(a[i]);
                    sb += unit(b[i]);
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let i = (y + dy) * w + x + dx;
                    let (da, db) = (unit(a[i]) - ma, unit(b[i]) - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= np;
            vb /= np;
            cov /= np;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over images and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.expect_same_shape(b)?;
    let (n, c, h, w) = image_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "images of {}×{} are smaller than the {}×{} SSIM window",
            h, w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let plane = h * w;
    let vals = kernels::map_collect(n * c, |k| {
        ssim_plane(&a.data()[k * plane..(k + 1) * plane], &b.data()[k * plane..(k + 1) * plane], h, w)
    });
    Ok((vals.iter().sum::<f64>() / vals.len() as f64) as f32)
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Column means and unbiased covariance of `N×D` features.
pub fn gaussian_stats(features: &Tensor) -> Result<GaussianStats> {
    let n = features.dim0();
    if n < 2 {
        return Err(Error::invalid("gaussian stats need at least 2 samples"));
    }
    let d = features.row_len();
    let mut mu = DVector::<f64>::zeros(d);
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            mu[j] += v as f64;
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            centered[j] = v as f64 - mu[j];
        }
        for r in 0..d {
            let cr = centered[r];
            for c in r..d {
                sigma[(r, c)] += cr * centered[c];
            }
        }
    }
    for r in 0..d {
        for c in r..d {
            let v = sigma[(r, c)] / (n - 1) as f64;
            sigma[(r, c)] = v;
            sigma[(c, r)] = v;
        }
    }
    Ok(GaussianStats { mu, sigma, n })
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues down to `−1e-8` (relative to the largest magnitude, floor 1)
/// are clamped to zero; anything more negative is an error.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::invalid("matrix square root needs a square matrix"));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-6 * scale {
        return Err(Error::invalid(format!("matrix is not symmetric (max |A−Aᵀ| = {:e})", asym)));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let tol = -1e-8 * eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < tol {
            return Err(Error::Numerical(format!(
                "matrix has a negative eigenvalue {:e}",
                *v
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Fréchet distance between two Gaussians,
/// `‖μp−μq‖² + Tr(Σp + Σq − 2(Σp½ Σq Σp½)½)`, clamped at zero.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.mu.len() != q.mu.len() {
        return Err(Error::invalid(format!(
            "feature dims differ: {} vs {}",
            p.mu.len(),
            q.mu.len()
        )));
    }
    let mean_term = (&p.mu - &q.mu).norm_squared();
    let sp = matrix_sqrt_psd(&p.sigma)?;
    let inner = &sp * &q.sigma * &sp;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt_trace(&inner)?;
    let d = mean_term + p.sigma.trace() + q.sigma.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Trace of the square root of a PSD matrix, tolerating round-off negatives.
fn psd_sqrt_trace(m: &DMatrix<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.amax().max(1e-300);
    let mut tr = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -1e-6 * top {
            return Err(Error::Numerical(format!(
                "covariance product has a negative eigenvalue {:e}",
                v
            )));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok(tr)
}

/// One line of the metric CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub split: String,
}

impl MetricRow {
    pub fn new(step: u64, metric: &str, value: f64, split: &str) -> Self {
        Self {
            step,
            metric: metric.to_string(),
            value,
            split: split.to_string(),
        }
    }
}

pub const METRIC_HEADER: &str = "step,metric,value,split";

/// Write rows as `step,metric,value,split` CSV with LF endings.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{}", METRIC_HEADER)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.metric, r.value, r.split)?;
    }
    Ok(())
}
