//! Per-frame PSNR and SSIM on `[L, C, H, W]` videos in `[−1, 1]`.
//! Both rescale to `[0, 1]` first.

use thiserror::Error;

use crate::numerics::Array;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("expected a [frames, channels, height, width] video, got {0:?}")]
    NotVideo(Vec<usize>),
    #[error("frame {height}x{width} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    FrameTooSmall { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

impl MetricReport {
    fn new(per_frame: Vec<f64>) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
        Self { per_frame, mean }
    }
}

fn check(a: &Array<f32>, b: &Array<f32>) -> Result<(usize, usize, usize, usize), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    match *a.shape() {
        [l, c, h, w] => Ok((l, c, h, w)),
        _ => Err(MetricError::NotVideo(a.shape().to_vec())),
    }
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// `10·log10(1/MSE)` per frame, capped at 99 dB.
pub fn psnr(a: &Array<f32>, b: &Array<f32>) -> Result<MetricReport, MetricError> {
    let (l, c, h, w) = check(a, b)?;
    let len = c * h * w;
    let per_frame = (0..l)
        .map(|f| {
            let range = f * len..(f + 1) * len;
            let mse = a.data()[range.clone()]
                .iter()
                .zip(&b.data()[range])
                .map(|(&x, &y)| (unit(x) - unit(y)).powi(2))
                .sum::<f64>()
                / len as f64;
            psnr_from_mse(mse)
        })
        .collect();
    Ok(MetricReport::new(per_frame))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable "valid" filtering of an `h×w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[0, 1]` grayscale images.
pub fn ssim_gray(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64, MetricError> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::FrameTooSmall {
            height: h,
            width: w,
        });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(a, a), h, w, &taps);
    let bb = filter_valid(&prod(b, b), h, w, &taps);
    let ab = filter_valid(&prod(a, b), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn gray(frame: &[f32], c: usize, plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|p| (0..c).map(|ch| unit(frame[ch * plane + p])).sum::<f64>() / c as f64)
        .collect()
}

/// SSIM per frame on the channel-mean grayscale image.
pub fn ssim(a: &Array<f32>, b: &Array<f32>) -> Result<MetricReport, MetricError> {
    let (l, c, h, w) = check(a, b)?;
    let len = c * h * w;
    let per_frame = (0..l)
        .map(|f| {
            let range = f * len..(f + 1) * len;
            let ga = gray(&a.data()[range.clone()], c, h * w);
            let gb = gray(&b.data()[range], c, h * w);
            ssim_gray(&ga, &gb, h, w)
        })
        .collect::<Result<_, _>>()?;
    Ok(MetricReport::new(per_frame))
}
