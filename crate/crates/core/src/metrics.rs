//! Image and geometry metrics.

use crate::error::{shape_err, Result};
use crate::image::FaceImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Images live in `[-1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `size × size` plane.
fn filter_valid(plane: &[f64], size: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let out = size - k + 1;
    let mut rows = vec![0.0; size * out];
    for y in 0..size {
        for x in 0..out {
            rows[y * out + x] = (0..k).map(|i| w[i] * plane[y * size + x + i]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            res[y * out + x] = (0..k).map(|i| w[i] * rows[(y + i) * out + x]).sum();
        }
    }
    res
}

/// Mean SSIM over all valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if a.size != b.size {
        return shape_err("ssim", format!("{}px vs {}px", a.size, b.size));
    }
    if a.size < SSIM_WINDOW {
        return shape_err("ssim", format!("images need >= {SSIM_WINDOW}px, got {}", a.size));
    }
    let n = a.size;
    let plane = n * n;
    let w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, n, &w);
        let mu_b = filter_valid(&pb, n, &w);
        let e_aa = filter_valid(&prod(&pa, &pa), n, &w);
        let e_bb = filter_valid(&prod(&pb, &pb), n, &w);
        let e_ab = filter_valid(&prod(&pa, &pb), n, &w);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Mean Euclidean distance between corresponding interleaved `(x, y)` points.
pub fn landmark_error(predicted: &[f32], truth: &[f32]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.len() % 2 != 0 || predicted.is_empty() {
        return shape_err("landmark_error", format!("{} vs {} coordinates", predicted.len(), truth.len()));
    }
    let d: f64 = predicted
        .chunks_exact(2)
        .zip(truth.chunks_exact(2))
        .map(|(p, t)| ((p[0] - t[0]) as f64).hypot((p[1] - t[1]) as f64))
        .sum();
    Ok(d / (predicted.len() / 2) as f64)
}

/// Mean `|a − b|` over pixels inside the union of `boxes` and over the rest.
/// A side with no pixels reports 0.
pub fn region_l1(a: &FaceImage, b: &FaceImage, boxes: &[PixelBox]) -> Result<(f64, f64)> {
    if a.size != b.size {
        return shape_err("region_l1", format!("{}px vs {}px", a.size, b.size));
    }
    let n = a.size;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for ch in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let d = (a.at(ch, y, x) - b.at(ch, y, x)).abs() as f64;
                if boxes.iter().any(|bx| bx.contains(x, y)) {
                    si += d;
                    ni += 1;
                } else {
                    so += d;
                    no += 1;
                }
            }
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    Ok((mean(si, ni), mean(so, no)))
}

/// Mean RGB over the pixels selected by `mask`.
pub fn masked_mean_color(img: &FaceImage, mask: &[bool]) -> Result<[f64; 3]> {
    let plane = img.size * img.size;
    if mask.len() != plane {
        return shape_err("masked_mean_color", format!("mask of {} for {plane} pixels", mask.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return shape_err("masked_mean_color", "empty mask");
    }
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let s: f64 = (0..plane).filter(|&p| mask[p]).map(|p| img.data[ch * plane + p] as f64).sum();
        *o = s / count as f64;
    }
    Ok(out)
}
