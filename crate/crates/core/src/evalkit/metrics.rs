use crate::error::{Error, Result};
use crate::synthset::{Image, TiledGrid, BACKGROUND};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// A pixel is foreground when some channel differs from the background by more than this.
pub const FOREGROUND_THRESHOLD: f32 = 0.05;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Domain(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the fully covered ("valid") positions.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), unit
/// dynamic range, averaged over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a
            .data
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect();
        let y: Vec<f64> = b
            .data
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (mx, my) = (filter_valid(&x, w, h, &k), filter_valid(&y, w, h, &k));
        let sxx = filter_valid(&prod(&x, &x), w, h, &k);
        let syy = filter_valid(&prod(&y, &y), w, h, &k);
        let sxy = filter_valid(&prod(&x, &y), w, h, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

pub fn is_foreground(px: [f32; 3]) -> bool {
    px.iter()
        .zip(BACKGROUND)
        .any(|(v, b)| (v - b).abs() > FOREGROUND_THRESHOLD)
}

pub fn luminance(px: [f32; 3]) -> f64 {
    0.2126 * f64::from(px[0]) + 0.7152 * f64::from(px[1]) + 0.0722 * f64::from(px[2])
}

/// Linearly interpolated percentile of sorted data, `q` in `[0, 100]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Highlight prominence of one view: 99th percentile minus median of the
/// foreground luminance, 0 without foreground.
pub fn view_specular(view: &Image) -> f64 {
    let mut lum: Vec<f64> = view
        .data
        .chunks(3)
        .map(|p| [p[0], p[1], p[2]])
        .filter(|&p| is_foreground(p))
        .map(luminance)
        .collect();
    if lum.is_empty() {
        return 0.0;
    }
    lum.sort_by(f64::total_cmp);
    percentile(&lum, 99.0) - percentile(&lum, 50.0)
}

/// [`view_specular`] averaged over the four quadrants.
pub fn specular_statistic(tile: &TiledGrid) -> f64 {
    (0..4)
        .map(|q| view_specular(&tile.quadrant(q)))
        .sum::<f64>()
        / 4.0
}
