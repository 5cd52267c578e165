//! Quality metrics and the classical baseline filter.
//!
//! PSNR uses a dynamic range of 1 and caps at 100 dB. SSIM uses the
//! standard 11x11 Gaussian window (sigma 1.5, K1 = 0.01, K2 = 0.03),
//! evaluated at valid window positions only and averaged over channels
//! (and frames for clips).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// 10 log10(1 / MSE) over all elements, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("psnr: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.mse(b);
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM. Accepts [C,H,W] or [T,C,H,W]; plane scores are averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (planes, h, w) = match a.shape() {
        [c, h, w] => (*c, *h, *w),
        [t, c, h, w] => (t * c, *h, *w),
        other => return Err(Error::shape(format!("ssim expects 3-d or 4-d, got {other:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let mut total = 0.0;
    for p in 0..planes {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        total += ssim_plane(pa, pb, h, w);
    }
    Ok(total / planes as f64)
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
            for ky in 0..SSIM_WINDOW {
                let row = (cy + ky - half) * w + cx - half;
                for kx in 0..SSIM_WINDOW {
                    let wgt = win[ky] * win[kx];
                    let va = a[row + kx] as f64;
                    let vb = b[row + kx] as f64;
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += score;
            count += 1;
        }
    }
    acc / count as f64
}

/// Per-channel spatial median with symmetric-reflect padding; odd k only.
pub fn median_filter(frame: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 || k < 3 {
        return Err(Error::Invalid(format!("median filter needs odd k >= 3, got {k}")));
    }
    let (c, h, w) = frame.dims3();
    if k > h || k > w {
        return Err(Error::shape(format!("kernel {k} exceeds image {h}x{w}")));
    }
    let half = (k / 2) as isize;
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= len {
            2 * len - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut window = vec![0.0f32; k * k];
    for ci in 0..c {
        let plane = &frame.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                for dy in -half..=half {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -half..=half {
                        let sx = reflect(x as isize + dx, w);
                        window[n] = plane[sy * w + sx];
                        n += 1;
                    }
                }
                window.sort_by(|p, q| p.partial_cmp(q).expect("finite pixels"));
                out.data_mut()[ci * h * w + y * w + x] = window[k * k / 2];
            }
        }
    }
    Ok(out)
}

/// Median-filter every frame of a clip.
pub fn median_filter_clip(frames: &Tensor, k: usize) -> Result<Tensor> {
    let (t, _, _, _) = frames.dims4();
    let filtered: Vec<Tensor> = (0..t)
        .map(|i| median_filter(&frames.index_axis0(i), k))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&filtered))
}
