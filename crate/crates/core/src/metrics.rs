//! Full-reference image quality: PSNR, SSIM and MSE on `[0, 1]` images.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and
//! L = 1, evaluated at every valid window position of each channel; the
//! per-channel means are averaged. All accumulation is in f64.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Short name of the SSIM variant, written into reports.
pub const SSIM_VARIANT: &str = "gaussian11-sigma1.5-k0.01-0.03-valid";

fn check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::invalid(op, "empty image"));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// Peak-1 PSNR in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of `(C, H, W)` or `(H, W)` images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check("ssim", a, b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid("ssim", format!("expected (C, H, W), got {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter(&x, h, w, &win);
        let my = filter(&y, h, w, &win);
        let sxx = filter(&xx, h, w, &win);
        let syy = filter(&yy, h, w, &win);
        let sxy = filter(&xy, h, w, &win);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Metrics of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl ImageScore {
    pub fn compute(id: impl Into<String>, output: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(ImageScore {
            id: id.into(),
            psnr: psnr(output, target)?,
            ssim: ssim(output, target)?,
            mse: mse(output, target)?,
        })
    }
}

/// Per-image scores in input order plus their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
}

impl MetricReport {
    pub fn push(&mut self, s: ImageScore) {
        self.images.push(s);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn mean_of(&self, f: impl Fn(&ImageScore) -> f64) -> f64 {
        if self.images.is_empty() {
            return f64::NAN;
        }
        self.images.iter().map(f).sum::<f64>() / self.images.len() as f64
    }

    /// Mean PSNR; infinite if any image matched exactly.
    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|s| s.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean_of(|s| s.ssim)
    }

    pub fn mean_mse(&self) -> f64 {
        self.mean_of(|s| s.mse)
    }

    /// Tab-separated report: header comment, one line per image, `MEAN` line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# ssim={SSIM_VARIANT}\nid\tpsnr\tssim\tmse\n");
        for s in &self.images {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.8}", s.id, fmt_db(s.psnr), s.ssim, s.mse);
        }
        let _ = writeln!(
            out,
            "MEAN\t{}\t{:.6}\t{:.8}",
            fmt_db(self.mean_psnr()),
            self.mean_ssim(),
            self.mean_mse()
        );
        out
    }
}

/// Decibels with four decimals, `inf` for the exact-match sentinel.
pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}
