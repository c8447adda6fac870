//! MSE, PSNR and SSIM on `[0, 1]` images, and directory evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::png_names;
use crate::error::{Error, Result};
use crate::fourier::Field;
use crate::image_io::load_png;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized images.
pub const SSIM_L: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Peak value used by PSNR.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakMode {
    /// `MAX = 1`, the range of normalized images.
    #[default]
    Range,
    /// `MAX` is the largest pixel of the reference image.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// Whole-image statistics per channel.
    #[default]
    Global,
    /// Gaussian 11x11 windows with sigma 1.5, averaged over valid positions.
    Windowed,
}

fn check(a: &Field, b: &Field) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Field, b: &Field) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(MAX^2 / MSE)` in dB, with `reference` supplying `MAX` in
/// paper-literal mode. Identical images give `+inf`.
pub fn psnr(reference: &Field, estimate: &Field, peak: PeakMode) -> Result<f64> {
    let m = mse(reference, estimate)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let max = match peak {
        PeakMode::Range => 1.0,
        PeakMode::PaperLiteral => reference.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(10.0 * (max * max / m).log10())
}

fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

fn ssim_global_plane(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    ssim_formula(ma, mb, va / n, vb / n, cov / n)
}

/// Normalized 1-D Gaussian taps. Images smaller than the window use the
/// largest odd size that fits.
fn gaussian_taps(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let t: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

fn ssim_windowed_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_taps(size);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gy) in g.iter().enumerate() {
                for (j, gx) in g.iter().enumerate() {
                    let k = gy * gx;
                    let idx = (y + i) * w + x + j;
                    let (u, v) = (a[idx], b[idx]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            total += ssim_formula(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        }
    }
    total / (oh * ow) as f64
}

/// Mean over channels of the per-channel SSIM.
pub fn ssim(a: &Field, b: &Field, mode: SsimMode) -> Result<f64> {
    check(a, b)?;
    let (h, w, c) = a.shape();
    let per: f64 = (0..c)
        .map(|ch| {
            let (pa, pb) = (a.plane(ch), b.plane(ch));
            match mode {
                SsimMode::Global => ssim_global_plane(pa, pb),
                SsimMode::Windowed => ssim_windowed_plane(pa, pb, h, w),
            }
        })
        .sum();
    Ok(per / c as f64)
}

/// All metrics for one image pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim_global: f64,
    pub ssim_windowed: f64,
}

impl MetricReport {
    pub fn compute(reference: &Field, estimate: &Field) -> Result<Self> {
        Ok(Self {
            mse: mse(reference, estimate)?,
            psnr_db: psnr(reference, estimate, PeakMode::Range)?,
            ssim_global: ssim(reference, estimate, SsimMode::Global)?,
            ssim_windowed: ssim(reference, estimate, SsimMode::Windowed)?,
        })
    }
}

/// Per-image rows keyed by file name, in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, MetricReport)>,
}

impl Evaluation {
    pub fn mean(&self) -> MetricReport {
        let n = self.rows.len().max(1) as f64;
        let sum = |f: fn(&MetricReport) -> f64| self.rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        MetricReport {
            mse: sum(|r| r.mse),
            psnr_db: sum(|r| r.psnr_db),
            ssim_global: sum(|r| r.ssim_global),
            ssim_windowed: sum(|r| r.ssim_windowed),
        }
    }

    /// `path,mse,psnr_db,ssim_global,ssim_windowed` rows and a `mean` footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,mse,psnr_db,ssim_global,ssim_windowed\n");
        let line = |s: &mut String, name: &str, r: &MetricReport| {
            let _ = writeln!(
                s,
                "{name},{:.9e},{:.6},{:.9},{:.9}",
                r.mse, r.psnr_db, r.ssim_global, r.ssim_windowed
            );
        };
        for (name, r) in &self.rows {
            line(&mut s, name, r);
        }
        line(&mut s, "mean", &self.mean());
        s
    }
}

/// Compares every PNG in `pred_dir` with the same-named file in `gt_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<Evaluation> {
    let pred = png_names(pred_dir)?;
    let gt = png_names(gt_dir)?;
    if let Some(missing) = pred.iter().find(|n| !gt.contains(*n)) {
        return Err(Error::Dataset(format!(
            "no ground truth for {}",
            pred_dir.join(missing).display()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", pred_dir.display())));
    }
    let names: Vec<String> = pred.into_iter().collect();
    let rows = names
        .par_iter()
        .map(|n| {
            let p = load_png(pred_dir.join(n))?;
            let g = load_png(gt_dir.join(n))?;
            Ok((n.clone(), MetricReport::compute(&g, &p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { rows })
}
