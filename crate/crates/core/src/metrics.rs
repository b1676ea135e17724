//! Image-quality metrics and the composite training reward
//! `T(I) = GSSIM(I, I_gt) + 1 / (MSE_roi(I, I_gt) + 1)`.
//!
//! The quality report and reward normalise both images by the ground-truth
//! min/max, so the peak is 1. `psnr` and `ssim` themselves work on raw data
//! with an explicit peak.

use std::fmt;

use ndarray::{Array, ArrayView, Axis, Dimension, Zip};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: SSIM_WINDOW,
            k1: SSIM_K1,
            k2: SSIM_K2,
            peak: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub gssim: f64,
    pub reward: f64,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "stage,psnr,ssim,gssim,reward";

    /// One CSV row; an infinite PSNR is written as `inf`.
    pub fn csv_row(&self, stage: &str) -> String {
        format!("{stage},{},{},{},{}", fmt_f(self.psnr), fmt_f(self.ssim), fmt_f(self.gssim), fmt_f(self.reward))
    }
}

fn fmt_f(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "psnr={} ssim={:.4} gssim={:.4} reward={:.4}",
            fmt_f(self.psnr),
            self.ssim,
            self.gssim,
            self.reward
        )
    }
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("metric inputs differ in shape: {a:?} vs {b:?}")));
    }
    if a.iter().product::<usize>() == 0 {
        return Err(Error::input("metric inputs are empty"));
    }
    Ok(())
}

pub fn mse<D: Dimension>(a: &Array<f64, D>, reference: &Array<f64, D>) -> Result<f64> {
    check_shapes(a.shape(), reference.shape())?;
    let sum = Zip::from(a).and(reference).fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
    Ok(sum / a.len() as f64)
}

/// Mean squared error over the voxels where `mask` is set.
pub fn masked_mse<D: Dimension>(a: &Array<f64, D>, reference: &Array<f64, D>, mask: &Array<bool, D>) -> Result<f64> {
    check_shapes(a.shape(), reference.shape())?;
    check_shapes(a.shape(), mask.shape())?;
    let (sum, n) = Zip::from(a).and(reference).and(mask).fold((0.0, 0usize), |(s, n), x, y, &m| {
        if m {
            (s + (x - y) * (x - y), n + 1)
        } else {
            (s, n)
        }
    });
    if n == 0 {
        return Err(Error::input("ROI mask is empty"));
    }
    Ok(sum / n as f64)
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10·log10(peak² / MSE)`, `+∞` for identical inputs.
pub fn psnr<D: Dimension>(a: &Array<f64, D>, reference: &Array<f64, D>, peak: f64) -> Result<f64> {
    check_peak(peak)?;
    Ok(psnr_from_mse(mse(a, reference)?, peak))
}

pub fn masked_psnr<D: Dimension>(
    a: &Array<f64, D>,
    reference: &Array<f64, D>,
    mask: &Array<bool, D>,
    peak: f64,
) -> Result<f64> {
    check_peak(peak)?;
    Ok(psnr_from_mse(masked_mse(a, reference, mask)?, peak))
}

fn check_peak(peak: f64) -> Result<()> {
    if peak.is_finite() && peak > 0.0 {
        Ok(())
    } else {
        Err(Error::parameter(format!("peak must be positive, got {peak}")))
    }
}

fn gaussian_window(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with `w` along every axis.
fn filter_valid<D: Dimension>(x: ArrayView<f64, D>, w: &[f64]) -> Array<f64, D> {
    let k = w.len();
    let mut cur = x.to_owned();
    for ax in 0..cur.ndim() {
        let mut shape = cur.raw_dim();
        shape[ax] = cur.shape()[ax] + 1 - k;
        let mut out = Array::<f64, D>::zeros(shape);
        Zip::from(out.lanes_mut(Axis(ax)))
            .and(cur.lanes(Axis(ax)))
            .for_each(|mut o, i| {
                for (j, dst) in o.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (t, wt) in w.iter().enumerate() {
                        acc += wt * i[j + t];
                    }
                    *dst = acc;
                }
            });
        cur = out;
    }
    cur
}

/// Local SSIM values at every fully-contained window position.
pub fn ssim_map<D: Dimension>(a: &Array<f64, D>, reference: &Array<f64, D>, p: &SsimParams) -> Result<Array<f64, D>> {
    check_shapes(a.shape(), reference.shape())?;
    check_peak(p.peak)?;
    if p.window == 0 || p.window.is_multiple_of(2) {
        return Err(Error::parameter(format!("SSIM window must be odd, got {}", p.window)));
    }
    if a.shape().iter().any(|&n| n < p.window) {
        return Err(Error::input(format!(
            "SSIM needs at least {} samples per axis, got {:?}",
            p.window,
            a.shape()
        )));
    }
    let w = gaussian_window(p.window);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mu_a = filter_valid(a.view(), &w);
    let mu_r = filter_valid(reference.view(), &w);
    let aa = filter_valid((a * a).view(), &w);
    let rr = filter_valid((reference * reference).view(), &w);
    let ar = filter_valid((a * reference).view(), &w);
    let mut out = mu_a.clone();
    Zip::from(&mut out)
        .and(&mu_a)
        .and(&mu_r)
        .and(&aa)
        .and(&rr)
        .and(&ar)
        .for_each(|o, &ma, &mr, &eaa, &err, &ear| {
            let va = eaa - ma * ma;
            let vr = err - mr * mr;
            let cov = ear - ma * mr;
            *o = ((2.0 * ma * mr + c1) * (2.0 * cov + c2)) / ((ma * ma + mr * mr + c1) * (va + vr + c2));
        });
    Ok(out)
}

/// Mean local SSIM with an 11-tap Gaussian window (σ = 1.5).
pub fn ssim<D: Dimension>(a: &Array<f64, D>, reference: &Array<f64, D>, p: &SsimParams) -> Result<f64> {
    let m = ssim_map(a, reference, p)?;
    Ok(m.sum() / m.len() as f64)
}

/// Mean local SSIM over windows whose centre lies inside `mask`.
pub fn masked_ssim<D: Dimension>(
    a: &Array<f64, D>,
    reference: &Array<f64, D>,
    mask: &Array<bool, D>,
    p: &SsimParams,
) -> Result<f64> {
    check_shapes(a.shape(), mask.shape())?;
    let m = ssim_map(a, reference, p)?;
    let half = (p.window / 2) as isize;
    let inner = mask.slice_each_axis(|_| ndarray::Slice::new(half, Some(-half), 1));
    let (sum, n) = Zip::from(&m).and(&inner).fold((0.0, 0usize), |(s, n), &v, &k| {
        if k {
            (s + v, n + 1)
        } else {
            (s, n)
        }
    });
    if n == 0 {
        return Err(Error::input("mask contains no complete SSIM window centre"));
    }
    Ok(sum / n as f64)
}

/// `√(Σ ∂_k²)` with central differences inside and one-sided differences at
/// the borders.
pub fn gradient_magnitude<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    let mut acc = Array::<f64, D>::zeros(x.raw_dim());
    for ax in 0..x.ndim() {
        let n = x.shape()[ax];
        if n < 2 {
            continue;
        }
        Zip::from(acc.lanes_mut(Axis(ax)))
            .and(x.lanes(Axis(ax)))
            .for_each(|mut o, i| {
                for j in 0..n {
                    let d = if j == 0 {
                        i[1] - i[0]
                    } else if j == n - 1 {
                        i[n - 1] - i[n - 2]
                    } else {
                        0.5 * (i[j + 1] - i[j - 1])
                    };
                    o[j] += d * d;
                }
            });
    }
    acc.mapv_inplace(f64::sqrt);
    acc
}

pub fn gssim<D: Dimension>(a: &Array<f64, D>, reference: &Array<f64, D>, p: &SsimParams) -> Result<f64> {
    check_shapes(a.shape(), reference.shape())?;
    ssim(&gradient_magnitude(a), &gradient_magnitude(reference), p)
}

pub fn masked_gssim<D: Dimension>(
    a: &Array<f64, D>,
    reference: &Array<f64, D>,
    mask: &Array<bool, D>,
    p: &SsimParams,
) -> Result<f64> {
    check_shapes(a.shape(), reference.shape())?;
    masked_ssim(&gradient_magnitude(a), &gradient_magnitude(reference), mask, p)
}

/// Maps `img` and `gt` to the ground truth's `[0, 1]` range.
pub fn normalize_pair<D: Dimension>(img: &Array<f64, D>, gt: &Array<f64, D>) -> Result<(Array<f64, D>, Array<f64, D>)> {
    check_shapes(img.shape(), gt.shape())?;
    let (lo, hi) = gt
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::input("ground truth has no dynamic range"));
    }
    let f = |v: f64| (v - lo) / range;
    Ok((img.mapv(f), gt.mapv(f)))
}

/// `gssim + 1 / (mse_roi + 1)`.
pub fn reward_from_terms(gssim: f64, mse_roi: f64) -> f64 {
    gssim + 1.0 / (mse_roi + 1.0)
}

/// The composite reward on gt-normalised data; the gradient SSIM is averaged
/// over window centres inside the ROI, the squared error over ROI voxels.
pub fn reward<D: Dimension>(img: &Array<f64, D>, gt: &Array<f64, D>, roi: &Array<bool, D>) -> Result<f64> {
    Ok(quality_report(img, gt, roi)?.reward)
}

/// PSNR, SSIM, GSSIM and reward inside `roi`, all on gt-normalised data.
pub fn quality_report<D: Dimension>(img: &Array<f64, D>, gt: &Array<f64, D>, roi: &Array<bool, D>) -> Result<QualityReport> {
    check_shapes(img.shape(), roi.shape())?;
    if !roi.iter().any(|&m| m) {
        return Err(Error::input("ROI mask is empty"));
    }
    let (a, r) = normalize_pair(img, gt)?;
    let p = SsimParams::default();
    let mse_roi = masked_mse(&a, &r, roi)?;
    let gs = masked_gssim(&a, &r, roi, &p)?;
    Ok(QualityReport {
        psnr: psnr_from_mse(mse_roi, 1.0),
        ssim: masked_ssim(&a, &r, roi, &p)?,
        gssim: gs,
        reward: reward_from_terms(gs, mse_roi),
    })
}
