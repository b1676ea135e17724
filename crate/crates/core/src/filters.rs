//! Bilateral filtering with the learnable `(σ_s, σ_i)` pairs.
//!
//! Weights are `G_σs(‖x − o‖) · G_σi(I(x) − I(o))` with
//! `G_σ(x) = exp(−x²/2σ²) / (2σ²)` over a 5×5 (sinogram view) or 5×5×5
//! (volume) neighbourhood, distances in grid units. At borders the
//! neighbourhood is truncated and the weights renormalised.

use ndarray::{Array, Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Dimension, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sinogram::Sinogram;
use crate::volume::Volume;

/// Neighbourhood half-width: 5 samples per axis.
pub const RADIUS: isize = 2;

/// The four inference-time parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    pub sino_sigma_s: f64,
    pub sino_sigma_i: f64,
    pub vol_sigma_s: f64,
    pub vol_sigma_i: f64,
}

impl FilterParams {
    pub const NAMES: [&'static str; 4] = ["sino_sigma_s", "sino_sigma_i", "vol_sigma_s", "vol_sigma_i"];

    pub fn to_array(&self) -> [f64; 4] {
        [self.sino_sigma_s, self.sino_sigma_i, self.vol_sigma_s, self.vol_sigma_i]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        FilterParams {
            sino_sigma_s: v[0],
            sino_sigma_i: v[1],
            vol_sigma_s: v[2],
            vol_sigma_i: v[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `G_σ(x) = exp(−x² / 2σ²) / (2σ²)`.
pub fn gaussian_kernel_value(x: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma, "sigma")?;
    Ok(gauss(x, sigma))
}

#[inline]
fn gauss(x: f64, sigma: f64) -> f64 {
    let two_s2 = 2.0 * sigma * sigma;
    (-x * x / two_s2).exp() / two_s2
}

fn check_sigma(sigma: f64, name: &str) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::parameter(format!("{name} must be positive and finite, got {sigma}")))
    }
}

fn check_inputs<'a>(values: impl IntoIterator<Item = &'a f64>, sigma_s: f64, sigma_i: f64) -> Result<()> {
    check_sigma(sigma_s, "sigma_s")?;
    check_sigma(sigma_i, "sigma_i")?;
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::input("bilateral filter input contains non-finite values"));
    }
    Ok(())
}

pub fn bilateral_2d(img: &Array2<f64>, sigma_s: f64, sigma_i: f64) -> Result<Array2<f64>> {
    let (h, w) = img.dim();
    if h < 5 || w < 5 {
        return Err(Error::input(format!("image must be at least 5x5, got {h}x{w}")));
    }
    check_inputs(img.iter(), sigma_s, sigma_i)?;
    let mut out = Array2::zeros((h, w));
    filter_plane(img.view(), out.view_mut(), &spatial_weights_2d(sigma_s), sigma_i);
    Ok(out)
}

fn spatial_weights_2d(sigma_s: f64) -> Vec<(isize, isize, f64)> {
    let mut v = Vec::with_capacity(25);
    for dy in -RADIUS..=RADIUS {
        for dx in -RADIUS..=RADIUS {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            v.push((dy, dx, gauss(d, sigma_s)));
        }
    }
    v
}

fn filter_plane(img: ArrayView2<f64>, mut out: ArrayViewMut2<f64>, spatial: &[(isize, isize, f64)], sigma_i: f64) {
    let (h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let center = img[[y, x]];
            let mut num = 0.0;
            let mut den = 0.0;
            for &(dy, dx, ws) in spatial {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let v = img[[yy as usize, xx as usize]];
                let wt = ws * gauss(center - v, sigma_i);
                num += wt * v;
                den += wt;
            }
            out[[y, x]] = if den > 0.0 { num / den } else { center };
        }
    }
}

pub fn bilateral_3d(vol: &Array3<f64>, sigma_s: f64, sigma_i: f64) -> Result<Array3<f64>> {
    let (d, h, w) = vol.dim();
    if d < 5 || h < 5 || w < 5 {
        return Err(Error::input(format!("volume must be at least 5x5x5, got {d}x{h}x{w}")));
    }
    check_inputs(vol.iter(), sigma_s, sigma_i)?;
    let mut spatial = Vec::with_capacity(125);
    for dz in -RADIUS..=RADIUS {
        for dy in -RADIUS..=RADIUS {
            for dx in -RADIUS..=RADIUS {
                let dist = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                spatial.push((dz, dy, dx, gauss(dist, sigma_s)));
            }
        }
    }
    let mut out = Array3::zeros((d, h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(z, mut slab)| {
            for y in 0..h {
                for x in 0..w {
                    let center = vol[[z, y, x]];
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for &(dz, dy, dx, ws) in &spatial {
                        let zz = z as isize + dz;
                        let yy = y as isize + dy;
                        let xx = x as isize + dx;
                        if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let v = vol[[zz as usize, yy as usize, xx as usize]];
                        let wt = ws * gauss(center - v, sigma_i);
                        num += wt * v;
                        den += wt;
                    }
                    slab[[y, x]] = if den > 0.0 { num / den } else { center };
                }
            }
        });
    Ok(out)
}

pub fn bilateral_volume(vol: &Volume, sigma_s: f64, sigma_i: f64) -> Result<Volume> {
    Ok(Volume {
        data: bilateral_3d(&vol.data, sigma_s, sigma_i)?,
        grid: vol.grid,
    })
}

/// Filters each view's `rows × cols` plane independently.
pub fn bilateral_sinogram(sino: &Sinogram, sigma_s: f64, sigma_i: f64) -> Result<Sinogram> {
    let (_, rows, cols) = sino.data.dim();
    if rows < 5 || cols < 5 {
        return Err(Error::input(format!(
            "sinogram views must be at least 5x5, got {rows}x{cols}"
        )));
    }
    check_inputs(sino.data.iter(), sigma_s, sigma_i)?;
    let spatial = spatial_weights_2d(sigma_s);
    let mut out = sino.clone();
    out.data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(sino.data.axis_iter(Axis(0)))
        .for_each(|(dst, src)| filter_plane(src, dst, &spatial, sigma_i));
    Ok(out)
}

/// Diagnostic map `|after − before| / max |after − before|`; all zero when
/// nothing changed.
pub fn sigma_strength_map<D: Dimension>(before: &Array<f64, D>, after: &Array<f64, D>) -> Result<Array<f64, D>> {
    if before.shape() != after.shape() {
        return Err(Error::shape(format!(
            "strength map inputs differ: {:?} vs {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let mut diff = Zip::from(before).and(after).map_collect(|a, b| (b - a).abs());
    let max = diff.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        diff.mapv_inplace(|v| v / max);
    }
    Ok(diff)
}
