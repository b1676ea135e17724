//! Flying-focal-spot merging and row-wise fan-to-parallel rebinning.
//!
//! A fan ray `(α, γ)` of one detector row is the parallel ray
//! `θ = α + γ`, `s = r sin γ`. Rebinning resamples every row independently
//! onto a regular `(θ, s)` grid by bilinear interpolation in `(α, γ)`; the
//! row height `t` is carried through unchanged.

use log::debug;
use ndarray::{Array3, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{FfsMode, ScanGeometry};
use crate::sinogram::{Layout, Sinogram};

/// Regular parallel-beam sampling of one detector row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParallelGrid {
    pub n_thetas: usize,
    pub n_s: usize,
    pub s_spacing: f64,
    pub theta_spacing: f64,
}

impl ParallelGrid {
    /// One parallel view per acquired view, radial pitch equal to the
    /// central column pitch at the isocenter.
    pub fn for_geometry(geom: &ScanGeometry) -> Self {
        ParallelGrid {
            n_thetas: geom.n_views(),
            n_s: geom.n_det_cols,
            s_spacing: geom.source_radius * geom.det_col_spacing,
            theta_spacing: geom.view_spacing(),
        }
    }

    pub fn validate(&self, geom: &ScanGeometry) -> Result<()> {
        if self.n_thetas == 0 || self.n_s == 0 {
            return Err(Error::config("parallel grid needs at least one sample"));
        }
        if !(self.s_spacing > 0.0 && self.theta_spacing > 0.0) {
            return Err(Error::config("parallel grid spacings must be positive"));
        }
        if self.n_s as f64 * self.s_spacing < 2.0 * geom.fov_radius() * (1.0 - 1e-9) {
            return Err(Error::config(format!(
                "parallel grid spans {:.2} mm, field of view needs {:.2} mm",
                self.n_s as f64 * self.s_spacing,
                2.0 * geom.fov_radius()
            )));
        }
        Ok(())
    }

    pub fn s_at(&self, k: f64) -> f64 {
        (k - 0.5 * (self.n_s as f64 - 1.0)) * self.s_spacing
    }

    pub fn s_to_index(&self, s: f64) -> f64 {
        s / self.s_spacing + 0.5 * (self.n_s as f64 - 1.0)
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * self.theta_spacing
    }
}

#[derive(Clone, Debug)]
pub struct RebinOutput {
    pub sino: Sinogram,
    /// Output cells whose source ray falls outside the measured fan or
    /// view range; they are zero-filled.
    pub extrapolated: usize,
}

/// Merges the four interleaved focal-spot subsets onto the undeflected
/// `(α, γ, t)` grid. Each subset is interpolated only from its own views
/// (spacing four views), linearly in `α` using the deflected focal angles and
/// linearly in `t` using the axial offset of the deflected spot relative to the
/// helix. Subset ends with no bracketing partner fall back to the nearest view.
/// Non-FFS sinograms pass through unchanged.
pub fn resolve_ffs(sino: &Sinogram) -> Result<Sinogram> {
    sino.require_native("resolve_ffs")?;
    let geom = &sino.geom;
    if geom.ffs_mode == FfsMode::None {
        return Ok(sino.clone());
    }
    let dalpha = geom.ffs_dalpha.abs();
    if dalpha >= 2.0 * geom.view_spacing() {
        return Err(Error::config(
            "angular focal-spot deflection must stay below two view spacings",
        ));
    }

    let n_views = geom.n_views();
    let spacing = geom.view_spacing();
    // Row shift that maps an axially displaced ray back onto the helix.
    let row_shift = |view: usize| -> f64 {
        let (da, dz) = geom.ffs_offset(view);
        let axial = dz - geom.pitch_z_per_rot * da / std::f64::consts::TAU;
        axial * geom.source_detector_dist / (geom.source_radius * geom.det_row_spacing)
    };
    let true_alpha = |view: usize| geom.view_alpha(view) + geom.ffs_offset(view).0;

    let mut out = Array3::<f64>::zeros(sino.data.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(j, mut plane)| {
            let target = geom.view_alpha(j);
            let (da, _) = geom.ffs_offset(j);
            // Bracketing views within the same subset.
            let (a, b) = if da > 0.0 { (j.checked_sub(4), Some(j)) } else { (Some(j), Some(j + 4)) };
            let (a, b) = match (a, b) {
                (Some(a), Some(b)) if b < n_views => (a, b),
                _ => (j, j),
            };
            let (wa, wb) = if a == b {
                (1.0, 0.0)
            } else {
                let wb = (target - true_alpha(a)) / (true_alpha(b) - true_alpha(a));
                (1.0 - wb, wb)
            };
            debug_assert!((-1e-9..=1.0 + 1e-9).contains(&wb), "{wb} {spacing}");
            let rows = geom.n_det_rows;
            let (sa, sb) = (row_shift(a), row_shift(b));
            for r in 0..rows {
                let fa = r as f64 - sa;
                let fb = r as f64 - sb;
                for c in 0..geom.n_det_cols {
                    let va = sample_rows(&sino.data, a, fa, c);
                    let vb = sample_rows(&sino.data, b, fb, c);
                    plane[[r, c]] = wa * va + wb * vb;
                }
            }
        });

    Ok(Sinogram {
        data: out,
        geom: geom.without_ffs(),
        layout: Layout::NativeCone,
    })
}

/// Linear interpolation along detector rows, clamped to the edge rows.
fn sample_rows(data: &Array3<f64>, view: usize, row: f64, col: usize) -> f64 {
    let rows = data.dim().1;
    let row = row.clamp(0.0, (rows - 1) as f64);
    let r0 = row.floor() as usize;
    let w = row - r0 as f64;
    if w == 0.0 || r0 + 1 >= rows {
        data[[view, r0, col]]
    } else {
        data[[view, r0, col]] * (1.0 - w) + data[[view, r0 + 1, col]] * w
    }
}

pub fn rebin_to_parallel(sino: &Sinogram, grid: &ParallelGrid) -> Result<RebinOutput> {
    sino.require_native("rebin_to_parallel")?;
    let resolved;
    let sino = if sino.geom.ffs_mode == FfsMode::None {
        sino
    } else {
        resolved = resolve_ffs(sino)?;
        &resolved
    };
    let geom = &sino.geom;
    grid.validate(geom)?;

    // Per radial sample: fractional column and view offset.
    let lookup: Vec<(f64, f64)> = (0..grid.n_s)
        .map(|k| {
            let s = grid.s_at(k as f64);
            let ratio = s / geom.source_radius;
            if ratio.abs() >= 1.0 {
                (f64::NAN, f64::NAN)
            } else {
                let gamma = ratio.asin();
                (geom.gamma_to_col(gamma), gamma / geom.view_spacing())
            }
        })
        .collect();

    let n_views = geom.n_views();
    let n_cols = geom.n_det_cols;
    let mut data = Array3::<f64>::zeros((grid.n_thetas, geom.n_det_rows, grid.n_s));
    let extrapolated: usize = data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(j, plane)| {
            let view_of_theta = grid.theta(j) / geom.view_spacing();
            rebin_view(&sino.data, &lookup, view_of_theta, n_views, n_cols, plane)
        })
        .sum();

    if extrapolated > 0 {
        debug!("rebinning zero-filled {extrapolated} cells outside the measured fan");
    }
    Ok(RebinOutput {
        sino: Sinogram {
            data,
            geom: geom.clone(),
            layout: Layout::ConeParallel(*grid),
        },
        extrapolated,
    })
}

fn rebin_view(
    src: &Array3<f64>,
    lookup: &[(f64, f64)],
    view_of_theta: f64,
    n_views: usize,
    n_cols: usize,
    mut plane: ArrayViewMut2<f64>,
) -> usize {
    let rows = plane.dim().0;
    let mut missing = 0;
    for (k, &(col, view_offset)) in lookup.iter().enumerate() {
        let fv = view_of_theta - view_offset;
        let inside = col.is_finite()
            && col >= 0.0
            && col <= (n_cols - 1) as f64
            && fv >= 0.0
            && fv <= (n_views - 1) as f64;
        if !inside {
            missing += rows;
            continue;
        }
        let v0 = (fv.floor() as usize).min(n_views - 1);
        let c0 = (col.floor() as usize).min(n_cols - 1);
        let v1 = (v0 + 1).min(n_views - 1);
        let c1 = (c0 + 1).min(n_cols - 1);
        let wv = fv - v0 as f64;
        let wc = col - c0 as f64;
        for r in 0..rows {
            let a = src[[v0, r, c0]] * (1.0 - wc) + src[[v0, r, c1]] * wc;
            let b = src[[v1, r, c0]] * (1.0 - wc) + src[[v1, r, c1]] * wc;
            plane[[r, k]] = a * (1.0 - wv) + b * wv;
        }
    }
    missing
}
