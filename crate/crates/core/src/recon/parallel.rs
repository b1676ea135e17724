use std::f64::consts::PI;

use log::warn;
use ndarray::{Array3, ArrayView2, Axis};
use rayon::prelude::*;

use super::{ReconConfig, ReconOutput};
use crate::error::{Error, Result};
use crate::sinogram::Sinogram;
use crate::volume::{Volume, VolumeGrid};

/// Voxel-driven backprojection of a preweighted, ramp-filtered cone-parallel
/// sinogram.
///
/// Parallel views `θ` and `θ + kπ` see the same line integrals, so for each
/// voxel the samples of every view that illuminates it are averaged within
/// their half-turn bin (weighted by `w`), and the bins are summed with
/// `Δθ = π / bins`. When every bin is hit equally often this is the
/// `π / (β_max - β_min)` normalisation of a uniform view weight. Voxels with an
/// empty bin are set to zero and left out of the coverage mask.
pub fn reconstruct_parallel(sino: &Sinogram, cfg: &ReconConfig, grid: &VolumeGrid) -> Result<ReconOutput> {
    let pgrid = sino.parallel_grid("reconstruct_parallel")?;
    grid.validate()?;
    let geom = &sino.geom;
    let bins_f = PI / pgrid.theta_spacing;
    let bins = bins_f.round() as usize;
    if bins == 0 || (bins_f - bins as f64).abs() > 1e-6 {
        return Err(Error::config(
            "parallel view spacing must divide a half turn evenly",
        ));
    }
    let d_theta = PI / bins as f64;

    let n_thetas = pgrid.n_thetas;
    let (sin_t, cos_t): (Vec<f64>, Vec<f64>) = (0..n_thetas).map(|j| pgrid.theta(j).sin_cos()).unzip();
    let rs = geom.source_radius;
    let sdd = geom.source_detector_dist;
    let t_max = geom.half_height();
    let fov = geom.fov_radius().min(pgrid.s_at((pgrid.n_s - 1) as f64));
    let alpha_last = geom.view_alpha(geom.n_views() - 1);
    let half_rows = 0.5 * (geom.n_det_rows as f64 - 1.0);
    let inv_dt = 1.0 / geom.det_row_spacing;
    let weight = cfg.view_weight;

    let (nx, ny, nz) = grid.shape;
    let standard = sino.data.as_standard_layout();
    let flat = standard.as_slice().expect("standard layout is contiguous");
    let (_, n_rows, n_s) = sino.data.dim();
    let plane_len = n_rows * n_s;
    let last_row = (n_rows - 1) as f64;
    let last_col = (n_s - 1) as f64;
    let pixels: Vec<(usize, usize)> = (0..ny)
        .flat_map(|iy| (0..nx).map(move |ix| (iy, ix)))
        .filter(|&(iy, ix)| {
            let (x, y) = (grid.x(ix), grid.y(iy));
            x * x + y * y <= fov * fov
        })
        .collect();

    // Each in-field pixel owns a column of voxels along z. The ray geometry of
    // a (pixel, view) pair does not depend on z, so it is evaluated once and
    // reused for every slice the view reaches.
    let columns: Vec<Vec<Option<f64>>> = pixels
        .par_iter()
        .map(|&(iy, ix)| {
            let x = grid.x(ix);
            let y = grid.y(iy);
            let mut num = vec![0.0; nz * bins];
            let mut den = vec![0.0; nz * bins];
            for j in 0..n_thetas {
                let (st, ct) = (sin_t[j], cos_t[j]);
                let s = -(x * ct + y * st);
                let ratio = s / rs;
                let alpha = pgrid.theta(j) - ratio.asin();
                if alpha < 0.0 || alpha > alpha_last {
                    continue;
                }
                let z_src = geom.helix_z(alpha);
                let l = -x * st + y * ct + rs * (1.0 - ratio * ratio).sqrt();
                let reach = t_max * l / sdd;
                let lo = ((z_src - reach - grid.origin[2]) / grid.voxel_size).ceil().max(0.0) as usize;
                let hi = ((z_src + reach - grid.origin[2]) / grid.voxel_size).floor();
                if hi < 0.0 {
                    continue;
                }
                let hi = (hi as usize).min(nz - 1);
                let plane = &flat[j * plane_len..(j + 1) * plane_len];
                let fk = pgrid.s_to_index(s).clamp(0.0, last_col);
                let c0 = (fk as usize).min(n_s - 1);
                let c1 = (c0 + 1).min(n_s - 1);
                let wc = fk - c0 as f64;
                let acc = (j % bins) * nz;
                let t_per_z = sdd / l;
                for iz in lo..=hi {
                    let t = (grid.z(iz) - z_src) * t_per_z;
                    if t.abs() > t_max {
                        continue;
                    }
                    let w = weight.at(t, t_max);
                    if w <= 0.0 {
                        continue;
                    }
                    let fr = (t * inv_dt + half_rows).clamp(0.0, last_row);
                    let r0 = (fr as usize).min(n_rows - 1);
                    let r1 = (r0 + 1).min(n_rows - 1);
                    let wr = fr - r0 as f64;
                    let a = plane[r0 * n_s + c0] * (1.0 - wc) + plane[r0 * n_s + c1] * wc;
                    let b = plane[r1 * n_s + c0] * (1.0 - wc) + plane[r1 * n_s + c1] * wc;
                    num[acc + iz] += w * (a * (1.0 - wr) + b * wr);
                    den[acc + iz] += w;
                }
            }
            (0..nz)
                .map(|iz| {
                    let covered = (0..bins).all(|b| den[b * nz + iz] > 0.0);
                    covered.then(|| (0..bins).map(|b| num[b * nz + iz] / den[b * nz + iz]).sum::<f64>() * d_theta)
                })
                .collect()
        })
        .collect();

    let mut data = Array3::<f64>::zeros(grid.array_dim());
    let mut coverage = Array3::<bool>::from_elem(grid.array_dim(), false);
    for (&(iy, ix), col) in pixels.iter().zip(&columns) {
        for (iz, v) in col.iter().enumerate() {
            if let Some(v) = v {
                data[[iz, iy, ix]] = *v;
                coverage[[iz, iy, ix]] = true;
            }
        }
    }

    report_coverage(&coverage);
    Ok(ReconOutput {
        volume: Volume::from_data(data, *grid)?,
        coverage,
    })
}

pub(super) fn report_coverage(coverage: &Array3<bool>) {
    let empty = coverage
        .axis_iter(Axis(0))
        .filter(|s| !s.iter().any(|&c| c))
        .count();
    if empty > 0 {
        warn!("{empty} slice(s) lack sufficient angular coverage and were masked");
    }
}

/// Bilinear sample of a `[row][col]` plane; coordinates are clamped to the
/// plane so callers must bounds-check beforehand.
pub(super) fn bilinear(plane: ArrayView2<f64>, fr: f64, fc: f64) -> f64 {
    let (rows, cols) = plane.dim();
    let fr = fr.clamp(0.0, (rows - 1) as f64);
    let fc = fc.clamp(0.0, (cols - 1) as f64);
    let r0 = (fr.floor() as usize).min(rows - 1);
    let c0 = (fc.floor() as usize).min(cols - 1);
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let wr = fr - r0 as f64;
    let wc = fc - c0 as f64;
    let a = plane[[r0, c0]] * (1.0 - wc) + plane[[r0, c1]] * wc;
    let b = plane[[r1, c0]] * (1.0 - wc) + plane[[r1, c1]] * wc;
    a * (1.0 - wr) + b * wr
}

