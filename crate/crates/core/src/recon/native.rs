use std::f64::consts::{FRAC_PI_2, PI, TAU};

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use super::parallel::{bilinear, report_coverage};
use super::ramp::spatial_ramp;
use super::{preweight, ReconConfig, ReconOutput};
use crate::error::{Error, Result};
use crate::sinogram::Sinogram;
use crate::volume::{Volume, VolumeGrid};

/// Largest grid the native reference path accepts.
pub const NATIVE_MAX_VOXELS: usize = 64 * 64 * 64;

/// How the source-to-voxel distance `L(x, y, β)` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    /// `sqrt((R + x cos β + y sin β)² + (-x sin β + y cos β)²)`.
    Corrected,
    /// The same with the second term written `(-x sin β + y sin β)`.
    AsPrinted,
}

impl DistanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMode::Corrected => "corrected",
            DistanceMode::AsPrinted => "as_printed",
        }
    }
}

/// Distance weight `R² / L²(x, y, β)` for a source at `-R (cos β, sin β)`.
pub fn distance_weight(r: f64, x: f64, y: f64, beta: f64, mode: DistanceMode) -> f64 {
    let (sb, cb) = beta.sin_cos();
    let a = r + x * cb + y * sb;
    let b = match mode {
        DistanceMode::Corrected => -x * sb + y * cb,
        DistanceMode::AsPrinted => -x * sb + y * sb,
    };
    r * r / (a * a + b * b)
}

/// Direct fan-beam FBP in the acquisition geometry: `cos κ cos γ`
/// preweight, equiangular ramp `(γ / sin γ)² h(γ)` along each row, and
/// voxel-driven backprojection with the `R²/L²` weight normalised by
/// `π / Λ`, where `Λ` is the angular range that illuminates the voxel.
/// Uses the true (possibly deflected) focal spot of every view.
pub fn reconstruct_native(sino: &Sinogram, cfg: &ReconConfig, grid: &VolumeGrid) -> Result<ReconOutput> {
    sino.require_native("reconstruct_native")?;
    grid.validate()?;
    if grid.len() > NATIVE_MAX_VOXELS {
        return Err(Error::config(format!(
            "native reconstruction is a reference path limited to {} voxels, got {}",
            NATIVE_MAX_VOXELS,
            grid.len()
        )));
    }
    let geom = &sino.geom;
    let filtered = filter_equiangular(&preweight(sino), cfg)?;

    let rs = geom.source_radius;
    let sdd = geom.source_detector_dist;
    let t_max = geom.half_height();
    let gamma_max = geom.half_fan_angle();
    let d_beta = geom.view_spacing();
    let n_views = geom.n_views();
    let weight = cfg.view_weight;
    let mode = cfg.distance_mode;
    let poses: Vec<_> = (0..n_views).map(|v| geom.source_position(v)).collect::<Result<_>>()?;
    let fov = geom.fov_radius();
    let z_reach = t_max * (rs + fov) / sdd + geom.ffs_dz.abs();

    let mut data = Array3::<f64>::zeros(grid.array_dim());
    let mut coverage = Array3::<bool>::from_elem(grid.array_dim(), false);
    data.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(coverage.axis_iter_mut(Axis(0)))
        .enumerate()
        .for_each(|(iz, (mut slab, mut mask))| {
            let z = grid.z(iz);
            let a_lo = (z - z_reach - geom.z_start) * TAU / geom.pitch_z_per_rot;
            let a_hi = (z + z_reach - geom.z_start) * TAU / geom.pitch_z_per_rot;
            let j_lo = (a_lo / d_beta).floor().max(0.0) as usize;
            let j_hi = ((a_hi / d_beta).ceil().max(0.0) as usize + 1).min(n_views);
            for ((iy, ix), out) in slab.indexed_iter_mut() {
                let x = grid.x(ix);
                let y = grid.y(iy);
                if x * x + y * y > fov * fov {
                    continue;
                }
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (j, pose) in poses.iter().enumerate().take(j_hi).skip(j_lo) {
                    let p = pose.position;
                    let vx = x - p[0];
                    let vy = y - p[1];
                    let l = (vx * vx + vy * vy).sqrt();
                    let psi = (-vx).atan2(vy);
                    let gamma = wrap_angle(psi - pose.focal_alpha);
                    if gamma.abs() > gamma_max {
                        continue;
                    }
                    let t = (z - p[2]) * sdd / l;
                    if t.abs() > t_max {
                        continue;
                    }
                    let w = weight.at(t, t_max);
                    if w <= 0.0 {
                        continue;
                    }
                    let fr = geom.t_to_row(t);
                    let fc = geom.gamma_to_col(gamma);
                    let v = bilinear(filtered.index_axis(Axis(0), j), fr, fc);
                    let dw = distance_weight(rs, x, y, pose.focal_alpha + FRAC_PI_2, mode);
                    acc += w * dw * v;
                    wsum += w;
                }
                if wsum * d_beta >= PI {
                    *out = PI * acc / wsum;
                    mask[[iy, ix]] = true;
                }
            }
        });

    report_coverage(&coverage);
    Ok(ReconOutput {
        volume: Volume::from_data(data, *grid)?,
        coverage,
    })
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Equiangular ramp along columns, divided by the source radius so that the
/// `R²/L²` weight carries the fan-beam magnification.
fn filter_equiangular(sino: &Sinogram, cfg: &ReconConfig) -> Result<Array3<f64>> {
    let geom = &sino.geom;
    let n = geom.n_det_cols;
    if n < 4 {
        return Err(Error::config("native filtering needs at least 4 columns"));
    }
    let dg = geom.det_col_spacing;
    let window = cfg.ramp_window;
    let taps: Vec<f64> = (-(n as i64 - 1)..=(n as i64 - 1))
        .map(|k| {
            let h = spatial_ramp(k, dg);
            let g = if k == 0 {
                h
            } else {
                let a = k as f64 * dg;
                (a / a.sin()).powi(2) * h
            };
            // Hann apodization applied as a spatial taper of the kernel.
            let taper = match window {
                super::RampWindow::RamLak => 1.0,
                super::RampWindow::Hann => {
                    0.5 * (1.0 + (PI * k as f64 / n as f64).cos())
                }
            };
            g * taper * dg / geom.source_radius
        })
        .collect();

    let mut out = Array3::<f64>::zeros(sino.data.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(sino.data.axis_iter(Axis(0)))
        .for_each(|(mut o, src)| {
            for (mut orow, srow) in o.axis_iter_mut(Axis(0)).zip(src.axis_iter(Axis(0))) {
                for c in 0..n {
                    let mut acc = 0.0;
                    for (k, &p) in srow.iter().enumerate() {
                        acc += p * taps[(c as i64 - k as i64 + n as i64 - 1) as usize];
                    }
                    orow[c] = acc;
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isocenter_weight_is_one() {
        for beta in [0.0, 0.3, 2.0, -1.0] {
            assert_eq!(distance_weight(570.0, 0.0, 0.0, beta, DistanceMode::Corrected), 1.0);
            assert_eq!(distance_weight(570.0, 0.0, 0.0, beta, DistanceMode::AsPrinted), 1.0);
        }
    }

    #[test]
    fn corrected_distance_is_euclidean() {
        let r = 200.0;
        for &(x, y, beta) in &[(10.0, -4.0, 0.2), (-25.0, 13.0, 2.9), (3.0, 30.0, -1.3)] {
            let (sb, cb) = f64::sin_cos(beta);
            let sx = -r * cb;
            let sy = -r * sb;
            let l2 = (x - sx) * (x - sx) + (y - sy) * (y - sy);
            let w = distance_weight(r, x, y, beta, DistanceMode::Corrected);
            assert!((w - r * r / l2).abs() < 1e-12);
            let printed = distance_weight(r, x, y, beta, DistanceMode::AsPrinted);
            assert!((printed - w).abs() > 1e-6);
        }
    }

    #[test]
    fn wrap_angle_stays_in_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
    }
}
