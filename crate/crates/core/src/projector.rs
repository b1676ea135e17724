//! Ray-driven forward projection with fixed-step trilinear sampling.

use ndarray::{Array3, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ScanGeometry, Vec3};
use crate::sinogram::Sinogram;
use crate::volume::{Volume, VolumeGrid};

/// Default sampling step along each ray, in voxels.
pub const DEFAULT_STEP: f64 = 0.5;

pub fn forward_project(vol: &Volume, geom: &ScanGeometry) -> Result<Sinogram> {
    forward_project_with_step(vol, geom, DEFAULT_STEP)
}

pub fn forward_project_with_step(vol: &Volume, geom: &ScanGeometry, step: f64) -> Result<Sinogram> {
    geom.validate()?;
    if vol.data.is_empty() {
        return Err(Error::input("cannot project an empty volume"));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::parameter("projection step must be positive"));
    }
    check_z_coverage(&vol.grid, geom)?;

    let mut sino = Sinogram::zeros_native(geom);
    let h = step * vol.grid.voxel_size;
    sino.data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(view, plane)| project_view(vol, geom, view, h, plane));
    Ok(sino)
}

/// The helix, widened by the detector half-height at the isocenter, must
/// span the volume's axial extent.
pub fn check_z_coverage(grid: &VolumeGrid, geom: &ScanGeometry) -> Result<()> {
    let (zlo, zhi) = grid.z_extent();
    let (slo, shi) = geom.z_coverage();
    let reach = geom.half_height() * geom.source_radius / geom.source_detector_dist;
    if zlo < slo - reach || zhi > shi + reach {
        return Err(Error::config(format!(
            "volume z-range [{zlo:.2}, {zhi:.2}] mm exceeds scan coverage [{:.2}, {:.2}] mm",
            slo - reach,
            shi + reach
        )));
    }
    Ok(())
}

fn project_view(vol: &Volume, geom: &ScanGeometry, view: usize, h: f64, mut plane: ArrayViewMut2<f64>) {
    let bounds = box_bounds(&vol.grid);
    for ((row, col), out) in plane.indexed_iter_mut() {
        let (src, det) = geom.ray_endpoints(view, row, col);
        *out = integrate_ray(&vol.data, &vol.grid, &bounds, &src, &det, h);
    }
}

fn box_bounds(grid: &VolumeGrid) -> [(f64, f64); 3] {
    let n = [grid.shape.0, grid.shape.1, grid.shape.2];
    let half = 0.5 * grid.voxel_size;
    let mut b = [(0.0, 0.0); 3];
    for k in 0..3 {
        b[k] = (
            grid.origin[k] - half,
            grid.origin[k] + (n[k] as f64 - 1.0) * grid.voxel_size + half,
        );
    }
    b
}

/// Line integral along the segment `src -> det`, clipped to the volume box.
fn integrate_ray(
    data: &Array3<f64>,
    grid: &VolumeGrid,
    bounds: &[(f64, f64); 3],
    src: &Vec3,
    det: &Vec3,
    h: f64,
) -> f64 {
    let d = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let u = [d[0] / len, d[1] / len, d[2] / len];

    // Slab clipping in arc length.
    let (mut t0, mut t1) = (0.0f64, len);
    for k in 0..3 {
        if u[k].abs() < 1e-15 {
            if src[k] < bounds[k].0 || src[k] > bounds[k].1 {
                return 0.0;
            }
            continue;
        }
        let a = (bounds[k].0 - src[k]) / u[k];
        let b = (bounds[k].1 - src[k]) / u[k];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    if t1 <= t0 {
        return 0.0;
    }

    let span = t1 - t0;
    let n = (span / h).ceil().max(1.0) as usize;
    let step = span / n as f64;
    let inv = 1.0 / grid.voxel_size;
    let mut acc = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * step;
        let fx = (src[0] + t * u[0] - grid.origin[0]) * inv;
        let fy = (src[1] + t * u[1] - grid.origin[1]) * inv;
        let fz = (src[2] + t * u[2] - grid.origin[2]) * inv;
        acc += trilinear(data, fx, fy, fz);
    }
    acc * step
}

/// Trilinear interpolation in voxel-index coordinates; samples outside the
/// grid read as zero.
pub(crate) fn trilinear(data: &Array3<f64>, fx: f64, fy: f64, fz: f64) -> f64 {
    let (nz, ny, nx) = data.dim();
    let x0 = fx.floor();
    let y0 = fy.floor();
    let z0 = fz.floor();
    let (wx, wy, wz) = (fx - x0, fy - y0, fz - z0);
    let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
    if x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx as isize || y0 >= ny as isize || z0 >= nz as isize {
        return 0.0;
    }
    let at = |z: isize, y: isize, x: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            data[[z as usize, y as usize, x as usize]]
        }
    };
    let c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x0 + 1) * wx;
    let c01 = at(z0, y0 + 1, x0) * (1.0 - wx) + at(z0, y0 + 1, x0 + 1) * wx;
    let c10 = at(z0 + 1, y0, x0) * (1.0 - wx) + at(z0 + 1, y0, x0 + 1) * wx;
    let c11 = at(z0 + 1, y0 + 1, x0) * (1.0 - wx) + at(z0 + 1, y0 + 1, x0 + 1) * wx;
    let c0 = c00 * (1.0 - wy) + c01 * wy;
    let c1 = c10 * (1.0 - wy) + c11 * wy;
    c0 * (1.0 - wz) + c1 * wz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::desk_geometry;
    use crate::phantom::{desk_phantom, voxelize};

    fn short_geom() -> ScanGeometry {
        ScanGeometry {
            n_views_per_rot: 24,
            n_rotations: 7,
            ..desk_geometry()
        }
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let vol = Volume::zeros(VolumeGrid::centered((16, 16, 16), 2.0));
        let s = forward_project(&vol, &short_geom()).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_is_homogeneous_and_additive() {
        let spec = desk_phantom();
        let mut spec = spec;
        spec.volume_shape = (24, 24, 24);
        spec.voxel_size = 2.5;
        let a = voxelize(&spec).unwrap();
        let mut b = a.clone();
        b.data.mapv_inplace(|v| (v * 37.0).sin().abs());
        let g = short_geom();
        let pa = forward_project(&a, &g).unwrap();
        let pb = forward_project(&b, &g).unwrap();
        let mut combo = a.clone();
        combo.data = &a.data * 2.0 - &b.data * 0.5;
        let pc = forward_project(&combo, &g).unwrap();
        let mut twice = a.clone();
        twice.data *= 2.0;
        let p2 = forward_project(&twice, &g).unwrap();
        for ((x, y), (z, w)) in pa.data.iter().zip(pb.data.iter()).zip(pc.data.iter().zip(p2.data.iter())) {
            let lin = 2.0 * x - 0.5 * y;
            assert!((lin - z).abs() <= 1e-5 * lin.abs().max(1e-3));
            assert!((2.0 * x - w).abs() <= 1e-6 * (2.0 * x).abs().max(1e-12));
        }
    }

    #[test]
    fn rays_missing_the_volume_are_exactly_zero() {
        let mut vol = Volume::zeros(VolumeGrid::centered((8, 8, 8), 1.0));
        vol.data.fill(1.0);
        let g = short_geom();
        let s = forward_project(&vol, &g).unwrap();
        // A 8 mm cube is narrower than the outer columns' reach.
        for v in 0..g.n_views() {
            assert_eq!(s.data[[v, 8, 0]], 0.0);
            assert_eq!(s.data[[v, 8, g.n_det_cols - 1]], 0.0);
        }
        assert!(s.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn uncovered_volume_is_rejected() {
        let vol = Volume::zeros(VolumeGrid::centered((16, 16, 200), 1.0));
        assert!(matches!(forward_project(&vol, &short_geom()), Err(Error::Config(_))));
    }

    #[test]
    fn trilinear_reproduces_grid_values() {
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 20 + y * 5 + x) as f64);
        assert_eq!(trilinear(&data, 2.0, 1.0, 1.0), data[[1, 1, 2]]);
        assert_eq!(trilinear(&data, 2.5, 1.0, 1.0), 0.5 * (data[[1, 1, 2]] + data[[1, 1, 3]]));
        assert_eq!(trilinear(&data, -3.0, 1.0, 1.0), 0.0);
    }
}
