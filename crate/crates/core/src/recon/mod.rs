//! View-weighted filtered backprojection for helical cone-beam data.
//!
//! The main path rebins to cone-parallel geometry, applies the cone-angle
//! preweight `R / sqrt(R² + t²)`, ramp-filters along `s` and backprojects
//! voxel by voxel. A slower native fan-beam path with the `R²/L²` distance
//! weight serves as a cross-check on coarse grids.

mod native;
mod parallel;
pub mod ramp;

use ndarray::{Array3, Axis};
use rayon::prelude::*;

pub use native::{distance_weight, reconstruct_native, DistanceMode, NATIVE_MAX_VOXELS};
pub use parallel::reconstruct_parallel;
pub use ramp::{ramp_filter, ramp_kernel, RampWindow};

use crate::error::Result;
use crate::rebin::{rebin_to_parallel, resolve_ffs, ParallelGrid};
use crate::sinogram::{Layout, Sinogram};
use crate::volume::{Volume, VolumeGrid};

/// Redundancy weight `w(β, t)` across helical turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewWeight {
    /// Every illuminating view counts equally.
    Uniform,
    /// Linear taper over the outer quarter of the detector height.
    TriangularFeather,
}

impl ViewWeight {
    /// Weight of a sample at detector height `t` on a detector reaching `t_max`.
    pub fn at(self, t: f64, t_max: f64) -> f64 {
        match self {
            ViewWeight::Uniform => 1.0,
            ViewWeight::TriangularFeather => {
                const FEATHER: f64 = 0.25;
                ((t_max - t.abs()) / (FEATHER * t_max)).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconConfig {
    pub ramp_window: RampWindow,
    pub view_weight: ViewWeight,
    /// Only used by the native path.
    pub distance_mode: DistanceMode,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            ramp_window: RampWindow::Hann,
            view_weight: ViewWeight::Uniform,
            distance_mode: DistanceMode::Corrected,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    pub volume: Volume,
    /// Voxels that received a complete half-turn of angular coverage.
    pub coverage: Array3<bool>,
}

impl ReconOutput {
    pub fn covered_fraction(&self) -> f64 {
        let n = self.coverage.iter().filter(|&&c| c).count();
        n as f64 / self.coverage.len().max(1) as f64
    }
}

/// Multiplicative preweights for every sample of `sino`.
///
/// Native: `cos κ · cos γ` with cone angle `κ = atan(t / R)`.
/// Cone-parallel: `R / sqrt(R² + t²)`.
pub fn preweight_map(sino: &Sinogram) -> Array3<f64> {
    let g = &sino.geom;
    let r = g.source_detector_dist;
    let (views, rows, cols) = sino.data.dim();
    let cone: Vec<f64> = (0..rows)
        .map(|row| {
            let t = g.row_t(row as f64);
            r / (r * r + t * t).sqrt()
        })
        .collect();
    let fan: Vec<f64> = match sino.layout {
        Layout::NativeCone => (0..cols).map(|c| g.col_gamma(c as f64).cos()).collect(),
        Layout::ConeParallel(_) => vec![1.0; cols],
    };
    Array3::from_shape_fn((views, rows, cols), |(_, row, col)| {
        if fan[col] == 1.0 {
            cone[row]
        } else {
            cone[row] * fan[col]
        }
    })
}

pub fn preweight(sino: &Sinogram) -> Sinogram {
    let map = preweight_map(sino);
    let mut out = sino.clone();
    out.data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(map.axis_iter(Axis(0)))
        .for_each(|(mut o, w)| o *= &w);
    out
}

/// Full main path from a native sinogram: FFS merge, rebin, preweight,
/// ramp filter, backprojection.
pub fn fbp(sino: &Sinogram, cfg: &ReconConfig, grid: &VolumeGrid) -> Result<ReconOutput> {
    let merged = resolve_ffs(sino)?;
    let pgrid = ParallelGrid::for_geometry(&merged.geom);
    let rebinned = rebin_to_parallel(&merged, &pgrid)?.sino;
    let filtered = ramp_filter(&preweight(&rebinned), cfg.ramp_window)?;
    reconstruct_parallel(&filtered, cfg, grid)
}
