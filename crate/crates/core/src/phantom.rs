//! Analytic ellipsoid phantoms: voxelization, exact line integrals, and
//! low-dose noise injection.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ScanGeometry, Vec3};
use crate::sinogram::Sinogram;
use crate::volume::{Volume, VolumeGrid};

/// Axis-aligned ellipsoid with additive density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub density: f64,
}

impl Ellipsoid {
    pub fn sphere(center: Vec3, radius: f64, density: f64) -> Self {
        Ellipsoid {
            center,
            semi_axes: [radius; 3],
            density,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let mut acc = 0.0;
        for k in 0..3 {
            let q = (p[k] - self.center[k]) / self.semi_axes[k];
            acc += q * q;
        }
        acc <= 1.0
    }

    /// Length of the chord cut by the line `origin + λ dir` (`dir` need not be unit).
    pub fn chord_length(&self, origin: &Vec3, dir: &Vec3) -> f64 {
        let mut a = 0.0;
        let mut b = 0.0;
        let mut c = -1.0;
        for k in 0..3 {
            let q0 = (origin[k] - self.center[k]) / self.semi_axes[k];
            let q1 = dir[k] / self.semi_axes[k];
            a += q1 * q1;
            b += q0 * q1;
            c += q0 * q0;
        }
        let disc = b * b - a * c;
        if a <= 0.0 || disc <= 0.0 {
            return 0.0;
        }
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        2.0 * disc.sqrt() / a * norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub ellipsoids: Vec<Ellipsoid>,
    /// `(nx, ny, nz)`.
    pub volume_shape: (usize, usize, usize),
    pub voxel_size: f64,
}

impl PhantomSpec {
    pub fn grid(&self) -> VolumeGrid {
        VolumeGrid::centered(self.volume_shape, self.voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        for e in &self.ellipsoids {
            if e.semi_axes.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                return Err(Error::config(format!(
                    "ellipsoid semi-axes must be positive: {:?}",
                    e.semi_axes
                )));
            }
            if !e.density.is_finite() || e.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::config("non-finite ellipsoid parameter"));
            }
        }
        Ok(())
    }

    /// Phantom with every density multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for e in &mut out.ellipsoids {
            e.density *= c;
        }
        out
    }

    /// Parses the plain-text phantom format: one ellipsoid per line as
    /// `cx cy cz ax ay az density`, optional `shape nx ny nz` and
    /// `voxel_size v` lines, `#` comments.
    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut spec = PhantomSpec {
            ellipsoids: Vec::new(),
            volume_shape: (64, 64, 64),
            voxel_size: 1.0,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or_default();
            let lineno = i + 1;
            match head {
                "shape" => {
                    let v: Vec<usize> = words
                        .map(|w| w.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| (lineno, format!("bad shape: {e}")))?;
                    if v.len() != 3 {
                        return Err((lineno, "shape needs three integers".into()));
                    }
                    spec.volume_shape = (v[0], v[1], v[2]);
                }
                "voxel_size" => {
                    spec.voxel_size = words
                        .next()
                        .ok_or((lineno, "voxel_size needs a value".to_string()))?
                        .parse()
                        .map_err(|e| (lineno, format!("bad voxel_size: {e}")))?;
                }
                _ => {
                    let v: Vec<f64> = line
                        .split_whitespace()
                        .map(|w| w.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| (lineno, format!("bad ellipsoid line: {e}")))?;
                    if v.len() != 7 {
                        return Err((
                            lineno,
                            format!("ellipsoid line needs 7 numbers, got {}", v.len()),
                        ));
                    }
                    spec.ellipsoids.push(Ellipsoid {
                        center: [v[0], v[1], v[2]],
                        semi_axes: [v[3], v[4], v[5]],
                        density: v[6],
                    });
                }
            }
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let (nx, ny, nz) = self.volume_shape;
        let mut s = format!(
            "# cx cy cz ax ay az density (mm, mm, 1/mm)\nshape {nx} {ny} {nz}\nvoxel_size {}\n",
            self.voxel_size
        );
        for e in &self.ellipsoids {
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.center[0],
                e.center[1],
                e.center[2],
                e.semi_axes[0],
                e.semi_axes[1],
                e.semi_axes[2],
                e.density
            ));
        }
        s
    }
}

/// Nested-ellipsoid desk phantom: a water-like body with four inserts,
/// 64^3 voxels of 1 mm. Densities are linear attenuation in 1/mm.
pub fn desk_phantom() -> PhantomSpec {
    PhantomSpec {
        ellipsoids: vec![
            Ellipsoid {
                center: [0.0, 0.0, 0.0],
                semi_axes: [27.0, 22.0, 27.0],
                density: 0.02,
            },
            Ellipsoid::sphere([-10.0, 5.0, 2.0], 8.0, 0.01),
            Ellipsoid {
                center: [9.0, -5.0, 6.0],
                semi_axes: [6.0, 6.0, 9.0],
                density: -0.008,
            },
            Ellipsoid {
                center: [8.0, 9.0, -9.0],
                semi_axes: [5.0, 4.0, 8.0],
                density: 0.02,
            },
            Ellipsoid::sphere([-7.0, -9.0, -12.0], 4.5, 0.006),
        ],
        volume_shape: (64, 64, 64),
        voxel_size: 1.0,
    }
}

pub fn voxelize(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let grid = spec.grid();
    let mut data = Array3::<f64>::zeros(grid.array_dim());
    data.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iz, mut slab)| {
            for ((iy, ix), v) in slab.indexed_iter_mut() {
                let p = grid.center(ix, iy, iz);
                *v = spec
                    .ellipsoids
                    .iter()
                    .filter(|e| e.contains(&p))
                    .map(|e| e.density)
                    .sum();
            }
        });
    Volume::from_data(data, grid)
}

/// Exact line integrals of one view, `[row][col]`.
pub fn analytic_projection(
    spec: &PhantomSpec,
    geom: &ScanGeometry,
    view: usize,
) -> Result<Array2<f64>> {
    let n = geom.n_views();
    if view >= n {
        return Err(Error::Index {
            index: view,
            limit: n,
        });
    }
    let mut out = Array2::zeros((geom.n_det_rows, geom.n_det_cols));
    fill_analytic_view(spec, geom, view, &mut out);
    Ok(out)
}

fn fill_analytic_view(
    spec: &PhantomSpec,
    geom: &ScanGeometry,
    view: usize,
    out: &mut Array2<f64>,
) {
    for ((row, col), v) in out.indexed_iter_mut() {
        let (src, det) = geom.ray_endpoints(view, row, col);
        let dir = [det[0] - src[0], det[1] - src[1], det[2] - src[2]];
        *v = spec
            .ellipsoids
            .iter()
            .map(|e| e.density * e.chord_length(&src, &dir))
            .sum();
    }
}

/// Exact native sinogram of the phantom for every view of `geom`.
pub fn analytic_sinogram(spec: &PhantomSpec, geom: &ScanGeometry) -> Result<Sinogram> {
    geom.validate()?;
    spec.validate()?;
    let mut sino = Sinogram::zeros_native(geom);
    sino.data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(view, mut plane)| {
            let mut buf = Array2::zeros(plane.dim());
            fill_analytic_view(spec, geom, view, &mut buf);
            plane.assign(&buf);
        });
    Ok(sino)
}

/// Replaces each line integral `p` by `-ln(max(N, 1) / i0)` with
/// `N ~ Poisson(i0 e^{-p})`, drawn in row-major order from a ChaCha8 stream
/// seeded with `seed`.
pub fn inject_low_dose_noise(sino: &Sinogram, i0: f64, seed: u64) -> Result<Sinogram> {
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(Error::parameter(format!("photon count must be positive, got {i0}")));
    }
    if let Some(p) = sino.data.iter().find(|&&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::input(format!(
            "line integrals must be finite and non-negative, found {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sino.clone();
    let ln_i0 = i0.ln();
    Zip::from(&mut out.data).for_each(|v| {
        let lambda = i0 * (-*v).exp();
        let counts = if lambda > 0.0 {
            // Poisson::new only fails for non-positive or non-finite rates.
            Poisson::new(lambda)
                .map(|d| d.sample(&mut rng))
                .unwrap_or(0.0)
        } else {
            0.0
        };
        *v = ln_i0 - counts.max(1.0).ln();
    });
    Ok(out)
}
