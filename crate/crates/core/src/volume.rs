use ndarray::Array3;

use crate::error::{Error, Result};

/// Placement of a voxel grid in scanner coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeGrid {
    /// `(nx, ny, nz)`.
    pub shape: (usize, usize, usize),
    pub voxel_size: f64,
    /// Centre of voxel `[0][0][0]`.
    pub origin: [f64; 3],
}

impl VolumeGrid {
    /// Grid of `shape` voxels centred on the isocenter.
    pub fn centered(shape: (usize, usize, usize), voxel_size: f64) -> Self {
        let half = |n: usize| -0.5 * (n as f64 - 1.0) * voxel_size;
        VolumeGrid {
            shape,
            voxel_size,
            origin: [half(shape.0), half(shape.1), half(shape.2)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.shape;
        if nx < 8 || ny < 8 || nz < 8 {
            return Err(Error::config(format!(
                "volume must be at least 8^3, got {nx}x{ny}x{nz}"
            )));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::config("voxel size must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scanner coordinates of voxel `(ix, iy, iz)`.
    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + ix as f64 * self.voxel_size,
            self.origin[1] + iy as f64 * self.voxel_size,
            self.origin[2] + iz as f64 * self.voxel_size,
        ]
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.origin[0] + ix as f64 * self.voxel_size
    }

    pub fn y(&self, iy: usize) -> f64 {
        self.origin[1] + iy as f64 * self.voxel_size
    }

    pub fn z(&self, iz: usize) -> f64 {
        self.origin[2] + iz as f64 * self.voxel_size
    }

    /// Axial extent covered by voxel boundaries.
    pub fn z_extent(&self) -> (f64, f64) {
        let h = 0.5 * self.voxel_size;
        (self.z(0) - h, self.z(self.shape.2 - 1) + h)
    }

    /// `[nz][ny][nx]` array dimensions.
    pub fn array_dim(&self) -> (usize, usize, usize) {
        (self.shape.2, self.shape.1, self.shape.0)
    }
}

/// Attenuation volume stored `[nz][ny][nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub grid: VolumeGrid,
}

impl Volume {
    pub fn zeros(grid: VolumeGrid) -> Self {
        Volume {
            data: Array3::zeros(grid.array_dim()),
            grid,
        }
    }

    pub fn from_data(data: Array3<f64>, grid: VolumeGrid) -> Result<Self> {
        if data.dim() != grid.array_dim() {
            return Err(Error::shape(format!(
                "volume data {:?} does not match grid {:?}",
                data.dim(),
                grid.array_dim()
            )));
        }
        Ok(Volume { data, grid })
    }

    pub fn voxel_size(&self) -> f64 {
        self.grid.voxel_size
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
