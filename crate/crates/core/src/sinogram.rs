use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;
use crate::rebin::ParallelGrid;

/// Which sampling the projection stack is expressed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layout {
    /// Views x rows x fan-angle columns, as acquired.
    NativeCone,
    /// Views x rows x radial samples after row-wise fan-to-parallel rebinning.
    ConeParallel(ParallelGrid),
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::NativeCone => "native_cone",
            Layout::ConeParallel(_) => "cone_parallel",
        }
    }
}

/// Line-integral stack `[view][row][col]` with its acquisition geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub data: Array3<f64>,
    pub geom: ScanGeometry,
    pub layout: Layout,
}

impl Sinogram {
    pub fn zeros_native(geom: &ScanGeometry) -> Self {
        Sinogram {
            data: Array3::zeros((geom.n_views(), geom.n_det_rows, geom.n_det_cols)),
            geom: geom.clone(),
            layout: Layout::NativeCone,
        }
    }

    pub fn new(data: Array3<f64>, geom: ScanGeometry, layout: Layout) -> Result<Self> {
        let s = Sinogram { data, geom, layout };
        s.validate()?;
        Ok(s)
    }

    pub fn expected_dim(&self) -> (usize, usize, usize) {
        let cols = match self.layout {
            Layout::NativeCone => self.geom.n_det_cols,
            Layout::ConeParallel(grid) => grid.n_s,
        };
        let views = match self.layout {
            Layout::NativeCone => self.geom.n_views(),
            Layout::ConeParallel(grid) => grid.n_thetas,
        };
        (views, self.geom.n_det_rows, cols)
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if self.data.dim() != self.expected_dim() {
            return Err(Error::shape(format!(
                "sinogram data {:?} does not match geometry {:?}",
                self.data.dim(),
                self.expected_dim()
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::input("sinogram contains non-finite values"));
        }
        Ok(())
    }

    pub fn is_native(&self) -> bool {
        matches!(self.layout, Layout::NativeCone)
    }

    pub fn require_native(&self, what: &str) -> Result<()> {
        if self.is_native() {
            Ok(())
        } else {
            Err(Error::input(format!("{what} needs a native cone-beam sinogram")))
        }
    }

    pub fn parallel_grid(&self, what: &str) -> Result<ParallelGrid> {
        match self.layout {
            Layout::ConeParallel(g) => Ok(g),
            Layout::NativeCone => Err(Error::input(format!(
                "{what} needs a rebinned cone-parallel sinogram"
            ))),
        }
    }

    pub fn n_views(&self) -> usize {
        self.data.dim().0
    }
}
