//! Helical cone-beam acquisition geometry.
//!
//! Units: angles in radians, lengths in millimetres. The table axis is `z`.
//! The focal spot at rotation angle `α` sits at `(r sin α, -r cos α, z)` and
//! the central ray leaves it along `(-sin α, cos α, 0)`, so a ray at fan angle
//! `γ` and detector height `t` ends on the cylindrical detector at
//! `s(α) + R (-sin(α+γ), cos(α+γ), 0) + t (0, 0, 1)`.

use std::f64::consts::TAU;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Flying-focal-spot operating mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfsMode {
    None,
    /// Four focal positions cycling through `(±∂α, ±∂z)` on consecutive views.
    AlphaZ,
}

impl FfsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FfsMode::None => "none",
            FfsMode::AlphaZ => "alphaz",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(FfsMode::None),
            "alphaz" | "alpha_z" => Some(FfsMode::AlphaZ),
            _ => None,
        }
    }
}

/// Sign pattern of the four focal positions, indexed by `view % 4`.
pub const FFS_PHASES: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct ScanGeometry {
    /// Focal spot to isocenter distance.
    pub source_radius: f64,
    /// Focal spot to detector distance `R`, measured in the transaxial plane.
    pub source_detector_dist: f64,
    pub n_views_per_rot: usize,
    pub n_rotations: usize,
    pub n_det_rows: usize,
    pub n_det_cols: usize,
    /// Fan angle between neighbouring detector columns.
    pub det_col_spacing: f64,
    /// Row pitch on the detector surface.
    pub det_row_spacing: f64,
    /// Table feed per full rotation.
    pub pitch_z_per_rot: f64,
    pub ffs_mode: FfsMode,
    pub ffs_dalpha: f64,
    pub ffs_dz: f64,
    /// Table position of view 0.
    pub z_start: f64,
}

/// Focal spot pose for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourcePose {
    /// Nominal rotation angle of the view.
    pub alpha: f64,
    /// Rotation angle actually occupied by the (possibly deflected) focal spot.
    pub focal_alpha: f64,
    pub position: Vec3,
    /// Nominal helix height of the view, without the `∂z` deflection.
    pub z_table: f64,
}

/// A ray addressed by rotation angle, fan angle and detector height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayCoordinate {
    pub alpha: f64,
    pub gamma: f64,
    pub t: f64,
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_views_per_rot", self.n_views_per_rot),
            ("n_rotations", self.n_rotations),
            ("n_det_rows", self.n_det_rows),
            ("n_det_cols", self.n_det_cols),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        let lengths = [
            ("source_radius", self.source_radius),
            ("source_detector_dist", self.source_detector_dist),
            ("det_col_spacing", self.det_col_spacing),
            ("det_row_spacing", self.det_row_spacing),
            ("pitch_z_per_rot", self.pitch_z_per_rot),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.source_detector_dist <= self.source_radius {
            return Err(Error::config(
                "source_detector_dist must exceed source_radius",
            ));
        }
        if !self.z_start.is_finite() || !self.ffs_dalpha.is_finite() || !self.ffs_dz.is_finite() {
            return Err(Error::config("non-finite geometry value"));
        }
        if self.half_fan_angle() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::config("fan angle must stay below pi"));
        }
        match self.ffs_mode {
            FfsMode::None => {
                if self.ffs_dalpha != 0.0 || self.ffs_dz != 0.0 {
                    return Err(Error::config(
                        "ffs_dalpha and ffs_dz must be zero when ffs_mode = none",
                    ));
                }
            }
            FfsMode::AlphaZ => {
                if !self.n_views_per_rot.is_multiple_of(4) {
                    return Err(Error::config(
                        "n_views_per_rot must be divisible by 4 for alphaz flying focal spot",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.n_views_per_rot * self.n_rotations
    }

    pub fn view_spacing(&self) -> f64 {
        TAU / self.n_views_per_rot as f64
    }

    /// Nominal rotation angle of a view.
    pub fn view_alpha(&self, view: usize) -> f64 {
        self.view_spacing() * view as f64
    }

    /// Helix height at a (continuous) rotation angle.
    pub fn helix_z(&self, alpha: f64) -> f64 {
        self.z_start + self.pitch_z_per_rot * alpha / TAU
    }

    pub fn col_gamma(&self, col: f64) -> f64 {
        (col - 0.5 * (self.n_det_cols as f64 - 1.0)) * self.det_col_spacing
    }

    pub fn gamma_to_col(&self, gamma: f64) -> f64 {
        gamma / self.det_col_spacing + 0.5 * (self.n_det_cols as f64 - 1.0)
    }

    pub fn row_t(&self, row: f64) -> f64 {
        (row - 0.5 * (self.n_det_rows as f64 - 1.0)) * self.det_row_spacing
    }

    pub fn t_to_row(&self, t: f64) -> f64 {
        t / self.det_row_spacing + 0.5 * (self.n_det_rows as f64 - 1.0)
    }

    /// Fan angle of the outermost column centre.
    pub fn half_fan_angle(&self) -> f64 {
        0.5 * (self.n_det_cols as f64 - 1.0) * self.det_col_spacing
    }

    /// Detector height of the outermost row centre.
    pub fn half_height(&self) -> f64 {
        0.5 * (self.n_det_rows as f64 - 1.0) * self.det_row_spacing
    }

    /// Radius of the transaxial field of view covered by the fan.
    pub fn fov_radius(&self) -> f64 {
        self.source_radius * self.half_fan_angle().sin()
    }

    /// Deflection `(∂α, ∂z)` of a view's focal spot.
    pub fn ffs_offset(&self, view: usize) -> (f64, f64) {
        match self.ffs_mode {
            FfsMode::None => (0.0, 0.0),
            FfsMode::AlphaZ => {
                let (sa, sz) = FFS_PHASES[view % 4];
                (sa * self.ffs_dalpha, sz * self.ffs_dz)
            }
        }
    }

    /// Focal spot on the circle of radius `source_radius` at angle `alpha`.
    pub fn source_at(&self, alpha: f64, z: f64) -> Vec3 {
        let (s, c) = alpha.sin_cos();
        [self.source_radius * s, -self.source_radius * c, z]
    }

    pub fn source_position(&self, view: usize) -> Result<SourcePose> {
        if view >= self.n_views() {
            return Err(Error::Index {
                index: view,
                limit: self.n_views(),
            });
        }
        Ok(self.pose_unchecked(view))
    }

    pub(crate) fn pose_unchecked(&self, view: usize) -> SourcePose {
        let alpha = self.view_alpha(view);
        let z_table = self.helix_z(alpha);
        let (da, dz) = self.ffs_offset(view);
        let focal_alpha = alpha + da;
        SourcePose {
            alpha,
            focal_alpha,
            position: self.source_at(focal_alpha, z_table + dz),
            z_table,
        }
    }

    /// Detector point for a ray emitted by the undeflected focal spot at `ray.alpha`.
    pub fn detector_point(&self, ray: &RayCoordinate) -> Vec3 {
        let src = self.source_at(ray.alpha, self.helix_z(ray.alpha));
        self.detector_point_from(&src, ray.alpha, ray.gamma, ray.t)
    }

    /// Detector point seen from an explicit focal spot. The detector rotates
    /// with the focal spot, so `alpha` is the focal angle.
    pub fn detector_point_from(&self, src: &Vec3, alpha: f64, gamma: f64, t: f64) -> Vec3 {
        let (s, c) = (alpha + gamma).sin_cos();
        let r = self.source_detector_dist;
        [src[0] - r * s, src[1] + r * c, src[2] + t]
    }

    /// Source and detector endpoints of the ray hitting `(row, col)` in `view`.
    pub fn ray_endpoints(&self, view: usize, row: usize, col: usize) -> (Vec3, Vec3) {
        let pose = self.pose_unchecked(view);
        let det = self.detector_point_from(
            &pose.position,
            pose.focal_alpha,
            self.col_gamma(col as f64),
            self.row_t(row as f64),
        );
        (pose.position, det)
    }

    /// Lowest and highest focal spot heights over the whole scan.
    pub fn z_coverage(&self) -> (f64, f64) {
        let last = self.view_alpha(self.n_views().saturating_sub(1));
        let dz = self.ffs_dz.abs();
        (self.helix_z(0.0) - dz, self.helix_z(last) + dz)
    }

    /// Same geometry with the flying focal spot switched off.
    pub fn without_ffs(&self) -> Self {
        ScanGeometry {
            ffs_mode: FfsMode::None,
            ffs_dalpha: 0.0,
            ffs_dz: 0.0,
            ..self.clone()
        }
    }
}

/// Desk-scale helical geometry used by the bundled experiments: 7 turns of
/// 144 views, 16 x 96 detector, 2x magnification, pitch 12 mm, centred on z = 0.
pub fn desk_geometry() -> ScanGeometry {
    let n_views_per_rot = 144;
    let n_rotations = 7;
    let pitch = 12.0;
    let travel = pitch * (n_rotations * n_views_per_rot - 1) as f64 / n_views_per_rot as f64;
    ScanGeometry {
        source_radius: 200.0,
        source_detector_dist: 400.0,
        n_views_per_rot,
        n_rotations,
        n_det_rows: 16,
        n_det_cols: 96,
        det_col_spacing: 0.0042,
        det_row_spacing: 2.0,
        pitch_z_per_rot: pitch,
        ffs_mode: FfsMode::None,
        ffs_dalpha: 0.0,
        ffs_dz: 0.0,
        z_start: -0.5 * travel,
    }
}
