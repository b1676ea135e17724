//! Raw array files: a little-endian payload in C order next to a
//! `<path>.hdr` text sidecar of `key=value` lines.
//!
//! Arrays are written as `f32le`; `f64le` payloads are accepted on read.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, ArrayViewD, IxDyn};

use crate::error::{FileError, Result};
use crate::geometry::{desk_geometry, FfsMode, ScanGeometry};
use crate::rebin::ParallelGrid;
use crate::sinogram::{Layout, Sinogram};
use crate::volume::{Volume, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32Le,
    F64Le,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32Le => "f32le",
            Dtype::F64Le => "f64le",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32le" => Some(Dtype::F32Le),
            "f64le" => Some(Dtype::F64Le),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::F64Le => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub layout: String,
    pub stage: String,
    pub seed: Option<u64>,
    /// Further keys such as `geom.*` and `grid.*`, written in sorted order.
    pub extra: BTreeMap<String, String>,
}

impl Header {
    pub fn new(layout: &str, stage: &str) -> Self {
        Header {
            dtype: Dtype::F32Le,
            shape: Vec::new(),
            spacing: Vec::new(),
            origin: Vec::new(),
            layout: layout.to_string(),
            stage: stage.to_string(),
            seed: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(" ");
        let mut out = format!("dtype={}\n", self.dtype.as_str());
        out += &format!("shape={}\n", join(&self.shape.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        out += &format!("spacing={}\n", join(&self.spacing.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        out += &format!("origin={}\n", join(&self.origin.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        out += &format!("layout={}\n", self.layout);
        out += &format!("stage={}\n", self.stage);
        if let Some(seed) = self.seed {
            out += &format!("seed={seed}\n");
        }
        for (k, v) in &self.extra {
            out += &format!("{k}={v}\n");
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> std::result::Result<Self, FileError> {
        let err = |line: usize, msg: String| FileError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut h = Header::new("", "");
        let mut dtype = None;
        let mut have_shape = false;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(ln, "expected key=value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let floats = |v: &str| -> std::result::Result<Vec<f64>, FileError> {
                v.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| err(ln, format!("{k}: {e}"))))
                    .collect()
            };
            match k {
                "dtype" => {
                    dtype = Some(Dtype::parse(v).ok_or_else(|| FileError::UnknownDtype {
                        path: path.to_path_buf(),
                        dtype: v.to_string(),
                    })?)
                }
                "shape" => {
                    h.shape = v
                        .split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|e| err(ln, format!("shape: {e}"))))
                        .collect::<std::result::Result<_, _>>()?;
                    have_shape = true;
                }
                "spacing" => h.spacing = floats(v)?,
                "origin" => h.origin = floats(v)?,
                "layout" => h.layout = v.to_string(),
                "stage" => h.stage = v.to_string(),
                "seed" => h.seed = Some(v.parse().map_err(|e| err(ln, format!("seed: {e}")))?),
                _ => {
                    h.extra.insert(k.to_string(), v.to_string());
                }
            }
        }
        h.dtype = dtype.ok_or_else(|| err(0, "missing dtype".into()))?;
        if !have_shape || h.shape.is_empty() {
            return Err(err(0, "missing shape".into()));
        }
        Ok(h)
    }

    fn extra_f64(&self, key: &str, path: &Path) -> std::result::Result<f64, FileError> {
        let v = self.extra.get(key).ok_or_else(|| FileError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("missing {key}"),
        })?;
        v.parse().map_err(|e| FileError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{key}: {e}"),
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".hdr");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FileError + '_ {
    move |source| FileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes payload and sidecar; `header.shape` is taken from `data`.
pub fn write_array(path: &Path, data: ArrayViewD<f64>, header: &Header) -> std::result::Result<(), FileError> {
    let mut h = header.clone();
    h.shape = data.shape().to_vec();
    let mut bytes = Vec::with_capacity(data.len() * h.dtype.size());
    // `iter` walks logical (C) order regardless of memory layout.
    match h.dtype {
        Dtype::F32Le => data.iter().for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64Le => data.iter().for_each(|&v| bytes.extend_from_slice(&v.to_le_bytes())),
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, h.to_text()).map_err(io_err(&side))
}

pub fn read_header(path: &Path) -> std::result::Result<Header, FileError> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(FileError::MissingSidecar { path: side });
    }
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    Header::parse(&text, &side)
}

pub fn read_array(path: &Path) -> std::result::Result<(ArrayD<f64>, Header), FileError> {
    let h = read_header(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let n: usize = h.shape.iter().product();
    let expected = (n * h.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(FileError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = match h.dtype {
        Dtype::F32Le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        Dtype::F64Le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    let arr = ArrayD::from_shape_vec(IxDyn(&h.shape), values).expect("length checked against shape");
    Ok((arr, h))
}

fn semantic(path: &Path, msg: impl Into<String>) -> FileError {
    FileError::Parse {
        path: sidecar_path(path),
        line: 0,
        msg: msg.into(),
    }
}

fn into3(path: &Path, arr: ArrayD<f64>) -> std::result::Result<Array3<f64>, FileError> {
    arr.into_dimensionality()
        .map_err(|_| semantic(path, "expected a 3-D array"))
}

fn volume_header(grid: &VolumeGrid, layout: &str, stage: &str, seed: Option<u64>) -> Header {
    let mut h = Header::new(layout, stage);
    h.spacing = vec![grid.voxel_size; 3];
    h.origin = grid.origin.to_vec();
    h.seed = seed;
    h
}

pub fn save_volume(path: &Path, vol: &Volume, stage: &str, seed: Option<u64>) -> Result<()> {
    let h = volume_header(&vol.grid, "volume", stage, seed);
    Ok(write_array(path, vol.data.view().into_dyn(), &h)?)
}

fn grid_from(path: &Path, h: &Header, dim: (usize, usize, usize)) -> std::result::Result<VolumeGrid, FileError> {
    if h.origin.len() != 3 || h.spacing.is_empty() {
        return Err(semantic(path, "volume needs 3 origin values and a spacing"));
    }
    Ok(VolumeGrid {
        shape: (dim.2, dim.1, dim.0),
        voxel_size: h.spacing[0],
        origin: [h.origin[0], h.origin[1], h.origin[2]],
    })
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (arr, h) = read_array(path)?;
    if h.layout != "volume" && h.layout != "mask" {
        return Err(semantic(path, format!("expected a volume, found layout '{}'", h.layout)).into());
    }
    let data = into3(path, arr)?;
    let grid = grid_from(path, &h, data.dim())?;
    Volume::from_data(data, grid)
}

/// Stores a boolean mask as 0/1 values on the volume grid.
pub fn save_mask(path: &Path, mask: &Array3<bool>, grid: &VolumeGrid, stage: &str) -> Result<()> {
    let h = volume_header(grid, "mask", stage, None);
    let data = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    Ok(write_array(path, data.view().into_dyn(), &h)?)
}

/// Nonzero voxels are inside the mask.
pub fn load_mask(path: &Path) -> Result<Array3<bool>> {
    Ok(load_volume(path)?.data.mapv(|v| v != 0.0))
}

pub fn geometry_pairs(g: &ScanGeometry) -> Vec<(&'static str, String)> {
    vec![
        ("source_radius", g.source_radius.to_string()),
        ("source_detector_dist", g.source_detector_dist.to_string()),
        ("n_views_per_rot", g.n_views_per_rot.to_string()),
        ("n_rotations", g.n_rotations.to_string()),
        ("n_det_rows", g.n_det_rows.to_string()),
        ("n_det_cols", g.n_det_cols.to_string()),
        ("det_col_spacing", g.det_col_spacing.to_string()),
        ("det_row_spacing", g.det_row_spacing.to_string()),
        ("pitch_z_per_rot", g.pitch_z_per_rot.to_string()),
        ("ffs_mode", g.ffs_mode.as_str().to_string()),
        ("ffs_dalpha", g.ffs_dalpha.to_string()),
        ("ffs_dz", g.ffs_dz.to_string()),
        ("z_start", g.z_start.to_string()),
    ]
}

/// Sets one geometry field from its key; `Err` carries a message.
fn set_geometry_field(g: &mut ScanGeometry, key: &str, v: &str) -> std::result::Result<bool, String> {
    let f = || v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
    let u = || v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
    match key {
        "source_radius" => g.source_radius = f()?,
        "source_detector_dist" => g.source_detector_dist = f()?,
        "n_views_per_rot" => g.n_views_per_rot = u()?,
        "n_rotations" => g.n_rotations = u()?,
        "n_det_rows" => g.n_det_rows = u()?,
        "n_det_cols" => g.n_det_cols = u()?,
        "det_col_spacing" => g.det_col_spacing = f()?,
        "det_row_spacing" => g.det_row_spacing = f()?,
        "pitch_z_per_rot" => g.pitch_z_per_rot = f()?,
        "ffs_mode" => g.ffs_mode = FfsMode::parse(v).ok_or_else(|| format!("unknown ffs_mode '{v}'"))?,
        "ffs_dalpha" => g.ffs_dalpha = f()?,
        "ffs_dz" => g.ffs_dz = f()?,
        "z_start" => g.z_start = f()?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Geometry config text: `key=value` lines; keys left out keep the desk
/// defaults, except that a missing `z_start` centres the helix on `z = 0`.
pub fn parse_geometry(text: &str, path: &Path) -> Result<ScanGeometry> {
    let mut g = desk_geometry();
    let mut z_start_given = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| FileError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err("expected key=value".into()))?;
        z_start_given |= k.trim() == "z_start";
        match set_geometry_field(&mut g, k.trim(), v.trim()) {
            Ok(true) => {}
            Ok(false) => return Err(parse_err(format!("unknown geometry key '{}'", k.trim())).into()),
            Err(msg) => return Err(parse_err(msg).into()),
        }
    }
    if !z_start_given {
        let travel = g.pitch_z_per_rot * (g.n_views().saturating_sub(1)) as f64 / g.n_views_per_rot.max(1) as f64;
        g.z_start = -0.5 * travel;
    }
    g.validate()?;
    Ok(g)
}

pub fn geometry_to_text(g: &ScanGeometry) -> String {
    geometry_pairs(g).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn save_sinogram(path: &Path, sino: &Sinogram, stage: &str, seed: Option<u64>) -> Result<()> {
    let g = &sino.geom;
    let mut h = Header::new(sino.layout.name(), stage);
    h.seed = seed;
    h.origin = vec![0.0; 3];
    for (k, v) in geometry_pairs(g) {
        h.extra.insert(format!("geom.{k}"), v);
    }
    match sino.layout {
        Layout::NativeCone => {
            h.spacing = vec![g.view_spacing(), g.det_row_spacing, g.det_col_spacing];
        }
        Layout::ConeParallel(p) => {
            h.spacing = vec![p.theta_spacing, g.det_row_spacing, p.s_spacing];
            h.extra.insert("grid.n_thetas".into(), p.n_thetas.to_string());
            h.extra.insert("grid.n_s".into(), p.n_s.to_string());
            h.extra.insert("grid.s_spacing".into(), p.s_spacing.to_string());
            h.extra.insert("grid.theta_spacing".into(), p.theta_spacing.to_string());
        }
    }
    Ok(write_array(path, sino.data.view().into_dyn(), &h)?)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    let (arr, h) = read_array(path)?;
    let mut g = desk_geometry();
    for (k, _) in geometry_pairs(&desk_geometry()) {
        let key = format!("geom.{k}");
        let v = h
            .extra
            .get(&key)
            .ok_or_else(|| semantic(path, format!("missing {key}")))?;
        set_geometry_field(&mut g, k, v).map_err(|m| semantic(path, m))?;
    }
    g.validate()?;
    let layout = match h.layout.as_str() {
        "native_cone" => Layout::NativeCone,
        "cone_parallel" => {
            let side = sidecar_path(path);
            let get = |k: &str| h.extra_f64(k, &side);
            Layout::ConeParallel(ParallelGrid {
                n_thetas: get("grid.n_thetas")? as usize,
                n_s: get("grid.n_s")? as usize,
                s_spacing: get("grid.s_spacing")?,
                theta_spacing: get("grid.theta_spacing")?,
            })
        }
        other => return Err(semantic(path, format!("expected a sinogram, found layout '{other}'")).into()),
    };
    Sinogram::new(into3(path, arr)?, g, layout)
}
