use ctrl_core::geometry::{desk_geometry, FfsMode};
use ctrl_core::phantom::{analytic_sinogram, desk_phantom};
use ctrl_core::rebin::{rebin_to_parallel, resolve_ffs, ParallelGrid};

fn rel_l2(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn zero_deflection_matches_plain_acquisition() {
    let spec = desk_phantom();
    let plain = desk_geometry();
    let mut ffs = plain.clone();
    ffs.ffs_mode = FfsMode::AlphaZ;
    let a = analytic_sinogram(&spec, &plain).unwrap();
    let b = analytic_sinogram(&spec, &ffs).unwrap();
    let resolved = resolve_ffs(&b).unwrap();
    let diff = resolved.data.iter().zip(&a.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12, "max difference {diff}");

    let grid = ParallelGrid::for_geometry(&plain);
    let ra = rebin_to_parallel(&a, &grid).unwrap();
    let rb = rebin_to_parallel(&b, &grid).unwrap();
    let diff = rb.sino.data.iter().zip(&ra.sino.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12, "max rebinned difference {diff}");
}

#[test]
fn deflected_acquisition_resolves_to_plain_sampling() {
    let spec = desk_phantom();
    let plain = desk_geometry();
    let reference = analytic_sinogram(&spec, &plain).unwrap();
    let mut ffs = plain.clone();
    ffs.ffs_mode = FfsMode::AlphaZ;
    ffs.ffs_dalpha = 1e-3;
    ffs.ffs_dz = 0.1;
    let sino = analytic_sinogram(&spec, &ffs).unwrap();
    let raw = rel_l2(&sino.data, &reference.data);
    let resolved = resolve_ffs(&sino).unwrap();
    assert_eq!(resolved.geom, plain);
    let err = rel_l2(&resolved.data, &reference.data);
    assert!(err < 0.01, "resolved error {err}");
    assert!(err < raw, "resolving should beat ignoring the deflection ({err} vs {raw})");
}
