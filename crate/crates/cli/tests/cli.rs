use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ctrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("launch ctrl")
}

fn ok(args: &[&str]) {
    let out = ctrl(args);
    assert!(
        out.status.success(),
        "ctrl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

struct Scratch(tempfile::TempDir);

impl Scratch {
    fn new() -> Self {
        Scratch(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> String {
        self.0.path().join(name).to_string_lossy().into_owned()
    }
}

fn last_row(csv: &str) -> Vec<String> {
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("stage,psnr,ssim,gssim,reward"));
    lines.last().unwrap().split(',').map(str::to_owned).collect()
}

#[test]
fn golden_scan_and_reconstruction() {
    let s = Scratch::new();
    let phantom = data("desk_phantom.txt");
    ok(&["phantom", "--spec", &phantom, "--out", &s.path("gt.raw")]);
    ok(&["scan", "--phantom", &phantom, "--geom", &data("desk_geometry.txt"), "--analytic", "--out", &s.path("sino.raw")]);
    ok(&["recon", "--sino", &s.path("sino.raw"), "--out", &s.path("recon.raw"), "--mask", &s.path("mask.raw")]);
    ok(&["eval", "--a", &s.path("recon.raw"), "--ref", &s.path("gt.raw"), "--roi", &s.path("mask.raw"), "--out", &s.path("q.csv")]);
    let row = last_row(&s.path("q.csv"));
    assert_eq!(row[0], "recon");
    let psnr: f64 = row[1].parse().unwrap();
    assert!(psnr >= 25.0, "psnr {psnr}");

    ok(&["eval", "--a", &s.path("gt.raw"), "--ref", &s.path("gt.raw"), "--out", &s.path("q.csv"), "--stage", "self"]);
    let row = last_row(&s.path("q.csv"));
    assert_eq!(row, ["self", "inf", "1.000000", "1.000000", "2.000000"]);
}

#[test]
fn denoise_with_vanishing_sigmas_matches_recon() {
    let s = Scratch::new();
    let phantom = data("desk_phantom.txt");
    ok(&["scan", "--phantom", &phantom, "--dose", "500", "--seed", "4", "--out", &s.path("sino.raw")]);
    ok(&["recon", "--sino", &s.path("sino.raw"), "--out", &s.path("recon.raw")]);
    std::fs::write(
        s.path("params.txt"),
        "sino_sigma_s=0.001\nsino_sigma_i=1e-9\nvol_sigma_s=0.001\nvol_sigma_i=1e-9\n",
    )
    .unwrap();
    ok(&["denoise", "--sino", &s.path("sino.raw"), "--params", &s.path("params.txt"), "--iters", "1", "--out", &s.path("d.raw")]);
    assert_eq!(std::fs::read(s.path("d.raw")).unwrap(), std::fs::read(s.path("recon.raw")).unwrap());
}

#[test]
fn slices_are_written_per_plane() {
    let s = Scratch::new();
    ok(&["phantom", "--spec", &data("desk_phantom.txt"), "--out", &s.path("gt.raw")]);
    ok(&["slices", "--vol", &s.path("gt.raw"), "--axis", "y", "--out", &s.path("png"), "--window", "0", "0.03"]);
    let pngs: Vec<PathBuf> = std::fs::read_dir(s.path("png")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(pngs.len(), 64);
    assert!(pngs.iter().all(|p| p.extension().is_some_and(|e| e == "png")));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let s = Scratch::new();
    assert_eq!(ctrl(&["recon", "--bogus"]).status.code(), Some(2));
    assert_eq!(ctrl(&["frobnicate"]).status.code(), Some(2));

    let missing = ctrl(&["recon", "--sino", &s.path("nope.raw"), "--out", &s.path("x.raw")]);
    assert_eq!(missing.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("recon"));

    ok(&["phantom", "--spec", &data("desk_phantom.txt"), "--out", &s.path("gt.raw")]);
    let full = std::fs::read(s.path("gt.raw")).unwrap();
    std::fs::write(s.path("gt.raw"), &full[..full.len() - 4]).unwrap();
    let short = ctrl(&["slices", "--vol", &s.path("gt.raw"), "--out", &s.path("png")]);
    assert_eq!(short.status.code(), Some(3));

    std::fs::write(s.path("bad.txt"), "ellipsoid 1 2\n").unwrap();
    let parse = ctrl(&["phantom", "--spec", &s.path("bad.txt"), "--out", &s.path("v.raw")]);
    assert_eq!(parse.status.code(), Some(6));
}
