//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Built without the libtest harness so
//! the report is visible in ordinary `cargo test` output.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ctrl_core::agent::reward_net::reward_net_spec;
use ctrl_core::agent::{
    double_dqn_target, dqn_target, export_params, train, ConvNet, NetSpec, TrainConfig, TrainingEnv, TrainingOutcome,
};
use ctrl_core::filters::{bilateral_2d, bilateral_3d};
use ctrl_core::geometry::{desk_geometry, FfsMode};
use ctrl_core::metrics::{masked_mse, quality_report};
use ctrl_core::phantom::{analytic_sinogram, desk_phantom, inject_low_dose_noise, voxelize};
use ctrl_core::pipeline::{run, PipelineConfig};
use ctrl_core::projector::forward_project;
use ctrl_core::rebin::{rebin_to_parallel, resolve_ffs, ParallelGrid};
use ctrl_core::recon::{fbp, ReconConfig};

const LOW_DOSE: f64 = 100.0;
const NOISE_SEED: u64 = 7;
const TRAIN_SEED: u64 = 42;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    let mut failures = Vec::new();
    let mut outcome: Option<TrainingOutcome> = None;
    let mut check = |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Verdict::new(false, format!("panicked: {}", panic_text(&e))));
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {status} [{name}] {} ({:.1}s)",
            verdict.detail,
            t0.elapsed().as_secs_f64()
        );
        if !verdict.pass {
            failures.push(id);
        }
    };
    check(1, "bilateral oracle", &mut bilateral_oracle);
    check(2, "projector fidelity", &mut projector_fidelity);
    check(3, "reconstruction fidelity", &mut reconstruction_fidelity);
    check(4, "focal-spot degeneracy", &mut ffs_degeneracy);
    check(5, "gradient correctness", &mut gradient_checks);
    check(6, "double-DQN target", &mut ddqn_targets);
    check(7, "learning efficacy", &mut || learning_efficacy(&mut outcome));
    check(8, "parameter count", &mut || parameter_count(outcome.as_ref()));
    check(9, "reward identities", &mut reward_identities);
    check(10, "CLI determinism", &mut cli_determinism);
    if failures.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn rel_l2<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    (num / den).sqrt()
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criterion 1

fn printed_gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (2.0 * sigma * sigma)
}

/// Literal weighted mean over every in-bounds pixel within two pixels (per
/// axis) of `(y, x)`.
fn brute_force_2d(img: &Array2<f64>, sigma_s: f64, sigma_i: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut num = 0.0;
        let mut den = 0.0;
        for oy in 0..h {
            for ox in 0..w {
                let (dy, dx) = (oy as f64 - y as f64, ox as f64 - x as f64);
                if dy.abs() > 2.0 || dx.abs() > 2.0 {
                    continue;
                }
                let g = printed_gaussian((dy * dy + dx * dx).sqrt(), sigma_s)
                    * printed_gaussian(img[[y, x]] - img[[oy, ox]], sigma_i);
                num += img[[oy, ox]] * g;
                den += g;
            }
        }
        num / den
    })
}

fn brute_force_3d(vol: &Array3<f64>, sigma_s: f64, sigma_i: f64) -> Array3<f64> {
    let (d, h, w) = vol.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let mut num = 0.0;
        let mut den = 0.0;
        for oz in 0..d {
            for oy in 0..h {
                for ox in 0..w {
                    let dz = oz as f64 - z as f64;
                    let dy = oy as f64 - y as f64;
                    let dx = ox as f64 - x as f64;
                    if dz.abs() > 2.0 || dy.abs() > 2.0 || dx.abs() > 2.0 {
                        continue;
                    }
                    let g = printed_gaussian((dz * dz + dy * dy + dx * dx).sqrt(), sigma_s)
                        * printed_gaussian(vol[[z, y, x]] - vol[[oz, oy, ox]], sigma_i);
                    num += vol[[oz, oy, ox]] * g;
                    den += g;
                }
            }
        }
        num / den
    })
}

fn bilateral_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for &(ss, si) in &[(1.5, 0.1), (0.8, 0.3), (3.0, 0.05)] {
        let img = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
        worst = worst.max(max_abs_diff(&bilateral_2d(&img, ss, si).unwrap(), &brute_force_2d(&img, ss, si)));
        let vol = Array3::from_shape_fn((16, 16, 16), |_| rng.random::<f64>());
        worst = worst.max(max_abs_diff(&bilateral_3d(&vol, ss, si).unwrap(), &brute_force_3d(&vol, ss, si)));
    }
    let c2 = Array2::from_elem((32, 32), 0.731);
    let c3 = Array3::from_elem((16, 16, 16), -2.25);
    let constant = max_abs_diff(&bilateral_2d(&c2, 1.5, 0.1).unwrap(), &c2)
        .max(max_abs_diff(&bilateral_3d(&c3, 1.5, 0.1).unwrap(), &c3));
    let secs = t0.elapsed().as_secs_f64();
    Verdict::new(
        worst <= 1e-6 && constant <= 1e-12 && secs < 10.0,
        format!("max |filter - oracle| = {worst:.2e}, constant drift = {constant:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn projector_fidelity() -> Verdict {
    let spec = desk_phantom();
    let geom = desk_geometry();
    let vol = voxelize(&spec).unwrap();
    let t0 = Instant::now();
    let numeric = forward_project(&vol, &geom).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let analytic = analytic_sinogram(&spec, &geom).unwrap();
    let err = rel_l2(&numeric.data, &analytic.data);
    Verdict::new(
        err < 0.02 && secs < 60.0,
        format!("relative L2 = {:.3}% over {} rays, {secs:.1}s", 100.0 * err, analytic.data.len()),
    )
}

// ---------------------------------------------------------------- criterion 3

fn reconstruction_fidelity() -> Verdict {
    let spec = desk_phantom();
    let truth = voxelize(&spec).unwrap();
    let sino = analytic_sinogram(&spec, &desk_geometry()).unwrap();
    let t0 = Instant::now();
    let out = fbp(&sino, &ReconConfig::default(), &truth.grid).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let q = quality_report(&out.volume.data, &truth.data, &out.coverage).unwrap();
    Verdict::new(
        q.psnr >= 25.0 && q.ssim >= 0.85 && secs < 120.0,
        format!(
            "PSNR {:.2} dB, SSIM {:.4} on {:.1}% covered voxels, {secs:.1}s",
            q.psnr,
            q.ssim,
            100.0 * out.covered_fraction()
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn ffs_degeneracy() -> Verdict {
    let spec = desk_phantom();
    let plain = desk_geometry();
    let truth_grid = voxelize(&spec).unwrap().grid;
    let reference = analytic_sinogram(&spec, &plain).unwrap();
    let with_ffs = |dalpha: f64, dz: f64| {
        let mut g = plain.clone();
        g.ffs_mode = FfsMode::AlphaZ;
        g.ffs_dalpha = dalpha;
        g.ffs_dz = dz;
        analytic_sinogram(&spec, &g).unwrap()
    };

    // Zero deflection: every stage of the FFS path must agree with the plain path.
    let zero = with_ffs(0.0, 0.0);
    let pgrid = ParallelGrid::for_geometry(&plain);
    let resolved = resolve_ffs(&zero).unwrap();
    let d_resolve = max_abs_diff(&resolved.data, &reference.data);
    let d_rebin = max_abs_diff(
        &rebin_to_parallel(&zero, &pgrid).unwrap().sino.data,
        &rebin_to_parallel(&reference, &pgrid).unwrap().sino.data,
    );
    let cfg = ReconConfig::default();
    let d_recon = max_abs_diff(
        &fbp(&zero, &cfg, &truth_grid).unwrap().volume.data,
        &fbp(&reference, &cfg, &truth_grid).unwrap().volume.data,
    );
    let zero_diff = d_resolve.max(d_rebin).max(d_recon);

    // Deflected acquisition resolved onto the nominal grid.
    let (dalpha, dz) = (1e-3, 0.1);
    let deflected = with_ffs(dalpha, dz);
    let raw = rel_l2(&deflected.data, &reference.data);
    let err = rel_l2(&resolve_ffs(&deflected).unwrap().data, &reference.data);
    Verdict::new(
        zero_diff <= 1e-12 && err < 0.01,
        format!(
            "zero deflection max diff {zero_diff:.1e}; d_alpha={dalpha} rad, d_z={dz} mm: resolved rel L2 {:.3}% (unresolved {:.3}%)",
            100.0 * err,
            100.0 * raw
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn tiny_nets() -> [(&'static str, NetSpec, usize); 3] {
    [
        (
            "planar Q",
            NetSpec {
                in_channels: 3,
                in_shape: [1, 8, 8],
                kernel: [1, 3, 3],
                channels: [2, 3],
                hidden: 6,
                outputs: 5,
            },
            400,
        ),
        (
            "volumetric Q",
            NetSpec {
                in_channels: 3,
                in_shape: [6, 6, 6],
                kernel: [3, 3, 3],
                channels: [2, 3],
                hidden: 5,
                outputs: 5,
            },
            350,
        ),
        (
            "reward",
            NetSpec {
                in_shape: [1, 8, 8],
                channels: [2, 2],
                hidden: 4,
                ..reward_net_spec()
            },
            250,
        ),
    ]
}

fn gradient_checks() -> Verdict {
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let (mut checks, mut failures, mut kinks) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for (_, spec, quota) in tiny_nets() {
        let mut done = 0;
        while done < quota {
            let mut net = ConvNet::zeros(spec).unwrap();
            net.params.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            let x: Vec<f64> = (0..spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let action = rng.random_range(0..spec.outputs);
            let target = rng.random_range(-2.0..2.0);
            let (_, grad) = net.td_loss_grad(&x, action, target).unwrap();
            let pattern = net.forward_cached(&x).unwrap().pattern();
            for _ in 0..10 {
                if done == quota {
                    break;
                }
                let idx = rng.random_range(0..net.param_count());
                let mut plus = net.clone();
                plus.params[idx] += eps;
                let mut minus = net.clone();
                minus.params[idx] -= eps;
                // A ReLU switching inside [w - eps, w + eps] makes the finite
                // difference meaningless; draw another weight instead.
                if plus.forward_cached(&x).unwrap().pattern() != pattern
                    || minus.forward_cached(&x).unwrap().pattern() != pattern
                {
                    kinks += 1;
                    continue;
                }
                let fd = (plus.td_loss(&x, action, target).unwrap() - minus.td_loss(&x, action, target).unwrap())
                    / (2.0 * eps);
                let scale = grad[idx].abs().max(fd.abs());
                let rel = if scale < 1e-8 { 0.0 } else { (grad[idx] - fd).abs() / scale };
                worst = worst.max(rel);
                if rel > 1e-3 {
                    failures += 1;
                }
                checks += 1;
                done += 1;
            }
        }
    }
    Verdict::new(
        checks == 1000 && failures == 0,
        format!("{checks} weight checks, {failures} failures, worst relative error {worst:.1e}, {kinks} redraws at ReLU kinks"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn two_action_net(q: [f64; 2]) -> ConvNet {
    let spec = NetSpec {
        in_channels: 1,
        in_shape: [1, 4, 4],
        kernel: [1, 3, 3],
        channels: [1, 1],
        hidden: 2,
        outputs: 2,
    };
    let mut net = ConvNet::zeros(spec).unwrap();
    net.head_mut().1.copy_from_slice(&q);
    net
}

fn ddqn_targets() -> Verdict {
    let values = [-1.0, 0.0, 0.5, 1.0, 2.5];
    let obs = vec![0.7; 16];
    let (mut cases, mut mismatches) = (0, 0);
    for &a0 in &values {
        for &a1 in &values {
            for &b0 in &values {
                for &b1 in &values {
                    let online = two_action_net([a0, a1]);
                    let target = two_action_net([b0, b1]);
                    for &(r, discount) in &[(0.25, 0.5), (-1.0, 0.9)] {
                        // Online net chooses (ties to the first action), target net values.
                        let chosen = if a1 > a0 { 1 } else { 0 };
                        let expected = r + discount * [b0, b1][chosen];
                        let got = double_dqn_target(&online, &target, r, &obs, discount, false).unwrap();
                        let terminal = double_dqn_target(&online, &target, r, &obs, discount, true).unwrap();
                        cases += 1;
                        if got != expected || terminal != r {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    // Identical networks reduce to the max-based single-network target.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut reduction_mismatches = 0;
    for _ in 0..200 {
        let mut net = two_action_net([0.0, 0.0]);
        net.params.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(-1.0..1.0);
        let q = net.forward(&x).unwrap();
        let manual = r + 0.9 * q[0].max(q[1]);
        let single = dqn_target(&net, r, &x, 0.9, false).unwrap();
        let double = double_dqn_target(&net, &net, r, &x, 0.9, false).unwrap();
        if double != single || single != manual {
            reduction_mismatches += 1;
        }
    }
    Verdict::new(
        mismatches == 0 && reduction_mismatches == 0,
        format!(
            "{cases} enumerated cases, {mismatches} mismatches; identical-net reduction {reduction_mismatches}/200 mismatches"
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn learning_efficacy(slot: &mut Option<TrainingOutcome>) -> Verdict {
    let spec = desk_phantom();
    let truth = voxelize(&spec).unwrap();
    let clean = analytic_sinogram(&spec, &desk_geometry()).unwrap();
    let noisy = inject_low_dose_noise(&clean, LOW_DOSE, NOISE_SEED).unwrap();

    let t0 = Instant::now();
    let mut env = TrainingEnv::new(noisy.clone(), truth.clone(), ReconConfig::default()).unwrap();
    let outcome = train(&mut env, &TrainConfig::default(), TRAIN_SEED).unwrap();
    let train_time = t0.elapsed();

    let n = outcome.log.len();
    let mean = |eps: &[ctrl_core::agent::EpisodeLog]| eps.iter().map(|e| e.episode_return).sum::<f64>() / eps.len() as f64;
    let first = mean(&outcome.log[..5]);
    let last = mean(&outcome.log[n - 5..]);

    let baseline = fbp(&noisy, &ReconConfig::default(), &truth.grid).unwrap();
    let base_q = quality_report(&baseline.volume.data, &truth.data, &baseline.coverage).unwrap();
    let mut one = PipelineConfig::new(outcome.params, truth.grid);
    one.n_iterations = 1;
    let filtered = run(&noisy, &one, None).unwrap();
    let filt_q = quality_report(&filtered.volume.data, &truth.data, &filtered.coverage).unwrap();
    let gain = filt_q.psnr - base_q.psnr;

    let two = PipelineConfig::new(outcome.params, truth.grid);
    let piped = run(&noisy, &two, None).unwrap();
    let piped_q = quality_report(&piped.volume.data, &truth.data, &piped.coverage).unwrap();

    let a = last > first;
    let b = gain >= 2.0;
    let c = piped_q.reward > base_q.reward;
    let in_time = train_time <= Duration::from_secs(15 * 60);
    let p = outcome.params;
    let detail = format!(
        "(a) returns first5 {first:.4} -> last5 {last:.4} {}; (b) PSNR {:.2} -> {:.2} dB, gain {gain:.2} dB {}; \
         (c) {}-iteration reward {:.4} vs noisy {:.4} {}; sigmas [{:.4}, {:.4}, {:.4}, {:.5}]; trained in {:.0}s",
        mark(a),
        base_q.psnr,
        filt_q.psnr,
        mark(b),
        piped.iterations_run,
        piped_q.reward,
        base_q.reward,
        mark(c),
        p.sino_sigma_s,
        p.sino_sigma_i,
        p.vol_sigma_s,
        p.vol_sigma_i,
        train_time.as_secs_f64()
    );
    *slot = Some(outcome);
    Verdict::new(a && b && c && in_time, detail)
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISSED"
    }
}

// ---------------------------------------------------------------- criterion 8

fn parameter_count(outcome: Option<&TrainingOutcome>) -> Verdict {
    let Some(outcome) = outcome else {
        return Verdict::new(false, "no trained parameters available");
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.txt");
    let written = export_params(&outcome.params, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let scalars = text.lines().filter(|l| !l.trim().is_empty()).count();
    Verdict::new(
        written == 4 && scalars == 4,
        format!(
            "inference scalars written: {scalars}; training-side learnable weights: {}",
            outcome.training_param_count()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn reward_identities() -> Verdict {
    let truth = voxelize(&desk_phantom()).unwrap();
    let full = Array3::from_elem(truth.data.dim(), true);
    let self_reward = quality_report(&truth.data, &truth.data, &full).unwrap().reward;

    // Dyadic values keep every difference exact, so adding a constant leaves
    // the gradient maps (and therefore GSSIM) bit-identical while the ROI MSE
    // equals the offset squared.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cases = 200;
    let mut violations = 0;
    for _ in 0..cases {
        let mut gt = Array3::from_shape_fn((16, 16, 16), |_| rng.random_range(0..=1024) as f64 / 1024.0);
        gt[[0, 0, 0]] = 0.0;
        gt[[15, 15, 15]] = 1.0;
        let roi = if rng.random_bool(0.5) {
            Array3::from_elem(gt.dim(), true)
        } else {
            let lo = rng.random_range(0..4);
            let hi = rng.random_range(12..16);
            Array3::from_shape_fn(gt.dim(), |(z, y, x)| [z, y, x].iter().all(|&i| (lo..=hi).contains(&i)))
        };
        let mut offsets = [rng.random_range(0..512), rng.random_range(0..512)];
        offsets.sort_unstable();
        if offsets[0] == offsets[1] {
            offsets[1] += 1;
        }
        let [near, far] = offsets.map(|k| {
            let img = gt.mapv(|v| v + k as f64 / 1024.0);
            (
                quality_report(&img, &gt, &roi).unwrap(),
                masked_mse(&img, &gt, &roi).unwrap(),
            )
        });
        let fixed_gssim = near.0.gssim == far.0.gssim;
        if !(fixed_gssim && near.1 < far.1 && near.0.reward > far.0.reward) {
            violations += 1;
        }
    }
    Verdict::new(
        self_reward == 2.0 && violations == 0,
        format!("T(gt, gt) = {self_reward}; {violations}/{cases} synthetic pairs violate strict ordering at fixed GSSIM"),
    )
}

// --------------------------------------------------------------- criterion 10

fn ctrl(threads: usize, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ctrl"))
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("launch ctrl");
    assert!(
        out.status.success(),
        "ctrl {args:?} with {threads} thread(s) exited with {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn data_file(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

/// Runs every subcommand into `dir` and returns every produced file.
fn run_all_commands(dir: &Path, threads: usize) -> BTreeMap<PathBuf, Vec<u8>> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let phantom = data_file("desk_phantom.txt");
    let geom = data_file("desk_geometry.txt");
    ctrl(threads, &["phantom", "--spec", &phantom, "--out", &p("gt.raw")]);
    ctrl(threads, &[
        "scan", "--phantom", &phantom, "--geom", &geom, "--dose", "100", "--seed", "7", "--analytic", "--out", &p("noisy.raw"),
    ]);
    ctrl(threads, &["scan", "--phantom", &phantom, "--geom", &geom, "--numeric", "--out", &p("numeric.raw")]);
    ctrl(threads, &["recon", "--sino", &p("noisy.raw"), "--out", &p("recon.raw"), "--mask", &p("mask.raw")]);
    ctrl(threads, &["recon", "--sino", &p("noisy.raw"), "--out", &p("native.raw"), "--native", "--grid", "32", "--voxel", "2"]);
    ctrl(threads, &[
        "train", "--phantom", &phantom, "--geom", &geom, "--episodes", "2", "--steps", "4", "--seed", "3",
        "--out", &p("params.txt"), "--log", &p("train.csv"),
    ]);
    ctrl(threads, &[
        "denoise", "--sino", &p("noisy.raw"), "--params", &p("params.txt"), "--iters", "2", "--out", &p("denoised.raw"),
        "--intermediates", &p("stages"), "--gt", &p("gt.raw"), "--report", &p("report.csv"),
    ]);
    ctrl(threads, &["eval", "--a", &p("denoised.raw"), "--ref", &p("gt.raw"), "--roi", &p("mask.raw"), "--out", &p("eval.csv")]);
    ctrl(threads, &["slices", "--vol", &p("denoised.raw"), "--axis", "z", "--out", &p("png")]);

    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files);
    files
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
        }
    }
}

fn cli_determinism() -> Verdict {
    let runs: Vec<(usize, BTreeMap<PathBuf, Vec<u8>>)> = [1, 3]
        .iter()
        .map(|&threads| {
            let dir = tempfile::tempdir().unwrap();
            (threads, run_all_commands(dir.path(), threads))
        })
        .collect();
    let reference = &runs[0].1;
    let mut differing = Vec::new();
    for (threads, files) in &runs[1..] {
        if files.keys().ne(reference.keys()) {
            differing.push(format!("file set differs with {threads} threads"));
        }
        for (name, bytes) in files {
            if reference.get(name) != Some(bytes) {
                differing.push(format!("{} ({threads} threads)", name.display()));
            }
        }
    }
    let payloads = reference.keys().filter(|k| k.extension().is_some_and(|e| e == "raw")).count();
    let sinogram_ok = check_sinogram_header(reference);
    Verdict::new(
        differing.is_empty() && payloads > 0 && sinogram_ok,
        if differing.is_empty() {
            format!(
                "{} files ({payloads} payloads) byte-identical between 1- and 3-thread runs",
                reference.len()
            )
        } else {
            format!("differences: {}", differing.join(", "))
        },
    )
}

/// The noisy scan must carry its seed in the sidecar.
fn check_sinogram_header(files: &BTreeMap<PathBuf, Vec<u8>>) -> bool {
    files
        .get(Path::new("noisy.raw.hdr"))
        .map(|h| String::from_utf8_lossy(h).lines().any(|l| l == "seed=7"))
        .unwrap_or(false)
}
