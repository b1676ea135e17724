use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use ctrl_core::agent::reward_net::{patch_samples, Normalization};
use ctrl_core::agent::{
    export_params, load_params, train, train_reward_net, EpisodeLog, RewardModel, RewardNetConfig, TrainConfig,
    TrainingEnv,
};
use ctrl_core::filters::bilateral_3d;
use ctrl_core::geometry::{desk_geometry, ScanGeometry};
use ctrl_core::io::{
    load_mask, load_sinogram, load_volume, parse_geometry, save_mask, save_sinogram, save_volume,
};
use ctrl_core::metrics::{quality_report, QualityReport};
use ctrl_core::phantom::{analytic_sinogram, inject_low_dose_noise, voxelize, PhantomSpec};
use ctrl_core::pipeline::{run_scored, Artifact, PipelineConfig, Scorer};
use ctrl_core::projector::forward_project;
use ctrl_core::recon::{fbp, reconstruct_native, RampWindow, ReconConfig};
use ctrl_core::{FileError, Volume, VolumeGrid};

#[derive(Parser)]
#[command(name = "ctrl", version, about = "Helical cone-beam CT simulation, reconstruction and learned bilateral denoising")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores; also CTRL_THREADS).
    #[arg(long, global = true, env = "CTRL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Copy, ValueEnum)]
enum Window {
    Hann,
    RamLak,
}

impl From<Window> for RampWindow {
    fn from(w: Window) -> Self {
        match w {
            Window::Hann => RampWindow::Hann,
            Window::RamLak => RampWindow::RamLak,
        }
    }
}

#[derive(clap::Args)]
struct GridArgs {
    /// Reconstruction grid edge length in voxels (cubic, centred on the isocentre).
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// Reconstruction voxel size in mm.
    #[arg(long, default_value_t = 1.0)]
    voxel: f64,
}

impl GridArgs {
    fn grid(&self) -> VolumeGrid {
        VolumeGrid::centered((self.grid, self.grid, self.grid), self.voxel)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a phantom description.
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a helical scan of a phantom, optionally with low-dose noise.
    Scan {
        #[arg(long)]
        phantom: PathBuf,
        /// Geometry file, or `desk` for the built-in geometry.
        #[arg(long, default_value = "desk")]
        geom: String,
        /// Unattenuated photon count per ray; omit for a noiseless scan.
        #[arg(long)]
        dose: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exact ellipsoid line integrals (default).
        #[arg(long, conflicts_with = "numeric")]
        analytic: bool,
        /// Ray-march the voxelized phantom instead.
        #[arg(long)]
        numeric: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a native sinogram.
    Recon {
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Direct cone-beam backprojection instead of rebinning (small grids only).
        #[arg(long)]
        native: bool,
        /// Also write the angular-coverage mask.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Window::Hann)]
        window: Window,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Learn the four filter sigmas on a simulated low-dose scan.
    Train {
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long, default_value = "desk")]
        geom: String,
        #[arg(long, default_value_t = 40)]
        episodes: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 100.0)]
        dose: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output parameter file (4 `name=value` lines).
        #[arg(long)]
        out: PathBuf,
        /// Per-episode training log (CSV).
        #[arg(long)]
        log: PathBuf,
        /// Also fit and save a reward regressor for scoring without ground truth.
        #[arg(long)]
        reward_net: Option<PathBuf>,
    },
    /// Run the iterative filtering pipeline on a sinogram.
    Denoise {
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 2)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-stage intermediate arrays.
        #[arg(long)]
        intermediates: Option<PathBuf>,
        /// Ground-truth volume for per-stage quality reports and early stopping.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Reward regressor used for early stopping when no ground truth is given.
        #[arg(long, conflicts_with = "gt")]
        reward_net: Option<PathBuf>,
        /// CSV for per-stage quality reports (requires --gt).
        #[arg(long, requires = "gt")]
        report: Option<PathBuf>,
        /// Stop once an iteration improves the reward by less than this.
        #[arg(long, default_value_t = 1e-3)]
        stop_delta: f64,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Compare a volume against a reference and append a quality row to a CSV.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Region of interest (nonzero voxels); defaults to the whole volume.
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stage label of the CSV row (default: file stem of --a).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Export 8-bit PNG slices of a volume.
    Slices {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long, value_enum, default_value_t = Axis::Z)]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
        /// Display window; defaults to the volume's min/max.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
        window: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<FileError>() {
            return f.exit_code() as u8;
        }
        if let Some(ctrl_core::Error::File(f)) = cause.downcast_ref::<ctrl_core::Error>() {
            return f.exit_code() as u8;
        }
    }
    1
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        FileError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn load_phantom(path: &Path) -> Result<PhantomSpec> {
    let text = read_text(path)?;
    let spec = PhantomSpec::parse(&text).map_err(|(line, msg)| FileError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })?;
    spec.validate()?;
    Ok(spec)
}

fn load_geometry(arg: &str) -> Result<ScanGeometry> {
    if arg == "desk" {
        return Ok(desk_geometry());
    }
    let path = Path::new(arg);
    Ok(parse_geometry(&read_text(path)?, path)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| {
        FileError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| {
        FileError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { spec, out } => {
            let spec = load_phantom(&spec).context("phantom")?;
            let vol = voxelize(&spec).context("phantom")?;
            save_volume(&out, &vol, "phantom", None).context("phantom")?;
            info!("wrote {}", out.display());
        }
        Command::Scan {
            phantom,
            geom,
            dose,
            seed,
            analytic: _,
            numeric,
            out,
        } => {
            let spec = load_phantom(&phantom).context("scan")?;
            let geom = load_geometry(&geom).context("scan")?;
            let mut sino = if numeric {
                forward_project(&voxelize(&spec)?, &geom).context("scan: forward projection")?
            } else {
                analytic_sinogram(&spec, &geom).context("scan: analytic projection")?
            };
            if let Some(i0) = dose {
                sino = inject_low_dose_noise(&sino, i0, seed).context("scan: noise")?;
            }
            save_sinogram(&out, &sino, "scan", Some(seed)).context("scan")?;
            info!("wrote {} ({} views)", out.display(), sino.n_views());
        }
        Command::Recon {
            sino,
            out,
            native,
            mask,
            window,
            grid,
        } => {
            let sino = load_sinogram(&sino).context("recon")?;
            let cfg = ReconConfig {
                ramp_window: window.into(),
                ..ReconConfig::default()
            };
            let grid = grid.grid();
            let result = if native {
                reconstruct_native(&sino, &cfg, &grid).context("recon: native backprojection")?
            } else {
                fbp(&sino, &cfg, &grid).context("recon: rebinned backprojection")?
            };
            save_volume(&out, &result.volume, "recon", None).context("recon")?;
            if let Some(m) = mask {
                save_mask(&m, &result.coverage, &grid, "coverage").context("recon")?;
            }
            info!("wrote {} (coverage {:.1}%)", out.display(), 100.0 * result.covered_fraction());
        }
        Command::Train {
            phantom,
            geom,
            episodes,
            steps,
            dose,
            seed,
            out,
            log,
            reward_net,
        } => cmd_train(&phantom, &geom, episodes, steps, dose, seed, &out, &log, reward_net.as_deref())
            .context("train")?,
        Command::Denoise {
            sino,
            params,
            iters,
            out,
            intermediates,
            gt,
            reward_net,
            report,
            stop_delta,
            grid,
        } => {
            let sino = load_sinogram(&sino).context("denoise")?;
            let params = load_params(&params).context("denoise")?;
            let gt = gt.map(|p| load_volume(&p)).transpose().context("denoise")?;
            let model = match reward_net {
                Some(p) => Some(
                    RewardModel::from_text(&read_text(&p)?)
                        .map_err(|(line, msg)| FileError::Parse { path: p.clone(), line, msg })
                        .context("denoise")?,
                ),
                None => None,
            };
            let grid = gt.as_ref().map(|g| g.grid).unwrap_or_else(|| grid.grid());
            let mut cfg = PipelineConfig::new(params, grid);
            cfg.n_iterations = iters;
            cfg.stop_reward_delta = stop_delta;
            cfg.emit_intermediates = intermediates.is_some();
            let scorer = match (&gt, &model) {
                (Some(g), _) => Scorer::GroundTruth(g),
                (None, Some(m)) => Scorer::Model(m),
                (None, None) => Scorer::None,
            };
            let result = run_scored(&sino, &cfg, scorer).context("denoise")?;
            if let Some(dir) = intermediates {
                create_dir(&dir)?;
                for item in &result.intermediates {
                    let path = dir.join(format!("{}.raw", item.name));
                    match &item.artifact {
                        Artifact::Sinogram(s) => save_sinogram(&path, s, &item.name, None)?,
                        Artifact::Volume(v) => save_volume(&path, v, &item.name, None)?,
                    }
                }
                info!("wrote {} intermediates to {}", result.intermediates.len(), dir.display());
            }
            if let Some(path) = report {
                let mut text = format!("{}\n", QualityReport::CSV_HEADER);
                for r in &result.reports {
                    text += &format!("{}\n", r.report.csv_row(&r.stage));
                }
                write_text(&path, &text)?;
            }
            for r in &result.reports {
                info!("{}: {}", r.stage, r.report);
            }
            save_volume(&out, &result.volume, "denoised", None).context("denoise")?;
            info!("wrote {} after {} iteration(s)", out.display(), result.iterations_run);
        }
        Command::Eval {
            a,
            reference,
            roi,
            out,
            stage,
        } => {
            let img = load_volume(&a).context("eval")?;
            let gt = load_volume(&reference).context("eval")?;
            if img.data.dim() != gt.data.dim() {
                bail!("eval: volumes differ in shape: {:?} vs {:?}", img.data.dim(), gt.data.dim());
            }
            let mask = match roi {
                Some(p) => load_mask(&p).context("eval")?,
                None => ndarray::Array3::from_elem(gt.data.dim(), true),
            };
            let q = quality_report(&img.data, &gt.data, &mask).context("eval")?;
            let stage = stage.unwrap_or_else(|| {
                a.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "volume".into())
            });
            let mut text = if out.exists() {
                read_text(&out)?
            } else {
                format!("{}\n", QualityReport::CSV_HEADER)
            };
            text += &format!("{}\n", q.csv_row(&stage));
            write_text(&out, &text)?;
            println!("{stage}: {q}");
        }
        Command::Slices { vol, axis, out, window } => {
            let vol = load_volume(&vol).context("slices")?;
            let (lo, hi) = match window {
                Some(w) => (w[0], w[1]),
                None => vol.min_max(),
            };
            if !(hi > lo) {
                bail!("slices: empty display window [{lo}, {hi}]");
            }
            create_dir(&out)?;
            let ax = match axis {
                Axis::Z => 0,
                Axis::Y => 1,
                Axis::X => 2,
            };
            let n = vol.data.shape()[ax];
            for i in 0..n {
                let plane = vol.data.index_axis(ndarray::Axis(ax), i);
                let (h, w) = plane.dim();
                let buf: Vec<u8> = plane
                    .iter()
                    .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                let path = out.join(format!("slice_{i:03}.png"));
                image::save_buffer_with_format(
                    &path,
                    &buf,
                    w as u32,
                    h as u32,
                    image::ExtendedColorType::L8,
                    image::ImageFormat::Png,
                )
                .map_err(|e| anyhow!("slices: {}: {e}", path.display()))?;
            }
            info!("wrote {n} slices to {}", out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    phantom: &Path,
    geom: &str,
    episodes: usize,
    steps: usize,
    dose: f64,
    seed: u64,
    out: &Path,
    log_path: &Path,
    reward_net: Option<&Path>,
) -> Result<()> {
    let spec = load_phantom(phantom)?;
    let geom = load_geometry(geom)?;
    let truth: Volume = voxelize(&spec)?;
    let clean = analytic_sinogram(&spec, &geom)?;
    let noisy = inject_low_dose_noise(&clean, dose, seed)?;
    let mut env = TrainingEnv::new(noisy, truth.clone(), ReconConfig::default())?;
    let cfg = TrainConfig {
        episodes,
        steps_per_episode: steps,
        ..TrainConfig::default()
    };
    let outcome = train(&mut env, &cfg, seed)?;

    let mut csv = format!("{}\n", EpisodeLog::CSV_HEADER);
    for e in &outcome.log {
        csv += &format!("{}\n", e.csv_row());
    }
    write_text(log_path, &csv)?;
    let count = export_params(&outcome.params, out)?;
    info!(
        "wrote {count} inference parameters to {}; training-side parameters: {}",
        out.display(),
        outcome.training_param_count()
    );

    if let Some(path) = reward_net {
        let norm = Normalization::from_ground_truth(&truth.data)?;
        let plain = fbp(&inject_low_dose_noise(&clean, dose, seed)?, &ReconConfig::default(), &truth.grid)?;
        let nz = truth.data.dim().0;
        let slices: Vec<usize> = (nz / 4..3 * nz / 4).step_by(4).collect();
        let mut samples = patch_samples(&plain.volume.data, &truth.data, &slices, &norm)?;
        for factor in [1.0, 2.0, 4.0] {
            let p = outcome.params;
            let filtered = bilateral_3d(&plain.volume.data, p.vol_sigma_s, factor * p.vol_sigma_i)?;
            samples.extend(patch_samples(&filtered, &truth.data, &slices, &norm)?);
        }
        let (model, report) = train_reward_net(&samples, norm, &RewardNetConfig::default(), seed)?;
        write_text(path, &model.to_text())?;
        info!(
            "reward regressor: {} train / {} validation patches, validation MSE {:.3e}",
            report.n_train, report.n_validation, report.validation_mse
        );
    }
    Ok(())
}
