//! The iterative denoising loop: sinogram filter → FFS merge → rebin →
//! preweight → ramp → backprojection → volume filter, with reprojection of
//! the filtered volume feeding the next iteration.

use log::info;
use ndarray::Array3;

use crate::agent::RewardModel;
use crate::error::{Error, Result};
use crate::filters::{bilateral_sinogram, bilateral_volume, FilterParams};
use crate::metrics::{quality_report, reward, QualityReport};
use crate::projector::forward_project;
use crate::rebin::{rebin_to_parallel, resolve_ffs, ParallelGrid};
use crate::recon::{fbp, preweight, ramp_filter, reconstruct_parallel, ReconConfig};
use crate::sinogram::Sinogram;
use crate::volume::{Volume, VolumeGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub n_iterations: usize,
    /// Stop once an iteration improves the reward by less than this.
    pub stop_reward_delta: f64,
    pub params: FilterParams,
    pub recon: ReconConfig,
    pub grid: VolumeGrid,
    pub emit_intermediates: bool,
}

impl PipelineConfig {
    pub fn new(params: FilterParams, grid: VolumeGrid) -> Self {
        PipelineConfig {
            n_iterations: 2,
            stop_reward_delta: 1e-3,
            params,
            recon: ReconConfig::default(),
            grid,
            emit_intermediates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::config("n_iterations must be >= 1"));
        }
        self.params.validate()?;
        self.grid.validate()
    }
}

#[derive(Clone, Debug)]
pub enum Artifact {
    Sinogram(Sinogram),
    Volume(Volume),
}

#[derive(Clone, Debug)]
pub struct Intermediate {
    /// Stage-suffixed name, unique and ordered, e.g. `03_iter1_recon_vol`.
    pub name: String,
    pub artifact: Artifact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub report: QualityReport,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub volume: Volume,
    pub coverage: Array3<bool>,
    pub iterations_run: usize,
    /// Empty unless ground truth was supplied.
    pub reports: Vec<StageReport>,
    pub intermediates: Vec<Intermediate>,
}

/// How iterations are scored for early stopping.
pub enum Scorer<'a> {
    None,
    GroundTruth(&'a Volume),
    Model(&'a RewardModel),
}

struct Emitter {
    on: bool,
    items: Vec<Intermediate>,
}

impl Emitter {
    fn push(&mut self, stage: &str, make: impl FnOnce() -> Artifact) {
        if self.on {
            let name = format!("{:02}_{stage}", self.items.len());
            self.items.push(Intermediate { name, artifact: make() });
        }
    }
}

/// Runs the loop with ground-truth scoring when `gt` is given.
pub fn run(sino: &Sinogram, cfg: &PipelineConfig, gt: Option<&Volume>) -> Result<PipelineOutput> {
    match gt {
        Some(g) => run_scored(sino, cfg, Scorer::GroundTruth(g)),
        None => run_scored(sino, cfg, Scorer::None),
    }
}

pub fn run_scored(sino: &Sinogram, cfg: &PipelineConfig, scorer: Scorer<'_>) -> Result<PipelineOutput> {
    cfg.validate()?;
    sino.require_native("pipeline")?;
    let gt = match scorer {
        Scorer::GroundTruth(g) => {
            if g.grid.array_dim() != cfg.grid.array_dim() {
                return Err(Error::shape("ground truth grid differs from the reconstruction grid"));
            }
            Some(g)
        }
        _ => None,
    };
    let p = cfg.params;
    let mut emit = Emitter {
        on: cfg.emit_intermediates,
        items: Vec::new(),
    };
    emit.push("input_sino", || Artifact::Sinogram(sino.clone()));

    let mut reports = Vec::new();
    if let Some(g) = gt {
        let base = fbp(sino, &cfg.recon, &cfg.grid).map_err(|e| e.in_stage("baseline"))?;
        reports.push(StageReport {
            stage: "baseline".into(),
            report: quality_report(&base.volume.data, &g.data, &base.coverage)?,
        });
    }

    let mut current = sino.clone();
    let mut last_score: Option<f64> = None;
    let mut result = None;
    let mut iterations_run = 0;
    for it in 1..=cfg.n_iterations {
        let filtered = bilateral_sinogram(&current, p.sino_sigma_s, p.sino_sigma_i)
            .map_err(|e| e.in_stage("sinogram_filter"))?;
        emit.push(&format!("iter{it}_filtered_sino"), || Artifact::Sinogram(filtered.clone()));
        let merged = resolve_ffs(&filtered).map_err(|e| e.in_stage("resolve_ffs"))?;
        let pgrid = ParallelGrid::for_geometry(&merged.geom);
        let rebinned = rebin_to_parallel(&merged, &pgrid)
            .map_err(|e| e.in_stage("rebin"))?
            .sino;
        emit.push(&format!("iter{it}_rebinned_sino"), || Artifact::Sinogram(rebinned.clone()));
        let ramped = ramp_filter(&preweight(&rebinned), cfg.recon.ramp_window).map_err(|e| e.in_stage("ramp_filter"))?;
        let recon = reconstruct_parallel(&ramped, &cfg.recon, &cfg.grid).map_err(|e| e.in_stage("backprojection"))?;
        emit.push(&format!("iter{it}_recon_vol"), || Artifact::Volume(recon.volume.clone()));
        let volume = bilateral_volume(&recon.volume, p.vol_sigma_s, p.vol_sigma_i).map_err(|e| e.in_stage("volume_filter"))?;
        emit.push(&format!("iter{it}_filtered_vol"), || Artifact::Volume(volume.clone()));
        iterations_run = it;

        let score = match scorer {
            Scorer::GroundTruth(g) => {
                reports.push(StageReport {
                    stage: format!("iter{it}_recon"),
                    report: quality_report(&recon.volume.data, &g.data, &recon.coverage)?,
                });
                let q = quality_report(&volume.data, &g.data, &recon.coverage)?;
                reports.push(StageReport {
                    stage: format!("iter{it}_filtered"),
                    report: q,
                });
                Some(q.reward)
            }
            Scorer::Model(m) => Some(m.score_volume(&volume.data)?),
            Scorer::None => None,
        };
        let stop = match (last_score, score) {
            (Some(prev), Some(now)) if it >= 2 => now - prev < cfg.stop_reward_delta,
            _ => false,
        };
        if let Some(s) = score {
            info!("iteration {it}: reward {s:.5}");
        }
        last_score = score;
        let done = stop || it == cfg.n_iterations;
        if !done {
            current = forward_project(&volume, &sino.geom).map_err(|e| e.in_stage("reprojection"))?;
            emit.push(&format!("iter{it}_reprojected_sino"), || Artifact::Sinogram(current.clone()));
        }
        result = Some((volume, recon.coverage));
        if done {
            if stop {
                info!("early stop after iteration {it}");
            }
            break;
        }
    }
    let (volume, coverage) = result.expect("at least one iteration");
    emit.push("final_vol", || Artifact::Volume(volume.clone()));
    Ok(PipelineOutput {
        volume,
        coverage,
        iterations_run,
        reports,
        intermediates: emit.items,
    })
}

/// Composite reward of the pipeline output inside its coverage mask.
pub fn output_reward(out: &PipelineOutput, gt: &Volume) -> Result<f64> {
    reward(&out.volume.data, &gt.data, &out.coverage)
}
