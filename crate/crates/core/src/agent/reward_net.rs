//! A small 3×3-kernel CNN that regresses the composite reward of a 2D patch,
//! for scoring images when no ground truth is available.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{ConvNet, NetSpec};
use crate::error::{Error, Result};
use crate::metrics::{gssim, mse, reward_from_terms, SsimParams};

pub const PATCH: usize = 32;
pub const MIN_SAMPLES: usize = 100;

pub fn reward_net_spec() -> NetSpec {
    NetSpec {
        in_channels: 1,
        in_shape: [1, PATCH, PATCH],
        kernel: [1, 3, 3],
        channels: [4, 8],
        hidden: 32,
        outputs: 1,
    }
}

/// Affine map of raw intensities to the ground truth's `[0, 1]` range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub fn from_ground_truth(gt: &Array3<f64>) -> Result<Self> {
        let (lo, hi) = gt
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if !(hi > lo) {
            return Err(Error::input("ground truth has no dynamic range"));
        }
        Ok(Normalization {
            offset: lo,
            scale: hi - lo,
        })
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardSample {
    /// Normalised `PATCH × PATCH` image patch.
    pub patch: Array2<f64>,
    pub target: f64,
}

/// Corners of the patch grid used on an `h × w` slice.
fn patch_corners(h: usize, w: usize) -> Vec<(usize, usize)> {
    let step = PATCH / 2;
    let ys: Vec<usize> = (0..=h.saturating_sub(PATCH)).step_by(step).collect();
    let xs: Vec<usize> = (0..=w.saturating_sub(PATCH)).step_by(step).collect();
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
}

/// Labelled patches of `img` on the given z slices; labels are the composite
/// reward of each patch against the matching ground-truth patch.
pub fn patch_samples(img: &Array3<f64>, gt: &Array3<f64>, slices: &[usize], norm: &Normalization) -> Result<Vec<RewardSample>> {
    if img.dim() != gt.dim() {
        return Err(Error::shape("image and ground truth differ in shape"));
    }
    let (nz, h, w) = img.dim();
    if h < PATCH || w < PATCH {
        return Err(Error::input(format!("slices must be at least {PATCH}x{PATCH}")));
    }
    let p = SsimParams::default();
    let mut out = Vec::new();
    for &z in slices {
        if z >= nz {
            return Err(Error::Index { index: z, limit: nz });
        }
        for (y, x) in patch_corners(h, w) {
            let a = img.slice(s![z, y..y + PATCH, x..x + PATCH]).mapv(|v| norm.apply(v));
            let r = gt.slice(s![z, y..y + PATCH, x..x + PATCH]).mapv(|v| norm.apply(v));
            let target = reward_from_terms(gssim(&a, &r, &p)?, mse(&a, &r)?);
            out.push(RewardSample { patch: a, target });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardNetConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
}

impl Default for RewardNetConfig {
    fn default() -> Self {
        RewardNetConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 60,
            batch_size: 16,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardNetReport {
    pub train_mse: f64,
    pub validation_mse: f64,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub net: ConvNet,
    pub norm: Normalization,
}

fn mean_sq_error(net: &ConvNet, samples: &[&RewardSample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += net.td_loss(s.patch.as_slice().expect("owned patch"), 0, s.target)?;
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// SGD-with-momentum regression of patch rewards. The head starts at zero
/// weight with its bias at the mean training target.
pub fn train_reward_net(
    samples: &[RewardSample],
    norm: Normalization,
    cfg: &RewardNetConfig,
    seed: u64,
) -> Result<(RewardModel, RewardNetReport)> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::input(format!(
            "reward dataset too small: {} samples, need at least {MIN_SAMPLES}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.patch.dim() != (PATCH, PATCH) || !s.target.is_finite()) {
        return Err(Error::input(format!("reward samples must be finite {PATCH}x{PATCH} patches")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.validation_fraction).round() as usize).min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut net = ConvNet::he_init(reward_net_spec(), &mut rng)?;
    let mean = train_idx.iter().map(|&i| samples[i].target).sum::<f64>() / train_idx.len() as f64;
    {
        let (w, b) = net.head_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        b[0] = mean;
    }
    let mut velocity = vec![0.0; net.param_count()];
    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; net.param_count()];
            for &i in batch {
                let s = &samples[i];
                let (_, g) = net.td_loss_grad(s.patch.as_slice().expect("owned patch"), 0, s.target)?;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let n = batch.len() as f64;
            for ((w, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g / n;
                *w += *v;
            }
        }
    }
    let train: Vec<&RewardSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&RewardSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let report = RewardNetReport {
        train_mse: mean_sq_error(&net, &train)?,
        validation_mse: if val.is_empty() { f64::NAN } else { mean_sq_error(&net, &val)? },
        n_train: train.len(),
        n_validation: val.len(),
    };
    Ok((RewardModel { net, norm }, report))
}

impl RewardModel {
    /// Predicted reward of an already normalised patch.
    pub fn predict(&self, patch: &Array2<f64>) -> Result<f64> {
        let std = patch.as_standard_layout();
        Ok(self.net.forward(std.as_slice().expect("standard layout"))?[0])
    }

    /// Mean predicted reward over the patch grid of the central slice.
    pub fn score_volume(&self, vol: &Array3<f64>) -> Result<f64> {
        let (nz, h, w) = vol.dim();
        if h < PATCH || w < PATCH {
            return Err(Error::input(format!("slices must be at least {PATCH}x{PATCH}")));
        }
        let corners = patch_corners(h, w);
        let mut acc = 0.0;
        for &(y, x) in &corners {
            let p = vol.slice(s![nz / 2, y..y + PATCH, x..x + PATCH]).mapv(|v| self.norm.apply(v));
            acc += self.predict(&p)?;
        }
        Ok(acc / corners.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let s = &self.net.spec;
        let mut out = String::from("reward_net 1\n");
        out += &format!(
            "spec {} {} {} {} {} {} {} {} {} {} {}\n",
            s.in_channels,
            s.in_shape[0],
            s.in_shape[1],
            s.in_shape[2],
            s.kernel[0],
            s.kernel[1],
            s.kernel[2],
            s.channels[0],
            s.channels[1],
            s.hidden,
            s.outputs
        );
        out += &format!("norm {} {}\n", self.norm.offset, self.norm.scale);
        out += &format!("params {}\n", self.net.params.len());
        for v in &self.net.params {
            out += &format!("{v}\n");
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.trim().to_string()))
                .ok_or((0, format!("missing {what}")))
        };
        let (ln, magic) = next("header")?;
        if magic != "reward_net 1" {
            return Err((ln, "not a reward network file".into()));
        }
        let nums = |ln: usize, line: &str, tag: &str, n: usize| -> std::result::Result<Vec<f64>, (usize, String)> {
            let mut it = line.split_whitespace();
            if it.next() != Some(tag) {
                return Err((ln, format!("expected '{tag}'")));
            }
            let v: Vec<f64> = it
                .map(|t| t.parse::<f64>().map_err(|e| (ln, e.to_string())))
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != n {
                return Err((ln, format!("'{tag}' needs {n} values")));
            }
            Ok(v)
        };
        let (ln, l) = next("spec")?;
        let v = nums(ln, &l, "spec", 11)?;
        let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        let spec = NetSpec {
            in_channels: u[0],
            in_shape: [u[1], u[2], u[3]],
            kernel: [u[4], u[5], u[6]],
            channels: [u[7], u[8]],
            hidden: u[9],
            outputs: u[10],
        };
        spec.validate().map_err(|e| (ln, e.to_string()))?;
        let (ln, l) = next("norm")?;
        let v = nums(ln, &l, "norm", 2)?;
        let norm = Normalization {
            offset: v[0],
            scale: v[1],
        };
        let (ln, l) = next("params")?;
        let n = nums(ln, &l, "params", 1)?[0] as usize;
        if n != spec.param_count() {
            return Err((ln, format!("spec needs {} parameters, file has {n}", spec.param_count())));
        }
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("parameter")?;
            params.push(l.parse::<f64>().map_err(|e| (ln, e.to_string()))?);
        }
        Ok(RewardModel {
            net: ConvNet { spec, params },
            norm,
        })
    }
}
