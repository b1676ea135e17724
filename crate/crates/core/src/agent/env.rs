//! The denoising environment the two agents act in, and the training loop.
//!
//! Sigmas live on a multiplicative lattice `σ = σ₀ · 1.25^k`, so states can
//! be cached exactly: reconstructions are keyed by the sinogram exponents,
//! rewards and volume observations by all four.

use std::collections::HashMap;
use std::rc::Rc;

use log::{debug, info};
use ndarray::{s, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dqn::{greedy_action, DqnAgent, DqnConfig, Transition};
use super::net::{ConvNet, NetSpec};
use crate::error::{Error, Result};
use crate::filters::{bilateral_3d, bilateral_sinogram, FilterParams};
use crate::metrics::reward;
use crate::recon::{fbp, ReconConfig};
use crate::sinogram::Sinogram;
use crate::volume::Volume;

pub const SIGMA_STEP: f64 = 1.25;
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
pub const N_ACTIONS: usize = 5;
/// Side of the planar sinogram observation.
pub const SINO_OBS: usize = 32;
/// Side of the cubic volume observation.
pub const VOL_OBS: usize = 16;
/// Observation channels: data plus the two log-sigma planes.
pub const OBS_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    WidenSpatial,
    NarrowSpatial,
    WidenRange,
    NarrowRange,
    Keep,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::WidenSpatial,
        Action::NarrowSpatial,
        Action::WidenRange,
        Action::NarrowRange,
        Action::Keep,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Index {
            index: i,
            limit: N_ACTIONS,
        })
    }

    /// Exponent change of `(σ_s, σ_i)`.
    fn delta(self) -> (i32, i32) {
        match self {
            Action::WidenSpatial => (1, 0),
            Action::NarrowSpatial => (-1, 0),
            Action::WidenRange => (0, 1),
            Action::NarrowRange => (0, -1),
            Action::Keep => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Sinogram,
    Volume,
}

/// A point on the sigma lattice around a base parameter set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaState {
    pub base: FilterParams,
    /// Exponents in `FilterParams::NAMES` order.
    pub exps: [i32; 4],
}

impl SigmaState {
    pub fn new(base: FilterParams) -> Result<Self> {
        base.validate()?;
        Ok(SigmaState { base, exps: [0; 4] })
    }

    pub fn params(&self) -> FilterParams {
        let b = self.base.to_array();
        FilterParams::from_array(std::array::from_fn(|i| {
            (b[i] * SIGMA_STEP.powi(self.exps[i])).clamp(SIGMA_MIN, SIGMA_MAX)
        }))
    }

    /// Applies one action; exponents stop where the sigma would leave
    /// `[SIGMA_MIN, SIGMA_MAX]`.
    pub fn apply(&self, domain: Domain, action: Action) -> SigmaState {
        let (ds, di) = action.delta();
        let first = match domain {
            Domain::Sinogram => 0,
            Domain::Volume => 2,
        };
        let mut next = *self;
        let b = self.base.to_array();
        for (slot, d) in [(first, ds), (first + 1, di)] {
            let k = next.exps[slot] + d;
            let v = b[slot] * SIGMA_STEP.powi(k);
            if (SIGMA_MIN..=SIGMA_MAX).contains(&v) {
                next.exps[slot] = k;
            }
        }
        next
    }
}

/// Robust noise level from first differences along the fastest axis
/// (median absolute deviation, scaled for Gaussian noise).
pub fn estimate_noise(values: &[f64], lane: usize) -> f64 {
    let mut d: Vec<f64> = values
        .chunks(lane.max(2))
        .flat_map(|c| c.windows(2).map(|w| w[1] - w[0]))
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let med = median(&mut d);
    let mut dev: Vec<f64> = d.iter().map(|v| (v - med).abs()).collect();
    median(&mut dev) / 0.674_489_75 / std::f64::consts::SQRT_2
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
}

fn with_sigma_planes(mut data: Vec<f64>, exps: [i32; 2]) -> Vec<f64> {
    standardize(&mut data);
    let n = data.len();
    for e in exps {
        data.extend(std::iter::repeat_n(e as f64 / 4.0, n));
    }
    data
}

struct SinoEval {
    volume: Array3<f64>,
    obs: Vec<f64>,
}

#[derive(Clone)]
struct StateEval {
    reward: f64,
    vol_obs: Vec<f64>,
    sino_obs: Rc<Vec<f64>>,
}

/// Noisy measurement, ground truth and the evaluation caches.
pub struct TrainingEnv {
    noisy: Sinogram,
    gt: Volume,
    recon: ReconConfig,
    roi: Array3<bool>,
    sino_cache: HashMap<[i32; 2], Rc<SinoEval>>,
    state_cache: HashMap<[i32; 4], StateEval>,
    recons: usize,
}

impl TrainingEnv {
    pub fn new(noisy: Sinogram, gt: Volume, recon: ReconConfig) -> Result<Self> {
        noisy.require_native("training environment")?;
        let (views, _, cols) = noisy.data.dim();
        if views < SINO_OBS || cols < SINO_OBS {
            return Err(Error::input(format!(
                "sinogram needs at least {SINO_OBS} views and columns for observations"
            )));
        }
        let (nz, ny, nx) = gt.data.dim();
        if nz < VOL_OBS || ny < VOL_OBS || nx < VOL_OBS {
            return Err(Error::input(format!("volume must be at least {VOL_OBS}^3")));
        }
        let base = fbp(&noisy, &recon, &gt.grid)?;
        Ok(TrainingEnv {
            noisy,
            gt,
            recon,
            roi: base.coverage,
            sino_cache: HashMap::new(),
            state_cache: HashMap::new(),
            recons: 0,
        })
    }

    pub fn roi(&self) -> &Array3<bool> {
        &self.roi
    }

    pub fn ground_truth(&self) -> &Volume {
        &self.gt
    }

    /// Number of distinct reconstructions computed so far.
    pub fn reconstructions(&self) -> usize {
        self.recons
    }

    /// `σ_s = 1` voxel/pixel and `σ_i` at `range_factor` times the estimated
    /// noise of the measured sinogram and of its unfiltered reconstruction.
    pub fn initial_params(&self, range_factor: f64) -> Result<FilterParams> {
        let (_, _, cols) = self.noisy.data.dim();
        let sino_noise = estimate_noise(self.noisy.data.as_standard_layout().as_slice().unwrap(), cols);
        let plain = fbp(&self.noisy, &self.recon, &self.gt.grid)?;
        let vol = plain.volume.data.as_standard_layout();
        let vol_noise = estimate_noise(vol.as_slice().unwrap(), self.gt.grid.shape.0);
        let p = FilterParams {
            sino_sigma_s: 1.0,
            sino_sigma_i: (range_factor * sino_noise).clamp(SIGMA_MIN, SIGMA_MAX),
            vol_sigma_s: 1.0,
            vol_sigma_i: (range_factor * vol_noise).clamp(SIGMA_MIN, SIGMA_MAX),
        };
        p.validate()?;
        Ok(p)
    }

    fn sino_eval(&mut self, state: &SigmaState) -> Result<Rc<SinoEval>> {
        let key = [state.exps[0], state.exps[1]];
        if let Some(e) = self.sino_cache.get(&key) {
            return Ok(e.clone());
        }
        let p = state.params();
        let filtered = bilateral_sinogram(&self.noisy, p.sino_sigma_s, p.sino_sigma_i)?;
        let out = fbp(&filtered, &self.recon, &self.gt.grid)?;
        self.recons += 1;
        let (views, rows, cols) = filtered.data.dim();
        let v0 = views / 2 - SINO_OBS / 2;
        let c0 = cols / 2 - SINO_OBS / 2;
        let crop = filtered.data.slice(s![v0..v0 + SINO_OBS, rows / 2, c0..c0 + SINO_OBS]);
        let e = Rc::new(SinoEval {
            volume: out.volume.data,
            obs: crop.iter().copied().collect(),
        });
        self.sino_cache.insert(key, e.clone());
        Ok(e)
    }

    fn evaluate(&mut self, state: &SigmaState) -> Result<StateEval> {
        if let Some(e) = self.state_cache.get(&state.exps) {
            return Ok(e.clone());
        }
        let sino = self.sino_eval(state)?;
        let p = state.params();
        let vol = bilateral_3d(&sino.volume, p.vol_sigma_s, p.vol_sigma_i)?;
        let t = reward(&vol, &self.gt.data, &self.roi)?;
        let e = StateEval {
            reward: t,
            vol_obs: central_cube(vol.view(), VOL_OBS),
            sino_obs: Rc::new(sino.obs.clone()),
        };
        self.state_cache.insert(state.exps, e.clone());
        Ok(e)
    }

    /// Composite reward of the filtered reconstruction at `state`.
    pub fn reward_at(&mut self, state: &SigmaState) -> Result<f64> {
        Ok(self.evaluate(state)?.reward)
    }

    /// Observation for `domain`'s agent at `state`.
    pub fn observe(&mut self, state: &SigmaState, domain: Domain) -> Result<Vec<f64>> {
        let e = self.evaluate(state)?;
        Ok(match domain {
            Domain::Sinogram => with_sigma_planes(e.sino_obs.to_vec(), [state.exps[0], state.exps[1]]),
            Domain::Volume => with_sigma_planes(e.vol_obs, [state.exps[2], state.exps[3]]),
        })
    }
}

fn central_cube(v: ArrayView3<f64>, n: usize) -> Vec<f64> {
    let (d, h, w) = v.dim();
    let (z, y, x) = ((d - n) / 2, (h - n) / 2, (w - n) / 2);
    v.slice(s![z..z + n, y..y + n, x..x + n]).iter().copied().collect()
}

pub fn sino_net_spec() -> NetSpec {
    NetSpec::planar(OBS_CHANNELS, SINO_OBS, N_ACTIONS)
}

pub fn vol_net_spec() -> NetSpec {
    NetSpec::volumetric(OBS_CHANNELS, VOL_OBS, N_ACTIONS)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Initial `σ_i` as a multiple of the estimated noise level.
    pub init_range_factor: f64,
    pub dqn: DqnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 40,
            steps_per_episode: 8,
            init_range_factor: 1.0,
            dqn: DqnConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Sum of per-step reward deltas.
    pub episode_return: f64,
    pub initial_reward: f64,
    pub final_reward: f64,
    /// Mean TD loss over the episode's updates (0 before learning starts).
    pub mean_loss: f64,
    pub epsilon: f64,
    pub params: FilterParams,
}

impl EpisodeLog {
    pub const CSV_HEADER: &'static str =
        "episode,return,loss,epsilon,sino_sigma_s,sino_sigma_i,vol_sigma_s,vol_sigma_i";

    pub fn csv_row(&self) -> String {
        let p = self.params;
        format!(
            "{},{:.6e},{:.6e},{:.4},{},{},{},{}",
            self.episode,
            self.episode_return,
            self.mean_loss,
            self.epsilon,
            p.sino_sigma_s,
            p.sino_sigma_i,
            p.vol_sigma_s,
            p.vol_sigma_i
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub initial_params: FilterParams,
    /// End state of a greedy rollout of the trained policy.
    pub params: FilterParams,
    pub log: Vec<EpisodeLog>,
    pub sino_agent: DqnAgent,
    pub vol_agent: DqnAgent,
}

impl TrainingOutcome {
    /// Learnable weights across both Q-networks.
    pub fn training_param_count(&self) -> usize {
        self.sino_agent.online.param_count() + self.vol_agent.online.param_count()
    }
}

fn domain_at(step: usize) -> Domain {
    if step.is_multiple_of(2) {
        Domain::Sinogram
    } else {
        Domain::Volume
    }
}

/// Joint training of the sinogram and volume agents, alternating turns
/// within each episode. Every episode starts from the initial sigmas; each
/// step's reward is the change of the composite reward.
pub fn train(env: &mut TrainingEnv, cfg: &TrainConfig, seed: u64) -> Result<TrainingOutcome> {
    cfg.dqn.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = env.initial_params(cfg.init_range_factor)?;
    let start = SigmaState::new(initial)?;
    let mut make_agent = |spec| -> Result<DqnAgent> {
        let mut net = ConvNet::he_init(spec, &mut rng)?;
        // Zero head: all actions start out equally valued.
        net.head_mut().0.iter_mut().for_each(|v| *v = 0.0);
        DqnAgent::new(net, cfg.dqn)
    };
    let mut sino_agent = make_agent(sino_net_spec())?;
    let mut vol_agent = make_agent(vol_net_spec())?;

    let steps = cfg.steps_per_episode;
    let total = cfg.episodes * steps;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut global = 0;
    for episode in 0..cfg.episodes {
        let mut state = start;
        let initial_reward = env.reward_at(&state)?;
        let mut t_prev = initial_reward;
        let mut ret = 0.0;
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let eps_first = cfg.dqn.epsilon(global, total);
        for step in 0..steps {
            let domain = domain_at(step);
            let agent = match domain {
                Domain::Sinogram => &mut sino_agent,
                Domain::Volume => &mut vol_agent,
            };
            let obs = env.observe(&state, domain)?;
            let eps = cfg.dqn.epsilon(global, total);
            let a = agent.act(&obs, eps, &mut rng)?;
            let next = state.apply(domain, Action::from_index(a)?);
            let t = env.reward_at(&next)?;
            let r = t - t_prev;
            let next_obs = env.observe(&next, domain)?;
            agent.replay.push(Transition {
                state: obs,
                action: a,
                reward: r,
                next_state: next_obs,
                terminal: step + 2 >= steps,
            });
            if agent.replay.len() >= cfg.dqn.batch_size {
                for _ in 0..cfg.dqn.updates_per_step {
                    loss_sum += agent.update(&mut rng)?;
                    loss_n += 1;
                }
            }
            ret += r;
            t_prev = t;
            state = next;
            global += 1;
        }
        let entry = EpisodeLog {
            episode,
            episode_return: ret,
            initial_reward,
            final_reward: t_prev,
            mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            epsilon: eps_first,
            params: state.params(),
        };
        debug!("{}", entry.csv_row());
        log.push(entry);
    }

    let params = if cfg.episodes == 0 {
        initial
    } else {
        let mut state = start;
        for step in 0..steps {
            let domain = domain_at(step);
            let agent = match domain {
                Domain::Sinogram => &sino_agent,
                Domain::Volume => &vol_agent,
            };
            let obs = env.observe(&state, domain)?;
            let a = greedy_action(&agent.online.forward(&obs)?);
            state = state.apply(domain, Action::from_index(a)?);
        }
        state.params()
    };
    info!(
        "training finished after {} episodes ({} reconstructions)",
        cfg.episodes,
        env.reconstructions()
    );
    Ok(TrainingOutcome {
        initial_params: initial,
        params,
        log,
        sino_agent,
        vol_agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> FilterParams {
        FilterParams::from_array([1.0, 0.1, 2.0, 0.01])
    }

    #[test]
    fn actions_move_one_sigma_by_one_step() {
        let s = SigmaState::new(base()).unwrap();
        let p = s.apply(Domain::Sinogram, Action::WidenSpatial).params();
        assert_eq!(p.sino_sigma_s, 1.25);
        assert_eq!(p.sino_sigma_i, 0.1);
        let p = s.apply(Domain::Volume, Action::NarrowRange).params();
        assert_eq!(p.vol_sigma_i, 0.01 / 1.25);
        assert_eq!(s.apply(Domain::Volume, Action::Keep), s);
    }

    #[test]
    fn sigmas_stay_in_bounds() {
        let mut s = SigmaState::new(base()).unwrap();
        for _ in 0..200 {
            s = s.apply(Domain::Sinogram, Action::WidenSpatial);
            s = s.apply(Domain::Volume, Action::NarrowRange);
        }
        let p = s.params();
        assert!(p.sino_sigma_s <= SIGMA_MAX && p.sino_sigma_s > SIGMA_MAX / 1.25);
        assert!(p.vol_sigma_i >= SIGMA_MIN && p.vol_sigma_i < SIGMA_MIN * 1.25);
    }

    #[test]
    fn noise_estimate_of_gaussian_noise() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 0.2).unwrap();
        let v: Vec<f64> = (0..40_000).map(|i| 0.001 * (i % 100) as f64 + n.sample(&mut rng)).collect();
        let est = estimate_noise(&v, 100);
        assert!((est - 0.2).abs() < 0.01, "{est}");
    }

    #[test]
    fn action_indices_round_trip() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(Action::from_index(i).unwrap(), *a);
        }
        assert!(Action::from_index(N_ACTIONS).is_err());
    }
}
