//! Learning the four filter sigmas with double deep Q-learning.

pub mod dqn;
pub mod env;
pub mod net;
pub mod reward_net;

use std::fs;
use std::path::Path;

pub use dqn::{double_dqn_target, dqn_target, greedy_action, DqnAgent, DqnConfig, ReplayBuffer, Transition};
pub use env::{train, Action, Domain, EpisodeLog, SigmaState, TrainConfig, TrainingEnv, TrainingOutcome};
pub use net::{ConvNet, NetSpec};
pub use reward_net::{train_reward_net, RewardModel, RewardNetConfig, RewardNetReport, RewardSample};

use crate::error::{FileError, Result};
use crate::filters::FilterParams;

/// `name=value` lines, one per inference parameter.
pub fn params_to_text(p: &FilterParams) -> String {
    FilterParams::NAMES
        .iter()
        .zip(p.to_array())
        .map(|(n, v)| format!("{n}={v}\n"))
        .collect()
}

pub fn params_from_text(text: &str) -> std::result::Result<FilterParams, (usize, String)> {
    let mut vals: [Option<f64>; 4] = [None; 4];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or((i + 1, "expected name=value".to_string()))?;
        let slot = FilterParams::NAMES
            .iter()
            .position(|n| *n == k.trim())
            .ok_or((i + 1, format!("unknown parameter '{}'", k.trim())))?;
        if vals[slot].is_some() {
            return Err((i + 1, format!("duplicate parameter '{}'", k.trim())));
        }
        vals[slot] = Some(v.trim().parse().map_err(|e| (i + 1, format!("{e}")))?);
    }
    let mut out = [0.0; 4];
    for (i, v) in vals.iter().enumerate() {
        out[i] = v.ok_or((0, format!("missing parameter '{}'", FilterParams::NAMES[i])))?;
    }
    Ok(FilterParams::from_array(out))
}

/// Writes the inference parameters and returns how many were written.
pub fn export_params(p: &FilterParams, path: &Path) -> Result<usize> {
    p.validate()?;
    let text = params_to_text(p);
    let count = text.lines().count();
    assert_eq!(count, FilterParams::NAMES.len(), "inference parameter count");
    fs::write(path, text).map_err(|e| FileError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(count)
}

pub fn load_params(path: &Path) -> Result<FilterParams> {
    let text = fs::read_to_string(path).map_err(|e| FileError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let p = params_from_text(&text).map_err(|(line, msg)| FileError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })?;
    p.validate().map_err(|e| e.in_stage("load_params"))?;
    Ok(p)
}
