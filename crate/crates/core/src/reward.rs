//! Per-turn reward composition: end-of-game outcome, weighted intrinsic
//! belief-change term, and efficiency penalties, with five normalization
//! schemes for the intrinsic signal.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::BeliefTrace;
use crate::env::{JudgeResponse, Outcome, Trajectory};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("unknown normalization scheme '{0}'")]
    UnknownScheme(String),
    #[error("intrinsic weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("ema decay must lie in (0, 1), got {0}")]
    BadDecay(f64),
    #[error("belief trace has {trace} entries but trajectory has {trajectory} turns")]
    LengthMismatch { trace: usize, trajectory: usize },
    #[error("non-finite belief change at turn {0}")]
    NonFiniteDelta(usize),
}

/// Normalization applied to the raw belief-change sequence before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    Naive,
    Relu,
    Tanh,
    Ema,
    Pacr,
}

impl NormScheme {
    pub const ALL: [NormScheme; 5] =
        [NormScheme::Naive, NormScheme::Relu, NormScheme::Tanh, NormScheme::Ema, NormScheme::Pacr];

    pub fn as_str(&self) -> &'static str {
        match self {
            NormScheme::Naive => "naive",
            NormScheme::Relu => "relu",
            NormScheme::Tanh => "tanh",
            NormScheme::Ema => "ema",
            NormScheme::Pacr => "pacr",
        }
    }
}

impl FromStr for NormScheme {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(NormScheme::Naive),
            "relu" => Ok(NormScheme::Relu),
            "tanh" => Ok(NormScheme::Tanh),
            "ema" => Ok(NormScheme::Ema),
            "pacr" => Ok(NormScheme::Pacr),
            other => Err(RewardError::UnknownScheme(other.to_string())),
        }
    }
}

/// Reward composition parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight of the intrinsic belief-change term.
    pub lambda: f64,
    /// End-of-game reward on a successful terminal turn.
    pub eog_scale: f64,
    /// Flat per-turn penalty.
    pub traj_penalty: f64,
    /// Surcharge for a repeated question.
    pub repeat_penalty: f64,
    /// Surcharge for an invalid turn.
    pub invalid_penalty: f64,
    pub scheme: NormScheme,
    pub ema_decay: f64,
    /// Whether the per-turn penalty also applies on the successful terminal
    /// turn.
    pub traj_penalty_on_terminal: bool,
    /// Discount the end-of-game reward by episode length.
    pub eog_turn_discount: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: 0.1,
            eog_scale: 2.00,
            traj_penalty: -0.05,
            repeat_penalty: -1.00,
            invalid_penalty: -5.00,
            scheme: NormScheme::Relu,
            ema_decay: 0.99,
            traj_penalty_on_terminal: true,
            eog_turn_discount: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.lambda < 0.0 {
            return Err(RewardError::NegativeLambda(self.lambda));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(RewardError::BadDecay(self.ema_decay));
        }
        Ok(())
    }
}

/// Moving-average baseline for the `ema` scheme. Starts at zero and updates
/// with raw (pre-weight) belief changes; the trainer owns one per run.
#[derive(Debug, Clone)]
pub struct EmaBaseline {
    mean: f64,
    decay: f64,
}

impl EmaBaseline {
    pub fn new(decay: f64) -> Self {
        EmaBaseline { mean: 0.0, decay }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Shaped value is the deviation from the lagged mean; the mean then
    /// absorbs the new observation.
    fn shape(&mut self, delta: f64) -> f64 {
        let out = delta - self.mean;
        self.mean = self.decay * self.mean + (1.0 - self.decay) * delta;
        out
    }
}

/// Apply the configured normalization scheme to a raw belief-change
/// sequence, using a fresh moving-average state for `ema`.
pub fn shape_intrinsic(deltas: &[f64], cfg: &RewardConfig) -> Vec<f64> {
    let mut ema = EmaBaseline::new(cfg.ema_decay);
    shape_intrinsic_with(deltas, cfg, &mut ema)
}

/// Like [`shape_intrinsic`], but threading a persistent moving-average state
/// across trajectories.
pub fn shape_intrinsic_with(deltas: &[f64], cfg: &RewardConfig, ema: &mut EmaBaseline) -> Vec<f64> {
    match cfg.scheme {
        NormScheme::Naive => deltas.to_vec(),
        NormScheme::Relu => deltas.iter().map(|&d| d.max(0.0)).collect(),
        NormScheme::Tanh => deltas.iter().map(|&d| d.tanh()).collect(),
        NormScheme::Ema => deltas.iter().map(|&d| ema.shape(d)).collect(),
        NormScheme::Pacr => {
            let clipped: Vec<f64> = deltas.iter().map(|&d| d.max(0.0)).collect();
            let positives: Vec<f64> = clipped.iter().copied().filter(|&d| d > 0.0).collect();
            if positives.is_empty() {
                return clipped;
            }
            let lo = positives.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = positives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            clipped
                .into_iter()
                .map(|d| {
                    if d <= 0.0 {
                        0.0
                    } else if hi > lo {
                        (d - lo) / (hi - lo)
                    } else {
                        // A single positive level maps to the top of the range.
                        1.0
                    }
                })
                .collect()
        }
    }
}

/// One turn's reward with its additive components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnReward {
    pub total: f64,
    pub eog: f64,
    pub intrinsic: f64,
    pub traj: f64,
    pub repeat: f64,
    pub invalid: f64,
}

impl TurnReward {
    pub fn component_sum(&self) -> f64 {
        self.eog + self.intrinsic + self.traj + self.repeat + self.invalid
    }

    /// Penalty components only.
    pub fn penalty(&self) -> f64 {
        self.traj + self.repeat + self.invalid
    }
}

fn compose(
    shaped_delta: f64,
    response: JudgeResponse,
    is_terminal_success: bool,
    eog_value: f64,
    cfg: &RewardConfig,
) -> TurnReward {
    let eog = if is_terminal_success { eog_value } else { 0.0 };
    let intrinsic = cfg.lambda * shaped_delta;
    let traj = if is_terminal_success && !cfg.traj_penalty_on_terminal { 0.0 } else { cfg.traj_penalty };
    let repeat = if response == JudgeResponse::Repeated { cfg.repeat_penalty } else { 0.0 };
    let invalid = if response == JudgeResponse::Invalid { cfg.invalid_penalty } else { 0.0 };
    TurnReward { total: eog + intrinsic + traj + repeat + invalid, eog, intrinsic, traj, repeat, invalid }
}

/// Compose one turn's reward from an already-shaped belief change.
pub fn per_turn_reward(
    shaped_delta: f64,
    response: JudgeResponse,
    is_terminal_success: bool,
    cfg: &RewardConfig,
) -> TurnReward {
    compose(shaped_delta, response, is_terminal_success, cfg.eog_scale, cfg)
}

/// Rewards for a whole trajectory: shape the full belief-change sequence,
/// then compose each turn. The end-of-game reward lands only on the terminal
/// turn of successful trajectories.
pub fn reward_trajectory(
    traj: &Trajectory,
    trace: &BeliefTrace,
    cfg: &RewardConfig,
) -> Result<Vec<TurnReward>, RewardError> {
    let mut ema = EmaBaseline::new(cfg.ema_decay);
    reward_trajectory_with(traj, trace, cfg, &mut ema)
}

/// Like [`reward_trajectory`] with a caller-owned moving-average state.
pub fn reward_trajectory_with(
    traj: &Trajectory,
    trace: &BeliefTrace,
    cfg: &RewardConfig,
    ema: &mut EmaBaseline,
) -> Result<Vec<TurnReward>, RewardError> {
    if trace.turns() != traj.len() {
        return Err(RewardError::LengthMismatch { trace: trace.turns() + 1, trajectory: traj.len() });
    }
    let deltas = trace.deltas();
    for (t, d) in deltas.iter().enumerate() {
        if !d.is_finite() {
            return Err(RewardError::NonFiniteDelta(t + 1));
        }
    }
    let shaped = shape_intrinsic_with(&deltas, cfg, ema);
    let eog_value = if cfg.eog_turn_discount && traj.turn_cap > 0 {
        cfg.eog_scale * (1.0 - (traj.len().saturating_sub(1)) as f64 / traj.turn_cap as f64)
    } else {
        cfg.eog_scale
    };
    Ok(shaped
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            let terminal_success = traj.outcome == Outcome::Success && t + 1 == traj.len();
            compose(s, traj.steps[t].response, terminal_success, eog_value, cfg)
        })
        .collect())
}
