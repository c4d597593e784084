//! Turn-wise group-relative policy optimization with asymmetric clipping and
//! no KL term by default, plus the trajectory-level baseline, driving softmax
//! policy updates from grouped rollouts.
//!
//! Rewards are normalized per turn index across the members of a group that
//! reached that turn; degenerate statistics (fewer than two members, or
//! vanishing variance) yield a zero advantage. Only agent decisions carry
//! parameters, so judge responses are structurally excluded from the loss.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{trace_for_trajectory, BeliefError, BeliefModel};
use crate::concept::Vocabulary;
use crate::env::{EnvError, EpisodeState, Trajectory};
use crate::policy::{
    action_at, play_episode, Policy, PolicyCheckpoint, PolicyError, PolicyReadout, SoftmaxPolicy,
    FEATURE_DIM,
};
use crate::reward::{reward_trajectory_with, EmaBaseline, RewardConfig, RewardError};
use crate::seeding::{derive_seed, rng_for, rng_from_seed};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("secret pool is empty")]
    EmptyPool,
    #[error("trajectory is missing {0}; annotate rollouts before computing advantages")]
    MissingAnnotation(&'static str),
    #[error("non-finite gradient ({0}); aborting step")]
    NonFiniteGradient(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Turnwise,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoments,
}

/// Which standard deviation enters the group normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub groups_per_step: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub advantage_mode: AdvantageMode,
    pub optimizer: OptimizerKind,
    pub epochs_per_batch: usize,
    /// Coefficient of the KL-to-snapshot penalty; zero disables it.
    pub kl_coef: f64,
    /// Normalize over all turns of the group jointly instead of per turn
    /// index.
    pub flatten_turn_norm: bool,
    pub std_mode: StdMode,
    pub val_every: usize,
    /// Validation episodes per concept.
    pub val_samples: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 16,
            groups_per_step: 8,
            steps: 40,
            learning_rate: 2.0,
            clip_low: 0.20,
            clip_high: 0.28,
            advantage_mode: AdvantageMode::Turnwise,
            // Plain gradient ascent: adaptive-moments normalization flattens
            // the magnitude gap between dense turn-level signals and sparse
            // trajectory contrasts, washing out the method differences this
            // lab exists to measure.
            optimizer: OptimizerKind::Sgd,
            epochs_per_batch: 1,
            kl_coef: 0.0,
            flatten_turn_norm: false,
            std_mode: StdMode::Population,
            val_every: 10,
            val_samples: 8,
            checkpoint_every: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::GroupTooSmall(self.group_size));
        }
        for (name, v) in [
            ("groups_per_step", self.groups_per_step),
            ("steps", self.steps),
            ("epochs_per_batch", self.epochs_per_batch),
            ("val_every", self.val_every),
            ("val_samples", self.val_samples),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.clip_low > 0.0 && self.clip_high > 0.0) {
            return Err(TrainError::BadConfig("clip bounds must be positive".into()));
        }
        if self.kl_coef < 0.0 {
            return Err(TrainError::BadConfig("kl_coef must be non-negative".into()));
        }
        Ok(())
    }
}

/// One agent decision: feature rows for every legal action, the sampled
/// index, and the behavior policy's full log-probability vector.
#[derive(Debug, Clone)]
pub struct DecisionPoint {
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub chosen: usize,
    pub behavior_logprobs: Vec<f64>,
}

impl DecisionPoint {
    pub fn behavior_logprob(&self) -> f64 {
        self.behavior_logprobs[self.chosen]
    }
}

#[derive(Debug, Clone)]
pub struct RolloutMember {
    pub trajectory: Trajectory,
    pub decisions: Vec<DecisionPoint>,
}

/// G rollouts sharing one secret and one behavior-policy snapshot.
#[derive(Debug, Clone)]
pub struct TrajectoryGroup {
    pub secret: usize,
    pub behavior_id: String,
    pub members: Vec<RolloutMember>,
}

/// Per-member, per-turn advantages. A value exists only where the member has
/// that turn; the nested lengths encode the defined-mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnAdvantage {
    pub per_member: Vec<Vec<f64>>,
}

impl TurnAdvantage {
    pub fn defined(&self, member: usize, turn: usize) -> bool {
        self.per_member.get(member).is_some_and(|m| turn < m.len())
    }
}

/// Where per-turn beliefs come from during rollouts: an external model, or
/// a readout of the acting policy's own guess distribution.
#[derive(Clone, Copy)]
pub enum BeliefSource<'a> {
    Model(&'a dyn BeliefModel),
    Readout,
}

impl<'a> BeliefSource<'a> {
    /// Resolve against the policy doing the acting.
    pub fn resolve(&self, policy: &'a dyn Policy) -> ResolvedBelief<'a> {
        match *self {
            BeliefSource::Model(m) => ResolvedBelief::Model(m),
            BeliefSource::Readout => ResolvedBelief::Owned(PolicyReadout::new(policy)),
        }
    }
}

pub enum ResolvedBelief<'a> {
    Model(&'a dyn BeliefModel),
    Owned(PolicyReadout<'a>),
}

impl<'a> ResolvedBelief<'a> {
    pub fn as_model(&self) -> &dyn BeliefModel {
        match self {
            ResolvedBelief::Model(m) => *m,
            ResolvedBelief::Owned(r) => r,
        }
    }
}

/// Attach belief trace and per-turn rewards to a rolled-out trajectory.
pub fn annotate_trajectory(
    traj: &mut Trajectory,
    vocab: &Vocabulary,
    belief: &dyn BeliefModel,
    reward_cfg: &RewardConfig,
    ema: &mut EmaBaseline,
) -> Result<(), TrainError> {
    let trace = trace_for_trajectory(belief, vocab, traj)?;
    let rewards = reward_trajectory_with(traj, &trace, reward_cfg, ema)?;
    traj.beliefs = Some(trace);
    traj.rewards = Some(rewards);
    Ok(())
}

/// Roll out `group_size` independent episodes of the softmax policy on one
/// secret, recording behavior log-probabilities, beliefs, and rewards.
/// Deterministic for a fixed `(seed, policy snapshot, secret)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    vocab: &Vocabulary,
    policy: &SoftmaxPolicy,
    secret: usize,
    turn_cap: usize,
    group_size: usize,
    belief: BeliefSource<'_>,
    reward_cfg: &RewardConfig,
    ema: &mut EmaBaseline,
    seed: u64,
) -> Result<TrajectoryGroup, TrainError> {
    if group_size < 2 {
        return Err(TrainError::GroupTooSmall(group_size));
    }
    let resolved = belief.resolve(policy);
    let belief = resolved.as_model();
    let mut members = Vec::with_capacity(group_size);
    for m in 0..group_size {
        let member_seed = derive_seed(seed, "member", m as u64);
        let mut rng = rng_from_seed(member_seed);
        let mut state = EpisodeState::reset(vocab, secret, turn_cap)?;
        let mut decisions = Vec::new();
        let mut logprobs = Vec::new();
        while !state.terminated() {
            let dist = policy.distribution(vocab, state.history());
            let idx = dist.sample(&mut rng);
            logprobs.push(dist.logprobs[idx]);
            decisions.push(DecisionPoint {
                features: dist.features,
                chosen: idx,
                behavior_logprobs: dist.logprobs,
            });
            state.step(vocab, action_at(vocab, idx))?;
        }
        let mut trajectory = state.into_trajectory(logprobs, member_seed)?;
        annotate_trajectory(&mut trajectory, vocab, belief, reward_cfg, ema)?;
        members.push(RolloutMember { trajectory, decisions });
    }
    Ok(TrajectoryGroup { secret, behavior_id: policy.snapshot_id(), members })
}

/// Group-normalize a set of values: zero-mean, unit-std, with degenerate
/// statistics (fewer than two values or vanishing variance) mapping to zero.
fn normalize(values: &[f64], std_mode: StdMode) -> Vec<f64> {
    if values.len() < 2 {
        return vec![0.0; values.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match std_mode {
        StdMode::Population => n,
        StdMode::Sample => n - 1.0,
    };
    let std = (ss / denom).sqrt();
    if std < 1e-8 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

fn member_turn_rewards(group: &TrajectoryGroup) -> Result<Vec<Vec<f64>>, TrainError> {
    group
        .members
        .iter()
        .map(|m| {
            m.trajectory
                .rewards
                .as_ref()
                .map(|rs| rs.iter().map(|r| r.total).collect())
                .ok_or(TrainError::MissingAnnotation("rewards"))
        })
        .collect()
}

/// Per turn index, normalize rewards over the members that reached that turn.
pub fn turnwise_advantages(
    group: &TrajectoryGroup,
    std_mode: StdMode,
    flatten: bool,
) -> Result<TurnAdvantage, TrainError> {
    let rewards = member_turn_rewards(group)?;
    let mut per_member: Vec<Vec<f64>> = rewards.iter().map(|r| vec![0.0; r.len()]).collect();
    if flatten {
        // Joint normalization over every (member, turn) reward in the group.
        let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
        let normed = normalize(&flat, std_mode);
        let mut it = normed.into_iter();
        for (member, r) in per_member.iter_mut().zip(rewards.iter()) {
            for slot in member.iter_mut().take(r.len()) {
                *slot = it.next().expect("same cardinality");
            }
        }
        return Ok(TurnAdvantage { per_member });
    }
    let max_len = rewards.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..max_len {
        let holders: Vec<usize> = (0..rewards.len()).filter(|&i| t < rewards[i].len()).collect();
        let values: Vec<f64> = holders.iter().map(|&i| rewards[i][t]).collect();
        let normed = normalize(&values, std_mode);
        for (slot, &i) in holders.iter().enumerate() {
            per_member[i][t] = normed[slot];
        }
    }
    Ok(TurnAdvantage { per_member })
}

/// Sum each member's rewards into a return, normalize returns across the
/// group, and broadcast the normalized value to every turn of that member.
pub fn trajectory_advantages(
    group: &TrajectoryGroup,
    std_mode: StdMode,
) -> Result<TurnAdvantage, TrainError> {
    let rewards = member_turn_rewards(group)?;
    let returns: Vec<f64> = rewards.iter().map(|r| r.iter().sum()).collect();
    let normed = normalize(&returns, std_mode);
    let per_member =
        rewards.iter().zip(normed.iter()).map(|(r, &a)| vec![a; r.len()]).collect();
    Ok(TurnAdvantage { per_member })
}

pub fn advantages_for(
    group: &TrajectoryGroup,
    cfg: &TrainConfig,
) -> Result<TurnAdvantage, TrainError> {
    match cfg.advantage_mode {
        AdvantageMode::Turnwise => turnwise_advantages(group, cfg.std_mode, cfg.flatten_turn_norm),
        AdvantageMode::Trajectory => trajectory_advantages(group, cfg.std_mode),
    }
}

/// Clipped per-decision surrogate: `min(rho * a, clamp(rho) * a)`.
pub(crate) fn clipped_objective(rho: f64, advantage: f64, clip_low: f64, clip_high: f64) -> f64 {
    let clipped = rho.clamp(1.0 - clip_low, 1.0 + clip_high) * advantage;
    (rho * advantage).min(clipped)
}

/// Optimizer state for gradient-ascent updates on theta.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: [f64; FEATURE_DIM],
    v: [f64; FEATURE_DIM],
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState { kind, m: [0.0; FEATURE_DIM], v: [0.0; FEATURE_DIM], t: 0 }
    }

    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64; FEATURE_DIM], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in theta.iter_mut().zip(grad.iter()) {
                    *w += lr * g;
                }
            }
            OptimizerKind::AdaptiveMoments => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for f in 0..FEATURE_DIM {
                    self.m[f] = B1 * self.m[f] + (1.0 - B1) * grad[f];
                    self.v[f] = B2 * self.v[f] + (1.0 - B2) * grad[f] * grad[f];
                    let mhat = self.m[f] / bc1;
                    let vhat = self.v[f] / bc2;
                    theta[f] += lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepDiagnostics {
    pub objective: f64,
    pub grad_norm: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

struct DecisionEval {
    probs: Vec<f64>,
    logprobs: Vec<f64>,
}

fn eval_decision(policy: &SoftmaxPolicy, dp: &DecisionPoint) -> DecisionEval {
    let logits: Vec<f64> = dp
        .features
        .iter()
        .map(|phi| {
            phi.iter().zip(policy.theta.iter()).map(|(x, w)| x * w).sum::<f64>()
                / policy.temperature
        })
        .collect();
    let (probs, logprobs) = crate::policy::softmax(&logits);
    DecisionEval { probs, logprobs }
}

/// The surrogate objective over a batch, aggregated per-trajectory mean over
/// turns, then mean over members, then mean over groups. Pass `clip` as None
/// for the unclipped importance-weighted objective.
pub fn surrogate_objective(
    policy: &SoftmaxPolicy,
    batch: &[(TrajectoryGroup, TurnAdvantage)],
    clip: Option<(f64, f64)>,
) -> f64 {
    let mut objective = 0.0;
    for (group, adv) in batch {
        let gw = 1.0 / (batch.len() as f64 * group.members.len() as f64);
        for (i, member) in group.members.iter().enumerate() {
            if member.decisions.is_empty() {
                continue;
            }
            let w = gw / member.decisions.len() as f64;
            for (t, dp) in member.decisions.iter().enumerate() {
                let a = adv.per_member[i][t];
                let eval = eval_decision(policy, dp);
                let rho = (eval.logprobs[dp.chosen] - dp.behavior_logprob()).exp();
                let obj = match clip {
                    Some((lo, hi)) => clipped_objective(rho, a, lo, hi),
                    None => rho * a,
                };
                objective += w * obj;
            }
        }
    }
    objective
}

/// One gradient-ascent step of the clipped surrogate over a batch of groups.
pub fn grpo_step(
    policy: &mut SoftmaxPolicy,
    batch: &[(TrajectoryGroup, TurnAdvantage)],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<StepDiagnostics, TrainError> {
    let mut grad = [0.0; FEATURE_DIM];
    let mut diag = StepDiagnostics::default();
    let mut decision_count = 0usize;
    let mut clipped_count = 0usize;
    let inv_temp = 1.0 / policy.temperature;

    for (group, adv) in batch {
        let gw = 1.0 / (batch.len() as f64 * group.members.len() as f64);
        for (i, member) in group.members.iter().enumerate() {
            if member.decisions.is_empty() {
                continue;
            }
            let w = gw / member.decisions.len() as f64;
            for (t, dp) in member.decisions.iter().enumerate() {
                let a = adv.per_member[i][t];
                let eval = eval_decision(policy, dp);
                let rho = (eval.logprobs[dp.chosen] - dp.behavior_logprob()).exp();
                let unclipped = rho * a;
                let clipped = rho.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high) * a;
                diag.objective += w * unclipped.min(clipped);
                diag.mean_ratio += rho;
                decision_count += 1;
                let mut expected = [0.0; FEATURE_DIM];
                for (k, phi) in dp.features.iter().enumerate() {
                    for f in 0..FEATURE_DIM {
                        expected[f] += eval.probs[k] * phi[f];
                    }
                }
                if unclipped > clipped {
                    clipped_count += 1;
                } else {
                    // Unclipped branch active: ascend a * rho * grad(log pi).
                    let scale = w * a * rho * inv_temp;
                    for f in 0..FEATURE_DIM {
                        grad[f] += scale * (dp.features[dp.chosen][f] - expected[f]);
                    }
                }
                if cfg.kl_coef > 0.0 {
                    // Exact KL(current || behavior) over the legal action set.
                    let mut kl = 0.0;
                    let mut kl_grad = [0.0; FEATURE_DIM];
                    for (k, phi) in dp.features.iter().enumerate() {
                        let gap = eval.logprobs[k] - dp.behavior_logprobs[k];
                        kl += eval.probs[k] * gap;
                        let coeff = eval.probs[k] * gap * inv_temp;
                        for f in 0..FEATURE_DIM {
                            kl_grad[f] += coeff * (phi[f] - expected[f]);
                        }
                    }
                    diag.kl += w * kl;
                    for f in 0..FEATURE_DIM {
                        grad[f] -= cfg.kl_coef * w * kl_grad[f];
                    }
                }
            }
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(format!("{grad:?}")));
    }
    diag.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if decision_count > 0 {
        diag.mean_ratio /= decision_count as f64;
        diag.clip_fraction = clipped_count as f64 / decision_count as f64;
    }
    opt.apply(&mut policy.theta, &grad, cfg.learning_rate);
    Ok(diag)
}

// ---------------------------------------------------------------------------
// Batch statistics and the metrics stream.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub success_rate: f64,
    pub mean_turns: f64,
    pub repeated_fraction: f64,
    pub mean_reward_eog: f64,
    pub mean_reward_intrinsic: f64,
    pub mean_reward_penalty: f64,
}

/// Aggregate episode statistics; trajectories must carry rewards.
pub fn batch_stats<'a, I>(trajectories: I) -> Result<BatchStats, TrainError>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut episodes = 0usize;
    let mut successes = 0usize;
    let mut turns = 0usize;
    let mut repeated = 0usize;
    let mut eog = 0.0;
    let mut intrinsic = 0.0;
    let mut penalty = 0.0;
    for traj in trajectories {
        episodes += 1;
        successes += traj.score() as usize;
        turns += traj.len();
        repeated += traj.count_response(crate::env::JudgeResponse::Repeated);
        let rewards = traj.rewards.as_ref().ok_or(TrainError::MissingAnnotation("rewards"))?;
        for r in rewards {
            eog += r.eog;
            intrinsic += r.intrinsic;
            penalty += r.penalty();
        }
    }
    if episodes == 0 {
        return Ok(BatchStats::default());
    }
    let turn_count = turns.max(1) as f64;
    Ok(BatchStats {
        success_rate: successes as f64 / episodes as f64,
        mean_turns: turns as f64 / episodes as f64,
        repeated_fraction: repeated as f64 / turn_count,
        mean_reward_eog: eog / turn_count,
        mean_reward_intrinsic: intrinsic / turn_count,
        mean_reward_penalty: penalty / turn_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub stats: BatchStats,
    pub grad_norm: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,success_rate,mean_turns,repeated_fraction,mean_reward_eog,mean_reward_intrinsic,mean_reward_penalty,grad_norm";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<(), TrainError> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let grad = r.grad_norm.map_or(String::new(), |g| g.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.split,
            r.stats.success_rate,
            r.stats.mean_turns,
            r.stats.repeated_fraction,
            r.stats.mean_reward_eog,
            r.stats.mean_reward_intrinsic,
            r.stats.mean_reward_penalty,
            grad
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The training loop.
// ---------------------------------------------------------------------------

/// Everything the loop needs besides the optimizer config.
pub struct TrainSetup<'a> {
    pub vocab: &'a Vocabulary,
    pub train_ids: &'a [usize],
    pub val_ids: &'a [usize],
    pub turn_cap: usize,
    pub belief: BeliefSource<'a>,
    pub reward: &'a RewardConfig,
}

pub struct TrainResult {
    pub policy: SoftmaxPolicy,
    pub metrics: Vec<MetricsRow>,
    /// Snapshots taken every `checkpoint_every` steps plus the final policy.
    pub checkpoints: Vec<(usize, PolicyCheckpoint)>,
    /// Validation trajectories of the final policy.
    pub final_validation: Vec<Trajectory>,
}

/// Roll out one evaluation pass over `ids` and annotate with rewards.
#[allow(clippy::too_many_arguments)]
pub fn evaluation_rollouts(
    policy: &dyn Policy,
    vocab: &Vocabulary,
    ids: &[usize],
    samples: usize,
    turn_cap: usize,
    belief: BeliefSource<'_>,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<Vec<Trajectory>, TrainError> {
    if ids.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let resolved = belief.resolve(policy);
    let belief = resolved.as_model();
    let mut out = Vec::with_capacity(ids.len() * samples);
    // Evaluation never leaks into the training moving average.
    let mut ema = EmaBaseline::new(reward_cfg.ema_decay);
    for (ci, &secret) in ids.iter().enumerate() {
        for s in 0..samples {
            let counter = (ci * samples + s) as u64;
            let episode_seed = derive_seed(seed, "eval-episode", counter);
            let mut rng = rng_from_seed(episode_seed);
            let mut traj = play_episode(policy, vocab, secret, turn_cap, &mut rng, episode_seed)?;
            annotate_trajectory(&mut traj, vocab, belief, reward_cfg, &mut ema)?;
            out.push(traj);
        }
    }
    Ok(out)
}

/// Run the full loop: sample secrets, roll out groups, compute rewards and
/// advantages, take policy-gradient steps, and emit metrics plus periodic
/// validation and checkpoints. Bit-deterministic for a fixed config.
pub fn train(
    start: SoftmaxPolicy,
    setup: &TrainSetup,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if setup.train_ids.is_empty() || setup.val_ids.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let mut policy = start;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut ema = EmaBaseline::new(setup.reward.ema_decay);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut final_validation = Vec::new();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.groups_per_step);
        for g in 0..cfg.groups_per_step {
            let counter = (step * cfg.groups_per_step + g) as u64;
            let mut srng = rng_for(cfg.seed, "secret", counter);
            let secret =
                setup.train_ids[(srng.next_u64() % setup.train_ids.len() as u64) as usize];
            let group_seed = derive_seed(cfg.seed, "rollout", counter);
            let group = rollout_group(
                setup.vocab,
                &policy,
                secret,
                setup.turn_cap,
                cfg.group_size,
                setup.belief,
                setup.reward,
                &mut ema,
                group_seed,
            )?;
            let adv = advantages_for(&group, cfg)?;
            batch.push((group, adv));
        }
        let mut diag = StepDiagnostics::default();
        for _ in 0..cfg.epochs_per_batch {
            diag = grpo_step(&mut policy, &batch, cfg, &mut opt)?;
        }
        let stats =
            batch_stats(batch.iter().flat_map(|(g, _)| g.members.iter().map(|m| &m.trajectory)))?;
        metrics.push(MetricsRow {
            step: step + 1,
            split: "train".to_string(),
            stats,
            grad_norm: Some(diag.grad_norm),
        });

        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.val_every == 0 || last {
            let val = evaluation_rollouts(
                &policy,
                setup.vocab,
                setup.val_ids,
                cfg.val_samples,
                setup.turn_cap,
                setup.belief,
                setup.reward,
                derive_seed(cfg.seed, "validation", (step + 1) as u64),
            )?;
            metrics.push(MetricsRow {
                step: step + 1,
                split: "validation".to_string(),
                stats: batch_stats(val.iter())?,
                grad_norm: None,
            });
            if last {
                final_validation = val;
            }
        }
        if (step + 1) % cfg.checkpoint_every == 0 || last {
            checkpoints.push((step + 1, PolicyCheckpoint::from_policy(&policy)));
        }
    }

    Ok(TrainResult { policy, metrics, checkpoints, final_validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::{BeliefTrace, ExactPosterior};
    use crate::concept::{generate_vocabulary, VocabMode};
    use crate::env::{Action, JudgeResponse, Outcome, TurnStep};
    use crate::policy::BayesOraclePolicy;
    use crate::reward::TurnReward;
    use crate::seeding::{rng_from_seed, uniform01};

    fn vocab16() -> Vocabulary {
        generate_vocabulary(9, 16, 4, VocabMode::Separable).unwrap()
    }

    /// Hand-built member whose per-turn reward totals are given.
    fn fake_member(turn_rewards: &[f64]) -> RolloutMember {
        let steps = turn_rewards
            .iter()
            .map(|_| TurnStep { action: Action::Guess(0), response: JudgeResponse::No })
            .collect::<Vec<_>>();
        let rewards = turn_rewards
            .iter()
            .map(|&total| TurnReward {
                total,
                eog: total,
                intrinsic: 0.0,
                traj: 0.0,
                repeat: 0.0,
                invalid: 0.0,
            })
            .collect();
        RolloutMember {
            trajectory: Trajectory {
                secret: 0,
                turn_cap: 20,
                outcome: Outcome::Failure,
                steps,
                logprobs: vec![0.0; turn_rewards.len()],
                beliefs: Some(BeliefTrace::from_values(vec![0.5; turn_rewards.len() + 1]).unwrap()),
                rewards: Some(rewards),
                seed: 0,
            },
            decisions: Vec::new(),
        }
    }

    fn fake_group(rewards: &[&[f64]]) -> TrajectoryGroup {
        TrajectoryGroup {
            secret: 0,
            behavior_id: "fake".into(),
            members: rewards.iter().map(|r| fake_member(r)).collect(),
        }
    }

    #[test]
    fn turnwise_matches_population_std_oracle() {
        let group = fake_group(&[&[1.0], &[2.0], &[3.0]]);
        let adv = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        assert!((adv.per_member[0][0] - (-1.224744871391589)).abs() < 1e-9);
        assert!(adv.per_member[1][0].abs() < 1e-12);
        assert!((adv.per_member[2][0] - 1.224744871391589).abs() < 1e-9);
    }

    #[test]
    fn degenerate_turn_statistics_are_zero() {
        // Identical rewards at a turn.
        let group = fake_group(&[&[0.5], &[0.5], &[0.5]]);
        let adv = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        assert!(adv.per_member.iter().all(|m| m[0] == 0.0));
        // A turn reached by a single member.
        let group = fake_group(&[&[1.0, 9.0], &[2.0]]);
        let adv = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        assert_eq!(adv.per_member[0][1], 0.0);
        assert!(adv.defined(0, 1));
        assert!(!adv.defined(1, 1));
    }

    #[test]
    fn trajectory_advantages_broadcast_normalized_returns() {
        let group = fake_group(&[&[0.0, 0.0], &[0.0], &[1.0, 1.0]]);
        let adv = trajectory_advantages(&group, StdMode::Population).unwrap();
        // Returns {0, 0, 2}: mean 2/3, population std sqrt(8/9).
        let std = (8.0f64 / 9.0).sqrt();
        let lo = (0.0 - 2.0 / 3.0) / std;
        let hi = (2.0 - 2.0 / 3.0) / std;
        assert!((lo - (-0.7071067811865475)).abs() < 1e-9);
        assert!((hi - 1.414213562373095).abs() < 1e-9);
        for t in 0..2 {
            assert!((adv.per_member[0][t] - lo).abs() < 1e-12);
            assert!((adv.per_member[2][t] - hi).abs() < 1e-12);
        }
        assert!((adv.per_member[1][0] - lo).abs() < 1e-12);
    }

    #[test]
    fn single_turn_groups_make_modes_coincide() {
        let group = fake_group(&[&[1.0], &[4.0], &[-2.0]]);
        let a = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        let b = trajectory_advantages(&group, StdMode::Population).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn advantage_shift_and_scale_invariance() {
        let base = fake_group(&[&[1.0, -0.5], &[2.0, 0.25], &[3.0, 1.5]]);
        let adv = turnwise_advantages(&base, StdMode::Population, false).unwrap();
        // Shift every member's reward at turn 0 by +10, scale turn 1 by 7.
        let shifted = fake_group(&[&[11.0, -3.5], &[12.0, 1.75], &[13.0, 10.5]]);
        let adv2 = turnwise_advantages(&shifted, StdMode::Population, false).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                assert!(
                    (adv.per_member[i][t] - adv2.per_member[i][t]).abs() < 1e-9,
                    "member {i} turn {t}"
                );
            }
        }
    }

    #[test]
    fn defined_turns_have_zero_mean_unit_std() {
        let v = vocab16();
        let policy = SoftmaxPolicy::zeros(1.0);
        let mut ema = EmaBaseline::new(0.99);
        let group = rollout_group(
            &v,
            &policy,
            3,
            10,
            16,
            BeliefSource::Model(&ExactPosterior),
            &RewardConfig::default(),
            &mut ema,
            41,
        )
        .unwrap();
        let adv = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        let rewards = member_turn_rewards(&group).unwrap();
        let max_len = rewards.iter().map(Vec::len).max().unwrap();
        for t in 0..max_len {
            let holders: Vec<usize> = (0..16).filter(|&i| t < rewards[i].len()).collect();
            if holders.len() < 2 {
                continue;
            }
            let vals: Vec<f64> = holders.iter().map(|&i| rewards[i][t]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            if var.sqrt() < 1e-8 {
                continue;
            }
            let advs: Vec<f64> = holders.iter().map(|&i| adv.per_member[i][t]).collect();
            let amean = advs.iter().sum::<f64>() / advs.len() as f64;
            let astd = (advs.iter().map(|a| (a - amean) * (a - amean)).sum::<f64>()
                / advs.len() as f64)
                .sqrt();
            assert!(amean.abs() < 1e-9, "turn {t} mean {amean}");
            assert!((astd - 1.0).abs() < 1e-6, "turn {t} std {astd}");
        }
    }

    #[test]
    fn rollout_group_is_deterministic_and_shares_secret() {
        let v = vocab16();
        let policy = SoftmaxPolicy::zeros(1.0);
        let cfgr = RewardConfig::default();
        let mut ema1 = EmaBaseline::new(0.99);
        let mut ema2 = EmaBaseline::new(0.99);
        let a = rollout_group(&v, &policy, 5, 20, 4, BeliefSource::Model(&ExactPosterior), &cfgr, &mut ema1, 7).unwrap();
        let b = rollout_group(&v, &policy, 5, 20, 4, BeliefSource::Model(&ExactPosterior), &cfgr, &mut ema2, 7).unwrap();
        for (ma, mb) in a.members.iter().zip(b.members.iter()) {
            assert_eq!(ma.trajectory, mb.trajectory);
        }
        assert!(a.members.iter().all(|m| m.trajectory.secret == 5));
        assert_eq!(a.behavior_id, policy.snapshot_id());
        assert!(matches!(
            rollout_group(&v, &policy, 5, 20, 1, BeliefSource::Model(&ExactPosterior), &cfgr, &mut ema1, 7),
            Err(TrainError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn oracle_evaluation_rollouts_succeed_within_d_plus_one() {
        let v = vocab16();
        let oracle = BayesOraclePolicy::default();
        let trajs = evaluation_rollouts(
            &oracle,
            &v,
            &[2, 9, 14],
            4,
            20,
            BeliefSource::Model(&ExactPosterior),
            &RewardConfig::default(),
            11,
        )
        .unwrap();
        for t in &trajs {
            assert!(t.success());
            assert!(t.len() <= 5);
        }
    }

    #[test]
    fn clipped_objective_matches_brute_force_min_clip() {
        let mut rng = rng_from_seed(3);
        for _ in 0..2000 {
            let rho = uniform01(&mut rng) * 3.0;
            let a = uniform01(&mut rng) * 4.0 - 2.0;
            let (lo, hi) = (0.2, 0.28);
            let got = clipped_objective(rho, a, lo, hi);
            let clamped = rho.clamp(1.0 - lo, 1.0 + hi);
            let want = (rho * a).min(clamped * a);
            assert_eq!(got, want);
            if a > 0.0 {
                assert!(got <= (1.0 + hi) * a + 1e-12);
            }
        }
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let v = vocab16();
        let mut policy = SoftmaxPolicy::zeros(1.0);
        let before = policy.theta.clone();
        let mut ema = EmaBaseline::new(0.99);
        let group = rollout_group(
            &v,
            &policy,
            1,
            10,
            4,
            BeliefSource::Model(&ExactPosterior),
            &RewardConfig::default(),
            &mut ema,
            13,
        )
        .unwrap();
        let zero_adv = TurnAdvantage {
            per_member: group.members.iter().map(|m| vec![0.0; m.trajectory.len()]).collect(),
        };
        let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, ..TrainConfig::default() };
        let mut opt = OptimizerState::new(OptimizerKind::Sgd);
        let diag = grpo_step(&mut policy, &[(group, zero_adv)], &cfg, &mut opt).unwrap();
        assert_eq!(policy.theta, before);
        assert_eq!(diag.grad_norm, 0.0);
        assert_eq!(diag.objective, 0.0);
    }

    #[test]
    fn first_epoch_ratios_are_one_and_gradient_matches_plain_policy_gradient() {
        let v = vocab16();
        let mut policy = SoftmaxPolicy::new(vec![0.2, -0.1, 0.4, 0.6, -0.3, 0.5, 0.1], 1.0).unwrap();
        let mut ema = EmaBaseline::new(0.99);
        let group = rollout_group(
            &v,
            &policy,
            7,
            12,
            6,
            BeliefSource::Model(&ExactPosterior),
            &RewardConfig::default(),
            &mut ema,
            99,
        )
        .unwrap();
        let adv = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        // Plain policy gradient computed independently.
        let mut expect = [0.0; FEATURE_DIM];
        for (i, member) in group.members.iter().enumerate() {
            let w = 1.0 / (group.members.len() as f64 * member.decisions.len() as f64);
            for (t, dp) in member.decisions.iter().enumerate() {
                let eval = eval_decision(&policy, dp);
                let a = adv.per_member[i][t];
                for f in 0..FEATURE_DIM {
                    let e: f64 =
                        dp.features.iter().zip(eval.probs.iter()).map(|(phi, p)| p * phi[f]).sum();
                    expect[f] += w * a * (dp.features[dp.chosen][f] - e);
                }
            }
        }
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let before = policy.theta.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd);
        let diag = grpo_step(&mut policy, &[(group, adv)], &cfg, &mut opt).unwrap();
        assert!((diag.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(diag.clip_fraction, 0.0);
        for f in 0..FEATURE_DIM {
            let applied = policy.theta[f] - before[f];
            assert!((applied - expect[f]).abs() < 1e-10, "component {f}: {applied} vs {expect:?}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_smoke() {
        let v = vocab16();
        let policy = SoftmaxPolicy::new(vec![0.3, 0.1, -0.2, 0.7, -0.4, 0.9, 0.2], 1.0).unwrap();
        let mut ema = EmaBaseline::new(0.99);
        let group = rollout_group(
            &v,
            &policy,
            4,
            10,
            5,
            BeliefSource::Model(&ExactPosterior),
            &RewardConfig::default(),
            &mut ema,
            123,
        )
        .unwrap();
        let adv = turnwise_advantages(&group, StdMode::Population, false).unwrap();
        let batch = vec![(group, adv)];
        // Analytic gradient read back from an SGD step of lr 1.
        let mut stepped = policy.clone();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(OptimizerKind::Sgd);
        grpo_step(&mut stepped, &batch, &cfg, &mut opt).unwrap();
        let h = 1e-5;
        for f in 0..FEATURE_DIM {
            let mut plus = policy.clone();
            plus.theta[f] += h;
            let mut minus = policy.clone();
            minus.theta[f] -= h;
            let fd = (surrogate_objective(&plus, &batch, None)
                - surrogate_objective(&minus, &batch, None))
                / (2.0 * h);
            let analytic = stepped.theta[f] - policy.theta[f];
            let denom = fd.abs().max(analytic.abs()).max(1e-12);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "component {f}: fd {fd} analytic {analytic}"
            );
        }
    }

    #[test]
    fn kl_penalty_pulls_toward_snapshot() {
        let v = vocab16();
        // Rollouts from one policy, updates applied to a moved policy.
        let behavior = SoftmaxPolicy::zeros(1.0);
        let mut ema = EmaBaseline::new(0.99);
        let group = rollout_group(
            &v,
            &behavior,
            2,
            10,
            6,
            BeliefSource::Model(&ExactPosterior),
            &RewardConfig::default(),
            &mut ema,
            5,
        )
        .unwrap();
        let adv = TurnAdvantage {
            per_member: group.members.iter().map(|m| vec![0.0; m.trajectory.len()]).collect(),
        };
        let moved = SoftmaxPolicy::new(vec![0.5, -0.5, 0.3, 0.2, -0.1, 0.4, 0.6], 1.0).unwrap();
        let batch = vec![(group, adv)];
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.5,
            kl_coef: 1.0,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(OptimizerKind::Sgd);
        let mut updated = moved.clone();
        let diag = grpo_step(&mut updated, &batch, &cfg, &mut opt).unwrap();
        assert!(diag.kl > 0.0);
        // With zero advantages the only force is the KL pull toward the
        // behavior snapshot.
        let gap = |p: &SoftmaxPolicy| -> f64 {
            p.theta.iter().zip(behavior.theta.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        assert!(gap(&updated) < gap(&moved));
    }

    #[test]
    fn train_smoke_run_is_deterministic() {
        let v = vocab16();
        let ids: Vec<usize> = v.ids().collect();
        let setup = TrainSetup {
            vocab: &v,
            train_ids: &ids[..10],
            val_ids: &ids[10..],
            turn_cap: 10,
            belief: BeliefSource::Model(&ExactPosterior),
            reward: &RewardConfig::default(),
        };
        let cfg = TrainConfig {
            group_size: 4,
            groups_per_step: 2,
            steps: 3,
            val_every: 2,
            val_samples: 2,
            checkpoint_every: 2,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train(SoftmaxPolicy::zeros(1.0), &setup, &cfg).unwrap();
        let b = train(SoftmaxPolicy::zeros(1.0), &setup, &cfg).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.metrics, b.metrics);
        let mut csv_a = Vec::new();
        write_metrics_csv(&mut csv_a, &a.metrics).unwrap();
        let mut csv_b = Vec::new();
        write_metrics_csv(&mut csv_b, &b.metrics).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(String::from_utf8(csv_a).unwrap().starts_with(METRICS_HEADER));
        // Final checkpoint present and loadable.
        assert_eq!(a.checkpoints.last().unwrap().0, 3);
        let restored = a.checkpoints.last().unwrap().1.clone().into_policy().unwrap();
        assert_eq!(restored, a.policy);
        assert!(!a.final_validation.is_empty());
    }

    #[test]
    fn epochs_beyond_one_exercise_clipping() {
        let v = vocab16();
        let ids: Vec<usize> = v.ids().collect();
        let setup = TrainSetup {
            vocab: &v,
            train_ids: &ids[..10],
            val_ids: &ids[10..],
            turn_cap: 10,
            belief: BeliefSource::Model(&ExactPosterior),
            reward: &RewardConfig::default(),
        };
        let cfg = TrainConfig {
            group_size: 6,
            groups_per_step: 2,
            steps: 4,
            epochs_per_batch: 4,
            learning_rate: 0.3,
            optimizer: OptimizerKind::Sgd,
            val_every: 4,
            val_samples: 1,
            checkpoint_every: 4,
            seed: 21,
            ..TrainConfig::default()
        };
        let out = train(SoftmaxPolicy::zeros(1.0), &setup, &cfg).unwrap();
        assert_eq!(out.metrics.iter().filter(|r| r.split == "train").count(), 4);
    }
}
