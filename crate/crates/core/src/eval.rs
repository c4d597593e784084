//! Measurement protocols: mean@k, unbiased pass@k, interaction-budget
//! scaling, belief-update curves, and training-dynamics summaries.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::BeliefModel;
use crate::concept::Vocabulary;
use crate::env::{EnvError, EpisodeState, JudgeResponse, Outcome, Trajectory};
use crate::policy::{best_of_n_act, play_episode, Policy, PolicyError};
use crate::reward::RewardConfig;
use crate::seeding::{derive_seed, rng_from_seed};
use crate::trainer::{annotate_trajectory, TrainError};
use crate::reward::EmaBaseline;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pass@k needs 1 <= k <= n, got k={k} n={n}")]
    BadK { n: usize, k: usize },
    #[error("successes c={c} exceed samples n={n}")]
    BadCounts { n: usize, c: usize },
    #[error("mean@k needs at least k samples per concept")]
    TooFewSamples,
    #[error("budgets must be sorted ascending and non-empty")]
    BadBudgets,
    #[error("trajectory set is empty")]
    EmptyTrajectories,
    #[error("trajectory is missing its belief trace")]
    MissingBeliefs,
    #[error("belief curve needs a vocabulary prior below 1")]
    DegeneratePrior,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unbiased pass@k: probability that at least one of k draws (without
/// replacement) from n attempts with c successes is a success, computed in a
/// numerically stable product form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if c > n {
        return Err(EvalError::BadCounts { n, c });
    }
    if k == 0 || k > n {
        return Err(EvalError::BadK { n, k });
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    // 1 - C(n-c, k) / C(n, k) as a running product of (n-c-i)/(n-i).
    let mut miss = 1.0f64;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

/// Mean success over the first k sample columns, with the spread across the
/// k per-column means.
pub fn mean_at_k(outcomes: &[Vec<bool>], k: usize) -> Result<(f64, f64), EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyTrajectories);
    }
    if k == 0 || outcomes.iter().any(|o| o.len() < k) {
        return Err(EvalError::TooFewSamples);
    }
    let concepts = outcomes.len() as f64;
    let column_means: Vec<f64> = (0..k)
        .map(|j| outcomes.iter().filter(|o| o[j]).count() as f64 / concepts)
        .collect();
    let mean = column_means.iter().sum::<f64>() / k as f64;
    // Population spread over the k evaluation replicas.
    let var = column_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / k as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: usize,
    pub success_rate: f64,
}

/// Success rate as a function of the turn cap. A single rollout set at the
/// largest budget is truncated at each smaller budget: a success at turn u
/// counts for every budget >= u, so the curve is non-decreasing by
/// construction.
pub fn budget_curve(
    policy: &dyn Policy,
    vocab: &Vocabulary,
    concepts: &[usize],
    budgets: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<BudgetPoint>, EvalError> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) || budgets[0] == 0 {
        return Err(EvalError::BadBudgets);
    }
    if concepts.is_empty() || samples == 0 {
        return Err(EvalError::EmptyTrajectories);
    }
    let cap = *budgets.last().expect("non-empty");
    let mut success_turns = Vec::with_capacity(concepts.len() * samples);
    for (ci, &secret) in concepts.iter().enumerate() {
        for s in 0..samples {
            let episode_seed = derive_seed(seed, "budget-episode", (ci * samples + s) as u64);
            let mut rng = rng_from_seed(episode_seed);
            let traj = play_episode(policy, vocab, secret, cap, &mut rng, episode_seed)?;
            success_turns.push(traj.success().then_some(traj.len()));
        }
    }
    let total = success_turns.len() as f64;
    Ok(budgets
        .iter()
        .map(|&b| {
            let wins = success_turns.iter().filter(|u| u.is_some_and(|u| u <= b)).count();
            BudgetPoint { budget: b, success_rate: wins as f64 / total }
        })
        .collect())
}

/// Convention for trajectories that terminated before turn t in per-turn
/// means: drop them from the mean, or carry their final value forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadTrajectoryRule {
    Drop,
    CarryForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefCurvePoint {
    pub turn: usize,
    /// "success" or "failure".
    pub series: String,
    /// Mean normalized log-belief `(ln b_t - ln b_0) / (-ln b_0)`.
    pub value: f64,
    /// Trajectories contributing to the mean.
    pub count: usize,
}

/// Per-turn mean normalized log-belief, split by final outcome. The
/// normalization maps the prior to 0 and certainty to 1.
pub fn belief_curve(
    trajectories: &[Trajectory],
    rule: DeadTrajectoryRule,
) -> Result<Vec<BeliefCurvePoint>, EvalError> {
    if trajectories.is_empty() {
        return Err(EvalError::EmptyTrajectories);
    }
    let max_turns =
        trajectories.iter().map(Trajectory::len).max().expect("non-empty set");
    let mut points = Vec::new();
    for (series, outcome) in [("success", Outcome::Success), ("failure", Outcome::Failure)] {
        let group: Vec<&Trajectory> =
            trajectories.iter().filter(|t| t.outcome == outcome).collect();
        if group.is_empty() {
            continue;
        }
        for t in 0..=max_turns {
            let mut sum = 0.0;
            let mut count = 0usize;
            for traj in &group {
                let trace = traj.beliefs.as_ref().ok_or(EvalError::MissingBeliefs)?;
                let log_b0 = trace.log_value(0);
                if log_b0 >= 0.0 {
                    return Err(EvalError::DegeneratePrior);
                }
                let index = if t <= trace.turns() {
                    Some(t)
                } else {
                    match rule {
                        DeadTrajectoryRule::Drop => None,
                        DeadTrajectoryRule::CarryForward => Some(trace.turns()),
                    }
                };
                if let Some(i) = index {
                    sum += (trace.log_value(i) - log_b0) / (-log_b0);
                    count += 1;
                }
            }
            if count > 0 {
                points.push(BeliefCurvePoint {
                    turn: t,
                    series: series.to_string(),
                    value: sum / count as f64,
                    count,
                });
            }
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub mean_turns: f64,
    pub repeated_fraction: f64,
    pub invalid_fraction: f64,
}

/// Turn-level bookkeeping over an episode batch.
pub fn dynamics_summary(trajectories: &[Trajectory]) -> DynamicsSummary {
    let episodes = trajectories.len();
    if episodes == 0 {
        return DynamicsSummary { mean_turns: 0.0, repeated_fraction: 0.0, invalid_fraction: 0.0 };
    }
    let turns: usize = trajectories.iter().map(Trajectory::len).sum();
    let repeated: usize =
        trajectories.iter().map(|t| t.count_response(JudgeResponse::Repeated)).sum();
    let invalid: usize =
        trajectories.iter().map(|t| t.count_response(JudgeResponse::Invalid)).sum();
    let denom = turns.max(1) as f64;
    DynamicsSummary {
        mean_turns: turns as f64 / episodes as f64,
        repeated_fraction: repeated as f64 / denom,
        invalid_fraction: invalid as f64 / denom,
    }
}

// ---------------------------------------------------------------------------
// Full evaluation report.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptOutcome {
    pub concept: usize,
    pub attempts: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKPoint {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAtK {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_concept: Vec<ConceptOutcome>,
    pub mean_at_k: MeanAtK,
    pub pass_at_k: Vec<PassAtKPoint>,
    pub belief_curve: Vec<BeliefCurvePoint>,
    /// Histogram of episode lengths, index = turns used.
    pub turns_histogram: Vec<usize>,
    pub dynamics: DynamicsSummary,
    pub success_rate: f64,
}

/// Aggregate a per-concept outcome table (`outcomes[i][j]` = success of
/// sample j on concept i) plus annotated trajectories into a report.
pub fn build_report(
    concepts: &[usize],
    outcomes: &[Vec<bool>],
    trajectories: &[Trajectory],
    k_grid: &[usize],
    mean_k: usize,
    turn_cap: usize,
) -> Result<EvalReport, EvalError> {
    if outcomes.is_empty() || outcomes.len() != concepts.len() {
        return Err(EvalError::EmptyTrajectories);
    }
    let n = outcomes[0].len();
    let per_concept: Vec<ConceptOutcome> = concepts
        .iter()
        .zip(outcomes.iter())
        .map(|(&concept, o)| ConceptOutcome {
            concept,
            attempts: o.len(),
            successes: o.iter().filter(|&&s| s).count(),
        })
        .collect();
    let pass = k_grid
        .iter()
        .filter(|&&k| k >= 1 && k <= n)
        .map(|&k| {
            let mean = per_concept
                .iter()
                .map(|c| pass_at_k(c.attempts, c.successes, k))
                .sum::<Result<f64, _>>()?
                / per_concept.len() as f64;
            Ok(PassAtKPoint { k, value: mean })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mk = mean_k.min(n);
    let (mean, std) = mean_at_k(outcomes, mk)?;
    let mut turns_histogram = vec![0usize; turn_cap + 1];
    for t in trajectories {
        turns_histogram[t.len().min(turn_cap)] += 1;
    }
    let total: usize = per_concept.iter().map(|c| c.attempts).sum();
    let wins: usize = per_concept.iter().map(|c| c.successes).sum();
    Ok(EvalReport {
        per_concept,
        mean_at_k: MeanAtK { k: mk, mean, std },
        pass_at_k: pass,
        belief_curve: belief_curve(trajectories, DeadTrajectoryRule::Drop)?,
        turns_histogram,
        dynamics: dynamics_summary(trajectories),
        success_rate: wins as f64 / total.max(1) as f64,
    })
}

/// Play `samples` episodes per concept and build the full report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    policy: &dyn Policy,
    vocab: &Vocabulary,
    concepts: &[usize],
    samples: usize,
    k_grid: &[usize],
    mean_k: usize,
    turn_cap: usize,
    belief: &dyn BeliefModel,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<(EvalReport, Vec<Trajectory>), EvalError> {
    if concepts.is_empty() || samples == 0 {
        return Err(EvalError::EmptyTrajectories);
    }
    let mut outcomes = Vec::with_capacity(concepts.len());
    let mut trajectories = Vec::with_capacity(concepts.len() * samples);
    let mut ema = EmaBaseline::new(reward_cfg.ema_decay);
    for (ci, &secret) in concepts.iter().enumerate() {
        let mut row = Vec::with_capacity(samples);
        for s in 0..samples {
            let episode_seed = derive_seed(seed, "report-episode", (ci * samples + s) as u64);
            let mut rng = rng_from_seed(episode_seed);
            let mut traj = play_episode(policy, vocab, secret, turn_cap, &mut rng, episode_seed)?;
            annotate_trajectory(&mut traj, vocab, belief, reward_cfg, &mut ema)?;
            row.push(traj.success());
            trajectories.push(traj);
        }
        outcomes.push(row);
    }
    let report = build_report(concepts, &outcomes, &trajectories, k_grid, mean_k, turn_cap)?;
    Ok((report, trajectories))
}

// ---------------------------------------------------------------------------
// Best-of-n intervention.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionArm {
    pub seed: u64,
    pub baseline_rate: f64,
    pub selected_rate: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub n: usize,
    pub episodes_per_seed: usize,
    pub arms: Vec<InterventionArm>,
    pub mean_delta: f64,
}

/// Paired-seed best-of-n experiment: the same episode seeds drive an
/// unassisted arm and a belief-guided selection arm.
#[allow(clippy::too_many_arguments)]
pub fn bestofn_report(
    policy: &dyn Policy,
    vocab: &Vocabulary,
    concepts: &[usize],
    belief: &dyn BeliefModel,
    n: usize,
    episodes: usize,
    seeds: &[u64],
    turn_cap: usize,
) -> Result<InterventionReport, EvalError> {
    if n == 0 {
        return Err(EvalError::Policy(PolicyError::ZeroCandidates));
    }
    if concepts.is_empty() || episodes == 0 || seeds.is_empty() {
        return Err(EvalError::EmptyTrajectories);
    }
    let mut arms = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut base_wins = 0usize;
        let mut selected_wins = 0usize;
        for e in 0..episodes {
            let episode_seed = derive_seed(seed, "intervention", e as u64);
            let mut pick = rng_from_seed(derive_seed(episode_seed, "secret", 0));
            let secret = concepts[(pick.next_u64() % concepts.len() as u64) as usize];

            // Unassisted arm.
            let mut rng = rng_from_seed(episode_seed);
            let traj = play_episode(policy, vocab, secret, turn_cap, &mut rng, episode_seed)?;
            base_wins += traj.score() as usize;

            // Selection arm with the identical episode seed.
            let mut rng = rng_from_seed(episode_seed);
            let mut state = EpisodeState::reset(vocab, secret, turn_cap)?;
            while !state.terminated() {
                let (action, _) = best_of_n_act(policy, vocab, &state, belief, n, &mut rng)?;
                state.step(vocab, action)?;
            }
            selected_wins += state.outcome_score()? as usize;
        }
        let baseline_rate = base_wins as f64 / episodes as f64;
        let selected_rate = selected_wins as f64 / episodes as f64;
        arms.push(InterventionArm {
            seed,
            baseline_rate,
            selected_rate,
            delta: selected_rate - baseline_rate,
        });
    }
    let mean_delta = arms.iter().map(|a| a.delta).sum::<f64>() / arms.len() as f64;
    Ok(InterventionReport { n, episodes_per_seed: episodes, arms, mean_delta })
}

// ---------------------------------------------------------------------------
// Curve CSV: one row per (x, series, value) for external plotting.
// ---------------------------------------------------------------------------

pub struct CurveRow<'a> {
    pub x: f64,
    pub series: &'a str,
    pub value: f64,
}

pub fn write_curve_csv<'a, W, I>(mut w: W, rows: I) -> Result<(), EvalError>
where
    W: Write,
    I: IntoIterator<Item = CurveRow<'a>>,
{
    writeln!(w, "x,series,value")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.x, r.series, r.value)?;
    }
    Ok(())
}

/// Flatten a report's curves into CSV rows.
pub fn report_curves<'a>(
    report: &'a EvalReport,
    budget: Option<&'a [BudgetPoint]>,
) -> Vec<CurveRow<'a>> {
    let mut rows = Vec::new();
    for p in &report.pass_at_k {
        rows.push(CurveRow { x: p.k as f64, series: "pass_at_k", value: p.value });
    }
    for p in &report.belief_curve {
        let series = if p.series == "success" { "belief_success" } else { "belief_failure" };
        rows.push(CurveRow { x: p.turn as f64, series, value: p.value });
    }
    if let Some(points) = budget {
        for p in points {
            rows.push(CurveRow { x: p.budget as f64, series: "budget", value: p.success_rate });
        }
    }
    rows
}
