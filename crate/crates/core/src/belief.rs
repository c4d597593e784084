//! Belief tracking: the probability the agent assigns to the hidden target
//! after each turn, and the per-turn belief-change signal derived from it.
//!
//! Probabilities are floored at 1e-12 before taking logs; the change signal
//! for turn t is `ln b_t - ln b_{t-1}` on the floored values, so any trace
//! telescopes exactly to `ln b_N - ln b_0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{consistent_set, Vocabulary};
use crate::env::{Trajectory, TurnStep};

/// Floor applied to probabilities before logs, keeping the change signal
/// finite without distorting its usable range.
pub const PROB_FLOOR: f64 = 1e-12;

/// Natural log with the probability floor applied.
pub fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("belief values must lie in (0, 1], got {0}")]
    OutOfRange(f64),
    #[error("belief trace needs at least the prior entry")]
    EmptyTrace,
    #[error("turn index {t} outside trace of length {len}")]
    IndexOutOfRange { t: usize, len: usize },
    #[error("trace length {trace} does not match trajectory length {trajectory} + 1")]
    LengthMismatch { trace: usize, trajectory: usize },
    #[error("mixing weight must lie in [0, 1], got {0}")]
    BadMixture(f64),
    #[error("target {target} inconsistent with a truthful history (internal consistency)")]
    InconsistentTarget { target: usize },
    #[error("empty vocabulary has no prior")]
    EmptyVocabulary,
}

/// The belief sequence b_0..b_N; b_0 is the prior before any action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrace {
    values: Vec<f64>,
    log_values: Vec<f64>,
}

impl BeliefTrace {
    pub fn from_values(values: Vec<f64>) -> Result<Self, BeliefError> {
        if values.is_empty() {
            return Err(BeliefError::EmptyTrace);
        }
        for &v in &values {
            if !(v > 0.0 && v <= 1.0) {
                return Err(BeliefError::OutOfRange(v));
            }
        }
        let log_values = values.iter().map(|&v| clamped_ln(v)).collect();
        Ok(BeliefTrace { values, log_values })
    }

    /// Number of turns covered (trace length minus the prior entry).
    pub fn turns(&self) -> usize {
        self.values.len() - 1
    }

    pub fn value(&self, t: usize) -> f64 {
        self.values[t]
    }

    pub fn log_value(&self, t: usize) -> f64 {
        self.log_values[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Belief change at turn t: `ln b_t - ln b_{t-1}` (1 <= t <= N).
    pub fn delta(&self, t: usize) -> Result<f64, BeliefError> {
        if t == 0 || t >= self.values.len() {
            return Err(BeliefError::IndexOutOfRange { t, len: self.values.len() });
        }
        Ok(self.log_values[t] - self.log_values[t - 1])
    }

    /// All per-turn changes, in turn order.
    pub fn deltas(&self) -> Vec<f64> {
        (1..self.values.len()).map(|t| self.log_values[t] - self.log_values[t - 1]).collect()
    }
}

/// A source of target-probability estimates conditioned on game history.
/// Implementations are immutable once configured and safe to share across
/// rollout workers.
pub trait BeliefModel {
    /// Belief before any action.
    fn prior(&self, vocab: &Vocabulary) -> Result<f64, BeliefError>;

    /// Belief in `target` after the given history.
    fn posterior(
        &self,
        vocab: &Vocabulary,
        history: &[TurnStep],
        target: usize,
    ) -> Result<f64, BeliefError>;
}

/// Uniform distribution over the consistent set: the exact Bayes posterior
/// under a truthful judge and uniform prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactPosterior;

impl BeliefModel for ExactPosterior {
    fn prior(&self, vocab: &Vocabulary) -> Result<f64, BeliefError> {
        if vocab.is_empty() {
            return Err(BeliefError::EmptyVocabulary);
        }
        Ok(1.0 / vocab.len() as f64)
    }

    fn posterior(
        &self,
        vocab: &Vocabulary,
        history: &[TurnStep],
        target: usize,
    ) -> Result<f64, BeliefError> {
        let set = consistent_set(vocab, history);
        if !set.contains(&target) {
            return Err(BeliefError::InconsistentTarget { target });
        }
        Ok(1.0 / set.len() as f64)
    }
}

/// Miscalibrated belief: a uniform mixture of the exact posterior (weight
/// 1-eta) and the uniform prior (weight eta).
#[derive(Debug, Clone, Copy)]
pub struct NoisyPosterior {
    eta: f64,
}

impl NoisyPosterior {
    pub fn new(eta: f64) -> Result<Self, BeliefError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(BeliefError::BadMixture(eta));
        }
        Ok(NoisyPosterior { eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl BeliefModel for NoisyPosterior {
    fn prior(&self, vocab: &Vocabulary) -> Result<f64, BeliefError> {
        ExactPosterior.prior(vocab)
    }

    fn posterior(
        &self,
        vocab: &Vocabulary,
        history: &[TurnStep],
        target: usize,
    ) -> Result<f64, BeliefError> {
        let exact = ExactPosterior.posterior(vocab, history, target)?;
        Ok((1.0 - self.eta) * exact + self.eta / vocab.len() as f64)
    }
}

/// Belief value after each prefix of `history`, with b_0 the prior.
pub fn trace_for_history(
    model: &dyn BeliefModel,
    vocab: &Vocabulary,
    history: &[TurnStep],
    target: usize,
) -> Result<BeliefTrace, BeliefError> {
    let mut values = Vec::with_capacity(history.len() + 1);
    values.push(model.prior(vocab)?);
    for t in 1..=history.len() {
        values.push(model.posterior(vocab, &history[..t], target)?);
    }
    BeliefTrace::from_values(values)
}

/// Belief trace for a completed trajectory, beliefs computed after each
/// (action, observation) pair.
pub fn trace_for_trajectory(
    model: &dyn BeliefModel,
    vocab: &Vocabulary,
    traj: &Trajectory,
) -> Result<BeliefTrace, BeliefError> {
    trace_for_history(model, vocab, &traj.steps, traj.secret)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{generate_vocabulary, VocabMode};
    use crate::env::{Action, EpisodeState, JudgeResponse};
    use crate::seeding::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_prior() {
        let v = generate_vocabulary(1, 128, 7, VocabMode::Separable).unwrap();
        assert_eq!(ExactPosterior.prior(&v).unwrap(), 1.0 / 128.0);
        let noisy = NoisyPosterior::new(0.3).unwrap();
        assert!((noisy.prior(&v).unwrap() - 1.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_after_halving_query() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        assert_eq!(ExactPosterior.posterior(&v, &[], 0).unwrap(), 0.25);
        let target = v.concepts().iter().find(|c| c.attribute(0)).unwrap().id;
        let history = vec![TurnStep { action: Action::AskAttribute(0), response: JudgeResponse::Yes }];
        assert_eq!(ExactPosterior.posterior(&v, &history, target).unwrap(), 0.5);
    }

    #[test]
    fn inconsistent_target_is_an_error() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let target = v.concepts().iter().find(|c| !c.attribute(0)).unwrap().id;
        let history = vec![TurnStep { action: Action::AskAttribute(0), response: JudgeResponse::Yes }];
        assert!(matches!(
            ExactPosterior.posterior(&v, &history, target),
            Err(BeliefError::InconsistentTarget { .. })
        ));
    }

    /// Brute-force posterior: filter + renormalize, written independently of
    /// consistent_set.
    fn brute_force_posterior(
        vocab: &Vocabulary,
        history: &[TurnStep],
        target: usize,
    ) -> Option<f64> {
        let survivors: Vec<usize> = vocab
            .concepts()
            .iter()
            .filter(|c| {
                history.iter().all(|s| match (&s.action, s.response) {
                    (Action::AskAttribute(j), JudgeResponse::Yes) => c.attribute(*j),
                    (Action::AskAttribute(j), JudgeResponse::No) => !c.attribute(*j),
                    (Action::Guess(g), JudgeResponse::No) => c.id != *g,
                    (Action::Guess(g), JudgeResponse::Finished) => c.id == *g,
                    _ => true,
                })
            })
            .map(|c| c.id)
            .collect();
        survivors.contains(&target).then(|| 1.0 / survivors.len() as f64)
    }

    #[test]
    fn exact_posterior_matches_brute_force_on_played_games() {
        let v = generate_vocabulary(33, 50, 8, VocabMode::Random).unwrap();
        for trial in 0..60 {
            let mut rng = rng_for(1234, "posterior", trial);
            let secret = rng.random_range(0..50);
            let mut state = EpisodeState::reset(&v, secret, 6).unwrap();
            while !state.terminated() {
                let action = if rng.random_bool(0.8) {
                    Action::AskAttribute(rng.random_range(0..8))
                } else {
                    Action::Guess(rng.random_range(0..50))
                };
                state.step(&v, action).unwrap();
            }
            let history = state.history().to_vec();
            for t in 0..=history.len() {
                let got = ExactPosterior.posterior(&v, &history[..t], secret).unwrap();
                let want = brute_force_posterior(&v, &history[..t], secret).unwrap();
                assert!((got - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn delta_belief_formula() {
        let trace = BeliefTrace::from_values(vec![0.25, 0.5, 0.5]).unwrap();
        assert!((trace.delta(1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(trace.delta(2).unwrap(), 0.0);
        assert!(matches!(trace.delta(0), Err(BeliefError::IndexOutOfRange { .. })));
        assert!(matches!(trace.delta(3), Err(BeliefError::IndexOutOfRange { .. })));
    }

    #[test]
    fn log_values_match_ln() {
        let trace = BeliefTrace::from_values(vec![0.25, 0.5, 1.0]).unwrap();
        for t in 0..3 {
            assert!((trace.log_value(t) - trace.value(t).ln()).abs() < 1e-12);
        }
    }

    proptest! {
        // Telescoping: deltas sum exactly to ln b_N - ln b_0.
        #[test]
        fn deltas_telescope(values in proptest::collection::vec(1e-9f64..=1.0, 2..30)) {
            let trace = BeliefTrace::from_values(values).unwrap();
            let sum: f64 = trace.deltas().iter().sum();
            let n = trace.turns();
            prop_assert!((sum - (trace.log_value(n) - trace.log_value(0))).abs() < 1e-9);
        }

        // Mixture bound for the noisy posterior.
        #[test]
        fn noisy_mixture_bound(eta in 0.0f64..=1.0, seed in 0u64..20) {
            let v = generate_vocabulary(seed, 16, 5, VocabMode::Random).unwrap();
            let noisy = NoisyPosterior::new(eta).unwrap();
            let mut rng = rng_for(seed, "mixture", 0);
            let secret = rng.random_range(0..16);
            let mut state = EpisodeState::reset(&v, secret, 5).unwrap();
            while !state.terminated() {
                state.step(&v, Action::AskAttribute(rng.random_range(0..5))).unwrap();
            }
            let history = state.history().to_vec();
            for t in 0..=history.len() {
                let b = noisy.posterior(&v, &history[..t], secret).unwrap();
                prop_assert!(b >= eta / 16.0 - 1e-15);
                prop_assert!(b <= (1.0 - eta) + eta / 16.0 + 1e-15);
            }
        }
    }

    #[test]
    fn exact_trace_is_nondecreasing_on_truthful_games() {
        let v = generate_vocabulary(2, 64, 6, VocabMode::Separable).unwrap();
        for trial in 0..20 {
            let mut rng = rng_for(777, "monotone", trial);
            let secret = rng.random_range(0..64);
            let mut state = EpisodeState::reset(&v, secret, 20).unwrap();
            while !state.terminated() {
                let action = if rng.random_bool(0.75) {
                    Action::AskAttribute(rng.random_range(0..6))
                } else {
                    Action::Guess(rng.random_range(0..64))
                };
                state.step(&v, action).unwrap();
            }
            let n = state.turn();
            let traj = state.into_trajectory(vec![0.0; n], 0).unwrap();
            let trace = trace_for_trajectory(&ExactPosterior, &v, &traj).unwrap();
            for t in 1..=trace.turns() {
                assert!(trace.value(t) >= trace.value(t - 1) - 1e-15);
            }
        }
    }

    #[test]
    fn repeated_turns_leave_trace_constant() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let mut state = EpisodeState::reset(&v, 1, 5).unwrap();
        // Burn the budget with malformed turns: no information flows.
        while !state.terminated() {
            state.step(&v, Action::Malformed("x".into())).unwrap();
        }
        let traj = state.into_trajectory(vec![0.0; 5], 0).unwrap();
        let trace = trace_for_trajectory(&ExactPosterior, &v, &traj).unwrap();
        for t in 0..=trace.turns() {
            assert_eq!(trace.value(t), 0.25);
        }
    }

    #[test]
    fn perfect_halving_doubles_belief_each_turn() {
        let d = 6;
        let v = generate_vocabulary(4, 1 << d, d, VocabMode::Separable).unwrap();
        let secret = 17;
        let mut state = EpisodeState::reset(&v, secret, 20).unwrap();
        for j in 0..d {
            state.step(&v, Action::AskAttribute(j)).unwrap();
        }
        state.step(&v, Action::Guess(secret)).unwrap();
        let traj = state.into_trajectory(vec![0.0; d + 1], 0).unwrap();
        let trace = trace_for_trajectory(&ExactPosterior, &v, &traj).unwrap();
        for t in 0..=d {
            let expected = (1u64 << t) as f64 / (1u64 << d) as f64;
            assert!((trace.value(t) - expected).abs() < 1e-12, "turn {t}");
        }
        assert_eq!(trace.value(d + 1), 1.0);
    }

    #[test]
    fn trace_length_is_trajectory_plus_one() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let mut state = EpisodeState::reset(&v, 0, 20).unwrap();
        state.step(&v, Action::AskAttribute(0)).unwrap();
        state.step(&v, Action::Guess(0)).unwrap();
        let traj = state.into_trajectory(vec![0.0, 0.0], 0).unwrap();
        let trace = trace_for_trajectory(&ExactPosterior, &v, &traj).unwrap();
        assert_eq!(trace.turns(), traj.len());
    }
}
