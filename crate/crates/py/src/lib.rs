//! Python bindings for the Twenty-Questions lab: vocabulary generation, the
//! episode state machine, belief traces, policies, training, and the
//! evaluation estimators.
//!
//! ```python
//! import beliefq_py as bq
//!
//! vocab = bq.Vocabulary.generate(seed=7, count=16, d=4)
//! ep = bq.Episode(vocab, secret=3, turn_cap=20)
//! ep.ask(0); ep.guess(3)
//! assert ep.outcome == "success"
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use beliefq::belief::{trace_for_trajectory, BeliefModel, ExactPosterior};
use beliefq::concept::{self, SplitCounts, SplitLabel, VocabMode};
use beliefq::env::{Action, EpisodeState, TrajectoryRecord};
use beliefq::policy::{
    best_of_n_act, play_episode, warm_start_policy, BayesOraclePolicy, Policy as PolicyTrait,
    PolicyCheckpoint, WarmStartConfig,
};
use beliefq::reward::RewardConfig;
use beliefq::seeding::{derive_seed, rng_from_seed};
use beliefq::trainer::{annotate_trajectory, BeliefSource, TrainSetup};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<VocabMode> {
    mode.parse::<VocabMode>().map_err(value_err)
}

/// The synthetic concept universe with its data splits.
#[pyclass(frozen)]
pub struct Vocabulary {
    inner: concept::Vocabulary,
    splits: concept::SplitAssignment,
}

#[pymethods]
impl Vocabulary {
    /// Generate a vocabulary and ratio-default splits from one seed.
    #[staticmethod]
    #[pyo3(signature = (seed, count, d, mode = "separable"))]
    fn generate(seed: u64, count: usize, d: usize, mode: &str) -> PyResult<Self> {
        let inner = concept::generate_vocabulary(
            derive_seed(seed, "vocabulary", 0),
            count,
            d,
            parse_mode(mode)?,
        )
        .map_err(value_err)?;
        let splits = concept::split_vocabulary(
            &inner,
            SplitCounts::default_ratio(count),
            derive_seed(seed, "splits", 0),
        )
        .map_err(value_err)?;
        Ok(Vocabulary { inner, splits })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let (inner, splits) = concept::from_json(text).map_err(value_err)?;
        Ok(Vocabulary { inner, splits })
    }

    fn to_json(&self) -> String {
        concept::to_json(&self.inner, &self.splits)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn attribute_count(&self) -> usize {
        self.inner.attribute_count()
    }

    fn name(&self, id: usize) -> PyResult<String> {
        self.inner
            .concept(id)
            .map(|c| c.name.clone())
            .ok_or_else(|| value_err(format!("no concept {id}")))
    }

    /// Attribute vector as a '0'/'1' string, most-significant bit first.
    fn attributes(&self, id: usize) -> PyResult<String> {
        self.inner
            .concept(id)
            .map(|c| c.attribute_string())
            .ok_or_else(|| value_err(format!("no concept {id}")))
    }

    /// Concept ids in one split: "sft", "rl_train", "validation", or "test".
    fn split(&self, label: &str) -> PyResult<Vec<usize>> {
        let label: SplitLabel = label.parse().map_err(value_err)?;
        Ok(self.splits.ids_in(label))
    }
}

fn outcome_str(outcome: beliefq::env::Outcome) -> &'static str {
    match outcome {
        beliefq::env::Outcome::Running => "running",
        beliefq::env::Outcome::Success => "success",
        beliefq::env::Outcome::Failure => "failure",
    }
}

/// One live game against the deterministic judge.
#[pyclass]
pub struct Episode {
    vocab: concept::Vocabulary,
    state: EpisodeState,
}

#[pymethods]
impl Episode {
    #[new]
    #[pyo3(signature = (vocab, secret, turn_cap = 20))]
    fn new(vocab: &Vocabulary, secret: usize, turn_cap: usize) -> PyResult<Self> {
        let state = EpisodeState::reset(&vocab.inner, secret, turn_cap).map_err(value_err)?;
        Ok(Episode { vocab: vocab.inner.clone(), state })
    }

    /// Ask whether the secret has attribute `j`; returns the judge's answer.
    fn ask(&mut self, j: usize) -> PyResult<String> {
        let response =
            self.state.step(&self.vocab, Action::AskAttribute(j)).map_err(runtime_err)?;
        Ok(response.as_str().to_string())
    }

    fn guess(&mut self, concept: usize) -> PyResult<String> {
        let response = self.state.step(&self.vocab, Action::Guess(concept)).map_err(runtime_err)?;
        Ok(response.as_str().to_string())
    }

    #[getter]
    fn turn(&self) -> usize {
        self.state.turn()
    }

    #[getter]
    fn terminated(&self) -> bool {
        self.state.terminated()
    }

    #[getter]
    fn outcome(&self) -> &'static str {
        outcome_str(self.state.outcome())
    }

    /// Number of concepts still consistent with the history.
    #[getter]
    fn consistent_size(&self) -> usize {
        concept::consistent_set(&self.vocab, self.state.history()).len()
    }

    /// Exact posterior probability of the secret given the history so far.
    #[getter]
    fn belief(&self) -> PyResult<f64> {
        ExactPosterior
            .posterior(&self.vocab, self.state.history(), self.state.secret())
            .map_err(runtime_err)
    }
}

/// A completed, annotated game.
#[pyclass(frozen)]
pub struct Trajectory {
    inner: beliefq::env::Trajectory,
}

#[pymethods]
impl Trajectory {
    #[getter]
    fn secret(&self) -> usize {
        self.inner.secret
    }

    #[getter]
    fn success(&self) -> bool {
        self.inner.success()
    }

    #[getter]
    fn outcome(&self) -> &'static str {
        outcome_str(self.inner.outcome)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Per-turn (action, response) pairs in canonical string form.
    #[getter]
    fn turns(&self) -> Vec<(String, String)> {
        self.inner
            .steps
            .iter()
            .map(|s| (s.action.canonical(), s.response.as_str().to_string()))
            .collect()
    }

    /// Belief values b_0..b_N.
    #[getter]
    fn beliefs(&self) -> Option<Vec<f64>> {
        self.inner.beliefs.as_ref().map(|t| t.values().to_vec())
    }

    /// Per-turn belief changes.
    #[getter]
    fn deltas(&self) -> Option<Vec<f64>> {
        self.inner.beliefs.as_ref().map(|t| t.deltas())
    }

    /// Per-turn reward totals.
    #[getter]
    fn rewards(&self) -> Option<Vec<f64>> {
        self.inner.rewards.as_ref().map(|rs| rs.iter().map(|r| r.total).collect())
    }

    /// The shared JSONL record for this episode.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&TrajectoryRecord::from_trajectory(&self.inner)).map_err(value_err)
    }
}

enum PolicyImpl {
    Softmax(beliefq::policy::SoftmaxPolicy),
    Oracle(BayesOraclePolicy),
}

impl PolicyImpl {
    fn as_dyn(&self) -> &dyn PolicyTrait {
        match self {
            PolicyImpl::Softmax(p) => p,
            PolicyImpl::Oracle(p) => p,
        }
    }
}

/// An action-selection backend: the trainable softmax policy or the
/// deterministic halving oracle.
#[pyclass]
pub struct Policy {
    inner: PolicyImpl,
}

#[pymethods]
impl Policy {
    /// Uniform softmax policy.
    #[staticmethod]
    #[pyo3(signature = (temperature = 1.0))]
    fn uniform(temperature: f64) -> PyResult<Self> {
        let p = beliefq::policy::SoftmaxPolicy::new(vec![0.0; 7], temperature).map_err(value_err)?;
        Ok(Policy { inner: PolicyImpl::Softmax(p) })
    }

    /// Deterministic reference agent (median-split queries, then a guess).
    #[staticmethod]
    fn oracle() -> Self {
        Policy { inner: PolicyImpl::Oracle(BayesOraclePolicy::default()) }
    }

    /// Behavior-clone the oracle into a softmax policy.
    #[staticmethod]
    #[pyo3(signature = (vocab, seed, episodes = 200, epochs = 24, turn_cap = 20))]
    fn warm_start(
        vocab: &Vocabulary,
        seed: u64,
        episodes: usize,
        epochs: usize,
        turn_cap: usize,
    ) -> PyResult<Self> {
        let cfg = WarmStartConfig { episodes, epochs, ..WarmStartConfig::default() };
        let pool: Vec<usize> = vocab.inner.ids().collect();
        let p = warm_start_policy(&vocab.inner, &pool, turn_cap, &cfg, seed).map_err(value_err)?;
        Ok(Policy { inner: PolicyImpl::Softmax(p) })
    }

    #[staticmethod]
    fn from_checkpoint_json(text: &str) -> PyResult<Self> {
        let ck: PolicyCheckpoint = serde_json::from_str(text).map_err(value_err)?;
        Ok(Policy { inner: PolicyImpl::Softmax(ck.into_policy().map_err(value_err)?) })
    }

    fn to_checkpoint_json(&self) -> PyResult<String> {
        match &self.inner {
            PolicyImpl::Softmax(p) => {
                serde_json::to_string_pretty(&PolicyCheckpoint::from_policy(p)).map_err(value_err)
            }
            PolicyImpl::Oracle(_) => Err(value_err("the oracle policy has no checkpoint form")),
        }
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.as_dyn().kind()
    }

    /// Sample one action for the episode's current history; returns its
    /// canonical string and log-probability.
    fn act(&self, episode: &Episode, seed: u64) -> (String, f64) {
        let mut rng = rng_from_seed(seed);
        let (action, logprob) =
            self.inner.as_dyn().act(&episode.vocab, episode.state.history(), &mut rng);
        (action.canonical(), logprob)
    }

    /// Best-of-n action selection by immediate belief change (oracle access).
    fn best_of_n(&self, episode: &Episode, n: usize, seed: u64) -> PyResult<(String, f64)> {
        let mut rng = rng_from_seed(seed);
        let (action, logprob) = best_of_n_act(
            self.inner.as_dyn(),
            &episode.vocab,
            &episode.state,
            &ExactPosterior,
            n,
            &mut rng,
        )
        .map_err(runtime_err)?;
        Ok((action.canonical(), logprob))
    }
}

/// Play one episode and annotate it with exact-posterior beliefs and rewards.
#[pyfunction]
#[pyo3(signature = (policy, vocab, secret, turn_cap = 20, seed = 0))]
fn play_game(
    policy: &Policy,
    vocab: &Vocabulary,
    secret: usize,
    turn_cap: usize,
    seed: u64,
) -> PyResult<Trajectory> {
    let mut rng = rng_from_seed(seed);
    let mut traj = play_episode(policy.inner.as_dyn(), &vocab.inner, secret, turn_cap, &mut rng, seed)
        .map_err(runtime_err)?;
    let reward_cfg = RewardConfig::default();
    let mut ema = beliefq::reward::EmaBaseline::new(reward_cfg.ema_decay);
    annotate_trajectory(&mut traj, &vocab.inner, &ExactPosterior, &reward_cfg, &mut ema)
        .map_err(runtime_err)?;
    Ok(Trajectory { inner: traj })
}

/// Belief trace of an already-played trajectory under the exact posterior.
#[pyfunction]
fn belief_trace(vocab: &Vocabulary, trajectory: &Trajectory) -> PyResult<Vec<f64>> {
    let trace = trace_for_trajectory(&ExactPosterior, &vocab.inner, &trajectory.inner)
        .map_err(runtime_err)?;
    Ok(trace.values().to_vec())
}

/// Unbiased pass@k estimate from n attempts with c successes.
#[pyfunction]
fn pass_at_k(n: usize, c: usize, k: usize) -> PyResult<f64> {
    beliefq::eval::pass_at_k(n, c, k).map_err(value_err)
}

/// Mean success over the first k sample columns with its spread.
#[pyfunction]
fn mean_at_k(outcomes: Vec<Vec<bool>>, k: usize) -> PyResult<(f64, f64)> {
    beliefq::eval::mean_at_k(&outcomes, k).map_err(value_err)
}

/// Parse a judge response out of raw model text; raises ValueError when no
/// valid answer tag is present.
#[pyfunction]
fn parse_answer(text: &str) -> PyResult<String> {
    beliefq::llm::parse_answer(text)
        .map(|r| r.as_str().to_string())
        .map_err(value_err)
}

/// Run a short turn-wise training loop and return the tuned policy plus its
/// final validation success rate.
#[pyfunction]
#[pyo3(signature = (vocab, policy, steps = 16, seed = 0, lambda_ = 0.1, turnwise = true))]
fn train_policy(
    vocab: &Vocabulary,
    policy: &Policy,
    steps: usize,
    seed: u64,
    lambda_: f64,
    turnwise: bool,
) -> PyResult<(Policy, f64)> {
    let start = match &policy.inner {
        PolicyImpl::Softmax(p) => p.clone(),
        PolicyImpl::Oracle(_) => return Err(value_err("only softmax policies are trainable")),
    };
    let train_ids = vocab.splits.ids_in(SplitLabel::RlTrain);
    let val_ids = vocab.splits.ids_in(SplitLabel::Validation);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(value_err("vocabulary splits are too small to train on"));
    }
    let reward = RewardConfig { lambda: lambda_, ..RewardConfig::default() };
    let cfg = beliefq::trainer::TrainConfig {
        steps,
        seed,
        advantage_mode: if turnwise {
            beliefq::trainer::AdvantageMode::Turnwise
        } else {
            beliefq::trainer::AdvantageMode::Trajectory
        },
        val_every: steps,
        val_samples: 8,
        checkpoint_every: steps,
        ..beliefq::trainer::TrainConfig::default()
    };
    let setup = TrainSetup {
        vocab: &vocab.inner,
        train_ids: &train_ids,
        val_ids: &val_ids,
        turn_cap: 20,
        belief: BeliefSource::Model(&ExactPosterior),
        reward: &reward,
    };
    let result = beliefq::trainer::train(start, &setup, &cfg).map_err(runtime_err)?;
    let stats = beliefq::trainer::batch_stats(result.final_validation.iter()).map_err(runtime_err)?;
    Ok((Policy { inner: PolicyImpl::Softmax(result.policy) }, stats.success_rate))
}

#[pymodule]
fn beliefq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Episode>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(play_game, m)?)?;
    m.add_function(wrap_pyfunction!(belief_trace, m)?)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mean_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(train_policy, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
