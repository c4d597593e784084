//! Action-selection backends behind one contract: produce a distribution
//! over legal actions given a history, answer log-probability queries, and
//! expose a guess-distribution readout usable as a belief source.
//!
//! The legal action set at every turn is all attribute queries plus all
//! guesses; repeats are legal but penalized by the reward. The softmax
//! policy sees the game only through aggregate features of the consistent
//! set, so it cannot read the secret off its inputs.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{clamped_ln, BeliefError, BeliefModel, PROB_FLOOR};
use crate::concept::{consistent_set, Vocabulary};
use crate::env::{Action, EnvError, EpisodeState, Trajectory, TurnStep};
use crate::seeding::{fnv1a64, rng_for, uniform01};

pub const FEATURE_DIM: usize = 7;
pub const FEATURE_MAP_VERSION: &str = "phi-v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("action {0} is not legal for this vocabulary")]
    IllegalAction(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("theta has {got} entries, feature map needs {want}")]
    ThetaLength { got: usize, want: usize },
    #[error("best-of-n requires n >= 1")]
    ZeroCandidates,
    #[error("checkpoint feature map version '{got}' incompatible with '{want}'")]
    FeatureVersionMismatch { got: String, want: String },
    #[error("checkpoint policy kind '{0}' is not loadable")]
    UnknownKind(String),
    #[error("warm start needs a non-empty secret pool")]
    EmptySecretPool,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Total number of legal actions: one query per attribute plus one guess per
/// concept.
pub fn legal_action_count(vocab: &Vocabulary) -> usize {
    vocab.attribute_count() + vocab.len()
}

/// Action at a stable index: queries first, then guesses.
pub fn action_at(vocab: &Vocabulary, index: usize) -> Action {
    let d = vocab.attribute_count();
    if index < d {
        Action::AskAttribute(index)
    } else {
        Action::Guess(index - d)
    }
}

/// Index of a legal action, or None for malformed/out-of-range actions.
pub fn action_index(vocab: &Vocabulary, action: &Action) -> Option<usize> {
    match action {
        Action::AskAttribute(j) if *j < vocab.attribute_count() => Some(*j),
        Action::Guess(c) if *c < vocab.len() => Some(vocab.attribute_count() + c),
        _ => None,
    }
}

/// Aggregate history statistics the feature map is built from.
pub struct FeatureContext {
    member: Vec<bool>,
    attr_true_counts: Vec<usize>,
    asked: Vec<bool>,
    cs_size: usize,
    consistent: Vec<usize>,
}

impl FeatureContext {
    pub fn new(vocab: &Vocabulary, history: &[TurnStep]) -> Self {
        let consistent = consistent_set(vocab, history);
        let mut member = vec![false; vocab.len()];
        for &id in &consistent {
            member[id] = true;
        }
        let mut attr_true_counts = vec![0usize; vocab.attribute_count()];
        for &id in &consistent {
            let c = vocab.concept(id).expect("consistent ids are valid");
            for (j, count) in attr_true_counts.iter_mut().enumerate() {
                if c.attribute(j) {
                    *count += 1;
                }
            }
        }
        let mut asked = vec![false; vocab.attribute_count()];
        for step in history {
            if let Action::AskAttribute(j) = step.action {
                if j < asked.len() {
                    asked[j] = true;
                }
            }
        }
        FeatureContext { member, attr_true_counts, asked, cs_size: consistent.len(), consistent }
    }

    pub fn consistent_size(&self) -> usize {
        self.cs_size
    }

    pub fn consistent_ids(&self) -> &[usize] {
        &self.consistent
    }

    /// Feature vector for one action:
    /// `[is_ask, is_guess, p_true, 4p(1-p), asked_before, member, 1/|set|]`
    /// where `p_true` is the fraction of the consistent set with the queried
    /// attribute true and the last two entries describe the guessed concept.
    pub fn features(&self, action: &Action) -> [f64; FEATURE_DIM] {
        let mut phi = [0.0; FEATURE_DIM];
        match action {
            Action::AskAttribute(j) => {
                phi[0] = 1.0;
                if self.cs_size > 0 {
                    let p = self.attr_true_counts[*j] as f64 / self.cs_size as f64;
                    phi[2] = p;
                    phi[3] = 4.0 * p * (1.0 - p);
                }
                phi[4] = f64::from(self.asked[*j]);
            }
            Action::Guess(c) => {
                phi[1] = 1.0;
                phi[5] = f64::from(self.member[*c]);
                if self.cs_size > 0 {
                    phi[6] = 1.0 / self.cs_size as f64;
                }
            }
            Action::Malformed(_) => {}
        }
        phi
    }
}

/// A normalized distribution over the legal action set, with the feature
/// rows it was computed from.
pub struct ActionDistribution {
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub probs: Vec<f64>,
    pub logprobs: Vec<f64>,
}

impl ActionDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> usize {
        let u = uniform01(rng);
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Shared contract for action-selection backends. Policies are read-only
/// during rollout; randomness comes in through an explicit generator.
pub trait Policy {
    fn kind(&self) -> &'static str;

    /// Stable identifier of the parameter snapshot.
    fn snapshot_id(&self) -> String;

    /// Sample an action and its log-probability at draw time.
    fn act(&self, vocab: &Vocabulary, history: &[TurnStep], rng: &mut dyn RngCore) -> (Action, f64);

    /// Log-probability of a legal action under the policy's distribution.
    fn logprob_of(
        &self,
        vocab: &Vocabulary,
        history: &[TurnStep],
        action: &Action,
    ) -> Result<f64, PolicyError>;

    /// Distribution over guess actions renormalized over concepts.
    fn guess_distribution(&self, vocab: &Vocabulary, history: &[TurnStep]) -> Vec<f64>;
}

/// Linear softmax policy over the aggregate feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    pub theta: Vec<f64>,
    pub temperature: f64,
}

impl SoftmaxPolicy {
    pub fn new(theta: Vec<f64>, temperature: f64) -> Result<Self, PolicyError> {
        if theta.len() != FEATURE_DIM {
            return Err(PolicyError::ThetaLength { got: theta.len(), want: FEATURE_DIM });
        }
        if temperature <= 0.0 || temperature.is_nan() {
            return Err(PolicyError::BadTemperature(temperature));
        }
        Ok(SoftmaxPolicy { theta, temperature })
    }

    pub fn zeros(temperature: f64) -> Self {
        SoftmaxPolicy::new(vec![0.0; FEATURE_DIM], temperature).expect("valid by construction")
    }

    /// Full distribution over legal actions for one history.
    pub fn distribution(&self, vocab: &Vocabulary, history: &[TurnStep]) -> ActionDistribution {
        let ctx = FeatureContext::new(vocab, history);
        self.distribution_from_context(vocab, &ctx)
    }

    pub fn distribution_from_context(
        &self,
        vocab: &Vocabulary,
        ctx: &FeatureContext,
    ) -> ActionDistribution {
        let n = legal_action_count(vocab);
        let mut features = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        for idx in 0..n {
            let phi = ctx.features(&action_at(vocab, idx));
            let mut dot = 0.0;
            for (w, x) in self.theta.iter().zip(phi.iter()) {
                dot += w * x;
            }
            logits.push(dot / self.temperature);
            features.push(phi);
        }
        let (probs, logprobs) = softmax(&logits);
        ActionDistribution { features, probs, logprobs }
    }
}

/// Numerically stable softmax returning probabilities and log-probabilities.
pub fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    let probs = exps.iter().map(|&e| e / sum).collect();
    let logprobs = logits.iter().map(|&l| l - max - log_sum).collect();
    (probs, logprobs)
}

impl Policy for SoftmaxPolicy {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn snapshot_id(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.theta.len() + 1));
        for w in &self.theta {
            bytes.extend_from_slice(&w.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&self.temperature.to_bits().to_le_bytes());
        format!("softmax-{:016x}", fnv1a64(&bytes))
    }

    fn act(&self, vocab: &Vocabulary, history: &[TurnStep], rng: &mut dyn RngCore) -> (Action, f64) {
        let dist = self.distribution(vocab, history);
        let idx = dist.sample(rng);
        (action_at(vocab, idx), dist.logprobs[idx])
    }

    fn logprob_of(
        &self,
        vocab: &Vocabulary,
        history: &[TurnStep],
        action: &Action,
    ) -> Result<f64, PolicyError> {
        let idx = action_index(vocab, action)
            .ok_or_else(|| PolicyError::IllegalAction(action.canonical()))?;
        Ok(self.distribution(vocab, history).logprobs[idx])
    }

    fn guess_distribution(&self, vocab: &Vocabulary, history: &[TurnStep]) -> Vec<f64> {
        let dist = self.distribution(vocab, history);
        let d = vocab.attribute_count();
        let guess_mass: f64 = dist.probs[d..].iter().sum();
        dist.probs[d..].iter().map(|&p| p / guess_mass).collect()
    }
}

/// Attribute-selection rule for the reference oracle agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    MaxInformationGain,
    MedianSplit,
}

/// Deterministic upper-bound agent: queries the most informative attribute
/// until the consistent set is small enough, then guesses its lowest id.
#[derive(Debug, Clone)]
pub struct BayesOraclePolicy {
    pub split_rule: SplitRule,
    pub guess_threshold: usize,
}

impl Default for BayesOraclePolicy {
    fn default() -> Self {
        BayesOraclePolicy { split_rule: SplitRule::MedianSplit, guess_threshold: 1 }
    }
}

impl BayesOraclePolicy {
    pub fn decide(&self, vocab: &Vocabulary, history: &[TurnStep]) -> Action {
        let ctx = FeatureContext::new(vocab, history);
        self.decide_from_context(&ctx)
    }

    fn decide_from_context(&self, ctx: &FeatureContext) -> Action {
        let survivor = ctx.consistent_ids().first().copied().unwrap_or(0);
        if ctx.cs_size <= self.guess_threshold.max(1) {
            return Action::Guess(survivor);
        }
        let n = ctx.cs_size as f64;
        let mut best: Option<(usize, f64)> = None;
        for (j, &count) in ctx.attr_true_counts.iter().enumerate() {
            if count == 0 || count == ctx.cs_size {
                continue;
            }
            let score = match self.split_rule {
                // Distance from a perfect half split; lower is better.
                SplitRule::MedianSplit => {
                    -((2 * count) as f64 - n).abs()
                }
                // Binary entropy of the split under the uniform posterior.
                SplitRule::MaxInformationGain => {
                    let p = count as f64 / n;
                    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
                }
            };
            let better = match best {
                None => true,
                Some((_, s)) => score > s,
            };
            if better {
                best = Some((j, score));
            }
        }
        match best {
            Some((j, _)) => Action::AskAttribute(j),
            // No informative query exists; fall back to guessing.
            None => Action::Guess(survivor),
        }
    }
}

impl Policy for BayesOraclePolicy {
    fn kind(&self) -> &'static str {
        "bayes_oracle"
    }

    fn snapshot_id(&self) -> String {
        format!("bayes-oracle-{:?}-{}", self.split_rule, self.guess_threshold)
    }

    fn act(&self, vocab: &Vocabulary, history: &[TurnStep], _rng: &mut dyn RngCore) -> (Action, f64) {
        (self.decide(vocab, history), 0.0)
    }

    fn logprob_of(
        &self,
        vocab: &Vocabulary,
        history: &[TurnStep],
        action: &Action,
    ) -> Result<f64, PolicyError> {
        if action_index(vocab, action).is_none() {
            return Err(PolicyError::IllegalAction(action.canonical()));
        }
        if *action == self.decide(vocab, history) {
            Ok(0.0)
        } else {
            Ok(f64::NEG_INFINITY)
        }
    }

    fn guess_distribution(&self, vocab: &Vocabulary, history: &[TurnStep]) -> Vec<f64> {
        // The oracle's belief is uniform over the consistent set.
        let ctx = FeatureContext::new(vocab, history);
        let mut out = vec![0.0; vocab.len()];
        if ctx.cs_size == 0 {
            out.iter_mut().for_each(|p| *p = 1.0 / vocab.len() as f64);
            return out;
        }
        for &id in ctx.consistent_ids() {
            out[id] = 1.0 / ctx.cs_size as f64;
        }
        out
    }
}

/// Belief source that reads the trainable policy's guess-distribution mass
/// on the target. Values are floored so traces stay in (0, 1].
pub struct PolicyReadout<'a> {
    policy: &'a dyn Policy,
}

impl<'a> PolicyReadout<'a> {
    pub fn new(policy: &'a dyn Policy) -> Self {
        PolicyReadout { policy }
    }
}

impl BeliefModel for PolicyReadout<'_> {
    fn prior(&self, vocab: &Vocabulary) -> Result<f64, BeliefError> {
        // The aggregate feature map cannot distinguish concepts before any
        // evidence, so the readout prior is uniform.
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
        let mass = self.policy.guess_distribution(vocab, history)[target];
        Ok(mass.clamp(PROB_FLOOR, 1.0))
    }
}

/// Sample `n` candidate actions, simulate each judge response against the
/// true secret, and return the candidate with the largest immediate belief
/// change (ties broken by first occurrence). An analysis tool: it requires
/// oracle access to the environment.
pub fn best_of_n_act(
    policy: &dyn Policy,
    vocab: &Vocabulary,
    state: &EpisodeState,
    model: &dyn BeliefModel,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<(Action, f64), PolicyError> {
    if n == 0 {
        return Err(PolicyError::ZeroCandidates);
    }
    let log_before = clamped_ln(model.posterior(vocab, state.history(), state.secret())?);
    let mut extended: Vec<TurnStep> = state.history().to_vec();
    let mut best: Option<(f64, Action, f64)> = None;
    for _ in 0..n {
        let (action, logprob) = policy.act(vocab, state.history(), rng);
        let response = state.judge(vocab, &action)?;
        extended.push(TurnStep { action: action.clone(), response });
        let after = model.posterior(vocab, &extended, state.secret())?;
        extended.pop();
        let delta = clamped_ln(after) - log_before;
        let better = match &best {
            None => true,
            Some((d, _, _)) => delta > *d,
        };
        if better {
            best = Some((delta, action, logprob));
        }
    }
    let (_, action, logprob) = best.expect("n >= 1 candidates were drawn");
    Ok((action, logprob))
}

/// Play one full episode with a policy, returning the frozen trajectory.
pub fn play_episode(
    policy: &dyn Policy,
    vocab: &Vocabulary,
    secret: usize,
    turn_cap: usize,
    rng: &mut dyn RngCore,
    seed: u64,
) -> Result<Trajectory, PolicyError> {
    let mut state = EpisodeState::reset(vocab, secret, turn_cap)?;
    let mut logprobs = Vec::new();
    while !state.terminated() {
        let (action, logprob) = policy.act(vocab, state.history(), rng);
        state.step(vocab, action)?;
        logprobs.push(logprob);
    }
    Ok(state.into_trajectory(logprobs, seed)?)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// On-disk policy snapshot. The feature-map version guards against silently
/// incompatible checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub policy_kind: String,
    #[serde(rename = "F")]
    pub feature_dim: usize,
    pub theta: Vec<f64>,
    pub feature_map_version: String,
    pub temperature: f64,
}

impl PolicyCheckpoint {
    pub fn from_policy(policy: &SoftmaxPolicy) -> Self {
        PolicyCheckpoint {
            policy_kind: "softmax".to_string(),
            feature_dim: FEATURE_DIM,
            theta: policy.theta.clone(),
            feature_map_version: FEATURE_MAP_VERSION.to_string(),
            temperature: policy.temperature,
        }
    }

    pub fn into_policy(self) -> Result<SoftmaxPolicy, PolicyError> {
        if self.policy_kind != "softmax" {
            return Err(PolicyError::UnknownKind(self.policy_kind));
        }
        if self.feature_map_version != FEATURE_MAP_VERSION {
            return Err(PolicyError::FeatureVersionMismatch {
                got: self.feature_map_version,
                want: FEATURE_MAP_VERSION.to_string(),
            });
        }
        if self.feature_dim != FEATURE_DIM {
            return Err(PolicyError::ThetaLength { got: self.feature_dim, want: FEATURE_DIM });
        }
        SoftmaxPolicy::new(self.theta, self.temperature)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ---------------------------------------------------------------------------
// Warm start: behavior cloning from oracle rollouts.
// ---------------------------------------------------------------------------

/// Behavior-cloning settings for the warm-start pre-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStartConfig {
    pub enabled: bool,
    /// Oracle demonstration episodes to collect.
    pub episodes: usize,
    /// Full-batch gradient-ascent epochs over the demonstrations.
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 regularization; larger values leave the policy softer.
    pub l2: f64,
    pub temperature: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            enabled: true,
            episodes: 200,
            epochs: 24,
            learning_rate: 1.0,
            l2: 1e-3,
            temperature: 1.0,
        }
    }
}

/// Clone the oracle's decisions into a softmax policy by maximizing their
/// log-likelihood over collected rollouts. Deterministic for a fixed seed.
pub fn warm_start_policy(
    vocab: &Vocabulary,
    secret_pool: &[usize],
    turn_cap: usize,
    cfg: &WarmStartConfig,
    seed: u64,
) -> Result<SoftmaxPolicy, PolicyError> {
    if secret_pool.is_empty() {
        return Err(PolicyError::EmptySecretPool);
    }
    let oracle = BayesOraclePolicy::default();
    let mut dataset: Vec<(Vec<[f64; FEATURE_DIM]>, usize)> = Vec::new();
    for e in 0..cfg.episodes {
        let mut rng = rng_for(seed, "warm-start-rollout", e as u64);
        let secret = secret_pool[(rng.next_u64() % secret_pool.len() as u64) as usize];
        let mut state = EpisodeState::reset(vocab, secret, turn_cap)?;
        while !state.terminated() {
            let ctx = FeatureContext::new(vocab, state.history());
            let action = oracle.decide(vocab, state.history());
            let chosen = action_index(vocab, &action).expect("oracle actions are legal");
            let rows = (0..legal_action_count(vocab))
                .map(|idx| ctx.features(&action_at(vocab, idx)))
                .collect();
            dataset.push((rows, chosen));
            state.step(vocab, action)?;
        }
    }

    let mut policy = SoftmaxPolicy::zeros(cfg.temperature);
    let n = dataset.len() as f64;
    for _ in 0..cfg.epochs {
        let mut grad = [0.0; FEATURE_DIM];
        for (rows, chosen) in &dataset {
            let logits: Vec<f64> = rows
                .iter()
                .map(|phi| {
                    phi.iter().zip(policy.theta.iter()).map(|(x, w)| x * w).sum::<f64>()
                        / policy.temperature
                })
                .collect();
            let (probs, _) = softmax(&logits);
            for f in 0..FEATURE_DIM {
                let expected: f64 = rows.iter().zip(probs.iter()).map(|(phi, p)| p * phi[f]).sum();
                grad[f] += (rows[*chosen][f] - expected) / policy.temperature;
            }
        }
        for (w, g) in policy.theta.iter_mut().zip(grad.iter()) {
            *w += cfg.learning_rate * (g / n - cfg.l2 * *w);
        }
    }
    Ok(policy)
}
