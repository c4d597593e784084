//! Run configuration: one JSON document with a block per subsystem, a master
//! seed, and presets for the named training configurations.
//!
//! The master seed fans out to per-component seeds through
//! [`crate::seeding::derive_seed`] with a fixed stream tag per component, so
//! any sub-experiment reproduces independently of the others.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{SplitCounts, VocabMode};
use crate::llm::{ElicitationMode, EndpointConfig};
use crate::policy::WarmStartConfig;
use crate::reward::{NormScheme, RewardConfig};
use crate::seeding::derive_seed;
use crate::trainer::{AdvantageMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}' (expected cia, starpo, ablation-lambda, ablation-norm, ablation-kl)")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabBlock {
    pub count: usize,
    pub d: usize,
    pub mode: VocabMode,
}

impl Default for VocabBlock {
    fn default() -> Self {
        VocabBlock { count: 128, d: 7, mode: VocabMode::Separable }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitBlock {
    /// Explicit split sizes; None applies the default ratio to the whole
    /// vocabulary.
    pub counts: Option<SplitCounts>,
}

impl SplitBlock {
    pub fn counts_for(&self, vocab_len: usize) -> SplitCounts {
        self.counts.unwrap_or_else(|| SplitCounts::default_ratio(vocab_len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvBlock {
    pub turn_cap: usize,
}

impl Default for EnvBlock {
    fn default() -> Self {
        EnvBlock { turn_cap: crate::env::DEFAULT_TURN_CAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefKind {
    Exact,
    Noisy,
    PolicyReadout,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefBlock {
    pub backend: BeliefKind,
    /// Mixing weight for the noisy backend.
    pub eta: f64,
    pub elicitation_mode: ElicitationMode,
}

impl Default for BeliefBlock {
    fn default() -> Self {
        BeliefBlock {
            backend: BeliefKind::Exact,
            eta: 0.0,
            elicitation_mode: ElicitationMode::ContinuationTokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyBlock {
    pub temperature: f64,
    pub warm_start: WarmStartConfig,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        PolicyBlock { temperature: 1.0, warm_start: WarmStartConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalBlock {
    pub k_grid: Vec<usize>,
    /// Episodes per concept in reports.
    pub samples: usize,
    pub mean_k: usize,
    pub budgets: Vec<usize>,
    pub budget_samples: usize,
    pub bestofn_n: usize,
    pub bestofn_episodes: usize,
    pub bestofn_seeds: usize,
    /// Sampling temperature shared by both intervention arms.
    pub bestofn_temperature: f64,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            k_grid: vec![1, 8, 32, 128],
            samples: 128,
            mean_k: 8,
            budgets: (1..=50).collect(),
            budget_samples: 16,
            bestofn_n: 8,
            bestofn_episodes: 500,
            bestofn_seeds: 3,
            bestofn_temperature: 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointsBlock {
    pub questioner: EndpointConfig,
    pub judge: EndpointConfig,
    /// Directory of prompt template files; None uses the built-in set.
    pub templates_dir: Option<PathBuf>,
    /// Natural-language secrets to play.
    pub secrets: Vec<String>,
    pub games_per_secret: usize,
    pub elicit: bool,
}

impl Default for EndpointsBlock {
    fn default() -> Self {
        EndpointsBlock {
            questioner: EndpointConfig::default(),
            judge: EndpointConfig::default(),
            templates_dir: None,
            secrets: Vec::new(),
            games_per_secret: 1,
            elicit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every component stream derives from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub vocabulary: VocabBlock,
    pub splits: SplitBlock,
    pub environment: EnvBlock,
    pub belief: BeliefBlock,
    pub reward: RewardConfig,
    pub policy: PolicyBlock,
    pub trainer: TrainConfig,
    pub evaluation: EvalBlock,
    pub endpoints: Option<EndpointsBlock>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            vocabulary: VocabBlock::default(),
            splits: SplitBlock::default(),
            environment: EnvBlock::default(),
            belief: BeliefBlock::default(),
            reward: RewardConfig::default(),
            policy: PolicyBlock::default(),
            trainer: TrainConfig::default(),
            evaluation: EvalBlock::default(),
            endpoints: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Validate every block before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = &self.vocabulary;
        if v.count < 2 {
            return Err(ConfigError::Invalid("vocabulary.count must be at least 2".into()));
        }
        if v.d == 0 {
            return Err(ConfigError::Invalid("vocabulary.d must be at least 1".into()));
        }
        if v.mode == VocabMode::Separable && v.d < 64 && (v.count as u128) > (1u128 << v.d) {
            return Err(ConfigError::Invalid(format!(
                "vocabulary.count {} does not fit {} separable attribute bits",
                v.count, v.d
            )));
        }
        if let Some(counts) = self.splits.counts {
            if counts.total() > v.count {
                return Err(ConfigError::Invalid("splits exceed the vocabulary size".into()));
            }
        }
        if self.environment.turn_cap == 0 {
            return Err(ConfigError::Invalid("environment.turn_cap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.belief.eta) {
            return Err(ConfigError::Invalid("belief.eta must lie in [0, 1]".into()));
        }
        self.reward.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.policy.temperature <= 0.0 || self.policy.temperature.is_nan() {
            return Err(ConfigError::Invalid("policy.temperature must be positive".into()));
        }
        let ws = &self.policy.warm_start;
        if ws.enabled && (ws.episodes == 0 || ws.epochs == 0) {
            return Err(ConfigError::Invalid(
                "warm_start.episodes and epochs must be positive when enabled".into(),
            ));
        }
        self.trainer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let e = &self.evaluation;
        if e.samples == 0 || e.k_grid.is_empty() {
            return Err(ConfigError::Invalid("evaluation needs samples and a k grid".into()));
        }
        if e.mean_k == 0 {
            return Err(ConfigError::Invalid("evaluation.mean_k must be positive".into()));
        }
        if e.budgets.is_empty() || e.budgets.windows(2).any(|w| w[0] >= w[1]) || e.budgets[0] == 0 {
            return Err(ConfigError::Invalid(
                "evaluation.budgets must be ascending and positive".into(),
            ));
        }
        if e.bestofn_n == 0 || e.bestofn_episodes == 0 || e.bestofn_seeds == 0 {
            return Err(ConfigError::Invalid("best-of-n settings must be positive".into()));
        }
        if e.bestofn_temperature <= 0.0 || e.bestofn_temperature.is_nan() {
            return Err(ConfigError::Invalid("bestofn_temperature must be positive".into()));
        }
        if let Some(ep) = &self.endpoints {
            ep.questioner.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            ep.judge.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if ep.games_per_secret == 0 {
                return Err(ConfigError::Invalid("endpoints.games_per_secret must be positive".into()));
            }
        }
        Ok(())
    }

    // Seed fan-out, one stream per component.

    pub fn vocab_seed(&self) -> u64 {
        derive_seed(self.seed, "vocabulary", 0)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "splits", 0)
    }

    pub fn warm_start_seed(&self) -> u64 {
        derive_seed(self.seed, "warm-start", 0)
    }

    /// Trainer seed; arms of one invocation share it, so ablation arms are
    /// seed-paired.
    pub fn trainer_seed(&self) -> u64 {
        derive_seed(self.seed, "trainer", 0)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "evaluation", 0)
    }

    pub fn bestofn_seeds(&self) -> Vec<u64> {
        (0..self.evaluation.bestofn_seeds as u64)
            .map(|i| derive_seed(self.seed, "bestofn", i))
            .collect()
    }
}

/// The named experiment configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Cia,
    Starpo,
    AblationLambda,
    AblationNorm,
    AblationKl,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cia" => Ok(Preset::Cia),
            "starpo" => Ok(Preset::Starpo),
            "ablation-lambda" => Ok(Preset::AblationLambda),
            "ablation-norm" => Ok(Preset::AblationNorm),
            "ablation-kl" => Ok(Preset::AblationKl),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }
}

fn cia_arm(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.trainer.advantage_mode = AdvantageMode::Turnwise;
    cfg.reward.lambda = 0.1;
    cfg.reward.scheme = NormScheme::Relu;
    cfg
}

fn starpo_arm(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.trainer.advantage_mode = AdvantageMode::Trajectory;
    cfg.reward.lambda = 0.0;
    cfg
}

/// Expand a preset into named training arms sharing the base config.
pub fn preset_arms(preset: Preset, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match preset {
        Preset::Cia => vec![("cia".into(), cia_arm(base))],
        Preset::Starpo => vec![("starpo".into(), starpo_arm(base))],
        Preset::AblationLambda => [0.05, 0.1, 0.5]
            .iter()
            .map(|&lambda| {
                let mut cfg = cia_arm(base);
                cfg.reward.lambda = lambda;
                (format!("lambda-{lambda}"), cfg)
            })
            .collect(),
        Preset::AblationNorm => NormScheme::ALL
            .iter()
            .map(|&scheme| {
                let mut cfg = cia_arm(base);
                cfg.reward.scheme = scheme;
                (format!("norm-{}", scheme.as_str()), cfg)
            })
            .collect(),
        Preset::AblationKl => vec![
            ("kl-off".into(), cia_arm(base)),
            ("kl-on".into(), {
                let mut cfg = cia_arm(base);
                cfg.trainer.kl_coef = 0.05;
                cfg
            }),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.reward.lambda = 0.25;
        cfg.endpoints = Some(EndpointsBlock::default());
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 9, "reward": {"lambda": 0.5}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.reward.lambda, 0.5);
        assert_eq!(cfg.reward.eog_scale, 2.0);
        assert_eq!(cfg.vocabulary.count, 128);
    }

    #[test]
    fn validation_rejects_bad_blocks() {
        let mut cfg = RunConfig::default();
        cfg.vocabulary.count = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.vocabulary = VocabBlock { count: 300, d: 8, mode: VocabMode::Separable };
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.belief.eta = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.evaluation.budgets = vec![5, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_encode_named_configurations() {
        let base = RunConfig::default();
        let cia = preset_arms(Preset::Cia, &base);
        assert_eq!(cia.len(), 1);
        assert_eq!(cia[0].1.trainer.advantage_mode, AdvantageMode::Turnwise);
        assert_eq!(cia[0].1.reward.lambda, 0.1);
        assert_eq!(cia[0].1.reward.scheme, NormScheme::Relu);

        let starpo = preset_arms(Preset::Starpo, &base);
        assert_eq!(starpo[0].1.trainer.advantage_mode, AdvantageMode::Trajectory);
        assert_eq!(starpo[0].1.reward.lambda, 0.0);

        let lambdas = preset_arms(Preset::AblationLambda, &base);
        assert_eq!(
            lambdas.iter().map(|(_, c)| c.reward.lambda).collect::<Vec<_>>(),
            vec![0.05, 0.1, 0.5]
        );
        assert_eq!(preset_arms(Preset::AblationNorm, &base).len(), 5);
        let kl = preset_arms(Preset::AblationKl, &base);
        assert_eq!(kl[0].1.trainer.kl_coef, 0.0);
        assert!(kl[1].1.trainer.kl_coef > 0.0);
        assert!(matches!("nope".parse::<Preset>(), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn seed_fanout_is_stable_and_distinct() {
        let cfg = RunConfig { seed: 1234, ..RunConfig::default() };
        let seeds =
            [cfg.vocab_seed(), cfg.split_seed(), cfg.warm_start_seed(), cfg.trainer_seed(), cfg.eval_seed()];
        let mut dedup = seeds.to_vec();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), seeds.len());
        assert_eq!(cfg.vocab_seed(), cfg.vocab_seed());
        assert_ne!(cfg.trainer_seed(), cfg.eval_seed());
    }
}
