//! A desk-scale laboratory for belief-change credit assignment in
//! long-horizon information-seeking agents.
//!
//! The crate builds a fully deterministic Twenty-Questions environment over a
//! synthetic concept vocabulary, tracks the agent's belief in the hidden
//! target, shapes per-turn rewards from belief changes, and trains a softmax
//! policy with turn-wise group-relative advantages. An evaluation suite
//! (mean@k, unbiased pass@k, interaction-budget scaling, belief curves) and an
//! adapter for OpenAI-compatible chat endpoints round out the lab.

pub mod belief;
pub mod cli;
pub mod concept;
pub mod config;
pub mod env;
pub mod eval;
pub mod llm;
pub mod policy;
pub mod reward;
pub mod seeding;
pub mod trainer;

pub use belief::{BeliefModel, BeliefTrace, ExactPosterior, NoisyPosterior};
pub use concept::{Concept, SplitAssignment, SplitLabel, VocabMode, Vocabulary};
pub use env::{Action, EpisodeState, JudgeResponse, Outcome, Trajectory};
pub use policy::{BayesOraclePolicy, Policy, SoftmaxPolicy};
pub use reward::{NormScheme, RewardConfig, TurnReward};
pub use trainer::{TrainConfig, TrajectoryGroup, TurnAdvantage};
