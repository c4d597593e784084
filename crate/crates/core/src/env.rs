//! The Twenty-Questions episode state machine: action application, judge
//! responses, turn cap, and termination semantics.
//!
//! The judge is deterministic and truthful. A guess of the secret ends the
//! episode with success; exhausting the turn cap without one ends it with
//! failure. Invalid and repeated turns still consume budget.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::BeliefTrace;
use crate::concept::Vocabulary;
use crate::reward::TurnReward;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("secret id {0} is not in the vocabulary")]
    UnknownSecret(usize),
    #[error("turn cap must be at least 1")]
    ZeroTurnCap,
    #[error("episode is already terminated")]
    Terminated,
    #[error("episode is still running")]
    StillRunning,
    #[error("expected {expected} per-turn log-probabilities, got {got}")]
    LogprobLength { expected: usize, got: usize },
    #[error("malformed trajectory log: {0}")]
    MalformedLog(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// An agent action: an attribute query, a concept guess, or a malformed turn.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    AskAttribute(usize),
    Guess(usize),
    Malformed(String),
}

impl Action {
    /// Canonical serialization used for repeat detection: two actions are the
    /// same question iff their canonical forms are equal.
    pub fn canonical(&self) -> String {
        match self {
            Action::AskAttribute(j) => format!("ask:{j}"),
            Action::Guess(c) => format!("guess:{c}"),
            Action::Malformed(tag) => format!("malformed:{tag}"),
        }
    }
}

/// The judge's five possible responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeResponse {
    Yes,
    No,
    Invalid,
    Repeated,
    Finished,
}

impl JudgeResponse {
    pub fn as_str(&self) -> &'static str {
        match self {
            JudgeResponse::Yes => "Yes",
            JudgeResponse::No => "No",
            JudgeResponse::Invalid => "Invalid",
            JudgeResponse::Repeated => "Repeated",
            JudgeResponse::Finished => "Finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

/// One history entry: the action taken and the judge's response.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnStep {
    pub action: Action,
    pub response: JudgeResponse,
}

/// Live episode state. A value type: distinct episodes share nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    secret: usize,
    turn_cap: usize,
    history: Vec<TurnStep>,
    outcome: Outcome,
}

pub const DEFAULT_TURN_CAP: usize = 20;

impl EpisodeState {
    /// Start an episode with an empty history.
    pub fn reset(vocab: &Vocabulary, secret: usize, turn_cap: usize) -> Result<Self, EnvError> {
        if vocab.concept(secret).is_none() {
            return Err(EnvError::UnknownSecret(secret));
        }
        if turn_cap == 0 {
            return Err(EnvError::ZeroTurnCap);
        }
        Ok(EpisodeState { secret, turn_cap, history: Vec::new(), outcome: Outcome::Running })
    }

    pub fn secret(&self) -> usize {
        self.secret
    }

    pub fn turn(&self) -> usize {
        self.history.len()
    }

    pub fn turn_cap(&self) -> usize {
        self.turn_cap
    }

    pub fn history(&self) -> &[TurnStep] {
        &self.history
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn terminated(&self) -> bool {
        self.outcome != Outcome::Running
    }

    /// Deterministic, truthful judge. Does not advance the episode.
    pub fn judge(&self, vocab: &Vocabulary, action: &Action) -> Result<JudgeResponse, EnvError> {
        if self.terminated() {
            return Err(EnvError::Terminated);
        }
        if let Action::Malformed(_) = action {
            return Ok(JudgeResponse::Invalid);
        }
        let canonical = action.canonical();
        if self.history.iter().any(|s| s.action.canonical() == canonical) {
            return Ok(JudgeResponse::Repeated);
        }
        Ok(match action {
            Action::AskAttribute(j) => {
                let secret = vocab.concept(self.secret).expect("secret validated at reset");
                if *j < vocab.attribute_count() && secret.attribute(*j) {
                    JudgeResponse::Yes
                } else if *j < vocab.attribute_count() {
                    JudgeResponse::No
                } else {
                    JudgeResponse::Invalid
                }
            }
            Action::Guess(c) => {
                if *c >= vocab.len() {
                    JudgeResponse::Invalid
                } else if *c == self.secret {
                    JudgeResponse::Finished
                } else {
                    JudgeResponse::No
                }
            }
            Action::Malformed(_) => unreachable!(),
        })
    }

    /// Apply one action: judge it, extend the history, and update termination.
    pub fn step(&mut self, vocab: &Vocabulary, action: Action) -> Result<JudgeResponse, EnvError> {
        let response = self.judge(vocab, &action)?;
        self.history.push(TurnStep { action, response });
        if response == JudgeResponse::Finished {
            self.outcome = Outcome::Success;
        } else if self.history.len() >= self.turn_cap {
            self.outcome = Outcome::Failure;
        }
        Ok(response)
    }

    /// 1 iff the episode ended in success. Errors while still running.
    pub fn outcome_score(&self) -> Result<u32, EnvError> {
        match self.outcome {
            Outcome::Running => Err(EnvError::StillRunning),
            Outcome::Success => Ok(1),
            Outcome::Failure => Ok(0),
        }
    }

    /// Freeze a terminated episode into a trajectory with per-turn behavior
    /// log-probabilities attached.
    pub fn into_trajectory(self, logprobs: Vec<f64>, seed: u64) -> Result<Trajectory, EnvError> {
        if !self.terminated() {
            return Err(EnvError::StillRunning);
        }
        if logprobs.len() != self.history.len() {
            return Err(EnvError::LogprobLength { expected: self.history.len(), got: logprobs.len() });
        }
        Ok(Trajectory {
            secret: self.secret,
            turn_cap: self.turn_cap,
            outcome: self.outcome,
            steps: self.history,
            logprobs,
            beliefs: None,
            rewards: None,
            seed,
        })
    }
}

/// A completed episode plus per-turn metadata: behavior log-probabilities,
/// the belief trace, and rewards once assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub secret: usize,
    pub turn_cap: usize,
    pub outcome: Outcome,
    pub steps: Vec<TurnStep>,
    pub logprobs: Vec<f64>,
    pub beliefs: Option<BeliefTrace>,
    pub rewards: Option<Vec<TurnReward>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn score(&self) -> u32 {
        u32::from(self.success())
    }

    pub fn count_response(&self, response: JudgeResponse) -> usize {
        self.steps.iter().filter(|s| s.response == response).count()
    }
}

// ---------------------------------------------------------------------------
// JSONL trajectory log, shared by all downstream modules.
// ---------------------------------------------------------------------------

/// Serializable action representation. The structured environment uses
/// `ask`/`guess`/`malformed`; natural-language games use `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionRecord {
    Ask { attribute: usize },
    Guess { concept: usize },
    Text { text: String },
    Malformed { tag: String },
}

impl From<&Action> for ActionRecord {
    fn from(a: &Action) -> Self {
        match a {
            Action::AskAttribute(j) => ActionRecord::Ask { attribute: *j },
            Action::Guess(c) => ActionRecord::Guess { concept: *c },
            Action::Malformed(tag) => ActionRecord::Malformed { tag: tag.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub action: ActionRecord,
    pub response: JudgeResponse,
    pub logprob: Option<f64>,
    pub belief: Option<f64>,
    pub delta_belief: Option<f64>,
    pub reward: Option<f64>,
    /// Additive reward components, for composition plots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_components: Option<TurnReward>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_request: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

/// One JSONL line per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub secret_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret_name: Option<String>,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
    pub num_turns: usize,
    pub seed: u64,
    /// Abort reason for episodes that could not be played to completion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> TrajectoryRecord {
        let turns = traj
            .steps
            .iter()
            .enumerate()
            .map(|(t, step)| TurnRecord {
                action: ActionRecord::from(&step.action),
                response: step.response,
                logprob: traj.logprobs.get(t).copied(),
                belief: traj.beliefs.as_ref().map(|b| b.value(t + 1)),
                delta_belief: traj.beliefs.as_ref().map(|b| b.delta(t + 1).expect("t in range")),
                reward: traj.rewards.as_ref().map(|r| r[t].total),
                reward_components: traj.rewards.as_ref().map(|r| r[t]),
                raw_request: None,
                raw_response: None,
            })
            .collect();
        TrajectoryRecord {
            secret_id: Some(traj.secret),
            secret_name: None,
            turns,
            outcome: traj.outcome,
            num_turns: traj.len(),
            seed: traj.seed,
            error: None,
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> Result<(), EnvError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, records: &[TrajectoryRecord]) -> Result<(), EnvError> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), records)
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TrajectoryRecord>, EnvError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| EnvError::MalformedLog(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<TrajectoryRecord>, EnvError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}
