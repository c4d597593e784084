//! Remote-model adapter: drives the same game loop against OpenAI-compatible
//! chat endpoints, tag-parses the judge, and elicits beliefs from token
//! log-probabilities.
//!
//! All raw requests and responses are persisted in the transcript, so every
//! remote evaluation can be replayed offline; the replay path doubles as the
//! test harness. Remote endpoints are evaluation backends only, never
//! training targets.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::belief::clamped_ln;
use crate::env::{ActionRecord, JudgeResponse, Outcome, TrajectoryRecord, TurnRecord};
use crate::seeding::uniform01;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no <answer> tag or unrecognized value in judge output: {raw:?}")]
    Parse { raw: String },
    #[error("endpoint error after {attempts} attempts: {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("endpoint lacks a required capability: {0}")]
    Capability(String),
    #[error("prompt template invalid: {0}")]
    Template(String),
    #[error("replay script exhausted after {0} exchanges")]
    ReplayExhausted(usize),
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Connection settings for one OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrent: usize,
    pub temperature: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000".to_string(),
            model: "local-model".to_string(),
            api_key_env: None,
            timeout_secs: 60,
            max_retries: 2,
            max_concurrent: 4,
            temperature: 1.0,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout_secs == 0 {
            return Err(LlmError::Template("timeout must be positive".into()));
        }
        if self.max_concurrent == 0 {
            return Err(LlmError::Template("max_concurrent must be positive".into()));
        }
        Ok(())
    }
}

/// The game prompts. The judge task template must carry the `{0}` (secret),
/// `{1}` (question), and `{2}` (history) placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub questioner_system: String,
    pub questioner_task: String,
    pub judge_system: String,
    pub judge_task: String,
    pub elicitation_prefix: String,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        PromptTemplates {
            questioner_system: include_str!("../templates/questioner_system.txt").trim_end().into(),
            questioner_task: include_str!("../templates/questioner_task.txt").trim_end().into(),
            judge_system: include_str!("../templates/judge_system.txt").trim_end().into(),
            judge_task: include_str!("../templates/judge_task.txt").trim_end().into(),
            elicitation_prefix: include_str!("../templates/elicitation_prefix.txt")
                .trim_end()
                .into(),
        }
    }

    /// Load templates from `<dir>/{questioner_system,questioner_task,
    /// judge_system,judge_task,elicitation_prefix}.txt`.
    pub fn from_dir(dir: &std::path::Path) -> Result<Self, LlmError> {
        let read = |name: &str| -> Result<String, LlmError> {
            Ok(std::fs::read_to_string(dir.join(format!("{name}.txt")))?.trim_end().to_string())
        };
        let templates = PromptTemplates {
            questioner_system: read("questioner_system")?,
            questioner_task: read("questioner_task")?,
            judge_system: read("judge_system")?,
            judge_task: read("judge_task")?,
            elicitation_prefix: read("elicitation_prefix")?,
        };
        templates.validate()?;
        Ok(templates)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        for placeholder in ["{0}", "{1}", "{2}"] {
            if !self.judge_task.contains(placeholder) {
                return Err(LlmError::Template(format!(
                    "judge task template is missing the {placeholder} placeholder"
                )));
            }
        }
        Ok(())
    }

    pub fn render_judge_task(&self, secret: &str, question: &str, history: &str) -> String {
        self.judge_task.replace("{0}", secret).replace("{1}", question).replace("{2}", history)
    }
}

/// Extract the last complete `<answer>...</answer>` span and match it
/// against the five judge labels, case-insensitively. Never fabricates a
/// default.
pub fn parse_answer(text: &str) -> Result<JudgeResponse, LlmError> {
    let lower = text.to_lowercase();
    let close = lower.rfind("</answer>").ok_or_else(|| LlmError::Parse { raw: text.to_string() })?;
    let open = lower[..close]
        .rfind("<answer>")
        .ok_or_else(|| LlmError::Parse { raw: text.to_string() })?;
    let value = lower[open + "<answer>".len()..close]
        .trim()
        .trim_matches(|c| c == '[' || c == ']' || c == '\'' || c == '"');
    match value {
        "yes" => Ok(JudgeResponse::Yes),
        "no" => Ok(JudgeResponse::No),
        "invalid" => Ok(JudgeResponse::Invalid),
        "repeated" => Ok(JudgeResponse::Repeated),
        "finished" => Ok(JudgeResponse::Finished),
        _ => Err(LlmError::Parse { raw: text.to_string() }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

/// A completed exchange: the generated text plus the raw wire payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatExchange {
    pub text: String,
    pub raw_request: String,
    pub raw_response: String,
}

/// One scored token of a continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Backend abstraction over the chat protocol. The HTTP client implements
/// it for real endpoints; scripted fakes implement it for tests and replay.
pub trait ChatBackend: Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatExchange, LlmError>;

    /// Score `continuation` as a forced continuation of `prefix`, returning
    /// per-token log-probabilities.
    fn score_continuation(
        &self,
        prefix: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, LlmError>;
}

// ---------------------------------------------------------------------------
// Concurrency cap.
// ---------------------------------------------------------------------------

/// Counting semaphore bounding in-flight requests per endpoint.
pub struct RequestLimiter {
    permits: Mutex<usize>,
    available: Condvar,
}

impl RequestLimiter {
    pub fn new(max_concurrent: usize) -> Self {
        RequestLimiter { permits: Mutex::new(max_concurrent.max(1)), available: Condvar::new() }
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter poisoned");
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().expect("limiter poisoned");
        *permits += 1;
        self.limiter.available.notify_one();
    }
}

// ---------------------------------------------------------------------------
// HTTP endpoint.
// ---------------------------------------------------------------------------

/// Blocking HTTP client for an OpenAI-compatible server: chat completions
/// for game turns, echo-scored completions for belief elicitation. Requests
/// retry with exponential backoff and jitter; retries happen inside one
/// logical call, so a retried request never double-appends a game turn.
pub struct HttpEndpoint {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
    limiter: RequestLimiter,
}

impl HttpEndpoint {
    pub fn new(cfg: EndpointConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Endpoint { attempts: 0, message: e.to_string() })?;
        let limiter = RequestLimiter::new(cfg.max_concurrent);
        Ok(HttpEndpoint { cfg, client, limiter })
    }

    fn api_key(&self) -> Result<Option<String>, LlmError> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| LlmError::MissingApiKey(var.clone())),
        }
    }

    fn post_json(&self, path: &str, body: &serde_json::Value) -> Result<(String, String), LlmError> {
        let _guard = self.limiter.acquire();
        let url = format!("{}{path}", self.cfg.base_url.trim_end_matches('/'));
        let raw_request = serde_json::to_string(body)?;
        let key = self.api_key()?;
        let mut attempt = 0u32;
        let mut rng = crate::seeding::rng_from_seed(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.subsec_nanos() as u64)
                .unwrap_or(0),
        );
        loop {
            attempt += 1;
            let mut req = self.client.post(&url).json(body);
            if let Some(k) = &key {
                req = req.bearer_auth(k);
            }
            let outcome = req.send().and_then(|r| r.error_for_status()).and_then(|r| r.text());
            match outcome {
                Ok(text) => return Ok((raw_request, text)),
                Err(e) if attempt <= self.cfg.max_retries => {
                    // Exponential backoff with jitter.
                    let base = 0.5 * 2f64.powi(attempt as i32 - 1);
                    let sleep = base * (0.5 + uniform01(&mut rng));
                    std::thread::sleep(Duration::from_secs_f64(sleep.min(10.0)));
                    let _ = e;
                }
                Err(e) => {
                    return Err(LlmError::Endpoint { attempts: attempt, message: e.to_string() })
                }
            }
        }
    }
}

impl ChatBackend for HttpEndpoint {
    fn chat(&self, request: &ChatRequest) -> Result<ChatExchange, LlmError> {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(mt) = request.max_tokens {
            body["max_tokens"] = json!(mt);
        }
        let (raw_request, raw_response) = self.post_json("/v1/chat/completions", &body)?;
        let parsed: serde_json::Value = serde_json::from_str(&raw_response)?;
        let text = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Endpoint {
                attempts: 1,
                message: format!("response carries no message content: {raw_response}"),
            })?
            .to_string();
        Ok(ChatExchange { text, raw_request, raw_response })
    }

    fn score_continuation(
        &self,
        prefix: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, LlmError> {
        // Echo-scored completion: servers that support prompt logprobs
        // return per-token values for the whole prompt; the continuation's
        // tokens are the suffix past the prefix boundary.
        let body = json!({
            "model": self.cfg.model,
            "prompt": format!("{prefix}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let (_, raw_response) = self.post_json("/v1/completions", &body)?;
        let parsed: serde_json::Value = serde_json::from_str(&raw_response)?;
        let logprobs = &parsed["choices"][0]["logprobs"];
        let tokens = logprobs["tokens"].as_array().ok_or_else(|| {
            LlmError::Capability("endpoint does not report prompt token logprobs".into())
        })?;
        let values = logprobs["token_logprobs"].as_array().ok_or_else(|| {
            LlmError::Capability("endpoint does not report prompt token logprobs".into())
        })?;
        let offsets = logprobs["text_offset"].as_array().ok_or_else(|| {
            LlmError::Capability("endpoint does not report text offsets".into())
        })?;
        let boundary = prefix.len();
        let mut out = Vec::new();
        for ((tok, val), off) in tokens.iter().zip(values.iter()).zip(offsets.iter()) {
            let offset = off.as_u64().unwrap_or(0) as usize;
            if offset >= boundary {
                out.push(TokenLogprob {
                    token: tok.as_str().unwrap_or_default().to_string(),
                    logprob: val.as_f64().ok_or_else(|| {
                        LlmError::Capability("null logprob inside continuation".into())
                    })?,
                });
            }
        }
        if out.is_empty() {
            return Err(LlmError::Capability("no tokens scored past the prefix".into()));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Belief elicitation.
// ---------------------------------------------------------------------------

/// How the target's probability is read from the endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ElicitationMode {
    /// Probability of the target tokens continuing the elicitation prefix.
    #[default]
    ContinuationTokens,
    /// Probability of an affirmative answer to the rendered question.
    AffirmativeAnswer,
}

/// Render a chat history as plain text for completion-style scoring.
pub fn render_history_text(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

/// Sum of the target's token log-probabilities as a continuation of the
/// elicitation prefix appended to the rendered history.
pub fn elicit_remote(
    backend: &dyn ChatBackend,
    templates: &PromptTemplates,
    history: &[ChatMessage],
    target: &str,
    mode: ElicitationMode,
) -> Result<f64, LlmError> {
    let rendered = render_history_text(history);
    let (prefix, continuation) = match mode {
        ElicitationMode::ContinuationTokens => {
            (format!("{rendered}{} ", templates.elicitation_prefix), target.to_string())
        }
        ElicitationMode::AffirmativeAnswer => (
            format!("{rendered}{} {target}? Answer:", templates.elicitation_prefix),
            " Yes".to_string(),
        ),
    };
    let tokens = backend.score_continuation(&prefix, &continuation)?;
    Ok(tokens.iter().map(|t| t.logprob).sum())
}

// ---------------------------------------------------------------------------
// The remote game loop.
// ---------------------------------------------------------------------------

/// One turn of a natural-language game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteTurn {
    pub question: String,
    pub response: JudgeResponse,
    /// Raw judge text when it did not parse; the turn is scored Invalid.
    pub parse_error: Option<String>,
    pub questioner_raw_request: String,
    pub questioner_raw_response: String,
    pub judge_raw_request: String,
    pub judge_raw_response: String,
    pub belief: Option<f64>,
    pub delta_belief: Option<f64>,
}

/// A completed natural-language episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteTrajectory {
    pub secret: String,
    pub turns: Vec<RemoteTurn>,
    pub outcome: Outcome,
    pub turn_cap: usize,
    pub seed: u64,
}

impl RemoteTrajectory {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Convert to the shared JSONL schema with raw payloads attached.
    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            secret_id: None,
            secret_name: Some(self.secret.clone()),
            turns: self
                .turns
                .iter()
                .map(|t| TurnRecord {
                    action: ActionRecord::Text { text: t.question.clone() },
                    response: t.response,
                    logprob: None,
                    belief: t.belief,
                    delta_belief: t.delta_belief,
                    reward: None,
                    reward_components: None,
                    raw_request: Some(t.judge_raw_request.clone()),
                    raw_response: Some(t.judge_raw_response.clone()),
                })
                .collect(),
            outcome: self.outcome,
            num_turns: self.turns.len(),
            seed: self.seed,
            error: None,
        }
    }
}

pub struct RemoteGameConfig {
    pub turn_cap: usize,
    pub questioner_temperature: f64,
    /// Judges decode greedily by default.
    pub judge_temperature: f64,
    pub elicit: bool,
    pub elicitation_mode: ElicitationMode,
    pub seed: u64,
}

impl Default for RemoteGameConfig {
    fn default() -> Self {
        RemoteGameConfig {
            turn_cap: crate::env::DEFAULT_TURN_CAP,
            questioner_temperature: 1.0,
            judge_temperature: 0.0,
            elicit: false,
            elicitation_mode: ElicitationMode::ContinuationTokens,
            seed: 0,
        }
    }
}

fn questioner_messages(
    templates: &PromptTemplates,
    turns: &[RemoteTurn],
) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(&templates.questioner_system)];
    for t in turns {
        messages.push(ChatMessage::assistant(&t.question));
        messages.push(ChatMessage::user(t.response.as_str()));
    }
    messages.push(ChatMessage::user(&templates.questioner_task));
    messages
}

fn history_line(turns: &[RemoteTurn]) -> String {
    turns
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t.question))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Alternate questioner and judge calls until the judge reports Finished or
/// the turn cap runs out. The judge's parsed response drives the same
/// termination rules as the structured environment; unparseable judge output
/// scores the turn Invalid and is logged verbatim.
pub fn play_remote_game(
    questioner: &dyn ChatBackend,
    judge: &dyn ChatBackend,
    templates: &PromptTemplates,
    secret: &str,
    cfg: &RemoteGameConfig,
) -> Result<RemoteTrajectory, LlmError> {
    templates.validate()?;
    let mut turns: Vec<RemoteTurn> = Vec::new();
    let mut outcome = Outcome::Failure;
    let mut prev_belief: Option<f64> = None;
    while turns.len() < cfg.turn_cap {
        let q_exchange = questioner.chat(&ChatRequest {
            messages: questioner_messages(templates, &turns),
            temperature: cfg.questioner_temperature,
            max_tokens: None,
        })?;
        let question = q_exchange.text.trim().to_string();

        let judge_prompt = templates.render_judge_task(secret, &question, &history_line(&turns));
        let j_exchange = judge.chat(&ChatRequest {
            messages: vec![
                ChatMessage::system(&templates.judge_system),
                ChatMessage::user(judge_prompt),
            ],
            temperature: cfg.judge_temperature,
            max_tokens: None,
        })?;
        let (response, parse_error) = match parse_answer(&j_exchange.text) {
            Ok(r) => (r, None),
            // Unparseable judge output keeps the game alive as Invalid but
            // preserves the error signal.
            Err(LlmError::Parse { raw }) => (JudgeResponse::Invalid, Some(raw)),
            Err(other) => return Err(other),
        };

        let (belief, delta_belief) = if cfg.elicit {
            let mut history = questioner_messages(templates, &turns);
            history.pop();
            history.push(ChatMessage::assistant(&question));
            history.push(ChatMessage::user(response.as_str()));
            let logprob =
                elicit_remote(questioner, templates, &history, secret, cfg.elicitation_mode)?;
            let belief = logprob.exp().clamp(crate::belief::PROB_FLOOR, 1.0);
            let delta = prev_belief.map(|p| clamped_ln(belief) - clamped_ln(p));
            prev_belief = Some(belief);
            (Some(belief), delta)
        } else {
            (None, None)
        };

        turns.push(RemoteTurn {
            question,
            response,
            parse_error,
            questioner_raw_request: q_exchange.raw_request,
            questioner_raw_response: q_exchange.raw_response,
            judge_raw_request: j_exchange.raw_request,
            judge_raw_response: j_exchange.raw_response,
            belief,
            delta_belief,
        });
        if response == JudgeResponse::Finished {
            outcome = Outcome::Success;
            break;
        }
    }
    Ok(RemoteTrajectory {
        secret: secret.to_string(),
        turns,
        outcome,
        turn_cap: cfg.turn_cap,
        seed: cfg.seed,
    })
}

// ---------------------------------------------------------------------------
// Record / replay.
// ---------------------------------------------------------------------------

/// Backend that replays a recorded sequence of response texts in order.
pub struct ReplayBackend {
    script: Mutex<VecDeque<String>>,
    served: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(responses: Vec<String>) -> Self {
        ReplayBackend { script: Mutex::new(responses.into()), served: Mutex::new(0) }
    }

    /// Questioner and judge replay scripts recovered from a transcript.
    pub fn from_trajectory(traj: &RemoteTrajectory) -> (ReplayBackend, ReplayBackend) {
        let questions = traj.turns.iter().map(|t| t.question.clone()).collect();
        let judgements = traj
            .turns
            .iter()
            .map(|t| match &t.parse_error {
                Some(raw) => raw.clone(),
                None => format!("<answer>{}</answer>", t.response.as_str()),
            })
            .collect();
        (ReplayBackend::new(questions), ReplayBackend::new(judgements))
    }
}

impl ChatBackend for ReplayBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatExchange, LlmError> {
        let mut script = self.script.lock().expect("script poisoned");
        let served = {
            let mut s = self.served.lock().expect("counter poisoned");
            *s += 1;
            *s
        };
        let text = script.pop_front().ok_or(LlmError::ReplayExhausted(served - 1))?;
        Ok(ChatExchange {
            text,
            raw_request: serde_json::to_string(&request.messages)?,
            raw_response: String::new(),
        })
    }

    fn score_continuation(
        &self,
        _prefix: &str,
        _continuation: &str,
    ) -> Result<Vec<TokenLogprob>, LlmError> {
        Err(LlmError::Capability("replay backend does not score continuations".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn parse_answer_handles_valid_tags() {
        assert_eq!(parse_answer("reasoning...\n<answer>Yes</answer>").unwrap(), JudgeResponse::Yes);
        assert_eq!(parse_answer("<answer>finished</answer>").unwrap(), JudgeResponse::Finished);
        assert_eq!(parse_answer("<ANSWER>No</ANSWER>").unwrap(), JudgeResponse::No);
        assert_eq!(
            parse_answer("first <answer>Yes</answer> then <answer>Repeated</answer>").unwrap(),
            JudgeResponse::Repeated
        );
        // A trailing unclosed tag does not hide the last complete span.
        assert_eq!(
            parse_answer("<answer>No</answer> draft <answer>Yes").unwrap(),
            JudgeResponse::No
        );
        assert_eq!(parse_answer("<answer>[Invalid]</answer>").unwrap(), JudgeResponse::Invalid);
    }

    #[test]
    fn parse_answer_rejects_garbled_output() {
        for text in ["no tag here", "<answer>maybe</answer>", "<answer>Yes", "", "</answer>"] {
            assert!(matches!(parse_answer(text), Err(LlmError::Parse { .. })), "{text:?}");
        }
    }

    #[test]
    fn templates_validate_placeholders() {
        let templates = PromptTemplates::builtin();
        assert!(templates.validate().is_ok());
        let rendered = templates.render_judge_task("otter", "Is it an animal?", "1. Is it alive?");
        assert!(rendered.contains("otter"));
        assert!(rendered.contains("Is it an animal?"));
        let mut broken = templates.clone();
        broken.judge_task = "no placeholders".into();
        assert!(matches!(broken.validate(), Err(LlmError::Template(_))));
    }

    /// Scripted backend for game tests; optionally tracks concurrency.
    struct FakeBackend {
        responses: Mutex<VecDeque<String>>,
        in_flight: Arc<AtomicUsize>,
        peak: Arc<AtomicUsize>,
        limiter: Option<RequestLimiter>,
    }

    impl FakeBackend {
        fn new(responses: Vec<&str>) -> Self {
            FakeBackend {
                responses: Mutex::new(responses.into_iter().map(String::from).collect()),
                in_flight: Arc::new(AtomicUsize::new(0)),
                peak: Arc::new(AtomicUsize::new(0)),
                limiter: None,
            }
        }
    }

    impl ChatBackend for FakeBackend {
        fn chat(&self, request: &ChatRequest) -> Result<ChatExchange, LlmError> {
            let _guard = self.limiter.as_ref().map(|l| l.acquire());
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            let text = self
                .responses
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| "<answer>No</answer>".to_string());
            Ok(ChatExchange {
                text,
                raw_request: serde_json::to_string(&request.messages).unwrap(),
                raw_response: "{}".into(),
            })
        }

        fn score_continuation(
            &self,
            _prefix: &str,
            _continuation: &str,
        ) -> Result<Vec<TokenLogprob>, LlmError> {
            Ok(vec![
                TokenLogprob { token: "tok".into(), logprob: -1.5 },
                TokenLogprob { token: "en".into(), logprob: -0.8 },
            ])
        }
    }

    #[test]
    fn remote_game_terminates_on_finished() {
        let questioner =
            FakeBackend::new(vec!["Is it an animal?", "Is it a mammal?", "Is it an otter?"]);
        let judge = FakeBackend::new(vec![
            "thinking <answer>Yes</answer>",
            "<answer>No</answer>",
            "<answer>Finished</answer>",
        ]);
        let traj = play_remote_game(
            &questioner,
            &judge,
            &PromptTemplates::builtin(),
            "otter",
            &RemoteGameConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.outcome, Outcome::Success);
        assert_eq!(traj.turns.len(), 3);
        assert_eq!(traj.turns[2].response, JudgeResponse::Finished);
    }

    #[test]
    fn remote_game_fails_at_turn_cap_and_tolerates_garbled_judges() {
        let questioner = FakeBackend::new(vec!["q1?", "q2?", "q3?"]);
        let judge = FakeBackend::new(vec!["total garbage", "<answer>No</answer>", "???"]);
        let cfg = RemoteGameConfig { turn_cap: 3, ..RemoteGameConfig::default() };
        let traj = play_remote_game(
            &questioner,
            &judge,
            &PromptTemplates::builtin(),
            "otter",
            &cfg,
        )
        .unwrap();
        assert_eq!(traj.outcome, Outcome::Failure);
        assert_eq!(traj.turns.len(), 3);
        assert_eq!(traj.turns[0].response, JudgeResponse::Invalid);
        assert_eq!(traj.turns[0].parse_error.as_deref(), Some("total garbage"));
        assert_eq!(traj.turns[1].parse_error, None);
    }

    #[test]
    fn record_replay_reproduces_identical_trajectory() {
        let questioner = FakeBackend::new(vec!["Is it big?", "Is it the moon?"]);
        let judge = FakeBackend::new(vec!["<answer>Yes</answer>", "<answer>Finished</answer>"]);
        let templates = PromptTemplates::builtin();
        let cfg = RemoteGameConfig::default();
        let original = play_remote_game(&questioner, &judge, &templates, "moon", &cfg).unwrap();

        let (rq, rj) = ReplayBackend::from_trajectory(&original);
        let replayed = play_remote_game(&rq, &rj, &templates, "moon", &cfg).unwrap();
        assert_eq!(replayed.turns.len(), original.turns.len());
        for (a, b) in original.turns.iter().zip(replayed.turns.iter()) {
            assert_eq!(a.question, b.question);
            assert_eq!(a.response, b.response);
        }
        assert_eq!(replayed.outcome, original.outcome);
        // The record serializes into the shared JSONL schema.
        let record = original.to_record();
        assert_eq!(record.num_turns, 2);
        assert_eq!(record.secret_name.as_deref(), Some("moon"));
    }

    #[test]
    fn elicitation_sums_token_logprobs() {
        let backend = FakeBackend::new(vec![]);
        let templates = PromptTemplates::builtin();
        let history = vec![ChatMessage::user("Is it alive?"), ChatMessage::assistant("Yes")];
        let lp = elicit_remote(
            &backend,
            &templates,
            &history,
            "otter",
            ElicitationMode::ContinuationTokens,
        )
        .unwrap();
        assert!((lp - (-2.3)).abs() < 1e-12);
    }

    #[test]
    fn limiter_caps_concurrent_requests() {
        let cap = 3;
        let backend = Arc::new(FakeBackend {
            responses: Mutex::new(VecDeque::new()),
            in_flight: Arc::new(AtomicUsize::new(0)),
            peak: Arc::new(AtomicUsize::new(0)),
            limiter: Some(RequestLimiter::new(cap)),
        });
        let mut handles = Vec::new();
        for _ in 0..16 {
            let b = Arc::clone(&backend);
            handles.push(std::thread::spawn(move || {
                b.chat(&ChatRequest {
                    messages: vec![ChatMessage::user("ping")],
                    temperature: 0.0,
                    max_tokens: None,
                })
                .unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(
            backend.peak.load(Ordering::SeqCst) <= cap,
            "peak {} exceeded cap {cap}",
            backend.peak.load(Ordering::SeqCst)
        );
    }

    #[test]
    fn replay_exhaustion_is_an_error() {
        let backend = ReplayBackend::new(vec!["only one".into()]);
        let req = ChatRequest { messages: vec![], temperature: 0.0, max_tokens: None };
        backend.chat(&req).unwrap();
        assert!(matches!(backend.chat(&req), Err(LlmError::ReplayExhausted(1))));
    }
}
