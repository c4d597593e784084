//! Command-line entry point: reproducible commands over the vocabulary,
//! trainer, evaluation suite, and remote adapter.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime error, 4 partial remote
//! failure. Outputs go to a fresh timestamped subdirectory of the configured
//! output directory unless `--overwrite` pins them in place.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::belief::{BeliefModel, ExactPosterior, NoisyPosterior};
use crate::concept::{
    generate_vocabulary, split_vocabulary, SplitAssignment, SplitLabel, Vocabulary,
};
use crate::config::{preset_arms, BeliefKind, ConfigError, Preset, RunConfig};
use crate::env::{save_jsonl, TrajectoryRecord};
use crate::eval::{
    bestofn_report, budget_curve, evaluate_policy, pass_at_k, report_curves, write_curve_csv,
};
use crate::llm::{
    play_remote_game, ChatBackend, ChatMessage, ChatRequest, HttpEndpoint, PromptTemplates,
    RemoteGameConfig, RemoteTrajectory, ReplayBackend,
};
use crate::policy::{warm_start_policy, Policy, PolicyCheckpoint, PolicyReadout, SoftmaxPolicy};
use crate::trainer::{train, write_metrics_csv, BeliefSource, TrainSetup};

#[derive(Parser)]
#[command(
    name = "beliefq",
    version,
    about = "Deterministic Twenty-Questions lab for belief-change credit assignment"
)]
pub struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into the output directory itself instead of a fresh timestamped
    /// subdirectory.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the vocabulary and split artifacts.
    Gen,
    /// Train a policy; a preset expands into named arms sharing the seed.
    Train {
        /// cia, starpo, ablation-lambda, ablation-norm, or ablation-kl.
        #[arg(long)]
        preset: Option<String>,
        /// Step-count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Vocabulary artifact; defaults to <output_dir>/vocab.json, else
        /// regenerates from the config.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: report, pass@k grid, and budget curve.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Paired-seed best-of-n intervention report.
    Bestofn {
        /// Candidate count override.
        #[arg(long)]
        n: Option<usize>,
        /// Evaluate this checkpoint instead of the warm-started policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Play natural-language games against remote endpoints.
    RemoteEval {
        /// Validate prompts and connectivity without playing.
        #[arg(long)]
        dry_run: bool,
        /// Re-drive recorded games offline from a games.json file.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
    Partial(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Partial(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::Partial(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

macro_rules! runtime_error {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_error!(
    crate::concept::VocabError,
    crate::env::EnvError,
    crate::policy::PolicyError,
    crate::trainer::TrainError,
    crate::eval::EvalError,
    crate::llm::LlmError,
    std::io::Error
);

/// Parse arguments, run the selected command, and map errors to exit codes.
pub fn run() -> u8 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;

    match cli.command {
        Command::Gen => cmd_gen(&cfg, cli.overwrite),
        Command::Train { preset, steps, vocab } => {
            cmd_train(&cfg, cli.overwrite, preset.as_deref(), steps, vocab.as_deref())
        }
        Command::Eval { checkpoint, vocab } => {
            cmd_eval(&cfg, cli.overwrite, &checkpoint, vocab.as_deref())
        }
        Command::Bestofn { n, checkpoint, vocab } => {
            cmd_bestofn(&cfg, cli.overwrite, n, checkpoint.as_deref(), vocab.as_deref())
        }
        Command::RemoteEval { dry_run, replay } => {
            cmd_remote_eval(&cfg, cli.overwrite, dry_run, replay.as_deref())
        }
    }
}

/// Fresh timestamped subdirectory, or the base itself under `--overwrite`.
fn resolve_out_dir(base: &Path, command: &str, overwrite: bool) -> Result<PathBuf, CliError> {
    if overwrite {
        std::fs::create_dir_all(base)?;
        return Ok(base.to_path_buf());
    }
    let epoch = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut suffix = 0u32;
    loop {
        let name = if suffix == 0 {
            format!("{epoch}-{command}")
        } else {
            format!("{epoch}-{command}-{suffix}")
        };
        let dir = base.join(name);
        if !dir.exists() {
            std::fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
        suffix += 1;
    }
}

fn build_vocab(cfg: &RunConfig) -> Result<(Vocabulary, SplitAssignment), CliError> {
    let vocab = generate_vocabulary(
        cfg.vocab_seed(),
        cfg.vocabulary.count,
        cfg.vocabulary.d,
        cfg.vocabulary.mode,
    )?;
    let splits = split_vocabulary(&vocab, cfg.splits.counts_for(vocab.len()), cfg.split_seed())?;
    Ok((vocab, splits))
}

/// Load the vocabulary artifact, or regenerate it deterministically from the
/// config when no artifact exists.
fn load_or_build_vocab(
    cfg: &RunConfig,
    explicit: Option<&Path>,
) -> Result<(Vocabulary, SplitAssignment), CliError> {
    if let Some(path) = explicit {
        return Ok(crate::concept::load_json(path)?);
    }
    let default_path = cfg.output_dir.join("vocab.json");
    if default_path.exists() {
        return Ok(crate::concept::load_json(&default_path)?);
    }
    build_vocab(cfg)
}

fn split_or_all(vocab: &Vocabulary, splits: &SplitAssignment, label: SplitLabel) -> Vec<usize> {
    let ids = splits.ids_in(label);
    if ids.is_empty() {
        vocab.ids().collect()
    } else {
        ids
    }
}

fn starting_policy(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    train_ids: &[usize],
) -> Result<SoftmaxPolicy, CliError> {
    if cfg.policy.warm_start.enabled {
        let mut ws = cfg.policy.warm_start.clone();
        ws.temperature = cfg.policy.temperature;
        Ok(warm_start_policy(vocab, train_ids, cfg.environment.turn_cap, &ws, cfg.warm_start_seed())?)
    } else {
        Ok(SoftmaxPolicy::zeros(cfg.policy.temperature))
    }
}

/// Resolve the configured belief backend against a fixed policy.
fn belief_for<'a>(
    cfg: &RunConfig,
    policy: &'a dyn Policy,
) -> Result<Box<dyn BeliefModel + 'a>, CliError> {
    match cfg.belief.backend {
        BeliefKind::Exact => Ok(Box::new(ExactPosterior)),
        BeliefKind::Noisy => Ok(Box::new(
            NoisyPosterior::new(cfg.belief.eta).map_err(|e| CliError::Config(e.to_string()))?,
        )),
        BeliefKind::PolicyReadout => Ok(Box::new(PolicyReadout::new(policy))),
        BeliefKind::Remote => Err(CliError::Config(
            "the remote belief backend is only available through remote-eval".into(),
        )),
    }
}

fn write_config_snapshot(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::write(dir.join("config.snapshot.json"), cfg.to_json())?;
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let dir = resolve_out_dir(&cfg.output_dir, "gen", overwrite)?;
    let (vocab, splits) = build_vocab(cfg)?;
    let path = dir.join("vocab.json");
    crate::concept::save_json(&path, &vocab, &splits)?;
    write_config_snapshot(cfg, &dir)?;
    println!(
        "wrote {} ({} concepts, d={}, splits rl_train={} validation={} test={})",
        path.display(),
        vocab.len(),
        vocab.attribute_count(),
        splits.ids_in(SplitLabel::RlTrain).len(),
        splits.ids_in(SplitLabel::Validation).len(),
        splits.ids_in(SplitLabel::Test).len(),
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    overwrite: bool,
    preset: Option<&str>,
    steps: Option<usize>,
    vocab_path: Option<&Path>,
) -> Result<(), CliError> {
    let dir = resolve_out_dir(&cfg.output_dir, "train", overwrite)?;
    let (vocab, splits) = load_or_build_vocab(cfg, vocab_path)?;
    let train_ids = split_or_all(&vocab, &splits, SplitLabel::RlTrain);
    let val_ids = split_or_all(&vocab, &splits, SplitLabel::Validation);

    let arms = match preset {
        Some(name) => preset_arms(name.parse::<Preset>()?, cfg),
        None => vec![("train".to_string(), cfg.clone())],
    };
    write_config_snapshot(cfg, &dir)?;

    for (name, mut arm) in arms {
        if let Some(s) = steps {
            arm.trainer.steps = s;
        }
        arm.trainer.seed = arm.trainer_seed();
        let policy = starting_policy(&arm, &vocab, &train_ids)?;
        // The readout source tracks the training policy as it moves; the
        // other backends are policy-independent.
        let belief_holder: Option<Box<dyn BeliefModel>> = match arm.belief.backend {
            BeliefKind::PolicyReadout => None,
            BeliefKind::Exact => Some(Box::new(ExactPosterior)),
            BeliefKind::Noisy => Some(Box::new(
                NoisyPosterior::new(arm.belief.eta)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            )),
            BeliefKind::Remote => {
                return Err(CliError::Config(
                    "the remote belief backend is only available through remote-eval".into(),
                ))
            }
        };
        let belief = match &belief_holder {
            Some(model) => BeliefSource::Model(model.as_ref()),
            None => BeliefSource::Readout,
        };
        let setup = TrainSetup {
            vocab: &vocab,
            train_ids: &train_ids,
            val_ids: &val_ids,
            turn_cap: arm.environment.turn_cap,
            belief,
            reward: &arm.reward,
        };
        let result = train(policy, &setup, &arm.trainer)?;

        let metrics_path = dir.join(format!("metrics_{name}.csv"));
        let file = std::fs::File::create(&metrics_path)?;
        write_metrics_csv(std::io::BufWriter::new(file), &result.metrics)?;
        for (step, ck) in &result.checkpoints {
            ck.save(&dir.join(format!("ck_{name}_{step:04}.json")))?;
        }
        PolicyCheckpoint::from_policy(&result.policy)
            .save(&dir.join(format!("policy_{name}.json")))?;
        let records: Vec<TrajectoryRecord> =
            result.final_validation.iter().map(TrajectoryRecord::from_trajectory).collect();
        save_jsonl(&dir.join(format!("trajectories_{name}.jsonl")), &records)?;

        let final_val = result
            .metrics
            .iter()
            .rev()
            .find(|r| r.split == "validation")
            .map(|r| r.stats.success_rate)
            .unwrap_or(f64::NAN);
        println!(
            "arm {name}: {} steps, final validation success {final_val:.4} -> {}",
            arm.trainer.steps,
            metrics_path.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    overwrite: bool,
    checkpoint: &Path,
    vocab_path: Option<&Path>,
) -> Result<(), CliError> {
    let dir = resolve_out_dir(&cfg.output_dir, "eval", overwrite)?;
    let (vocab, splits) = load_or_build_vocab(cfg, vocab_path)?;
    let policy = PolicyCheckpoint::load(checkpoint)?.into_policy()?;
    let concepts = split_or_all(&vocab, &splits, SplitLabel::Test);
    let belief = belief_for(cfg, &policy)?;

    let (report, trajectories) = evaluate_policy(
        &policy,
        &vocab,
        &concepts,
        cfg.evaluation.samples,
        &cfg.evaluation.k_grid,
        cfg.evaluation.mean_k,
        cfg.environment.turn_cap,
        belief.as_ref(),
        &cfg.reward,
        cfg.eval_seed(),
    )?;
    let budget = budget_curve(
        &policy,
        &vocab,
        &concepts,
        &cfg.evaluation.budgets,
        cfg.evaluation.budget_samples,
        cfg.eval_seed(),
    )?;

    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).unwrap())?;
    let file = std::fs::File::create(dir.join("curves.csv"))?;
    write_curve_csv(std::io::BufWriter::new(file), report_curves(&report, Some(&budget)))?;
    let records: Vec<TrajectoryRecord> =
        trajectories.iter().map(TrajectoryRecord::from_trajectory).collect();
    save_jsonl(&dir.join("eval_trajectories.jsonl"), &records)?;
    write_config_snapshot(cfg, &dir)?;

    println!(
        "evaluated {} concepts x {} samples: success {:.4}, mean@{} {:.4} +/- {:.4} -> {}",
        concepts.len(),
        cfg.evaluation.samples,
        report.success_rate,
        report.mean_at_k.k,
        report.mean_at_k.mean,
        report.mean_at_k.std,
        dir.display()
    );
    Ok(())
}

fn cmd_bestofn(
    cfg: &RunConfig,
    overwrite: bool,
    n: Option<usize>,
    checkpoint: Option<&Path>,
    vocab_path: Option<&Path>,
) -> Result<(), CliError> {
    let dir = resolve_out_dir(&cfg.output_dir, "bestofn", overwrite)?;
    let (vocab, splits) = load_or_build_vocab(cfg, vocab_path)?;
    let train_ids = split_or_all(&vocab, &splits, SplitLabel::RlTrain);
    let mut policy = match checkpoint {
        Some(path) => PolicyCheckpoint::load(path)?.into_policy()?,
        None => starting_policy(cfg, &vocab, &train_ids)?,
    };
    // Both intervention arms sample at the same experiment temperature.
    policy.temperature = cfg.evaluation.bestofn_temperature;
    let concepts = split_or_all(&vocab, &splits, SplitLabel::Validation);
    let belief = belief_for(cfg, &policy)?;
    let n = n.unwrap_or(cfg.evaluation.bestofn_n);

    let report = bestofn_report(
        &policy,
        &vocab,
        &concepts,
        belief.as_ref(),
        n,
        cfg.evaluation.bestofn_episodes,
        &cfg.bestofn_seeds(),
        cfg.environment.turn_cap,
    )?;
    std::fs::write(dir.join("bestofn.json"), serde_json::to_string_pretty(&report).unwrap())?;
    write_config_snapshot(cfg, &dir)?;

    for arm in &report.arms {
        println!(
            "seed {}: baseline {:.4} -> best-of-{n} {:.4} (delta {:+.4})",
            arm.seed, arm.baseline_rate, arm.selected_rate, arm.delta
        );
    }
    println!("mean delta {:+.4} -> {}", report.mean_delta, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct RemoteSecretOutcome {
    secret: String,
    attempts: usize,
    successes: usize,
}

#[derive(Serialize)]
struct RemoteReport {
    games: usize,
    errors: usize,
    success_rate: f64,
    pass_at_k: Vec<(usize, f64)>,
    per_secret: Vec<RemoteSecretOutcome>,
}

/// Aggregate completed games plus abort records into the remote report.
fn remote_report(
    cfg: &RunConfig,
    games: &[RemoteTrajectory],
    aborted: &[(String, u64, String)],
) -> Result<(Vec<TrajectoryRecord>, RemoteReport), CliError> {
    let mut records: Vec<TrajectoryRecord> = games.iter().map(RemoteTrajectory::to_record).collect();
    for (secret, seed, error) in aborted {
        records.push(TrajectoryRecord {
            secret_id: None,
            secret_name: Some(secret.clone()),
            turns: vec![],
            outcome: crate::env::Outcome::Failure,
            num_turns: 0,
            seed: *seed,
            error: Some(error.clone()),
        });
    }
    let mut per_secret: Vec<RemoteSecretOutcome> = Vec::new();
    for game in games {
        match per_secret.iter_mut().find(|s| s.secret == game.secret) {
            Some(slot) => {
                slot.attempts += 1;
                slot.successes += game.success() as usize;
            }
            None => per_secret.push(RemoteSecretOutcome {
                secret: game.secret.clone(),
                attempts: 1,
                successes: game.success() as usize,
            }),
        }
    }
    let total: usize = per_secret.iter().map(|s| s.attempts).sum();
    let wins: usize = per_secret.iter().map(|s| s.successes).sum();
    let mut pass = Vec::new();
    for &k in &cfg.evaluation.k_grid {
        if !per_secret.is_empty() && k >= 1 && per_secret.iter().all(|s| s.attempts >= k) {
            let mean = per_secret
                .iter()
                .map(|s| pass_at_k(s.attempts, s.successes, k))
                .sum::<Result<f64, _>>()?
                / per_secret.len() as f64;
            pass.push((k, mean));
        }
    }
    let report = RemoteReport {
        games: total,
        errors: aborted.len(),
        success_rate: wins as f64 / total.max(1) as f64,
        pass_at_k: pass,
        per_secret,
    };
    Ok((records, report))
}

fn write_remote_outputs(
    cfg: &RunConfig,
    dir: &Path,
    games: &[RemoteTrajectory],
    aborted: &[(String, u64, String)],
) -> Result<RemoteReport, CliError> {
    let (records, report) = remote_report(cfg, games, aborted)?;
    save_jsonl(&dir.join("transcripts.jsonl"), &records)?;
    std::fs::write(dir.join("games.json"), serde_json::to_string_pretty(games).unwrap())?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).unwrap())?;
    Ok(report)
}

fn cmd_remote_eval(
    cfg: &RunConfig,
    overwrite: bool,
    dry_run: bool,
    replay: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(games_path) = replay {
        // Offline replay: rebuild each game from its recorded exchanges.
        let recorded: Vec<RemoteTrajectory> =
            serde_json::from_str(&std::fs::read_to_string(games_path).map_err(CliError::from)?)
                .map_err(|e| CliError::Runtime(format!("unreadable games file: {e}")))?;
        let templates = match cfg.endpoints.as_ref().and_then(|e| e.templates_dir.as_ref()) {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::builtin(),
        };
        let dir = resolve_out_dir(&cfg.output_dir, "remote-replay", overwrite)?;
        let mut games = Vec::with_capacity(recorded.len());
        for original in &recorded {
            let (rq, rj) = ReplayBackend::from_trajectory(original);
            let game_cfg = RemoteGameConfig {
                turn_cap: original.turn_cap,
                seed: original.seed,
                ..RemoteGameConfig::default()
            };
            games.push(play_remote_game(&rq, &rj, &templates, &original.secret, &game_cfg)?);
        }
        let report = write_remote_outputs(cfg, &dir, &games, &[])?;
        println!(
            "replayed {} games: success {:.4} -> {}",
            report.games,
            report.success_rate,
            dir.display()
        );
        return Ok(());
    }

    let endpoints = cfg
        .endpoints
        .as_ref()
        .ok_or_else(|| CliError::Config("remote-eval needs an endpoints block".into()))?;
    let templates = match &endpoints.templates_dir {
        Some(dir) => PromptTemplates::from_dir(dir)?,
        None => PromptTemplates::builtin(),
    };
    templates.validate()?;
    let questioner = HttpEndpoint::new(endpoints.questioner.clone())?;
    let judge = HttpEndpoint::new(endpoints.judge.clone())?;

    if dry_run {
        for (name, endpoint) in [("questioner", &questioner), ("judge", &judge)] {
            let probe = ChatRequest {
                messages: vec![ChatMessage::user("Reply with the single word: ok")],
                temperature: 0.0,
                max_tokens: Some(4),
            };
            endpoint
                .chat(&probe)
                .map_err(|e| CliError::Runtime(format!("{name} endpoint probe failed: {e}")))?;
            println!("{name} endpoint reachable");
        }
        println!("templates valid; dry run complete");
        return Ok(());
    }

    if endpoints.secrets.is_empty() {
        return Err(CliError::Config("endpoints.secrets must list at least one secret".into()));
    }
    let dir = resolve_out_dir(&cfg.output_dir, "remote-eval", overwrite)?;
    write_config_snapshot(cfg, &dir)?;

    let mut games: Vec<RemoteTrajectory> = Vec::new();
    let mut aborted: Vec<(String, u64, String)> = Vec::new();
    for (si, secret) in endpoints.secrets.iter().enumerate() {
        for game in 0..endpoints.games_per_secret {
            let game_cfg = RemoteGameConfig {
                turn_cap: cfg.environment.turn_cap,
                questioner_temperature: endpoints.questioner.temperature,
                judge_temperature: endpoints.judge.temperature,
                elicit: endpoints.elicit,
                elicitation_mode: cfg.belief.elicitation_mode,
                seed: crate::seeding::derive_seed(
                    cfg.seed,
                    "remote-game",
                    (si * endpoints.games_per_secret + game) as u64,
                ),
            };
            match play_remote_game(&questioner, &judge, &templates, secret, &game_cfg) {
                Ok(traj) => games.push(traj),
                // Aborted episode: keep the error in the transcript and carry
                // on with the remaining games.
                Err(e) => aborted.push((secret.clone(), game_cfg.seed, e.to_string())),
            }
        }
    }

    let report = write_remote_outputs(cfg, &dir, &games, &aborted)?;
    println!(
        "played {} games ({} aborted): success {:.4} -> {}",
        report.games,
        report.errors,
        report.success_rate,
        dir.display()
    );
    if !aborted.is_empty() {
        return Err(CliError::Partial(format!(
            "{} of {} games aborted",
            aborted.len(),
            report.games + aborted.len()
        )));
    }
    Ok(())
}
