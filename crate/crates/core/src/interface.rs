//! Command-line entry points: run configuration, the subcommand bodies
//! behind the `chessformer` binary, and the UCI session loop.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{
    elo_from_score, load_openings, load_puzzles, play_match, puzzle_report, solve_puzzle, Agent,
    ArenaError, EloEstimate, MatchConfig, MatchReport, PuzzleReport,
};
use crate::attention::PosRepKind;
use crate::chess::{parse_fen, Color, FenError, GameState, HistoryWindow, Move, Square};
use crate::data::{
    read_shard, selfplay_generate, splitmix64, teacher_generate, write_shard, DataError,
    GameRecord, TeacherConfig, DEFAULT_LAMBDA,
};
use crate::encoding::legal_mask;
use crate::introspect::{capture, to_heatmap, to_json, IntrospectError};
use crate::losses::{LossWeights, TargetSet};
use crate::model::{
    load_checkpoint, CheckpointError, ConfigError, Model, ModelConfig,
};
use crate::training::{
    evaluate, train, Schedule, TrainConfig, TrainError, MAX_GRAD_NORM,
};

/// Subcommand failure grouped by exit code: 1 usage, 2 data or format,
/// 3 numeric.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<FenError> for CliError {
    fn from(e: FenError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        match e {
            DataError::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ArenaError> for CliError {
    fn from(e: ArenaError) -> CliError {
        match e {
            ArenaError::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::NonFiniteGrad(_)
            | TrainError::NonFiniteLoss { .. }
            | TrainError::Ad(_)
            | TrainError::Loss(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IntrospectError> for CliError {
    fn from(e: IntrospectError) -> CliError {
        match e {
            IntrospectError::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Which model-backed agent a subcommand should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentChoice {
    Policy,
    Value,
}

impl AgentChoice {
    fn name(self) -> &'static str {
        match self {
            AgentChoice::Policy => "policy",
            AgentChoice::Value => "value",
        }
    }
}

fn default_interval() -> u64 {
    500
}

fn default_games() -> usize {
    1000
}

fn default_buffer() -> usize {
    4096
}

fn default_temperature() -> f64 {
    1.0
}

/// The JSON run configuration. Unknown keys are rejected everywhere and
/// every path is resolved relative to the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub arena: ArenaSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub steps: u64,
    pub schedule: ScheduleSpec,
    pub swa: SwaSection,
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaSection {
    pub start: u64,
    pub interval: u64,
}

/// Either a named schedule ("cf_6m", "cf_240m", "desk") or explicit
/// [step, rate] breakpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Named(String),
    Points(Vec<(u64, f64)>),
}

impl ScheduleSpec {
    pub fn build(&self, steps: u64) -> Result<Schedule, CliError> {
        match self {
            ScheduleSpec::Named(name) => match name.as_str() {
                "cf_6m" => Ok(Schedule::cf_6m()),
                "cf_240m" => Ok(Schedule::cf_240m()),
                "desk" => {
                    if steps < 10 {
                        return Err(CliError::Data(
                            "desk schedule needs at least 10 steps".to_string(),
                        ));
                    }
                    Ok(Schedule::desk(steps))
                }
                other => Err(CliError::Data(format!("unknown schedule {other}"))),
            },
            ScheduleSpec::Points(points) => {
                let schedule = Schedule {
                    points: points.clone(),
                };
                schedule.validate().map_err(CliError::from)?;
                Ok(schedule)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Teacher,
    Selfplay,
    Shards,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Shard files for source = "shards".
    #[serde(default)]
    pub paths: Vec<String>,
    #[serde(default)]
    pub teacher: TeacherSection,
    pub test_fraction: f64,
    /// Games to generate for the generating sources.
    #[serde(default = "default_games")]
    pub games: usize,
    /// Shuffle buffer size for the training stream.
    #[serde(default = "default_buffer")]
    pub buffer: usize,
    /// Checkpoint whose model plays the self-play games; a fresh
    /// seed-initialized model when absent.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Self-play sampling temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub depth: u32,
    pub material: [f64; 5],
    pub tau: f64,
    pub epsilon: f64,
    pub move_cap: usize,
}

impl Default for TeacherSection {
    fn default() -> TeacherSection {
        let t = TeacherConfig::default();
        TeacherSection {
            depth: t.depth,
            material: t.material,
            tau: t.tau,
            epsilon: t.epsilon,
            move_cap: t.move_cap,
        }
    }
}

impl TeacherSection {
    fn to_config(&self) -> TeacherConfig {
        TeacherConfig {
            depth: self.depth,
            material: self.material,
            tau: self.tau,
            epsilon: self.epsilon,
            move_cap: self.move_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaSection {
    pub openings: String,
    pub move_cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub checkpoints: String,
    pub logs: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |s: &mut String| {
            let p = Path::new(s);
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        };
        for p in &mut self.data.paths {
            fix(p);
        }
        if let Some(c) = &mut self.data.checkpoint {
            fix(c);
        }
        fix(&mut self.arena.openings);
        fix(&mut self.paths.checkpoints);
        fix(&mut self.paths.logs);
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.train.batch == 0 || self.train.steps == 0 {
            return Err(CliError::Data(
                "train.batch and train.steps must be positive".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data.test_fraction) {
            return Err(CliError::Data(format!(
                "test_fraction {} outside [0,1]",
                self.data.test_fraction
            )));
        }
        if self.data.buffer == 0 {
            return Err(CliError::Data("data.buffer must be positive".to_string()));
        }
        if self.data.source == DataSource::Shards && self.data.paths.is_empty() {
            return Err(CliError::Data(
                "source \"shards\" needs data.paths".to_string(),
            ));
        }
        Ok(())
    }

    fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            steps: self.train.steps,
            start_step: 0,
            batch_size: self.train.batch,
            schedule: self.train.schedule.build(self.train.steps)?,
            weights: LossWeights::default(),
            max_grad_norm: MAX_GRAD_NORM,
            swa_start: self.train.swa.start,
            swa_interval: self.train.swa.interval,
            eval_interval: self.train.eval_interval,
            checkpoint_interval: self.train.checkpoint_interval,
        })
    }
}

fn generate_games(cfg: &RunConfig, n_games: usize, seed: u64) -> Result<Vec<GameRecord>, CliError> {
    match cfg.data.source {
        DataSource::Teacher => Ok(teacher_generate(&cfg.data.teacher.to_config(), seed, n_games)),
        DataSource::Selfplay => {
            let model = match &cfg.data.checkpoint {
                Some(p) => load_checkpoint(Path::new(p))?,
                None => Model::init(cfg.model.clone(), seed)?,
            };
            let games = selfplay_generate(
                &model,
                cfg.data.temperature,
                seed,
                n_games,
                cfg.data.teacher.move_cap,
            )?;
            Ok(games)
        }
        DataSource::Shards => Err(CliError::Usage(
            "source \"shards\" cannot generate games".to_string(),
        )),
    }
}

fn build_games(cfg: &RunConfig) -> Result<Vec<GameRecord>, CliError> {
    match cfg.data.source {
        DataSource::Shards => {
            let mut games = Vec::new();
            for p in &cfg.data.paths {
                games.extend(read_shard(Path::new(p))?);
            }
            Ok(games)
        }
        _ => generate_games(cfg, cfg.data.games, cfg.train.seed),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatagenSummary {
    pub games: usize,
    pub mean_plies: f64,
    pub out: PathBuf,
}

pub fn cmd_datagen(config_path: &Path, games: usize, out: &Path) -> Result<DatagenSummary, CliError> {
    if games == 0 {
        return Err(CliError::Usage("--games must be positive".to_string()));
    }
    let cfg = RunConfig::load(config_path)?;
    let records = generate_games(&cfg, games, cfg.train.seed)?;
    let plies: usize = records.iter().map(|g| g.plies.len()).sum();
    write_shard(&records, out)?;
    Ok(DatagenSummary {
        games: records.len(),
        mean_plies: plies as f64 / records.len() as f64,
        out: out.to_path_buf(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub swa_written: bool,
}

pub fn cmd_train(config_path: &Path) -> Result<TrainSummary, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let games = build_games(&cfg)?;
    let (mut stream, test) = crate::data::split_and_shuffle(
        games,
        cfg.data.test_fraction,
        DEFAULT_LAMBDA,
        cfg.train.seed,
        cfg.data.buffer,
    );
    let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let tc = cfg.train_config()?;
    let ckdir = PathBuf::from(&cfg.paths.checkpoints);
    let logdir = PathBuf::from(&cfg.paths.logs);
    fs::create_dir_all(&ckdir)?;
    fs::create_dir_all(&logdir)?;
    let metrics = logdir.join("train.jsonl");
    let mut jsonl = fs::File::create(&metrics)?;
    let out = train(&mut model, &mut stream, &test, &tc, Some(&mut jsonl), Some(&ckdir))?;
    Ok(TrainSummary {
        steps: tc.steps,
        final_loss: out.metrics.last().map(|r| r.loss).unwrap_or(f64::NAN),
        metrics,
        checkpoints: ckdir,
        swa_written: out.swa.is_some(),
    })
}

/// Hashes every batch of positions flowing to the trainer so ablation
/// variants can prove they saw identical data.
struct HashedStream<S> {
    inner: S,
    batch: usize,
    filled: usize,
    acc: u64,
    log: Vec<u64>,
}

impl<S> HashedStream<S> {
    fn new(inner: S, batch: usize) -> HashedStream<S> {
        HashedStream {
            inner,
            batch,
            filled: 0,
            acc: 0,
            log: Vec::new(),
        }
    }
}

impl<S: Iterator<Item = (HistoryWindow, TargetSet)>> Iterator for HashedStream<S> {
    type Item = (HistoryWindow, TargetSet);

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.inner.next()?;
        self.acc = splitmix64(self.acc ^ item.0.current().zobrist());
        self.filled += 1;
        if self.filled == self.batch {
            self.log.push(self.acc);
            self.acc = 0;
            self.filled = 0;
        }
        Some(item)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub posrep: String,
    pub steps: u64,
    pub policy_accuracy: f64,
    pub policy_loss: f64,
    pub wdl_loss: f64,
    pub q_l2_loss: f64,
    pub batch_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub steps: u64,
    pub games: usize,
    pub batches_identical: bool,
    pub variants: Vec<VariantReport>,
}

fn posrep_name(kind: PosRepKind) -> &'static str {
    match kind {
        PosRepKind::Absolute => "absolute",
        PosRepKind::RelativeBias => "relative-bias",
        PosRepKind::Shaw => "shaw",
    }
}

/// Trains the three position representations on identical data and
/// reports held-out metrics of the final models. The JSON report lands at
/// `out` (default logs/ablate.json).
pub fn cmd_ablate(config_path: &Path, out: Option<&Path>) -> Result<AblateReport, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let games = build_games(&cfg)?;
    let tc = cfg.train_config()?;
    let ckdir = PathBuf::from(&cfg.paths.checkpoints);
    let logdir = PathBuf::from(&cfg.paths.logs);
    fs::create_dir_all(&ckdir)?;
    fs::create_dir_all(&logdir)?;
    let mut variants = Vec::new();
    let mut hash_logs: Vec<Vec<u64>> = Vec::new();
    for posrep in PosRepKind::ALL {
        let name = posrep_name(posrep);
        let mut mc = cfg.model.clone();
        mc.posrep = posrep;
        let (stream, test) = crate::data::split_and_shuffle(
            games.clone(),
            cfg.data.test_fraction,
            DEFAULT_LAMBDA,
            cfg.train.seed,
            cfg.data.buffer,
        );
        let mut hashed = HashedStream::new(stream, cfg.train.batch);
        let mut model = Model::init(mc, cfg.train.seed)?;
        let vdir = ckdir.join(format!("ablate-{name}"));
        fs::create_dir_all(&vdir)?;
        let mut jsonl = fs::File::create(logdir.join(format!("ablate-{name}.jsonl")))?;
        train(&mut model, &mut hashed, &test, &tc, Some(&mut jsonl), Some(&vdir))?;
        let eval = evaluate(&model, &test)?;
        let batch_hash = hashed.log.iter().fold(0u64, |a, &h| splitmix64(a ^ h));
        variants.push(VariantReport {
            posrep: name.to_string(),
            steps: tc.steps,
            policy_accuracy: eval.policy_accuracy,
            policy_loss: eval.policy_loss,
            wdl_loss: eval.wdl_loss,
            q_l2_loss: eval.q_l2_loss,
            batch_hash,
        });
        hash_logs.push(hashed.log);
    }
    let batches_identical = hash_logs.iter().all(|l| *l == hash_logs[0]);
    if !batches_identical {
        return Err(CliError::Data(
            "ablation variants saw different training batches".to_string(),
        ));
    }
    let report = AblateReport {
        steps: tc.steps,
        games: cfg.data.games,
        batches_identical,
        variants,
    };
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| logdir.join("ablate.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Fixed-width text table over the variant rows.
pub fn format_ablate_table(report: &AblateReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:>6} {:>10} {:>12} {:>10} {:>10}\n",
        "posrep", "steps", "accuracy", "policy", "wdl", "q_l2"
    ));
    for v in &report.variants {
        s.push_str(&format!(
            "{:<14} {:>6} {:>10.4} {:>12.4} {:>10.4} {:>10.4}\n",
            v.posrep, v.steps, v.policy_accuracy, v.policy_loss, v.wdl_loss, v.q_l2_loss
        ));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct PuzzleCmdReport {
    pub agent: String,
    /// Replay-the-solution accuracy over the same file; 1.0 for any valid
    /// puzzle set.
    pub oracle_accuracy: Option<f64>,
    pub report: PuzzleReport,
}

pub fn cmd_puzzles(
    checkpoint: &Path,
    puzzles_path: &Path,
    kind: AgentChoice,
    oracle_selftest: bool,
) -> Result<PuzzleCmdReport, CliError> {
    let puzzles = load_puzzles(puzzles_path)?;
    if puzzles.is_empty() {
        return Err(CliError::Data("no puzzles in file".to_string()));
    }
    let oracle_accuracy = if oracle_selftest {
        let mut solved = 0usize;
        for p in &puzzles {
            let oracle = Agent::replay("oracle", p.moves.clone());
            if solve_puzzle(&oracle, p)? {
                solved += 1;
            }
        }
        Some(solved as f64 / puzzles.len() as f64)
    } else {
        None
    };
    let model = load_checkpoint(checkpoint)?;
    let agent = match kind {
        AgentChoice::Policy => Agent::policy(&model, kind.name()),
        AgentChoice::Value => Agent::value(&model, kind.name()),
    };
    let report = puzzle_report(&agent, &puzzles)?;
    Ok(PuzzleCmdReport {
        agent: kind.name().to_string(),
        oracle_accuracy,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchCmdReport {
    pub a: String,
    pub b: String,
    pub games: usize,
    pub elo: EloEstimate,
    pub report: MatchReport,
}

fn side_model(spec: &str) -> Result<Option<Model>, CliError> {
    if spec == "random" {
        Ok(None)
    } else {
        Ok(Some(load_checkpoint(Path::new(spec))?))
    }
}

fn side_agent<'m>(
    spec: &str,
    kind: AgentChoice,
    model: &'m Option<Model>,
    salt: u64,
) -> Agent<'m> {
    match model {
        Some(m) => {
            let stem = Path::new(spec)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            let name = format!("{stem}:{}", kind.name());
            match kind {
                AgentChoice::Policy => Agent::policy(m, &name),
                AgentChoice::Value => Agent::value(m, &name),
            }
        }
        None => Agent::random("random", salt),
    }
}

/// `a` and `b` are checkpoint paths or the literal "random". Openings come
/// from `--openings` or from the config's arena section.
#[allow(clippy::too_many_arguments)]
pub fn cmd_match(
    a: &str,
    kind_a: AgentChoice,
    b: &str,
    kind_b: AgentChoice,
    openings_path: Option<&Path>,
    config_path: Option<&Path>,
    games: Option<usize>,
    move_cap: Option<usize>,
    seed: u64,
) -> Result<MatchCmdReport, CliError> {
    let (openings_file, cap) = match (openings_path, config_path) {
        (Some(p), _) => (p.to_path_buf(), move_cap.unwrap_or(300)),
        (None, Some(c)) => {
            let cfg = RunConfig::load(c)?;
            (
                PathBuf::from(cfg.arena.openings),
                move_cap.unwrap_or(cfg.arena.move_cap),
            )
        }
        (None, None) => {
            return Err(CliError::Usage(
                "match needs --openings or --config".to_string(),
            ))
        }
    };
    let openings = load_openings(&openings_file)?;
    if openings.is_empty() {
        return Err(CliError::Data(format!(
            "no openings in {}",
            openings_file.display()
        )));
    }
    let mut cfg = MatchConfig::new(openings, cap);
    if let Some(n) = games {
        if n == 0 || n > cfg.games {
            return Err(CliError::Usage(format!(
                "--games must be in 1..={} for this opening book",
                cfg.games
            )));
        }
        cfg.games = n;
    }
    let model_a = side_model(a)?;
    let model_b = side_model(b)?;
    let agent_a = side_agent(a, kind_a, &model_a, splitmix64(seed ^ 0xa));
    let agent_b = side_agent(b, kind_b, &model_b, splitmix64(seed ^ 0xb));
    let report = play_match(&agent_a, &agent_b, &cfg, seed)?;
    let elo = elo_from_score(report.score, cfg.games as u64);
    Ok(MatchCmdReport {
        a: agent_a.name().to_string(),
        b: agent_b.name().to_string(),
        games: cfg.games,
        elo,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnSummary {
    pub fen: String,
    pub json: Option<PathBuf>,
    pub ppm: Option<PathBuf>,
}

/// "e4" -> Square. Board coordinates, white's view.
pub fn parse_square(s: &str) -> Option<Square> {
    let b = s.as_bytes();
    if b.len() != 2 {
        return None;
    }
    let file = b[0].checked_sub(b'a')?;
    let rank = b[1].checked_sub(b'1')?;
    if file < 8 && rank < 8 {
        Some(Square::from_file_rank(file, rank))
    } else {
        None
    }
}

/// Attention tokens are mover-relative; a board square maps to its token
/// through a rank flip when black is to move.
pub fn query_token(square: Square, stm: Color) -> Square {
    match stm {
        Color::White => square,
        Color::Black => square.flip_rank(),
    }
}

pub fn cmd_attn(
    checkpoint: &Path,
    fen: &str,
    json_out: Option<&Path>,
    heatmap: Option<(usize, usize, &str, &Path)>,
) -> Result<AttnSummary, CliError> {
    let model = load_checkpoint(checkpoint)?;
    let state = parse_fen(fen)?;
    let stm = state.side_to_move();
    let dump = capture(&model, &HistoryWindow::start(state))?;
    if let Some(p) = json_out {
        fs::write(p, to_json(&dump))?;
    }
    let mut ppm = None;
    if let Some((layer, head, square, path)) = heatmap {
        let sq = parse_square(square)
            .ok_or_else(|| CliError::Usage(format!("bad square name {square}")))?;
        to_heatmap(&dump, layer, head, query_token(sq, stm), path)?;
        ppm = Some(path.to_path_buf());
    }
    Ok(AttnSummary {
        fen: dump.fen,
        json: json_out.map(Path::to_path_buf),
        ppm,
    })
}

/// The UCI subset: uci, isready, ucinewgame, position, go, quit; unknown
/// commands are ignored. Time controls are ignored, every "go" answers
/// immediately. Illegal "position" commands diagnose to `err` and leave
/// the session position unchanged.
pub fn uci_session<R: BufRead, W: Write, E: Write>(
    model: &Model,
    kind: AgentChoice,
    input: R,
    mut out: W,
    mut err: E,
) -> io::Result<()> {
    let mut window = HistoryWindow::start(GameState::startpos());
    let mut ply = 0usize;
    for line in input.lines() {
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first().copied() {
            Some("uci") => {
                writeln!(out, "id name chessformer")?;
                writeln!(out, "id author chessformer")?;
                writeln!(out, "uciok")?;
            }
            Some("isready") => writeln!(out, "readyok")?,
            Some("ucinewgame") => {
                window = HistoryWindow::start(GameState::startpos());
                ply = 0;
            }
            Some("position") => match parse_position(&tokens[1..]) {
                Ok((w, p)) => {
                    window = w;
                    ply = p;
                }
                Err(e) => writeln!(err, "error: {e}")?,
            },
            Some("go") => {
                if window.current().game_result().is_some()
                    || legal_mask(window.current()).count() == 0
                {
                    writeln!(out, "bestmove 0000")?;
                } else {
                    let agent = match kind {
                        AgentChoice::Policy => Agent::policy(model, "uci"),
                        AgentChoice::Value => Agent::value(model, "uci"),
                    };
                    match agent.choose(&window, ply, 0) {
                        Ok(m) => writeln!(out, "bestmove {m}")?,
                        Err(e) => {
                            writeln!(err, "error: {e}")?;
                            writeln!(out, "bestmove 0000")?;
                        }
                    }
                }
            }
            Some("quit") => break,
            _ => {}
        }
        out.flush()?;
    }
    Ok(())
}

fn parse_position(tokens: &[&str]) -> Result<(HistoryWindow, usize), String> {
    let (base, rest): (GameState, &[&str]) = match tokens.first().copied() {
        Some("startpos") => (GameState::startpos(), &tokens[1..]),
        Some("fen") => {
            let end = tokens
                .iter()
                .position(|&t| t == "moves")
                .unwrap_or(tokens.len());
            let fen = tokens[1..end].join(" ");
            let state = parse_fen(&fen).map_err(|e| format!("bad fen {fen:?}: {e}"))?;
            (state, &tokens[end..])
        }
        _ => return Err("position needs startpos or fen".to_string()),
    };
    let moves: &[&str] = match rest.first().copied() {
        Some("moves") => &rest[1..],
        _ => &[],
    };
    let mut window = HistoryWindow::start(base);
    let mut ply = 0usize;
    for t in moves {
        let m: Move = t.parse().map_err(|_| format!("bad move {t}"))?;
        let next = window
            .current()
            .apply_move(m)
            .map_err(|e| format!("illegal move {} in {}", e.move_text, e.fen))?;
        window = window.advanced(next);
        ply += 1;
    }
    Ok((window, ply))
}
