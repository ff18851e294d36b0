//! Agents and the harness around them: opening-book matches, puzzle
//! suites, Elo estimation from score rates, and per-move FLOPS accounting.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::AdError;
use crate::chess::{
    parse_fen, Color, GameResult, GameState, HistoryWindow, Move, Outcome, ResultCause,
};
use crate::data::splitmix64;
use crate::encoding::{encode_position, index_to_move, legal_mask, PolicyIndex};
use crate::model::{count_flops, value_agent_flops, Model};
use crate::training::argmax_masked;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("position is terminal: {0}")]
    Terminal(String),
    #[error("replay script exhausted at ply {0}")]
    ScriptExhausted(usize),
    #[error("agent {agent} chose illegal move {move_text} in {fen}")]
    IllegalAgentMove {
        agent: String,
        move_text: String,
        fen: String,
    },
    #[error("opening line {line}: {reason}")]
    BadOpening { line: usize, reason: String },
    #[error("puzzle {id}: {reason}")]
    BadPuzzle { id: String, reason: String },
    #[error("puzzle file: {0}")]
    BadPuzzleFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numeric(#[from] AdError),
}

/// A move-selection strategy. Every kind is deterministic given the
/// position, ply and seeds; model-backed kinds break ties by lowest
/// policy index.
pub enum Agent<'a> {
    /// Argmax of the legal-masked policy head.
    Policy { model: &'a Model, name: String },
    /// Depth-1 search: evaluates each legal successor and keeps the best.
    /// `use_q` scores successors by the scalar value head instead of the
    /// result head.
    Value {
        model: &'a Model,
        name: String,
        use_q: bool,
    },
    /// Uniform over legal moves, keyed by position hash and ply so that
    /// decisions are stateless and order-independent.
    Random { name: String, seed: u64 },
    /// Follows a fixed line indexed by ply from the game's start position.
    Replay { name: String, line: Vec<Move> },
}

impl<'a> Agent<'a> {
    pub fn policy(model: &'a Model, name: &str) -> Agent<'a> {
        Agent::Policy {
            model,
            name: name.to_string(),
        }
    }

    pub fn value(model: &'a Model, name: &str) -> Agent<'a> {
        Agent::Value {
            model,
            name: name.to_string(),
            use_q: false,
        }
    }

    pub fn value_q(model: &'a Model, name: &str) -> Agent<'a> {
        Agent::Value {
            model,
            name: name.to_string(),
            use_q: true,
        }
    }

    pub fn random(name: &str, seed: u64) -> Agent<'static> {
        Agent::Random {
            name: name.to_string(),
            seed,
        }
    }

    pub fn replay(name: &str, line: Vec<Move>) -> Agent<'static> {
        Agent::Replay {
            name: name.to_string(),
            line,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Agent::Policy { name, .. }
            | Agent::Value { name, .. }
            | Agent::Random { name, .. }
            | Agent::Replay { name, .. } => name,
        }
    }

    /// Picks a move for the side to move. `ply` counts decisions from the
    /// game's start position; `seed` is mixed into random-agent choices so
    /// distinct games diverge.
    pub fn choose(
        &self,
        history: &HistoryWindow,
        ply: usize,
        seed: u64,
    ) -> Result<Move, ArenaError> {
        let state = history.current();
        if state.game_result().is_some() {
            return Err(ArenaError::Terminal(state.to_fen()));
        }
        match self {
            Agent::Policy { model, .. } => policy_move(model, history),
            Agent::Value { model, use_q, .. } => value_move(model, history, *use_q),
            Agent::Random { seed: own, .. } => {
                let mask = legal_mask(state);
                let n = mask.count() as u64;
                let k = splitmix64(own ^ splitmix64(seed ^ state.zobrist() ^ ply as u64)) % n;
                let idx = mask.indices().nth(k as usize).unwrap();
                Ok(index_to_move(idx, state))
            }
            Agent::Replay { line, .. } => match line.get(ply) {
                Some(&m) => Ok(m),
                None => Err(ArenaError::ScriptExhausted(ply)),
            },
        }
    }
}

/// Argmax over the legal-masked policy. A forced move is returned without
/// consulting the model.
pub fn policy_move(model: &Model, history: &HistoryWindow) -> Result<Move, ArenaError> {
    let state = history.current();
    if state.game_result().is_some() {
        return Err(ArenaError::Terminal(state.to_fen()));
    }
    let mask = legal_mask(state);
    if mask.count() == 1 {
        let idx = mask.indices().next().unwrap();
        return Ok(index_to_move(idx, state));
    }
    let out = model.forward(&encode_position(history), &mask, false)?;
    let probs = out.policy.expect("non-terminal position has masked policy");
    let best = argmax_masked(probs.data(), &mask).unwrap();
    Ok(index_to_move(PolicyIndex::new(best).unwrap(), state))
}

/// Depth-1 value maximization. Successors ending the game short-circuit
/// the model: a checkmate scores 1 (only the mover can be mating) and any
/// draw scores 0. Other successors score the opponent's expected loss,
/// P(opponent loses) + 0.5 P(draw) from the result head, or (1 - q)/2 from
/// the scalar head when `use_q` is set. Ties keep the lowest policy index.
pub fn value_move(model: &Model, history: &HistoryWindow, use_q: bool) -> Result<Move, ArenaError> {
    value_move_counted(model, history, use_q).map(|(m, _)| m)
}

/// `value_move` plus the number of model evaluations spent, which equals
/// the number of legal non-terminal successors.
pub(crate) fn value_move_counted(
    model: &Model,
    history: &HistoryWindow,
    use_q: bool,
) -> Result<(Move, usize), ArenaError> {
    let state = history.current();
    if state.game_result().is_some() {
        return Err(ArenaError::Terminal(state.to_fen()));
    }
    let mask = legal_mask(state);
    let mut evals = 0usize;
    let mut best: Option<(Move, f64)> = None;
    for idx in mask.indices() {
        let m = index_to_move(idx, state);
        let child = state.apply_legal(m);
        let score = match child.game_result() {
            Some(r) if r.outcome == Outcome::Draw => 0.0,
            Some(_) => 1.0,
            None => {
                let w = history.advanced(child.clone());
                let out = model.forward(&encode_position(&w), &legal_mask(&child), false)?;
                evals += 1;
                if use_q {
                    (1.0 - out.q as f64) / 2.0
                } else {
                    out.wdl[2] as f64 + 0.5 * out.wdl[1] as f64
                }
            }
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((m, score));
        }
    }
    Ok((best.unwrap().0, evals))
}

/// Match setup: every opening is played twice with colors swapped. `games`
/// may cut the schedule to a prefix (an odd count leaves the last opening
/// played once, with the first agent as White).
#[derive(Debug, Clone)]
pub struct MatchConfig {
    pub openings: Vec<GameState>,
    pub games: usize,
    pub move_cap: usize,
}

impl MatchConfig {
    pub fn new(openings: Vec<GameState>, move_cap: usize) -> MatchConfig {
        let games = 2 * openings.len();
        MatchConfig {
            openings,
            games,
            move_cap,
        }
    }
}

/// One FEN per line; blank lines and lines starting with `#` are skipped.
pub fn load_openings(path: &Path) -> Result<Vec<GameState>, ArenaError> {
    let text = fs::read_to_string(path)?;
    let mut openings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let state = parse_fen(line).map_err(|e| ArenaError::BadOpening {
            line: i + 1,
            reason: e.to_string(),
        })?;
        openings.push(state);
    }
    Ok(openings)
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchGame {
    pub opening: usize,
    pub white: String,
    pub black: String,
    pub moves: Vec<String>,
    pub result: String,
    pub cause: String,
    /// Points for the first agent: 1.0, 0.5 or 0.0.
    pub score_a: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub games: Vec<MatchGame>,
    /// Twice the first agent's points, an exact integer.
    pub half_points: u64,
    /// half_points / (2 * games).
    pub score: f64,
}

fn cause_name(cause: ResultCause) -> &'static str {
    match cause {
        ResultCause::Checkmate => "checkmate",
        ResultCause::Stalemate => "stalemate",
        ResultCause::FiftyMove => "fifty-move",
        ResultCause::Threefold => "threefold",
        ResultCause::InsufficientMaterial => "insufficient-material",
        ResultCause::MoveCap => "move-cap",
    }
}

fn outcome_name(outcome: Outcome) -> &'static str {
    match outcome {
        Outcome::WhiteWin => "1-0",
        Outcome::BlackWin => "0-1",
        Outcome::Draw => "1/2-1/2",
    }
}

fn play_game(
    white: &Agent,
    black: &Agent,
    opening: &GameState,
    move_cap: usize,
    seed: u64,
) -> Result<(Vec<Move>, GameResult), ArenaError> {
    let mut window = HistoryWindow::start(opening.clone());
    let mut moves = Vec::new();
    let result = loop {
        if let Some(r) = window.current().game_result() {
            break r;
        }
        if moves.len() >= move_cap {
            break GameResult {
                outcome: Outcome::Draw,
                cause: ResultCause::MoveCap,
            };
        }
        let agent = match window.current().side_to_move() {
            Color::White => white,
            Color::Black => black,
        };
        let m = agent.choose(&window, moves.len(), seed)?;
        let next = window
            .current()
            .apply_move(m)
            .map_err(|e| ArenaError::IllegalAgentMove {
                agent: agent.name().to_string(),
                move_text: e.move_text,
                fen: e.fen,
            })?;
        moves.push(m);
        window = window.advanced(next);
    };
    Ok((moves, result))
}

/// Plays the paired schedule and scores it for `a`. Game seeds depend on
/// the opening, not on which agent holds which color, so swapping the
/// argument order replays the identical games and yields the mirrored
/// score exactly.
pub fn play_match(
    a: &Agent,
    b: &Agent,
    cfg: &MatchConfig,
    seed: u64,
) -> Result<MatchReport, ArenaError> {
    assert!(!cfg.openings.is_empty(), "match needs at least one opening");
    assert!(
        cfg.games <= 2 * cfg.openings.len(),
        "game count exceeds the paired opening schedule"
    );
    let games = (0..cfg.games)
        .into_par_iter()
        .map(|g| {
            let opening = g / 2;
            let a_is_white = g % 2 == 0;
            let game_seed = splitmix64(seed ^ splitmix64(opening as u64 + 1));
            let (white, black) = if a_is_white { (a, b) } else { (b, a) };
            let (moves, result) =
                play_game(white, black, &cfg.openings[opening], cfg.move_cap, game_seed)?;
            let a_color = if a_is_white { Color::White } else { Color::Black };
            let score_a = (result.score_for(a_color) + 1.0) / 2.0;
            Ok(MatchGame {
                opening,
                white: white.name().to_string(),
                black: black.name().to_string(),
                moves: moves.iter().map(|m| m.to_string()).collect(),
                result: outcome_name(result.outcome).to_string(),
                cause: cause_name(result.cause).to_string(),
                score_a,
            })
        })
        .collect::<Result<Vec<MatchGame>, ArenaError>>()?;
    let half_points = games.iter().map(|g| (2.0 * g.score_a) as u64).sum::<u64>();
    let score = half_points as f64 / (2 * cfg.games) as f64;
    Ok(MatchReport {
        games,
        half_points,
        score,
    })
}

#[derive(Debug, Clone)]
pub struct Puzzle {
    pub id: String,
    pub fen: String,
    pub moves: Vec<Move>,
    pub rating: i32,
}

/// CSV with a header naming at least PuzzleId, FEN, Moves and Rating;
/// extra columns are ignored. Moves are space-separated UCI.
pub fn load_puzzles(path: &Path) -> Result<Vec<Puzzle>, ArenaError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ArenaError::BadPuzzleFile(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| ArenaError::BadPuzzleFile(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ArenaError::BadPuzzleFile(format!("missing column {name}")))
    };
    let (ci, cf, cm, cr) = (col("PuzzleId")?, col("FEN")?, col("Moves")?, col("Rating")?);
    let mut puzzles = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ArenaError::BadPuzzleFile(e.to_string()))?;
        let field = |c: usize| {
            record
                .get(c)
                .ok_or_else(|| ArenaError::BadPuzzleFile(format!("row {}: short record", row + 1)))
        };
        let id = field(ci)?.to_string();
        let fen = field(cf)?.to_string();
        let moves = field(cm)?
            .split_whitespace()
            .map(Move::from_str)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ArenaError::BadPuzzle {
                id: id.clone(),
                reason: e.to_string(),
            })?;
        if moves.is_empty() {
            return Err(ArenaError::BadPuzzle {
                id,
                reason: "empty solution".to_string(),
            });
        }
        let rating = field(cr)?
            .parse::<i32>()
            .map_err(|e| ArenaError::BadPuzzle {
                id: id.clone(),
                reason: format!("bad rating: {e}"),
            })?;
        puzzles.push(Puzzle {
            id,
            fen,
            moves,
            rating,
        });
    }
    Ok(puzzles)
}

/// Lichess convention: solution move 0 sets up the puzzle, the agent must
/// reproduce moves 1, 3, 5, ... with the even-indexed replies forced.
pub fn solve_puzzle(agent: &Agent, puzzle: &Puzzle) -> Result<bool, ArenaError> {
    solve_puzzle_with(agent, puzzle, true)
}

/// `setup_first = false` treats the solution as a raw sequence started by
/// the agent.
pub fn solve_puzzle_with(
    agent: &Agent,
    puzzle: &Puzzle,
    setup_first: bool,
) -> Result<bool, ArenaError> {
    if puzzle.moves.is_empty() {
        return Err(ArenaError::BadPuzzle {
            id: puzzle.id.clone(),
            reason: "empty solution".to_string(),
        });
    }
    let state = parse_fen(&puzzle.fen).map_err(|e| ArenaError::BadPuzzle {
        id: puzzle.id.clone(),
        reason: e.to_string(),
    })?;
    let mut window = HistoryWindow::start(state);
    let agent_parity = usize::from(setup_first);
    for (i, &m) in puzzle.moves.iter().enumerate() {
        if window.current().game_result().is_some() {
            return Err(ArenaError::BadPuzzle {
                id: puzzle.id.clone(),
                reason: format!("solution continues past the end at ply {i}"),
            });
        }
        if i % 2 == agent_parity {
            let picked = agent.choose(&window, i, 0)?;
            if picked != m {
                return Ok(false);
            }
        }
        let next = window
            .current()
            .apply_move(m)
            .map_err(|e| ArenaError::BadPuzzle {
                id: puzzle.id.clone(),
                reason: format!("illegal solution move {} at ply {i}", e.move_text),
            })?;
        window = window.advanced(next);
    }
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub lo: i32,
    pub hi: i32,
    pub total: usize,
    pub solved: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PuzzleReport {
    pub total: usize,
    pub solved: usize,
    pub accuracy: f64,
    pub buckets: Vec<BucketReport>,
}

/// Accuracy overall and per 200-rating bucket over [1000, 3000); ratings
/// outside the range land in the edge buckets.
pub fn puzzle_report(agent: &Agent, puzzles: &[Puzzle]) -> Result<PuzzleReport, ArenaError> {
    assert!(!puzzles.is_empty(), "puzzle report needs at least one puzzle");
    let results = puzzles
        .par_iter()
        .map(|p| solve_puzzle(agent, p))
        .collect::<Result<Vec<bool>, ArenaError>>()?;
    let mut totals = [0usize; 10];
    let mut solveds = [0usize; 10];
    let mut solved_all = 0usize;
    for (p, &solved) in puzzles.iter().zip(&results) {
        let b = if p.rating < 1000 {
            0
        } else {
            (((p.rating - 1000) / 200) as usize).min(9)
        };
        totals[b] += 1;
        if solved {
            solveds[b] += 1;
            solved_all += 1;
        }
    }
    let buckets = (0..10)
        .map(|b| BucketReport {
            lo: 1000 + 200 * b as i32,
            hi: 1200 + 200 * b as i32,
            total: totals[b],
            solved: solveds[b],
            accuracy: if totals[b] == 0 {
                0.0
            } else {
                solveds[b] as f64 / totals[b] as f64
            },
        })
        .collect();
    Ok(PuzzleReport {
        total: puzzles.len(),
        solved: solved_all,
        accuracy: solved_all as f64 / puzzles.len() as f64,
        buckets,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EloEstimate {
    /// Score rate after clamping.
    pub score: f64,
    pub games: u64,
    /// Elo difference D = -400 log10(1/s - 1).
    pub elo: f64,
    /// 95% interval on D via the normal approximation on the score rate.
    pub lo: f64,
    pub hi: f64,
}

fn elo_diff(s: f64) -> f64 {
    // ln s - ln (1-s) negates exactly under s <-> 1-s, which keeps the
    // antisymmetry D(s) = -D(1-s) bitwise where 1-s is exact.
    (s.ln() - (1.0 - s).ln()) * (400.0 / std::f64::consts::LN_10)
}

/// Clamps the score rate to [1/(2n), 1 - 1/(2n)] so shutouts stay finite.
pub fn elo_from_score(s: f64, n: u64) -> EloEstimate {
    assert!(n >= 1, "need at least one game");
    assert!((0.0..=1.0).contains(&s), "score rate out of range: {s}");
    let eps = 1.0 / (2.0 * n as f64);
    let sc = s.clamp(eps, 1.0 - eps);
    let se = (sc * (1.0 - sc) / n as f64).sqrt();
    let lo = elo_diff((sc - 1.96 * se).clamp(eps, 1.0 - eps));
    let hi = elo_diff((sc + 1.96 * se).clamp(eps, 1.0 - eps));
    EloEstimate {
        score: sc,
        games: n,
        elo: elo_diff(sc),
        lo,
        hi,
    }
}

/// FLOPs per move decision: one forward pass for the policy agent, twenty
/// for the value agent, none for the model-free kinds.
pub fn agent_flops(agent: &Agent) -> u64 {
    match agent {
        Agent::Policy { model, .. } => count_flops(&model.config),
        Agent::Value { model, .. } => value_agent_flops(&model.config),
        Agent::Random { .. } | Agent::Replay { .. } => 0,
    }
}
