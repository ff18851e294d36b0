//! Training data: game generation, target construction, and shard I/O.

mod shard;
mod teacher;

pub use shard::{read_shard, write_shard, SHARD_MAGIC, SHARD_VERSION};
pub use teacher::{evaluate, root_scores, teacher_generate, TeacherConfig, MATE_SCORE, PST};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chess::{
    parse_fen, Color, GameResult, GameState, HistoryWindow, Move, Outcome, ResultCause,
};
use crate::encoding::{
    absolute_move_to_index, encode_position, index_to_move, legal_mask, PolicyIndex,
};
use crate::losses::TargetSet;
use crate::model::Model;

/// One played ply: the move, the policy target behind it, and the
/// generator's reward estimate, all from the mover's perspective.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyRecord {
    /// Policy index of the move actually played.
    pub index: PolicyIndex,
    /// Side to move at this ply; redundant with the replay but cheap
    /// insurance against desynchronized records.
    pub stm: Color,
    /// Sparse policy distribution over legal indices, ascending.
    pub pi: Vec<(PolicyIndex, f32)>,
    /// Reward estimate in [-1, 1] from the mover's perspective.
    pub r: f32,
}

/// A complete game as generated, replayable from its initial FEN.
#[derive(Debug, Clone, PartialEq)]
pub struct GameRecord {
    pub initial_fen: String,
    pub plies: Vec<PlyRecord>,
    pub result: GameResult,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad shard magic")]
    BadMagic,
    #[error("unsupported shard version {0}")]
    BadVersion(u32),
    #[error("unsupported encoding version {0}")]
    BadEncodingVersion(u32),
    #[error("shard corrupt: {0}")]
    Corrupt(String),
    #[error("ply {ply}: {reason}")]
    BadRecord { ply: usize, reason: String },
    #[error("game {game}: {reason}")]
    BadGame { game: usize, reason: String },
    #[error("model evaluation failed: {0}")]
    Numeric(String),
}

/// Decay of the short-term reward average; 5/6 gives an expected
/// lookahead of 1/(1-lambda) = 6 plies.
pub const DEFAULT_LAMBDA: f64 = 5.0 / 6.0;

/// Probability mass below which recorded policy entries are dropped
/// (and the rest renormalized). Keeps shards compact; the distortion is
/// under 1e-4 total mass per ply.
const PI_RECORD_MIN: f64 = 1e-4;

/// Sort sparse policy entries by index, drop sub-threshold mass, and
/// renormalize. Returns the recorded f32 distribution and the kept
/// entries with their renormalized f64 probabilities for sampling.
pub(crate) fn sparse_policy(
    entries: &[(PolicyIndex, f64, Move)],
) -> (Vec<(PolicyIndex, f32)>, Vec<(PolicyIndex, f64, Move)>) {
    let kept_mass: f64 = entries
        .iter()
        .filter(|&&(_, p, _)| p >= PI_RECORD_MIN)
        .map(|&(_, p, _)| p)
        .sum();
    // A proper distribution over at most 218 moves has a maximum of at
    // least 1/218, far above the threshold; this guard only matters for
    // degenerate inputs.
    if kept_mass == 0.0 {
        let total: f64 = entries.iter().map(|&(_, p, _)| p).sum();
        let kept: Vec<(PolicyIndex, f64, Move)> = entries
            .iter()
            .map(|&(idx, p, m)| (idx, p / total, m))
            .collect();
        let pi = kept.iter().map(|&(idx, p, _)| (idx, p as f32)).collect();
        return (pi, kept);
    }
    let kept: Vec<(PolicyIndex, f64, Move)> = entries
        .iter()
        .filter(|&&(_, p, _)| p >= PI_RECORD_MIN)
        .map(|&(idx, p, m)| (idx, p / kept_mass, m))
        .collect();
    let pi = kept.iter().map(|&(idx, p, _)| (idx, p as f32)).collect();
    (pi, kept)
}

/// Weights of the short-term target: per-reward weights (1-lambda) *
/// lambda^k for k in 0..n, plus the outcome weight. The outcome weight is
/// the arithmetic residual 1 - sum(reward weights) rather than lambda^n,
/// so the full set sums to one exactly in floating point.
pub fn short_term_weights(n: usize, lambda: f64) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(n);
    let mut pow = 1.0f64;
    for _ in 0..n {
        weights.push((1.0 - lambda) * pow);
        pow *= lambda;
    }
    let reward_mass: f64 = weights.iter().sum();
    (weights, 1.0 - reward_mass)
}

/// Exponentially weighted average of future rewards backed off to the
/// final outcome: q_st = (1-lambda) * sum_k lambda^k * rewards[k] +
/// lambda^n * z. All inputs must already be oriented to the perspective
/// of the player at the first reward's ply; `build_targets` handles the
/// per-ply sign alternation.
pub fn short_term_target(rewards: &[f32], z: f32, lambda: f64) -> f32 {
    assert!(lambda > 0.0 && lambda < 1.0, "lambda must be in (0, 1)");
    let (weights, z_weight) = short_term_weights(rewards.len(), lambda);
    let mut acc = 0.0f64;
    for (w, &r) in weights.iter().zip(rewards) {
        acc += w * r as f64;
    }
    acc += z_weight * z as f64;
    // A convex combination of values in [-1, 1]; the clamp only trims
    // float dust at the endpoints.
    (acc as f32).clamp(-1.0, 1.0)
}

/// Replay a record from its initial FEN, checking the side-to-move
/// markers, move legality, reward range, and policy support. Returns the
/// pre-move history window of every ply when asked.
fn replay_validate(game: &GameRecord, keep: bool) -> Result<Vec<HistoryWindow>, DataError> {
    let bad = |ply: usize, reason: String| DataError::BadRecord { ply, reason };
    let start = parse_fen(&game.initial_fen)
        .map_err(|e| bad(0, format!("bad initial fen: {e}")))?;
    let mut window = HistoryWindow::start(start);
    let mut windows = Vec::with_capacity(if keep { game.plies.len() } else { 0 });
    for (t, ply) in game.plies.iter().enumerate() {
        let state = window.current();
        if ply.stm != state.side_to_move() {
            return Err(bad(t, format!("stored {:?} to move, position disagrees", ply.stm)));
        }
        if !(-1.0..=1.0).contains(&ply.r) {
            return Err(bad(t, format!("reward {} outside [-1, 1]", ply.r)));
        }
        let mask = legal_mask(state);
        if !mask.get(ply.index.index()) {
            return Err(bad(t, format!("move index {} is not legal here", ply.index.index())));
        }
        let mut sum = 0.0f64;
        for &(idx, p) in &ply.pi {
            if !mask.get(idx.index()) {
                return Err(bad(t, format!("pi index {} off the legal mask", idx.index())));
            }
            if !(p > 0.0) {
                return Err(bad(t, format!("pi probability {p} not positive")));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(bad(t, format!("pi sums to {sum}")));
        }
        let mv = index_to_move(ply.index, state);
        let next = state.apply_move(mv).map_err(|e| bad(t, e.to_string()))?;
        if keep {
            windows.push(window.clone());
        }
        window = window.advanced(next);
    }
    Ok(windows)
}

pub(crate) fn validate_record(game: &GameRecord) -> Result<(), DataError> {
    replay_validate(game, false).map(|_| ())
}

/// Per-ply training targets with `DEFAULT_LAMBDA` for the short-term
/// reward average.
pub fn build_targets(game: &GameRecord) -> Result<Vec<(HistoryWindow, TargetSet)>, DataError> {
    build_targets_lambda(game, DEFAULT_LAMBDA)
}

/// Per-ply (input window, target) pairs. The result and q targets come
/// from the final outcome reoriented to each ply's mover; q_st backs the
/// stored rewards off to the outcome with decay `lambda`.
pub fn build_targets_lambda(
    game: &GameRecord,
    lambda: f64,
) -> Result<Vec<(HistoryWindow, TargetSet)>, DataError> {
    let windows = replay_validate(game, true)?;
    let n = game.plies.len();
    let mut out = Vec::with_capacity(n);
    for (t, window) in windows.into_iter().enumerate() {
        let ply = &game.plies[t];
        let z = game.result.score_for(ply.stm);
        let result = if z > 0.0 {
            [1.0, 0.0, 0.0]
        } else if z < 0.0 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        // Stored rewards are each from their own mover's perspective;
        // odd offsets from t belong to the opponent and flip sign.
        let aligned: Vec<f32> = (t..n)
            .map(|x| if (x - t) % 2 == 0 { game.plies[x].r } else { -game.plies[x].r })
            .collect();
        let q_st = short_term_target(&aligned, z, lambda);
        out.push((
            window,
            TargetSet {
                pi: ply.pi.clone(),
                result,
                q: z,
                q_st,
            },
        ));
    }
    Ok(out)
}

/// Search-free self-play: sample moves from the model's masked policy at
/// the given temperature (0 means argmax, ties to the lowest index).
/// Records the model's policy as pi and its q estimate as the reward.
pub fn selfplay_generate(
    model: &Model,
    temperature: f64,
    seed: u64,
    n_games: usize,
    move_cap: usize,
) -> Result<Vec<GameRecord>, DataError> {
    (0..n_games)
        .into_par_iter()
        .map(|i| selfplay_game(model, temperature, seed.wrapping_add(i as u64), move_cap))
        .collect()
}

fn selfplay_game(
    model: &Model,
    temperature: f64,
    seed: u64,
    move_cap: usize,
) -> Result<GameRecord, DataError> {
    assert!(temperature >= 0.0, "temperature must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut window = HistoryWindow::start(GameState::startpos());
    let initial_fen = window.current().to_fen();
    let mut plies = Vec::new();
    let result = loop {
        let state = window.current().clone();
        if let Some(r) = state.game_result() {
            break r;
        }
        if plies.len() >= move_cap {
            break GameResult {
                outcome: Outcome::Draw,
                cause: ResultCause::MoveCap,
            };
        }
        let mask = legal_mask(&state);
        let out = model
            .forward(&encode_position(&window), &mask, false)
            .map_err(|e| DataError::Numeric(e.to_string()))?;
        let dense = out.policy.expect("legal mask is non-empty");
        let probs = dense.data();
        let entries: Vec<(PolicyIndex, f64, Move)> = mask
            .indices()
            .map(|idx| (idx, probs[idx.index()] as f64, index_to_move(idx, &state)))
            .collect();
        let (pi, kept) = sparse_policy(&entries);
        let mv = sample_tempered(&mut rng, &kept, temperature);
        plies.push(PlyRecord {
            index: absolute_move_to_index(mv, state.side_to_move()),
            stm: state.side_to_move(),
            pi,
            r: out.q as f32,
        });
        let next = state.apply_legal(mv);
        window = window.advanced(next);
    };
    Ok(GameRecord {
        initial_fen,
        plies,
        result,
    })
}

/// Sample from probabilities raised to 1/temperature (in log space, so
/// cold temperatures do not underflow). Temperature zero is argmax with
/// ties broken toward the lowest policy index.
fn sample_tempered(
    rng: &mut ChaCha8Rng,
    kept: &[(PolicyIndex, f64, Move)],
    temperature: f64,
) -> Move {
    if temperature == 0.0 {
        let mut best = kept[0];
        for &e in &kept[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        return best.2;
    }
    let logs: Vec<f64> = kept.iter().map(|&(_, p, _)| p.ln() / temperature).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        r -= w;
        if r <= 0.0 {
            return kept[i].2;
        }
    }
    kept[kept.len() - 1].2
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Partition games into (train, test) by hashing each game's position in
/// the input order against the seed. Game-granular, so no position of a
/// test game ever reaches the train side, and deterministic per seed.
pub fn split_games(
    games: Vec<GameRecord>,
    test_fraction: f64,
    seed: u64,
) -> (Vec<GameRecord>, Vec<GameRecord>) {
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must be in (0, 1)"
    );
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, game) in games.into_iter().enumerate() {
        let h = splitmix64(seed ^ splitmix64(i as u64));
        // Top 53 bits as a uniform draw in [0, 1).
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < test_fraction {
            test.push(game);
        } else {
            train.push(game);
        }
    }
    (train, test)
}

/// Endless shuffled stream of training positions. Games are visited in a
/// reshuffled order every epoch and their positions pass through a
/// bounded reservoir buffer, so memory stays at O(buffer) regardless of
/// dataset size. Deterministic for a fixed seed and game list.
///
/// Records must already be validated (read_shard and the generators
/// guarantee this); an invalid record is a caller bug and panics.
pub struct PositionStream {
    games: Vec<GameRecord>,
    lambda: f64,
    order: Vec<u32>,
    next_game: usize,
    buffer: Vec<(HistoryWindow, TargetSet)>,
    capacity: usize,
    rng: ChaCha8Rng,
    total_plies: usize,
}

impl PositionStream {
    pub fn new(games: Vec<GameRecord>, lambda: f64, seed: u64, buffer: usize) -> PositionStream {
        let total_plies = games.iter().map(|g| g.plies.len()).sum();
        let order = (0..games.len() as u32).collect();
        PositionStream {
            games,
            lambda,
            order,
            next_game: 0,
            buffer: Vec::new(),
            capacity: buffer.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            total_plies,
        }
    }

    fn refill(&mut self) {
        while self.buffer.len() < self.capacity {
            if self.next_game == self.order.len() {
                self.next_game = 0;
                // Fisher-Yates reshuffle of the game order per epoch.
                for i in (1..self.order.len()).rev() {
                    let j = self.rng.random_range(0..=i);
                    self.order.swap(i, j);
                }
            }
            let game = &self.games[self.order[self.next_game] as usize];
            self.next_game += 1;
            let positions =
                build_targets_lambda(game, self.lambda).expect("invalid game record in stream");
            self.buffer.extend(positions);
        }
    }
}

impl Iterator for PositionStream {
    type Item = (HistoryWindow, TargetSet);

    fn next(&mut self) -> Option<(HistoryWindow, TargetSet)> {
        if self.total_plies == 0 {
            return None;
        }
        self.refill();
        let i = self.rng.random_range(0..self.buffer.len());
        Some(self.buffer.swap_remove(i))
    }
}

/// Split games and wire the train side into a shuffled position stream;
/// the test side is materialized once, unshuffled.
pub fn split_and_shuffle(
    games: Vec<GameRecord>,
    test_fraction: f64,
    lambda: f64,
    seed: u64,
    buffer: usize,
) -> (PositionStream, Vec<(HistoryWindow, TargetSet)>) {
    let (train, test) = split_games(games, test_fraction, seed);
    let test_positions = test
        .iter()
        .flat_map(|g| build_targets_lambda(g, lambda).expect("invalid game record in test split"))
        .collect();
    (
        PositionStream::new(train, lambda, splitmix64(seed), buffer),
        test_positions,
    )
}
