//! Shallow alpha-beta teacher used to generate supervised training games.
//!
//! The teacher scores root moves with a depth-limited negamax over a
//! material + piece-square evaluation, turns the scores into a softmax
//! policy, and plays a mixture of that policy and uniform random moves.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chess::{Color, GameResult, GameState, Move, Outcome, PieceKind, ResultCause, Square};
use crate::encoding::{absolute_move_to_index, PolicyIndex};

use super::{sparse_policy, GameRecord, PlyRecord};

/// Knobs for the teacher engine. Material is in pawn units, indexed
/// pawn/knight/bishop/rook/queen; the king carries no material term.
#[derive(Debug, Clone)]
pub struct TeacherConfig {
    /// Search depth in plies, at least 1.
    pub depth: u32,
    /// Material values for P, N, B, R, Q in pawn units.
    pub material: [f64; 5],
    /// Root softmax temperature in pawn units, strictly positive.
    pub tau: f64,
    /// Probability of ignoring the policy and playing uniform-random.
    pub epsilon: f64,
    /// Games longer than this many plies are adjudicated as draws.
    pub move_cap: usize,
}

impl Default for TeacherConfig {
    fn default() -> TeacherConfig {
        TeacherConfig {
            depth: 2,
            material: [1.0, 3.0, 3.0, 5.0, 9.0],
            tau: 1.0,
            epsilon: 0.1,
            move_cap: 300,
        }
    }
}

/// Score assigned to the side to move when it is checkmated, in pawn
/// units. Far above any material total, so mates dominate the softmax,
/// and tanh(MATE_SCORE / 4) saturates to 1.
pub const MATE_SCORE: f64 = 1000.0;

/// Divisor of the tanh reward squash, in pawn units. Maps a four-pawn
/// advantage to roughly 0.96.
pub const REWARD_SCALE: f64 = 4.0;

/// Piece-square bonuses in pawn units, indexed by `PieceKind::index()`
/// then square. Squares are from White's point of view with a1 = 0 and
/// h8 = 63 (each row below is one rank, the first row being rank 1);
/// Black reads the table through `Square::flip_rank`.
#[rustfmt::skip]
pub const PST: [[f64; 64]; 6] = [
    // Pawn: advance, hold the center, do not block the home bishops.
    [
        0.00,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00,
        0.05,  0.10,  0.10, -0.20, -0.20,  0.10,  0.10,  0.05,
        0.05, -0.05, -0.10,  0.00,  0.00, -0.10, -0.05,  0.05,
        0.00,  0.00,  0.00,  0.20,  0.20,  0.00,  0.00,  0.00,
        0.05,  0.05,  0.10,  0.25,  0.25,  0.10,  0.05,  0.05,
        0.10,  0.10,  0.20,  0.30,  0.30,  0.20,  0.10,  0.10,
        0.50,  0.50,  0.50,  0.50,  0.50,  0.50,  0.50,  0.50,
        0.00,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00,
    ],
    // Knight: centralize, avoid the rim.
    [
       -0.50, -0.40, -0.30, -0.30, -0.30, -0.30, -0.40, -0.50,
       -0.40, -0.20,  0.00,  0.05,  0.05,  0.00, -0.20, -0.40,
       -0.30,  0.05,  0.10,  0.15,  0.15,  0.10,  0.05, -0.30,
       -0.30,  0.00,  0.15,  0.20,  0.20,  0.15,  0.00, -0.30,
       -0.30,  0.05,  0.15,  0.20,  0.20,  0.15,  0.05, -0.30,
       -0.30,  0.00,  0.10,  0.15,  0.15,  0.10,  0.00, -0.30,
       -0.40, -0.20,  0.00,  0.00,  0.00,  0.00, -0.20, -0.40,
       -0.50, -0.40, -0.30, -0.30, -0.30, -0.30, -0.40, -0.50,
    ],
    // Bishop: long diagonals, stay off the back-rank corners.
    [
       -0.20, -0.10, -0.10, -0.10, -0.10, -0.10, -0.10, -0.20,
       -0.10,  0.05,  0.00,  0.00,  0.00,  0.00,  0.05, -0.10,
       -0.10,  0.10,  0.10,  0.10,  0.10,  0.10,  0.10, -0.10,
       -0.10,  0.00,  0.10,  0.10,  0.10,  0.10,  0.00, -0.10,
       -0.10,  0.05,  0.05,  0.10,  0.10,  0.05,  0.05, -0.10,
       -0.10,  0.00,  0.05,  0.10,  0.10,  0.05,  0.00, -0.10,
       -0.10,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.10,
       -0.20, -0.10, -0.10, -0.10, -0.10, -0.10, -0.10, -0.20,
    ],
    // Rook: seventh rank and central files.
    [
        0.00,  0.00,  0.00,  0.05,  0.05,  0.00,  0.00,  0.00,
       -0.05,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.05,
       -0.05,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.05,
       -0.05,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.05,
       -0.05,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.05,
       -0.05,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.05,
        0.05,  0.10,  0.10,  0.10,  0.10,  0.10,  0.10,  0.05,
        0.00,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00,
    ],
    // Queen: mild centralization, nothing adventurous.
    [
       -0.20, -0.10, -0.10, -0.05, -0.05, -0.10, -0.10, -0.20,
       -0.10,  0.00,  0.05,  0.00,  0.00,  0.00,  0.00, -0.10,
       -0.10,  0.05,  0.05,  0.05,  0.05,  0.05,  0.00, -0.10,
       -0.05,  0.00,  0.05,  0.05,  0.05,  0.05,  0.00, -0.05,
       -0.05,  0.00,  0.05,  0.05,  0.05,  0.05,  0.00, -0.05,
       -0.10,  0.00,  0.05,  0.05,  0.05,  0.05,  0.00, -0.10,
       -0.10,  0.00,  0.00,  0.00,  0.00,  0.00,  0.00, -0.10,
       -0.20, -0.10, -0.10, -0.05, -0.05, -0.10, -0.10, -0.20,
    ],
    // King: shelter behind the pawn line, shun the middle.
    [
        0.20,  0.30,  0.10,  0.00,  0.00,  0.10,  0.30,  0.20,
        0.20,  0.20,  0.00,  0.00,  0.00,  0.00,  0.20,  0.20,
       -0.10, -0.20, -0.20, -0.20, -0.20, -0.20, -0.20, -0.10,
       -0.20, -0.30, -0.30, -0.40, -0.40, -0.30, -0.30, -0.20,
       -0.30, -0.40, -0.40, -0.50, -0.50, -0.40, -0.40, -0.30,
       -0.30, -0.40, -0.40, -0.50, -0.50, -0.40, -0.40, -0.30,
       -0.30, -0.40, -0.40, -0.50, -0.50, -0.40, -0.40, -0.30,
       -0.30, -0.40, -0.40, -0.50, -0.50, -0.40, -0.40, -0.30,
    ],
];

fn piece_value(kind: PieceKind, material: &[f64; 5]) -> f64 {
    match kind {
        PieceKind::King => 0.0,
        other => material[other.index()],
    }
}

/// Static evaluation in pawn units from the side to move's perspective.
pub fn evaluate(state: &GameState, material: &[f64; 5]) -> f64 {
    let stm = state.side_to_move();
    let mut score = 0.0;
    for sq in Square::all() {
        if let Some((color, kind)) = state.piece_at(sq) {
            let table_sq = match color {
                Color::White => sq.index(),
                Color::Black => sq.flip_rank().index(),
            };
            let v = piece_value(kind, material) + PST[kind.index()][table_sq];
            score += if color == stm { v } else { -v };
        }
    }
    score
}

/// Negamax with alpha-beta, returning the exact minimax value when called
/// with an open window. Terminal and rule-draw detection happens at every
/// node that generates moves; depth-0 leaves are static evaluations only,
/// so mates are seen up to one ply short of the horizon.
fn negamax(state: &GameState, depth: u32, mut alpha: f64, beta: f64, material: &[f64; 5]) -> f64 {
    if depth == 0 {
        return evaluate(state, material);
    }
    let moves = state.legal_moves();
    if moves.is_empty() {
        return if state.in_check() { -MATE_SCORE } else { 0.0 };
    }
    if state.halfmove_clock() >= 100 || state.repetition_count() >= 3 {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for &m in &moves {
        let v = -negamax(&state.apply_legal(m), depth - 1, -beta, -alpha, material);
        if v > best {
            best = v;
        }
        if best > alpha {
            alpha = best;
        }
        if alpha >= beta {
            break;
        }
    }
    best
}

/// Exact root scores for every legal move, plus the position value
/// (their maximum). Children are searched with open windows so the
/// scores are true minimax values, not bounds.
pub fn root_scores(state: &GameState, cfg: &TeacherConfig) -> (Vec<Move>, Vec<f64>, f64) {
    let moves = state.legal_moves();
    let scores: Vec<f64> = moves
        .iter()
        .map(|&m| {
            -negamax(
                &state.apply_legal(m),
                cfg.depth - 1,
                f64::NEG_INFINITY,
                f64::INFINITY,
                &cfg.material,
            )
        })
        .collect();
    let value = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (moves, scores, value)
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let z: f64 = ws.iter().sum();
    ws.iter().map(|w| w / z).collect()
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        r -= w;
        if r <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn play_game(cfg: &TeacherConfig, seed: u64) -> GameRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = GameState::startpos();
    let initial_fen = state.to_fen();
    let mut plies = Vec::new();
    let result = loop {
        if let Some(r) = state.game_result() {
            break r;
        }
        if plies.len() >= cfg.move_cap {
            break GameResult {
                outcome: Outcome::Draw,
                cause: ResultCause::MoveCap,
            };
        }
        let stm = state.side_to_move();
        let (moves, scores, value) = root_scores(&state, cfg);
        let probs = softmax(&scores, cfg.tau);
        let mut entries: Vec<(PolicyIndex, f64, Move)> = moves
            .iter()
            .zip(&probs)
            .map(|(&m, &p)| (absolute_move_to_index(m, stm), p, m))
            .collect();
        entries.sort_by_key(|&(idx, _, _)| idx);
        let (pi, kept) = sparse_policy(&entries);
        let mv = if rng.random::<f64>() < cfg.epsilon {
            moves[rng.random_range(0..moves.len())]
        } else {
            let weights: Vec<f64> = kept.iter().map(|&(_, p, _)| p).collect();
            kept[sample_weighted(&mut rng, &weights)].2
        };
        plies.push(PlyRecord {
            index: absolute_move_to_index(mv, stm),
            stm,
            pi,
            r: (value / REWARD_SCALE).tanh() as f32,
        });
        state = state.apply_legal(mv);
    };
    GameRecord {
        initial_fen,
        plies,
        result,
    }
}

/// Play `n_games` teacher games from the starting position. Each game
/// owns an RNG seeded `seed + game_index`, so the output is independent
/// of scheduling and any subset can be regenerated in isolation.
pub fn teacher_generate(cfg: &TeacherConfig, seed: u64, n_games: usize) -> Vec<GameRecord> {
    assert!(cfg.depth >= 1, "teacher depth must be at least 1");
    assert!(cfg.tau > 0.0, "teacher temperature must be positive");
    assert!(
        (0.0..=1.0).contains(&cfg.epsilon),
        "epsilon must be a probability"
    );
    (0..n_games)
        .map(|i| play_game(cfg, seed.wrapping_add(i as u64)))
        .collect()
}
