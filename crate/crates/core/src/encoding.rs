//! Model input encoding and the policy index space.
//!
//! Everything here is expressed in mover-perspective coordinates: when black
//! is to move the board is flipped rank-wise and piece ownership is swapped,
//! so the model always sees "my pawns move up the board". The 112-feature
//! token layout is a versioned binary contract shared with the shard format.

use crate::chess::{Color, GameState, HistoryWindow, Move, PieceKind, Square, HISTORY_LEN};

pub const TOKENS: usize = 64;
pub const FEATURES: usize = 112;
/// Version of the feature layout written into shard headers.
pub const ENCODING_VERSION: u32 = 1;

/// 64 tokens x 112 features, token-major. Token `t` is the mover-perspective
/// square `t` (left to right, then bottom to top).
#[derive(Debug, Clone, PartialEq)]
pub struct InputEncoding {
    data: Vec<f32>,
}

impl InputEncoding {
    #[inline]
    pub fn get(&self, token: usize, feature: usize) -> f32 {
        self.data[token * FEATURES + feature]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Feature offsets within a token; see `encode_position`.
mod feat {
    pub const HISTORY: usize = 0; // 8 plies x 12-piece one-hot
    pub const CASTLING: usize = 96; // mover KS, mover QS, opp KS, opp QS
    pub const EN_PASSANT: usize = 100;
    pub const HALFMOVE: usize = 101;
    pub const REPETITION: usize = 102; // 8 flags, one per history ply
    pub const ONE: usize = 110;
}

#[inline]
fn to_perspective(sq: Square, stm: Color) -> Square {
    match stm {
        Color::White => sq,
        Color::Black => sq.flip_rank(),
    }
}

pub fn encode_position(history: &HistoryWindow) -> InputEncoding {
    let current = history.current();
    let mover = current.side_to_move();
    let mut data = vec![0f32; TOKENS * FEATURES];

    for k in 0..HISTORY_LEN {
        let Some(st) = history.entry(k) else { continue };
        for sq in Square::all() {
            if let Some((color, kind)) = st.piece_at(sq) {
                let tok = to_perspective(sq, mover).index();
                let owner = if color == mover { 0 } else { 6 };
                data[tok * FEATURES + feat::HISTORY + k * 12 + owner + kind.index()] = 1.0;
            }
        }
    }

    let rights = current.castling_rights();
    let castling = [
        rights.kingside(mover),
        rights.queenside(mover),
        rights.kingside(mover.opponent()),
        rights.queenside(mover.opponent()),
    ];
    let ep_token = current
        .en_passant()
        .map(|sq| to_perspective(sq, mover).index());
    // Clamped at 1.28 to bound the feature; in legal play the game ends at
    // a clock of 100, so the clamp is never active.
    let halfmove = f32::from(current.halfmove_clock().min(128)) / 100.0;
    let reps = history.repetition_flags();

    for tok in 0..TOKENS {
        let row = &mut data[tok * FEATURES..(tok + 1) * FEATURES];
        for (i, &on) in castling.iter().enumerate() {
            row[feat::CASTLING + i] = f32::from(on);
        }
        if ep_token == Some(tok) {
            row[feat::EN_PASSANT] = 1.0;
        }
        row[feat::HALFMOVE] = halfmove;
        for (k, &rep) in reps.iter().enumerate() {
            row[feat::REPETITION + k] = f32::from(rep);
        }
        row[feat::ONE] = 1.0;
    }

    InputEncoding { data }
}

/// Index into the 4352-slot policy logit space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PolicyIndex(u16);

pub const POLICY_SIZE: usize = 4352;
const PROMO_BASE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("policy index {0} out of range, space has {POLICY_SIZE} slots")]
pub struct IndexRangeError(pub usize);

impl PolicyIndex {
    pub fn new(i: usize) -> Result<PolicyIndex, IndexRangeError> {
        if i < POLICY_SIZE {
            Ok(PolicyIndex(i as u16))
        } else {
            Err(IndexRangeError(i))
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Map a move in mover-perspective coordinates to its policy index.
/// Non-promotions use from*64+to; promotions live in a trailing block keyed
/// by (from_file, to_file, piece).
pub fn move_to_index(m: Move) -> PolicyIndex {
    let i = match m.promotion {
        None => m.from.index() * 64 + m.to.index(),
        Some(piece) => {
            let code = PieceKind::PROMOTIONS
                .iter()
                .position(|&p| p == piece)
                .expect("promotion piece");
            PROMO_BASE + (m.from.file() as usize * 8 + m.to.file() as usize) * 4 + code
        }
    };
    PolicyIndex(i as u16)
}

/// Flip a move between absolute and mover-perspective coordinates.
#[inline]
pub fn move_to_perspective(m: Move, stm: Color) -> Move {
    Move {
        from: to_perspective(m.from, stm),
        to: to_perspective(m.to, stm),
        promotion: m.promotion,
    }
}

/// Policy index of an absolute move played by `stm`.
#[inline]
pub fn absolute_move_to_index(m: Move, stm: Color) -> PolicyIndex {
    move_to_index(move_to_perspective(m, stm))
}

/// Decode an index into the absolute move it denotes in `state`. Promotion
/// indices imply the penultimate-to-last rank traversal.
pub fn index_to_move(i: PolicyIndex, state: &GameState) -> Move {
    let idx = i.index();
    let mover = if idx < PROMO_BASE {
        Move::new(Square::new((idx / 64) as u8), Square::new((idx % 64) as u8))
    } else {
        let p = idx - PROMO_BASE;
        let from_file = (p / 32) as u8;
        let to_file = ((p / 4) % 8) as u8;
        let piece = PieceKind::PROMOTIONS[p % 4];
        Move::promotion(
            Square::from_file_rank(from_file, 6),
            Square::from_file_rank(to_file, 7),
            piece,
        )
    };
    move_to_perspective(mover, state.side_to_move())
}

/// Boolean mask over the policy space, true exactly at legal-move indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegalMask {
    mask: Vec<bool>,
}

impl LegalMask {
    /// Mask marking exactly the given indices legal.
    pub fn from_indices(indices: &[usize]) -> LegalMask {
        let mut mask = vec![false; POLICY_SIZE];
        for &i in indices {
            mask[i] = true;
        }
        LegalMask { mask }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.mask[i]
    }

    #[inline]
    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Indices of the legal moves, ascending.
    pub fn indices(&self) -> impl Iterator<Item = PolicyIndex> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|&(_, &b)| b)
            .map(|(i, _)| PolicyIndex(i as u16))
    }
}

pub fn legal_mask(state: &GameState) -> LegalMask {
    let mut mask = vec![false; POLICY_SIZE];
    let stm = state.side_to_move();
    for m in state.legal_moves() {
        mask[absolute_move_to_index(m, stm).index()] = true;
    }
    LegalMask { mask }
}
