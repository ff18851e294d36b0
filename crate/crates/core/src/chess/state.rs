//! Position state, move application, termination detection and repetition
//! tracking. `GameState` is an immutable value: `apply_move` returns a new
//! state and repetition history is shared structurally through an `Arc` chain.

use super::bitboard::{bishop_attacks, bit, lsb, rook_attacks, BitIter, Bitboard, TABLES};
use super::zobrist::ZOBRIST;
use super::{CastlingRights, Color, GameResult, Move, Outcome, PieceKind, ResultCause, Square};
use std::sync::Arc;

/// Piece placement: per-color/per-kind bitboards plus a mailbox for lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct Board {
    pub pieces: [[Bitboard; 6]; 2],
    pub occ: [Bitboard; 2],
    /// 0 = empty, otherwise 1 + color*6 + kind.
    mailbox: [u8; 64],
}

impl Board {
    pub(super) fn empty() -> Board {
        Board {
            pieces: [[0; 6]; 2],
            occ: [0; 2],
            mailbox: [0; 64],
        }
    }

    #[inline]
    pub(super) fn piece_at(&self, sq: Square) -> Option<(Color, PieceKind)> {
        let code = self.mailbox[sq.index()];
        if code == 0 {
            return None;
        }
        let color = if code <= 6 { Color::White } else { Color::Black };
        Some((color, PieceKind::ALL[((code - 1) % 6) as usize]))
    }

    pub(super) fn put(&mut self, sq: Square, color: Color, kind: PieceKind) {
        debug_assert!(self.mailbox[sq.index()] == 0);
        self.pieces[color.index()][kind.index()] |= bit(sq);
        self.occ[color.index()] |= bit(sq);
        self.mailbox[sq.index()] = 1 + color.index() as u8 * 6 + kind.index() as u8;
    }

    fn remove(&mut self, sq: Square) -> (Color, PieceKind) {
        let (color, kind) = self.piece_at(sq).expect("remove from empty square");
        self.pieces[color.index()][kind.index()] &= !bit(sq);
        self.occ[color.index()] &= !bit(sq);
        self.mailbox[sq.index()] = 0;
        (color, kind)
    }

    #[inline]
    pub(super) fn all(&self) -> Bitboard {
        self.occ[0] | self.occ[1]
    }

    #[inline]
    pub(super) fn king_square(&self, color: Color) -> Square {
        lsb(self.pieces[color.index()][PieceKind::King.index()])
    }

    /// Bitboard of `by`-colored pieces attacking `sq` under occupancy `occ`.
    pub(super) fn attackers_to(&self, sq: Square, by: Color, occ: Bitboard) -> Bitboard {
        let t = &*TABLES;
        let them = &self.pieces[by.index()];
        let mut att = t.pawn_attacks[by.opponent().index()][sq.index()]
            & them[PieceKind::Pawn.index()];
        att |= t.knight[sq.index()] & them[PieceKind::Knight.index()];
        att |= t.king[sq.index()] & them[PieceKind::King.index()];
        let queens = them[PieceKind::Queen.index()];
        att |= rook_attacks(sq, occ) & (them[PieceKind::Rook.index()] | queens);
        att |= bishop_attacks(sq, occ) & (them[PieceKind::Bishop.index()] | queens);
        att
    }

    #[inline]
    pub(super) fn is_attacked(&self, sq: Square, by: Color, occ: Bitboard) -> bool {
        self.attackers_to(sq, by, occ) != 0
    }
}

/// Position identity for repetition detection: placement, side to move,
/// castling rights and en-passant availability (FIDE definition).
#[derive(Debug, Clone, PartialEq, Eq)]
struct PositionKey {
    pieces: [[Bitboard; 6]; 2],
    stm: Color,
    castling: u8,
    ep_capture_file: Option<u8>,
}

#[derive(Debug)]
struct RepNode {
    hash: u64,
    key: PositionKey,
    prev: Option<Arc<RepNode>>,
}

/// A full chess position, including the repetition history of its own game.
#[derive(Debug, Clone)]
pub struct GameState {
    pub(super) board: Board,
    stm: Color,
    castling: CastlingRights,
    ep: Option<Square>,
    halfmove: u16,
    fullmove: u16,
    hash: u64,
    /// Predecessor positions since the last irreversible move (newest first).
    reps: Option<Arc<RepNode>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal move {move_text} in position {fen}")]
pub struct IllegalMove {
    pub move_text: String,
    pub fen: String,
}

impl GameState {
    pub fn startpos() -> GameState {
        super::fen::parse_fen("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1")
            .expect("startpos FEN")
    }

    pub(super) fn from_parts(
        board: Board,
        stm: Color,
        castling: CastlingRights,
        ep: Option<Square>,
        halfmove: u16,
        fullmove: u16,
    ) -> GameState {
        let mut st = GameState {
            board,
            stm,
            castling,
            ep,
            halfmove,
            fullmove,
            hash: 0,
            reps: None,
        };
        st.hash = st.compute_hash();
        st
    }

    #[inline]
    pub fn side_to_move(&self) -> Color {
        self.stm
    }

    #[inline]
    pub fn castling_rights(&self) -> CastlingRights {
        self.castling
    }

    #[inline]
    pub fn en_passant(&self) -> Option<Square> {
        self.ep
    }

    #[inline]
    pub fn halfmove_clock(&self) -> u16 {
        self.halfmove
    }

    #[inline]
    pub fn fullmove_number(&self) -> u16 {
        self.fullmove
    }

    #[inline]
    pub fn zobrist(&self) -> u64 {
        self.hash
    }

    #[inline]
    pub fn piece_at(&self, sq: Square) -> Option<(Color, PieceKind)> {
        self.board.piece_at(sq)
    }

    pub fn to_fen(&self) -> String {
        super::fen::to_fen(self)
    }

    pub fn in_check(&self) -> bool {
        let king = self.board.king_square(self.stm);
        self.board
            .is_attacked(king, self.stm.opponent(), self.board.all())
    }

    pub fn legal_moves(&self) -> Vec<Move> {
        super::movegen::legal_moves(self)
    }

    /// Validated move application; rejects anything not in `legal_moves`.
    pub fn apply_move(&self, m: Move) -> Result<GameState, IllegalMove> {
        if self.legal_moves().contains(&m) {
            Ok(self.apply_legal(m))
        } else {
            Err(IllegalMove {
                move_text: m.to_string(),
                fen: self.to_fen(),
            })
        }
    }

    /// Move application without the legality re-check, for moves that were
    /// just produced by `legal_moves` on this exact state.
    pub fn apply_legal(&self, m: Move) -> GameState {
        let mut board = self.board.clone();
        let us = self.stm;
        let (moved_color, kind) = board.remove(m.from);
        debug_assert_eq!(moved_color, us);

        let mut irreversible = kind == PieceKind::Pawn;
        if board.piece_at(m.to).is_some() {
            board.remove(m.to);
            irreversible = true;
        } else if kind == PieceKind::Pawn && Some(m.to) == self.ep {
            // En passant: the captured pawn is behind the target square.
            let captured = Square::from_file_rank(
                m.to.file(),
                match us {
                    Color::White => m.to.rank() - 1,
                    Color::Black => m.to.rank() + 1,
                },
            );
            board.remove(captured);
            irreversible = true;
        }

        board.put(m.to, us, m.promotion.unwrap_or(kind));

        // Castling: move the rook as well.
        if kind == PieceKind::King && m.from.file() == 4 {
            let rank = m.from.rank();
            if m.to.file() == 6 {
                let (cr, kr) = (Square::from_file_rank(7, rank), Square::from_file_rank(5, rank));
                board.remove(cr);
                board.put(kr, us, PieceKind::Rook);
            } else if m.to.file() == 2 {
                let (cr, kr) = (Square::from_file_rank(0, rank), Square::from_file_rank(3, rank));
                board.remove(cr);
                board.put(kr, us, PieceKind::Rook);
            }
        }

        let mut castling = self.castling;
        for sq in [m.from, m.to] {
            match sq.index() {
                0 => castling.clear(CastlingRights::WHITE_QUEENSIDE),
                4 => castling.clear(
                    CastlingRights::WHITE_KINGSIDE | CastlingRights::WHITE_QUEENSIDE,
                ),
                7 => castling.clear(CastlingRights::WHITE_KINGSIDE),
                56 => castling.clear(CastlingRights::BLACK_QUEENSIDE),
                60 => castling.clear(
                    CastlingRights::BLACK_KINGSIDE | CastlingRights::BLACK_QUEENSIDE,
                ),
                63 => castling.clear(CastlingRights::BLACK_KINGSIDE),
                _ => {}
            }
        }

        let ep = if kind == PieceKind::Pawn && m.to.rank().abs_diff(m.from.rank()) == 2 {
            Some(Square::from_file_rank(
                m.from.file(),
                (m.from.rank() + m.to.rank()) / 2,
            ))
        } else {
            None
        };

        let mut next = GameState {
            board,
            stm: us.opponent(),
            castling,
            ep,
            halfmove: if irreversible { 0 } else { self.halfmove + 1 },
            fullmove: self.fullmove + u16::from(us == Color::Black),
            hash: 0,
            reps: None,
        };
        next.hash = next.compute_hash();
        next.reps = if irreversible {
            None
        } else {
            Some(Arc::new(RepNode {
                hash: self.hash,
                key: self.position_key(),
                prev: self.reps.clone(),
            }))
        };
        next
    }

    /// File of the en-passant target if a legal en-passant capture exists.
    fn ep_capture_file(&self) -> Option<u8> {
        let target = self.ep?;
        let our_pawns = self.board.pieces[self.stm.index()][PieceKind::Pawn.index()];
        let candidates =
            TABLES.pawn_attacks[self.stm.opponent().index()][target.index()] & our_pawns;
        for from in BitIter(candidates) {
            let m = Move::new(from, target);
            if super::movegen::en_passant_is_legal(self, m) {
                return Some(target.file());
            }
        }
        None
    }

    fn position_key(&self) -> PositionKey {
        PositionKey {
            pieces: self.board.pieces,
            stm: self.stm,
            castling: self.castling.bits(),
            ep_capture_file: self.ep_capture_file(),
        }
    }

    fn compute_hash(&self) -> u64 {
        let z = &*ZOBRIST;
        let mut h = 0u64;
        for color in [Color::White, Color::Black] {
            for kind in PieceKind::ALL {
                for sq in BitIter(self.board.pieces[color.index()][kind.index()]) {
                    h ^= z.piece[color.index()][kind.index()][sq.index()];
                }
            }
        }
        if self.stm == Color::Black {
            h ^= z.black_to_move;
        }
        h ^= z.castling[self.castling.bits() as usize];
        if let Some(file) = self.ep_capture_file() {
            h ^= z.ep_file[file as usize];
        }
        h
    }

    /// How many times this exact position has occurred in its game,
    /// including the current occurrence.
    pub fn repetition_count(&self) -> u32 {
        let key = self.position_key();
        let mut count = 1;
        let mut node = self.reps.as_deref();
        while let Some(n) = node {
            // 64-bit prefilter, full verification on hash match.
            if n.hash == self.hash && n.key == key {
                count += 1;
            }
            node = n.prev.as_deref();
        }
        count
    }

    /// True if this position occurred earlier in its own game.
    pub fn is_repetition(&self) -> bool {
        self.repetition_count() >= 2
    }

    pub fn game_result(&self) -> Option<GameResult> {
        if self.legal_moves().is_empty() {
            return Some(if self.in_check() {
                GameResult {
                    outcome: match self.stm {
                        Color::White => Outcome::BlackWin,
                        Color::Black => Outcome::WhiteWin,
                    },
                    cause: ResultCause::Checkmate,
                }
            } else {
                GameResult {
                    outcome: Outcome::Draw,
                    cause: ResultCause::Stalemate,
                }
            });
        }
        if self.halfmove >= 100 {
            return Some(GameResult {
                outcome: Outcome::Draw,
                cause: ResultCause::FiftyMove,
            });
        }
        if self.repetition_count() >= 3 {
            return Some(GameResult {
                outcome: Outcome::Draw,
                cause: ResultCause::Threefold,
            });
        }
        if self.insufficient_material() {
            return Some(GameResult {
                outcome: Outcome::Draw,
                cause: ResultCause::InsufficientMaterial,
            });
        }
        None
    }

    /// K vs K, K+minor vs K, and K+B vs K+B with same-colored bishops.
    fn insufficient_material(&self) -> bool {
        let b = &self.board;
        let heavy_or_pawn = |c: Color| {
            b.pieces[c.index()][PieceKind::Pawn.index()]
                | b.pieces[c.index()][PieceKind::Rook.index()]
                | b.pieces[c.index()][PieceKind::Queen.index()]
        };
        if heavy_or_pawn(Color::White) != 0 || heavy_or_pawn(Color::Black) != 0 {
            return false;
        }
        let knights = |c: Color| b.pieces[c.index()][PieceKind::Knight.index()];
        let bishops = |c: Color| b.pieces[c.index()][PieceKind::Bishop.index()];
        let minors = (knights(Color::White) | bishops(Color::White)).count_ones()
            + (knights(Color::Black) | bishops(Color::Black)).count_ones();
        match minors {
            0 | 1 => true,
            2 => {
                let wb = bishops(Color::White);
                let bb = bishops(Color::Black);
                if wb.count_ones() == 1 && bb.count_ones() == 1 {
                    const LIGHT: Bitboard = 0x55aa55aa55aa55aa;
                    let w_light = wb & LIGHT != 0;
                    let b_light = bb & LIGHT != 0;
                    w_light == b_light
                } else {
                    false
                }
            }
            _ => false,
        }
    }

    /// Structural equality of the position itself (not the history).
    pub fn same_position(&self, other: &GameState) -> bool {
        self.board.pieces == other.board.pieces
            && self.stm == other.stm
            && self.castling == other.castling
            && self.ep == other.ep
            && self.halfmove == other.halfmove
            && self.fullmove == other.fullmove
    }
}

/// The current position plus up to seven predecessors, newest first,
/// zero-padded (absent) before the start of the game.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    states: Vec<GameState>,
}

pub const HISTORY_LEN: usize = 8;

impl HistoryWindow {
    /// Build a window from a game line, newest last; takes the final
    /// `HISTORY_LEN` states.
    pub fn from_line(line: &[GameState]) -> HistoryWindow {
        assert!(!line.is_empty(), "history window needs a current state");
        let take = line.len().min(HISTORY_LEN);
        let states = line[line.len() - take..].iter().rev().cloned().collect();
        HistoryWindow { states }
    }

    pub fn start(state: GameState) -> HistoryWindow {
        HistoryWindow {
            states: vec![state],
        }
    }

    /// Window for the successor position, shifting this one down.
    pub fn advanced(&self, next: GameState) -> HistoryWindow {
        let mut states = Vec::with_capacity(HISTORY_LEN);
        states.push(next);
        states.extend(self.states.iter().take(HISTORY_LEN - 1).cloned());
        HistoryWindow { states }
    }

    pub fn current(&self) -> &GameState {
        &self.states[0]
    }

    /// Entry `k` plies back, when the game is old enough.
    pub fn entry(&self, k: usize) -> Option<&GameState> {
        assert!(k < HISTORY_LEN);
        self.states.get(k)
    }

    /// Flag `k` is true iff history entry `k`'s position occurred earlier in
    /// its own game; padded entries report false.
    pub fn repetition_flags(&self) -> [bool; HISTORY_LEN] {
        let mut flags = [false; HISTORY_LEN];
        for (k, flag) in flags.iter_mut().enumerate() {
            if let Some(st) = self.entry(k) {
                *flag = st.is_repetition();
            }
        }
        flags
    }
}

#[cfg(test)]
mod tests {
    use super::super::fen::parse_fen;
    use super::*;

    fn mv(s: &str) -> Move {
        s.parse().unwrap()
    }

    #[test]
    fn startpos_basics() {
        let st = GameState::startpos();
        assert_eq!(st.side_to_move(), Color::White);
        assert_eq!(st.castling_rights(), CastlingRights::all());
        assert_eq!(st.legal_moves().len(), 20);
        assert!(!st.in_check());
        assert!(st.game_result().is_none());
    }

    #[test]
    fn double_push_sets_ep() {
        let st = GameState::startpos().apply_move(mv("e2e4")).unwrap();
        assert_eq!(st.side_to_move(), Color::Black);
        assert_eq!(st.en_passant(), Some("e3".parse().unwrap()));
        assert_eq!(st.halfmove_clock(), 0);
    }

    #[test]
    fn quiet_move_increments_clock() {
        let st = GameState::startpos().apply_move(mv("g1f3")).unwrap();
        assert_eq!(st.halfmove_clock(), 1);
        assert_eq!(st.en_passant(), None);
    }

    #[test]
    fn rejects_illegal_move() {
        let st = GameState::startpos();
        assert!(st.apply_move(mv("e2e5")).is_err());
        assert!(st.apply_move(mv("e7e5")).is_err());
    }

    #[test]
    fn fools_mate_is_checkmate() {
        let mut st = GameState::startpos();
        for m in ["f2f3", "e7e5", "g2g4", "d8h4"] {
            st = st.apply_move(mv(m)).unwrap();
        }
        let result = st.game_result().expect("game over");
        assert_eq!(result.outcome, Outcome::BlackWin);
        assert_eq!(result.cause, ResultCause::Checkmate);
        assert!(st.legal_moves().is_empty());
    }

    #[test]
    fn stalemate_detected() {
        let st = parse_fen("7k/5Q2/6K1/8/8/8/8/8 b - - 0 1").unwrap();
        let result = st.game_result().expect("game over");
        assert_eq!(result.outcome, Outcome::Draw);
        assert_eq!(result.cause, ResultCause::Stalemate);
    }

    #[test]
    fn kings_only_is_insufficient() {
        let st = parse_fen("8/8/8/4k3/8/8/8/4K3 w - - 0 1").unwrap();
        let result = st.game_result().expect("draw");
        assert_eq!(result.cause, ResultCause::InsufficientMaterial);
    }

    #[test]
    fn opposite_colored_bishops_sufficient() {
        // Bishops on different square colors can still mate in theory.
        let st = parse_fen("8/8/3b4/4k3/8/3B4/8/4K3 w - - 0 1").unwrap();
        assert!(st.game_result().is_none());
        // Same-colored bishops: dead draw.
        let st = parse_fen("8/8/4b3/4k3/8/3B4/8/4K3 w - - 0 1").unwrap();
        assert_eq!(
            st.game_result().unwrap().cause,
            ResultCause::InsufficientMaterial
        );
    }

    #[test]
    fn fifty_move_rule_at_100_plies() {
        let st = parse_fen("8/8/8/4k3/8/8/R7/4K3 w - - 99 80").unwrap();
        assert!(st.game_result().is_none());
        let st = st.apply_move(mv("a2b2")).unwrap();
        assert_eq!(st.halfmove_clock(), 100);
        assert_eq!(st.game_result().unwrap().cause, ResultCause::FiftyMove);
    }

    #[test]
    fn checkmate_beats_fifty_move() {
        // The mating move is also the 100th halfmove: mate wins.
        let st = parse_fen("7k/8/5N1K/8/8/8/8/6R1 w - - 99 80").unwrap();
        let st = st.apply_move(mv("g1g8")).unwrap();
        assert_eq!(st.halfmove_clock(), 100);
        assert_eq!(st.game_result().unwrap().cause, ResultCause::Checkmate);
    }

    #[test]
    fn threefold_by_knight_shuffle() {
        let mut st = GameState::startpos();
        let shuffle = [
            "g1f3", "g8f6", "f3g1", "f6g8", // startpos repeated (2nd time)
            "g1f3", "g8f6", "f3g1",
        ];
        for m in shuffle {
            assert!(st.game_result().is_none(), "premature end");
            st = st.apply_move(mv(m)).unwrap();
        }
        // One more knight retreat recreates startpos for the third time.
        let st = st.apply_move(mv("f6g8")).unwrap();
        assert_eq!(st.repetition_count(), 3);
        assert_eq!(st.game_result().unwrap().cause, ResultCause::Threefold);
    }

    #[test]
    fn repetition_distinguishes_castling_rights() {
        // Moving a rook out and back loses a castling right, so the "same"
        // placement is not a repetition of the original position.
        let mut st = parse_fen("r3k2r/8/8/8/8/8/8/R3K2R w KQkq - 0 1").unwrap();
        for m in ["h1g1", "h8g8", "g1h1", "g8h8"] {
            st = st.apply_move(mv(m)).unwrap();
        }
        assert_eq!(st.repetition_count(), 1);
    }

    #[test]
    fn en_passant_capture_works() {
        let mut st = GameState::startpos();
        for m in ["e2e4", "a7a6", "e4e5", "d7d5"] {
            st = st.apply_move(mv(m)).unwrap();
        }
        assert_eq!(st.en_passant(), Some("d6".parse().unwrap()));
        let moves = st.legal_moves();
        let ep = mv("e5d6");
        assert!(moves.contains(&ep));
        let st = st.apply_legal(ep);
        assert!(st.piece_at("d5".parse().unwrap()).is_none(), "pawn captured");
        assert_eq!(
            st.piece_at("d6".parse().unwrap()),
            Some((Color::White, PieceKind::Pawn))
        );
    }

    #[test]
    fn castling_moves_rook() {
        let st = parse_fen("r3k2r/8/8/8/8/8/8/R3K2R w KQkq - 0 1").unwrap();
        let short = st.apply_move(mv("e1g1")).unwrap();
        assert_eq!(
            short.piece_at("f1".parse().unwrap()),
            Some((Color::White, PieceKind::Rook))
        );
        assert!(!short.castling_rights().kingside(Color::White));
        assert!(!short.castling_rights().queenside(Color::White));
        assert!(short.castling_rights().kingside(Color::Black));
        let long = st.apply_move(mv("e1c1")).unwrap();
        assert_eq!(
            long.piece_at("d1".parse().unwrap()),
            Some((Color::White, PieceKind::Rook))
        );
    }

    #[test]
    fn history_window_shifting() {
        let s0 = GameState::startpos();
        let s1 = s0.apply_move(mv("e2e4")).unwrap();
        let s2 = s1.apply_move(mv("e7e5")).unwrap();
        let w = HistoryWindow::start(s0.clone())
            .advanced(s1.clone())
            .advanced(s2.clone());
        assert!(w.current().same_position(&s2));
        assert!(w.entry(1).unwrap().same_position(&s1));
        assert!(w.entry(2).unwrap().same_position(&s0));
        assert!(w.entry(3).is_none());
        assert_eq!(w.repetition_flags(), [false; 8]);
    }

    #[test]
    fn repetition_flags_from_shuffle() {
        let mut line = vec![GameState::startpos()];
        for m in ["g1f3", "g8f6", "f3g1", "f6g8"] {
            let next = line.last().unwrap().apply_move(mv(m)).unwrap();
            line.push(next);
        }
        let w = HistoryWindow::from_line(&line);
        let flags = w.repetition_flags();
        assert!(flags[0], "current position is a repeat of startpos");
        assert!(!flags[1]);
        assert!(!flags[4], "original startpos was not itself a repeat");
    }
}
