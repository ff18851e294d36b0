//! Legal move generation via check masks and pin lines. Only en passant
//! falls back to make-and-verify; everything else is generated legal.

use super::bitboard::{
    bishop_attacks, bit, lsb, queen_attacks, rook_attacks, BitIter, Bitboard, TABLES,
};
use super::state::GameState;
use super::{Color, Move, PieceKind, Square};

pub(super) fn legal_moves(st: &GameState) -> Vec<Move> {
    let t = &*TABLES;
    let board = &st.board;
    let us = st.side_to_move();
    let them = us.opponent();
    let ours = board.occ[us.index()];
    let theirs = board.occ[them.index()];
    let occ = ours | theirs;
    let king = board.king_square(us);

    let mut moves = Vec::with_capacity(48);
    let checkers = board.attackers_to(king, them, occ);

    // King steps: attack tests use occupancy without the king so a slider's
    // ray is not blocked by the king stepping along it.
    let occ_no_king = occ & !bit(king);
    for to in BitIter(t.king[king.index()] & !ours) {
        if !board.is_attacked(to, them, occ_no_king) {
            moves.push(Move::new(king, to));
        }
    }

    if checkers.count_ones() >= 2 {
        return moves;
    }

    // With a single checker, non-king moves must capture it or block the ray.
    let check_mask = if checkers != 0 {
        let checker = lsb(checkers);
        checkers | t.between[king.index()][checker.index()]
    } else {
        !0
    };

    // Pinned pieces may only move along the king-sniper line.
    let mut pinned: Bitboard = 0;
    let mut pin_line = [0u64; 64];
    let rooks_queens = board.pieces[them.index()][PieceKind::Rook.index()]
        | board.pieces[them.index()][PieceKind::Queen.index()];
    let bishops_queens = board.pieces[them.index()][PieceKind::Bishop.index()]
        | board.pieces[them.index()][PieceKind::Queen.index()];
    let snipers = (rook_attacks(king, theirs) & rooks_queens)
        | (bishop_attacks(king, theirs) & bishops_queens);
    for sniper in BitIter(snipers) {
        let blockers = t.between[king.index()][sniper.index()] & occ;
        if blockers.count_ones() == 1 && blockers & ours != 0 {
            let sq = lsb(blockers);
            pinned |= blockers;
            pin_line[sq.index()] = t.line[king.index()][sniper.index()];
        }
    }
    let allowed = |from: Square| -> Bitboard {
        let base = check_mask & !ours;
        if pinned & bit(from) != 0 {
            base & pin_line[from.index()]
        } else {
            base
        }
    };

    // Pawns.
    let (push_dir, start_rank, promo_rank): (i8, u8, u8) = match us {
        Color::White => (1, 1, 7),
        Color::Black => (-1, 6, 0),
    };
    let push_pawn = |moves: &mut Vec<Move>, from: Square, to: Square| {
        if to.rank() == promo_rank {
            for kind in PieceKind::PROMOTIONS {
                moves.push(Move::promotion(from, to, kind));
            }
        } else {
            moves.push(Move::new(from, to));
        }
    };
    for from in BitIter(board.pieces[us.index()][PieceKind::Pawn.index()]) {
        let mask = allowed(from);
        let one = Square::from_file_rank(from.file(), (from.rank() as i8 + push_dir) as u8);
        if occ & bit(one) == 0 {
            if mask & bit(one) != 0 {
                push_pawn(&mut moves, from, one);
            }
            if from.rank() == start_rank {
                let two =
                    Square::from_file_rank(from.file(), (from.rank() as i8 + 2 * push_dir) as u8);
                if occ & bit(two) == 0 && mask & bit(two) != 0 {
                    moves.push(Move::new(from, two));
                }
            }
        }
        for to in BitIter(t.pawn_attacks[us.index()][from.index()] & theirs & mask) {
            push_pawn(&mut moves, from, to);
        }
    }

    // En passant is validated by playing it out; the capture empties two
    // squares on one rank, which the pin machinery cannot express.
    if let Some(target) = st.en_passant() {
        let candidates = t.pawn_attacks[them.index()][target.index()]
            & board.pieces[us.index()][PieceKind::Pawn.index()];
        for from in BitIter(candidates) {
            let m = Move::new(from, target);
            if en_passant_is_legal(st, m) {
                moves.push(m);
            }
        }
    }

    for from in BitIter(board.pieces[us.index()][PieceKind::Knight.index()]) {
        for to in BitIter(t.knight[from.index()] & allowed(from)) {
            moves.push(Move::new(from, to));
        }
    }
    for from in BitIter(board.pieces[us.index()][PieceKind::Bishop.index()]) {
        for to in BitIter(bishop_attacks(from, occ) & allowed(from)) {
            moves.push(Move::new(from, to));
        }
    }
    for from in BitIter(board.pieces[us.index()][PieceKind::Rook.index()]) {
        for to in BitIter(rook_attacks(from, occ) & allowed(from)) {
            moves.push(Move::new(from, to));
        }
    }
    for from in BitIter(board.pieces[us.index()][PieceKind::Queen.index()]) {
        for to in BitIter(queen_attacks(from, occ) & allowed(from)) {
            moves.push(Move::new(from, to));
        }
    }

    if checkers == 0 {
        gen_castling(st, occ, &mut moves);
    }

    moves
}

fn gen_castling(st: &GameState, occ: Bitboard, moves: &mut Vec<Move>) {
    let us = st.side_to_move();
    let them = us.opponent();
    let rights = st.castling_rights();
    let rank = match us {
        Color::White => 0,
        Color::Black => 7,
    };
    let at = |file: u8| Square::from_file_rank(file, rank);
    let clear = |files: &[u8]| files.iter().all(|&f| occ & bit(at(f)) == 0);
    let safe = |files: &[u8]| {
        files
            .iter()
            .all(|&f| !st.board.is_attacked(at(f), them, occ))
    };
    if rights.kingside(us) && clear(&[5, 6]) && safe(&[5, 6]) {
        moves.push(Move::new(at(4), at(6)));
    }
    // b-file square must be empty but may be attacked.
    if rights.queenside(us) && clear(&[1, 2, 3]) && safe(&[2, 3]) {
        moves.push(Move::new(at(4), at(2)));
    }
}

/// Plays the en-passant capture on a scratch board and checks the king.
pub(super) fn en_passant_is_legal(st: &GameState, m: Move) -> bool {
    let us = st.side_to_move();
    let them = us.opponent();
    let captured = Square::from_file_rank(m.to.file(), m.from.rank());
    let mut occ = st.board.all();
    occ &= !(bit(m.from) | bit(captured));
    occ |= bit(m.to);

    let king = st.board.king_square(us);
    let t = &*TABLES;
    let enemy = &st.board.pieces[them.index()];
    // The moved pawn now sits on m.to; no enemy piece moved, but the capture
    // square must not be treated as still holding the enemy pawn.
    let pawns = enemy[PieceKind::Pawn.index()] & !bit(captured);
    if t.pawn_attacks[us.index()][king.index()] & pawns != 0 {
        return false;
    }
    if t.knight[king.index()] & enemy[PieceKind::Knight.index()] != 0 {
        return false;
    }
    let queens = enemy[PieceKind::Queen.index()];
    if rook_attacks(king, occ) & (enemy[PieceKind::Rook.index()] | queens) != 0 {
        return false;
    }
    if bishop_attacks(king, occ) & (enemy[PieceKind::Bishop.index()] | queens) != 0 {
        return false;
    }
    true
}

/// Legal-move path count to the given depth; the standard generator test.
pub fn perft(st: &GameState, depth: u32) -> u64 {
    if depth == 0 {
        return 1;
    }
    let moves = st.legal_moves();
    if depth == 1 {
        return moves.len() as u64;
    }
    moves
        .iter()
        .map(|&m| perft(&st.apply_legal(m), depth - 1))
        .sum()
}
