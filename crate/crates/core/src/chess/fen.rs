//! FEN parsing and serialization. Parsing is strict: every field is
//! validated, and placement-level illegalities (missing kings, pawns on the
//! back rank, castling rights without the matching pieces, side not to move
//! in check) are rejected with an error naming the offending field.

use super::state::{Board, GameState};
use super::{CastlingRights, Color, PieceKind, Square};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FenError {
    #[error("expected 6 space-separated fields, found {0}")]
    FieldCount(usize),
    #[error("placement field: {0}")]
    Placement(String),
    #[error("side-to-move field: expected 'w' or 'b', found {0:?}")]
    SideToMove(String),
    #[error("castling field: {0}")]
    Castling(String),
    #[error("en-passant field: {0}")]
    EnPassant(String),
    #[error("halfmove clock field: {0:?} is not a small non-negative integer")]
    Halfmove(String),
    #[error("fullmove number field: {0:?} is not a positive integer")]
    Fullmove(String),
}

fn piece_from_char(ch: char) -> Option<(Color, PieceKind)> {
    let color = if ch.is_ascii_uppercase() {
        Color::White
    } else {
        Color::Black
    };
    let kind = match ch.to_ascii_lowercase() {
        'p' => PieceKind::Pawn,
        'n' => PieceKind::Knight,
        'b' => PieceKind::Bishop,
        'r' => PieceKind::Rook,
        'q' => PieceKind::Queen,
        'k' => PieceKind::King,
        _ => return None,
    };
    Some((color, kind))
}

pub fn parse_fen(text: &str) -> Result<GameState, FenError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(FenError::FieldCount(fields.len()));
    }

    let board = parse_placement(fields[0])?;

    let stm = match fields[1] {
        "w" => Color::White,
        "b" => Color::Black,
        other => return Err(FenError::SideToMove(other.to_string())),
    };

    let castling = parse_castling(fields[2], &board)?;
    let ep = parse_en_passant(fields[3], stm, &board)?;

    let halfmove: u16 = fields[4]
        .parse()
        .map_err(|_| FenError::Halfmove(fields[4].to_string()))?;
    let fullmove: u16 = fields[5]
        .parse()
        .map_err(|_| FenError::Fullmove(fields[5].to_string()))?;
    if fullmove == 0 {
        return Err(FenError::Fullmove(fields[5].to_string()));
    }

    let st = GameState::from_parts(board, stm, castling, ep, halfmove, fullmove);

    // The side that just moved must not have left its king capturable.
    let opp_king = st.board.king_square(stm.opponent());
    if st.board.is_attacked(opp_king, stm, st.board.all()) {
        return Err(FenError::Placement(
            "side not to move is in check".to_string(),
        ));
    }
    Ok(st)
}

fn parse_placement(field: &str) -> Result<Board, FenError> {
    let err = |msg: String| Err(FenError::Placement(msg));
    let ranks: Vec<&str> = field.split('/').collect();
    if ranks.len() != 8 {
        return err(format!("expected 8 ranks, found {}", ranks.len()));
    }
    let mut board = Board::empty();
    for (i, rank_text) in ranks.iter().enumerate() {
        let rank = 7 - i as u8;
        let mut file = 0u32;
        for ch in rank_text.chars() {
            if let Some(d) = ch.to_digit(10) {
                if !(1..=8).contains(&d) {
                    return err(format!("bad empty-square count {ch:?}"));
                }
                file += d;
            } else if let Some((color, kind)) = piece_from_char(ch) {
                if file >= 8 {
                    return err(format!("rank {} overflows 8 squares", rank + 1));
                }
                if board.piece_at(Square::from_file_rank(file as u8, rank)).is_some() {
                    return err(format!("square occupied twice on rank {}", rank + 1));
                }
                board.put(Square::from_file_rank(file as u8, rank), color, kind);
                file += 1;
            } else {
                return err(format!("unexpected character {ch:?}"));
            }
        }
        if file != 8 {
            return err(format!("rank {} has {} squares, expected 8", rank + 1, file));
        }
    }

    for color in [Color::White, Color::Black] {
        let kings = board.pieces[color.index()][PieceKind::King.index()].count_ones();
        if kings != 1 {
            return err(format!("{color:?} has {kings} kings, expected 1"));
        }
        let pawns = board.pieces[color.index()][PieceKind::Pawn.index()];
        if pawns & 0xff000000000000ff != 0 {
            return err(format!("{color:?} pawn on a back rank"));
        }
    }
    Ok(board)
}

fn parse_castling(field: &str, board: &Board) -> Result<CastlingRights, FenError> {
    let err = |msg: String| Err(FenError::Castling(msg));
    let mut rights = CastlingRights::none();
    if field != "-" {
        for ch in field.chars() {
            let flag = match ch {
                'K' => CastlingRights::WHITE_KINGSIDE,
                'Q' => CastlingRights::WHITE_QUEENSIDE,
                'k' => CastlingRights::BLACK_KINGSIDE,
                'q' => CastlingRights::BLACK_QUEENSIDE,
                _ => return err(format!("unexpected character {ch:?}")),
            };
            if rights.bits() & flag != 0 {
                return err(format!("duplicate flag {ch:?}"));
            }
            rights = CastlingRights::from_bits(rights.bits() | flag);
        }
    }
    // A right is only meaningful with the king and rook on their home
    // squares; movegen relies on that.
    let expect = |sq: &str, color: Color, kind: PieceKind| {
        let sq: Square = sq.parse().unwrap();
        board.piece_at(sq) == Some((color, kind))
    };
    let checks = [
        (CastlingRights::WHITE_KINGSIDE, "e1", "h1", Color::White, "K"),
        (CastlingRights::WHITE_QUEENSIDE, "e1", "a1", Color::White, "Q"),
        (CastlingRights::BLACK_KINGSIDE, "e8", "h8", Color::Black, "k"),
        (CastlingRights::BLACK_QUEENSIDE, "e8", "a8", Color::Black, "q"),
    ];
    for (flag, king_sq, rook_sq, color, name) in checks {
        if rights.bits() & flag != 0
            && !(expect(king_sq, color, PieceKind::King)
                && expect(rook_sq, color, PieceKind::Rook))
        {
            return err(format!("right {name:?} without king and rook in place"));
        }
    }
    Ok(rights)
}

fn parse_en_passant(field: &str, stm: Color, board: &Board) -> Result<Option<Square>, FenError> {
    if field == "-" {
        return Ok(None);
    }
    let err = |msg: String| Err(FenError::EnPassant(msg));
    let Ok(target) = field.parse::<Square>() else {
        return err(format!("bad square {field:?}"));
    };
    // The target sits behind a pawn the opponent just double-pushed.
    let (expect_rank, pawn_rank, origin_rank, pusher) = match stm {
        Color::White => (5, 4, 6, Color::Black),
        Color::Black => (2, 3, 1, Color::White),
    };
    if target.rank() != expect_rank {
        return err(format!(
            "square {target} on wrong rank for side to move"
        ));
    }
    let pawn_sq = Square::from_file_rank(target.file(), pawn_rank);
    if board.piece_at(pawn_sq) != Some((pusher, PieceKind::Pawn)) {
        return err(format!("no double-pushed pawn behind {target}"));
    }
    if board.piece_at(target).is_some()
        || board
            .piece_at(Square::from_file_rank(target.file(), origin_rank))
            .is_some()
    {
        return err(format!("path of the double push through {target} not empty"));
    }
    Ok(Some(target))
}

pub(super) fn to_fen(st: &GameState) -> String {
    let mut out = String::with_capacity(80);
    for rank in (0..8).rev() {
        let mut empty = 0;
        for file in 0..8 {
            match st.piece_at(Square::from_file_rank(file, rank)) {
                Some((color, kind)) => {
                    if empty > 0 {
                        out.push(char::from_digit(empty, 10).unwrap());
                        empty = 0;
                    }
                    out.push(kind.fen_char(color));
                }
                None => empty += 1,
            }
        }
        if empty > 0 {
            out.push(char::from_digit(empty, 10).unwrap());
        }
        if rank > 0 {
            out.push('/');
        }
    }

    out.push(' ');
    out.push(match st.side_to_move() {
        Color::White => 'w',
        Color::Black => 'b',
    });

    out.push(' ');
    let rights = st.castling_rights();
    if rights == CastlingRights::none() {
        out.push('-');
    } else {
        for (flag, ch) in [
            (CastlingRights::WHITE_KINGSIDE, 'K'),
            (CastlingRights::WHITE_QUEENSIDE, 'Q'),
            (CastlingRights::BLACK_KINGSIDE, 'k'),
            (CastlingRights::BLACK_QUEENSIDE, 'q'),
        ] {
            if rights.bits() & flag != 0 {
                out.push(ch);
            }
        }
    }

    out.push(' ');
    match st.en_passant() {
        Some(sq) => out.push_str(&sq.to_string()),
        None => out.push('-'),
    }

    out.push_str(&format!(
        " {} {}",
        st.halfmove_clock(),
        st.fullmove_number()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::super::Move;
    use super::*;

    const STARTPOS: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";

    #[test]
    fn startpos_roundtrip() {
        let st = parse_fen(STARTPOS).unwrap();
        assert_eq!(st.side_to_move(), Color::White);
        assert_eq!(st.castling_rights(), CastlingRights::all());
        assert_eq!(st.en_passant(), None);
        assert_eq!(to_fen(&st), STARTPOS);
    }

    #[test]
    fn e4_emits_ep_square() {
        let st = GameState::startpos()
            .apply_move("e2e4".parse::<Move>().unwrap())
            .unwrap();
        assert_eq!(
            st.to_fen(),
            "rnbqkbnr/pppppppp/8/8/4P3/8/PPPP1PPP/RNBQKBNR b KQkq e3 0 1"
        );
    }

    #[test]
    fn empty_board_rejected() {
        let e = parse_fen("8/8/8/8/8/8/8/8 w - - 0 1").unwrap_err();
        assert!(matches!(e, FenError::Placement(_)));
    }

    #[test]
    fn field_count_checked() {
        let e = parse_fen("8/8/8/8/8/8/8/8 w - -").unwrap_err();
        assert_eq!(e, FenError::FieldCount(4));
    }

    #[test]
    fn pawn_on_back_rank_rejected() {
        let e = parse_fen("P3k3/8/8/8/8/8/8/4K3 w - - 0 1").unwrap_err();
        assert!(matches!(e, FenError::Placement(_)));
    }

    #[test]
    fn two_kings_rejected() {
        let e = parse_fen("4k3/8/8/8/8/8/8/2K1K3 w - - 0 1").unwrap_err();
        assert!(matches!(e, FenError::Placement(_)));
    }

    #[test]
    fn rank_width_checked() {
        assert!(matches!(
            parse_fen("9/8/8/4k3/8/8/8/4K3 w - - 0 1"),
            Err(FenError::Placement(_))
        ));
        assert!(matches!(
            parse_fen("ppppppppp/8/8/4k3/8/8/8/4K3 w - - 0 1"),
            Err(FenError::Placement(_))
        ));
    }

    #[test]
    fn castling_without_rook_rejected() {
        let e = parse_fen("4k3/8/8/8/8/8/8/4K3 w K - 0 1").unwrap_err();
        assert!(matches!(e, FenError::Castling(_)));
    }

    #[test]
    fn bad_side_to_move() {
        let e = parse_fen("4k3/8/8/8/8/8/8/4K3 x - - 0 1").unwrap_err();
        assert!(matches!(e, FenError::SideToMove(_)));
    }

    #[test]
    fn ep_wrong_rank_rejected() {
        let e = parse_fen("4k3/8/8/8/4P3/8/8/4K3 b - e4 0 1").unwrap_err();
        assert!(matches!(e, FenError::EnPassant(_)));
    }

    #[test]
    fn ep_without_pawn_rejected() {
        let e = parse_fen("4k3/8/8/8/8/8/8/4K3 b - e3 0 1").unwrap_err();
        assert!(matches!(e, FenError::EnPassant(_)));
    }

    #[test]
    fn opponent_in_check_rejected() {
        // White to move but the black king is already attacked.
        let e = parse_fen("4k3/4R3/8/8/8/8/8/4K3 w - - 0 1").unwrap_err();
        assert!(matches!(e, FenError::Placement(_)));
    }

    #[test]
    fn clock_fields_checked() {
        assert!(matches!(
            parse_fen("4k3/8/8/8/8/8/8/4K3 w - - x 1"),
            Err(FenError::Halfmove(_))
        ));
        assert!(matches!(
            parse_fen("4k3/8/8/8/8/8/8/4K3 w - - 0 0"),
            Err(FenError::Fullmove(_))
        ));
    }

    #[test]
    fn random_playout_roundtrips() {
        use rand::{RngExt, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut count = 0;
        'games: for _ in 0..40 {
            let mut st = GameState::startpos();
            for _ in 0..60 {
                if st.game_result().is_some() {
                    continue 'games;
                }
                let moves = st.legal_moves();
                let m = moves[rng.random_range(0..moves.len())];
                st = st.apply_legal(m);
                let fen = st.to_fen();
                let reparsed = parse_fen(&fen).unwrap();
                assert_eq!(reparsed.to_fen(), fen);
                assert!(reparsed.same_position(&st), "divergence at {fen}");
                count += 1;
            }
        }
        assert!(count > 1000, "exercised {count} positions");
    }
}
