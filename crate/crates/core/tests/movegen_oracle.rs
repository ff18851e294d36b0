//! Cross-checks the bitboard move generator against a deliberately naive
//! mailbox implementation: pseudo-legal generation, simulate, then reject
//! moves that leave the king attacked. The two share no code paths.

use chessformer::chess::{parse_fen, Color, GameState, Move, PieceKind, Square};
use std::collections::BTreeSet;

type Cell = Option<(Color, PieceKind)>;

const KNIGHT_OFFS: [(i32, i32); 8] = [
    (1, 2),
    (2, 1),
    (2, -1),
    (1, -2),
    (-1, -2),
    (-2, -1),
    (-2, 1),
    (-1, 2),
];
const KING_OFFS: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];
const ROOK_DIRS: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const BISHOP_DIRS: [(i32, i32); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

fn sq_at(f: i32, r: i32) -> Option<usize> {
    if (0..8).contains(&f) && (0..8).contains(&r) {
        Some((r * 8 + f) as usize)
    } else {
        None
    }
}

fn snapshot(st: &GameState) -> [Cell; 64] {
    let mut b = [None; 64];
    for sq in Square::all() {
        b[sq.index()] = st.piece_at(sq);
    }
    b
}

fn attacked(b: &[Cell; 64], target: usize, by: Color) -> bool {
    let tf = (target % 8) as i32;
    let tr = (target / 8) as i32;
    let dir = if by == Color::White { 1 } else { -1 };
    for df in [-1, 1] {
        if let Some(s) = sq_at(tf + df, tr - dir) {
            if b[s] == Some((by, PieceKind::Pawn)) {
                return true;
            }
        }
    }
    for (offs, kind) in [(KNIGHT_OFFS, PieceKind::Knight), (KING_OFFS, PieceKind::King)] {
        for (df, dr) in offs {
            if let Some(s) = sq_at(tf + df, tr + dr) {
                if b[s] == Some((by, kind)) {
                    return true;
                }
            }
        }
    }
    for (dirs, kinds) in [
        (ROOK_DIRS, [PieceKind::Rook, PieceKind::Queen]),
        (BISHOP_DIRS, [PieceKind::Bishop, PieceKind::Queen]),
    ] {
        for (df, dr) in dirs {
            let (mut f, mut r) = (tf + df, tr + dr);
            while let Some(s) = sq_at(f, r) {
                if let Some((c, k)) = b[s] {
                    if c == by && kinds.contains(&k) {
                        return true;
                    }
                    break;
                }
                f += df;
                r += dr;
            }
        }
    }
    false
}

fn simulate(b: &[Cell; 64], st: &GameState, m: Move) -> [Cell; 64] {
    let mut nb = *b;
    let us = st.side_to_move();
    let (_, kind) = nb[m.from.index()].unwrap();
    nb[m.from.index()] = None;
    if kind == PieceKind::Pawn && Some(m.to) == st.en_passant() && b[m.to.index()].is_none() {
        let cap = if us == Color::White {
            m.to.index() - 8
        } else {
            m.to.index() + 8
        };
        nb[cap] = None;
    }
    nb[m.to.index()] = Some((us, m.promotion.unwrap_or(kind)));
    if kind == PieceKind::King && (m.from.file() as i32 - m.to.file() as i32).abs() == 2 {
        let base = m.from.rank() as usize * 8;
        if m.to.file() == 6 {
            let rook = nb[base + 7].take();
            nb[base + 5] = rook;
        } else {
            let rook = nb[base].take();
            nb[base + 3] = rook;
        }
    }
    nb
}

fn oracle_moves(st: &GameState) -> BTreeSet<String> {
    let b = snapshot(st);
    let us = st.side_to_move();
    let them = us.opponent();
    let mut pseudo: Vec<Move> = Vec::new();

    for from in Square::all() {
        let Some((c, kind)) = b[from.index()] else {
            continue;
        };
        if c != us {
            continue;
        }
        let ff = from.file() as i32;
        let fr = from.rank() as i32;
        match kind {
            PieceKind::Pawn => {
                let dir = if us == Color::White { 1 } else { -1 };
                let promo_rank = if us == Color::White { 7 } else { 0 };
                let start_rank = if us == Color::White { 1 } else { 6 };
                let add = |pseudo: &mut Vec<Move>, to: usize| {
                    let to_sq = Square::new(to as u8);
                    if to_sq.rank() as i32 == promo_rank {
                        for p in PieceKind::PROMOTIONS {
                            pseudo.push(Move::promotion(from, to_sq, p));
                        }
                    } else {
                        pseudo.push(Move::new(from, to_sq));
                    }
                };
                if let Some(one) = sq_at(ff, fr + dir) {
                    if b[one].is_none() {
                        add(&mut pseudo, one);
                        if fr == start_rank {
                            let two = sq_at(ff, fr + 2 * dir).unwrap();
                            if b[two].is_none() {
                                pseudo.push(Move::new(from, Square::new(two as u8)));
                            }
                        }
                    }
                }
                for df in [-1, 1] {
                    if let Some(t) = sq_at(ff + df, fr + dir) {
                        let is_enemy = matches!(b[t], Some((c2, _)) if c2 == them);
                        let is_ep = st.en_passant().map(|e| e.index()) == Some(t);
                        if is_enemy || is_ep {
                            add(&mut pseudo, t);
                        }
                    }
                }
            }
            PieceKind::Knight | PieceKind::King => {
                let offs = if kind == PieceKind::Knight {
                    KNIGHT_OFFS
                } else {
                    KING_OFFS
                };
                for (df, dr) in offs {
                    if let Some(t) = sq_at(ff + df, fr + dr) {
                        if !matches!(b[t], Some((c2, _)) if c2 == us) {
                            pseudo.push(Move::new(from, Square::new(t as u8)));
                        }
                    }
                }
            }
            PieceKind::Bishop | PieceKind::Rook | PieceKind::Queen => {
                let dirs: &[(i32, i32)] = match kind {
                    PieceKind::Bishop => &BISHOP_DIRS,
                    PieceKind::Rook => &ROOK_DIRS,
                    _ => &[
                        (1, 0),
                        (-1, 0),
                        (0, 1),
                        (0, -1),
                        (1, 1),
                        (1, -1),
                        (-1, 1),
                        (-1, -1),
                    ],
                };
                for &(df, dr) in dirs {
                    let (mut f, mut r) = (ff + df, fr + dr);
                    while let Some(t) = sq_at(f, r) {
                        match b[t] {
                            Some((c2, _)) => {
                                if c2 == them {
                                    pseudo.push(Move::new(from, Square::new(t as u8)));
                                }
                                break;
                            }
                            None => pseudo.push(Move::new(from, Square::new(t as u8))),
                        }
                        f += df;
                        r += dr;
                    }
                }
            }
        }
    }

    // Castling, with the crossing-square rule checked on the current board.
    let rights = st.castling_rights();
    let home = if us == Color::White { 0usize } else { 56 };
    let king_home = home + 4;
    if b[king_home] == Some((us, PieceKind::King)) && !attacked(&b, king_home, them) {
        if rights.kingside(us)
            && b[home + 7] == Some((us, PieceKind::Rook))
            && b[home + 5].is_none()
            && b[home + 6].is_none()
            && !attacked(&b, home + 5, them)
            && !attacked(&b, home + 6, them)
        {
            pseudo.push(Move::new(
                Square::new(king_home as u8),
                Square::new((home + 6) as u8),
            ));
        }
        if rights.queenside(us)
            && b[home] == Some((us, PieceKind::Rook))
            && b[home + 1].is_none()
            && b[home + 2].is_none()
            && b[home + 3].is_none()
            && !attacked(&b, home + 2, them)
            && !attacked(&b, home + 3, them)
        {
            pseudo.push(Move::new(
                Square::new(king_home as u8),
                Square::new((home + 2) as u8),
            ));
        }
    }

    pseudo
        .into_iter()
        .filter(|&m| {
            let nb = simulate(&b, st, m);
            let king = (0..64)
                .find(|&s| nb[s] == Some((us, PieceKind::King)))
                .unwrap();
            !attacked(&nb, king, them)
        })
        .map(|m| m.to_string())
        .collect()
}

fn compare_tree(st: &GameState, depth: u32, nodes: &mut u64) {
    *nodes += 1;
    let fast: BTreeSet<String> = st.legal_moves().iter().map(|m| m.to_string()).collect();
    let slow = oracle_moves(st);
    if fast != slow {
        panic!(
            "move set mismatch at {}\n  generator only: {:?}\n  oracle only: {:?}",
            st.to_fen(),
            fast.difference(&slow).collect::<Vec<_>>(),
            slow.difference(&fast).collect::<Vec<_>>()
        );
    }
    if depth > 1 {
        for m in st.legal_moves() {
            compare_tree(&st.apply_legal(m), depth - 1, nodes);
        }
    }
}

const POSITIONS: [(&str, u32); 6] = [
    (
        "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1",
        3,
    ),
    (
        "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1",
        3,
    ),
    ("8/2p5/3p4/KP5r/1R3p1k/8/4P1P1/8 w - - 0 1", 4),
    (
        "r3k2r/Pppp1ppp/1b3nbN/nP6/BBP1P3/q4N2/Pp1P2PP/R2Q1RK1 w kq - 0 1",
        3,
    ),
    (
        "rnbq1k1r/pp1Pbppp/2p5/8/2B5/8/PPP1NnPP/RNBQK2R w KQ - 1 8",
        3,
    ),
    (
        "r4rk1/1pp1qppp/p1np1n2/2b1p1B1/2B1P1b1/P1NP1N2/1PP1QPPP/R4RK1 w - - 0 10",
        2,
    ),
];

#[test]
fn generator_matches_mailbox_oracle() {
    let mut nodes = 0;
    for (fen, depth) in POSITIONS {
        let st = parse_fen(fen).unwrap();
        compare_tree(&st, depth, &mut nodes);
    }
    assert!(nodes > 5_000, "walked {nodes} positions");
}

#[test]
fn oracle_agrees_on_random_playouts() {
    use rand::{RngExt, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for _ in 0..30 {
        let mut st = GameState::startpos();
        for _ in 0..120 {
            if st.game_result().is_some() {
                break;
            }
            let fast: BTreeSet<String> =
                st.legal_moves().iter().map(|m| m.to_string()).collect();
            assert_eq!(fast, oracle_moves(&st), "mismatch at {}", st.to_fen());
            let moves = st.legal_moves();
            let m = moves[rng.random_range(0..moves.len())];
            st = st.apply_legal(m);
        }
    }
}
