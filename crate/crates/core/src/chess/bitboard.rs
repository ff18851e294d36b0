//! Bitboard attack tables. Sliders use classical ray scans, which are plenty
//! fast at desk scale.

use super::{Color, Square};
use std::sync::LazyLock;

pub type Bitboard = u64;

#[inline]
pub const fn bit(sq: Square) -> Bitboard {
    1u64 << sq.index()
}

#[inline]
pub fn lsb(bb: Bitboard) -> Square {
    debug_assert!(bb != 0);
    Square::new(bb.trailing_zeros() as u8)
}

/// Iterate over the set squares of a bitboard, lowest index first.
pub struct BitIter(pub Bitboard);

impl Iterator for BitIter {
    type Item = Square;

    #[inline]
    fn next(&mut self) -> Option<Square> {
        if self.0 == 0 {
            return None;
        }
        let sq = lsb(self.0);
        self.0 &= self.0 - 1;
        Some(sq)
    }
}

// Directions indexed as: 0 N, 1 S, 2 E, 3 W, 4 NE, 5 NW, 6 SE, 7 SW.
const DIRS: [(i8, i8); 8] = [
    (0, 1),
    (0, -1),
    (1, 0),
    (-1, 0),
    (1, 1),
    (-1, 1),
    (1, -1),
    (-1, -1),
];

pub struct Tables {
    pub knight: [Bitboard; 64],
    pub king: [Bitboard; 64],
    /// Squares attacked by a pawn of the given color standing on the square.
    pub pawn_attacks: [[Bitboard; 64]; 2],
    pub rays: [[Bitboard; 64]; 8],
    /// Open squares strictly between two aligned squares; 0 if unaligned.
    pub between: [[Bitboard; 64]; 64],
    /// Full line (both squares included) through two aligned squares; 0 if unaligned.
    pub line: [[Bitboard; 64]; 64],
}

fn shift(file: i8, rank: i8, df: i8, dr: i8) -> Option<Square> {
    let f = file + df;
    let r = rank + dr;
    if (0..8).contains(&f) && (0..8).contains(&r) {
        Some(Square::from_file_rank(f as u8, r as u8))
    } else {
        None
    }
}

pub static TABLES: LazyLock<Box<Tables>> = LazyLock::new(|| {
    let mut t = Box::new(Tables {
        knight: [0; 64],
        king: [0; 64],
        pawn_attacks: [[0; 64]; 2],
        rays: [[0; 64]; 8],
        between: [[0; 64]; 64],
        line: [[0; 64]; 64],
    });
    for sq in Square::all() {
        let (f, r) = (sq.file() as i8, sq.rank() as i8);
        for (df, dr) in [
            (1, 2),
            (2, 1),
            (2, -1),
            (1, -2),
            (-1, -2),
            (-2, -1),
            (-2, 1),
            (-1, 2),
        ] {
            if let Some(to) = shift(f, r, df, dr) {
                t.knight[sq.index()] |= bit(to);
            }
        }
        for (df, dr) in DIRS {
            if let Some(to) = shift(f, r, df, dr) {
                t.king[sq.index()] |= bit(to);
            }
        }
        for df in [-1, 1] {
            if let Some(to) = shift(f, r, df, 1) {
                t.pawn_attacks[Color::White.index()][sq.index()] |= bit(to);
            }
            if let Some(to) = shift(f, r, df, -1) {
                t.pawn_attacks[Color::Black.index()][sq.index()] |= bit(to);
            }
        }
        for (d, (df, dr)) in DIRS.iter().enumerate() {
            let (mut cf, mut cr) = (f, r);
            while let Some(to) = shift(cf, cr, *df, *dr) {
                t.rays[d][sq.index()] |= bit(to);
                cf += df;
                cr += dr;
            }
        }
    }
    // Opposite direction of each DIRS entry: N<->S, E<->W, NE<->SW, NW<->SE.
    const OPP: [usize; 8] = [1, 0, 3, 2, 7, 6, 5, 4];
    for a in Square::all() {
        for (d, (df, dr)) in DIRS.iter().enumerate() {
            let (mut cf, mut cr) = (a.file() as i8, a.rank() as i8);
            let mut between = 0u64;
            while let Some(b) = shift(cf, cr, *df, *dr) {
                t.line[a.index()][b.index()] =
                    (t.rays[d][a.index()] | t.rays[OPP[d]][b.index()]) | bit(a) | bit(b);
                t.between[a.index()][b.index()] = between;
                between |= bit(b);
                cf += df;
                cr += dr;
            }
        }
    }
    t
});

#[inline]
fn ray_attack(t: &Tables, d: usize, sq: Square, occ: Bitboard) -> Bitboard {
    let ray = t.rays[d][sq.index()];
    let blockers = ray & occ;
    if blockers == 0 {
        return ray;
    }
    // Positive directions (N, E, NE, NW) scan from the low end, negative from the high end.
    let first = if matches!(d, 0 | 2 | 4 | 5) {
        blockers.trailing_zeros() as usize
    } else {
        63 - blockers.leading_zeros() as usize
    };
    ray & !t.rays[d][first]
}

pub fn rook_attacks(sq: Square, occ: Bitboard) -> Bitboard {
    let t = &*TABLES;
    ray_attack(t, 0, sq, occ) | ray_attack(t, 1, sq, occ) | ray_attack(t, 2, sq, occ)
        | ray_attack(t, 3, sq, occ)
}

pub fn bishop_attacks(sq: Square, occ: Bitboard) -> Bitboard {
    let t = &*TABLES;
    ray_attack(t, 4, sq, occ) | ray_attack(t, 5, sq, occ) | ray_attack(t, 6, sq, occ)
        | ray_attack(t, 7, sq, occ)
}

pub fn queen_attacks(sq: Square, occ: Bitboard) -> Bitboard {
    rook_attacks(sq, occ) | bishop_attacks(sq, occ)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(s: &str) -> Square {
        s.parse().unwrap()
    }

    #[test]
    fn knight_attack_counts() {
        assert_eq!(TABLES.knight[sq("a1").index()].count_ones(), 2);
        assert_eq!(TABLES.knight[sq("d4").index()].count_ones(), 8);
        assert_eq!(TABLES.knight[sq("h8").index()].count_ones(), 2);
    }

    #[test]
    fn rook_attacks_empty_and_blocked() {
        assert_eq!(rook_attacks(sq("d4"), 0).count_ones(), 14);
        let occ = bit(sq("d6")) | bit(sq("f4"));
        let att = rook_attacks(sq("d4"), occ);
        assert!(att & bit(sq("d6")) != 0, "blocker square is attacked");
        assert!(att & bit(sq("d7")) == 0, "ray stops at blocker");
        assert!(att & bit(sq("g4")) == 0);
        assert!(att & bit(sq("a4")) != 0);
    }

    #[test]
    fn between_and_line() {
        let t = &*TABLES;
        let b = t.between[sq("a1").index()][sq("d4").index()];
        assert_eq!(b, bit(sq("b2")) | bit(sq("c3")));
        assert_eq!(t.between[sq("a1").index()][sq("b3").index()], 0);
        assert!(t.line[sq("a1").index()][sq("h8").index()] & bit(sq("e5")) != 0);
        // Diagonal lines must extend with the true opposite direction.
        let l = t.line[sq("h1").index()][sq("f3").index()];
        assert_eq!(l & bit(sq("g4")), 0);
        assert!(l & bit(sq("e4")) != 0);
        assert_eq!(l.count_ones(), 8);
    }

    #[test]
    fn pawn_attacks_direction() {
        let w = TABLES.pawn_attacks[Color::White.index()][sq("e4").index()];
        assert_eq!(w, bit(sq("d5")) | bit(sq("f5")));
        let b = TABLES.pawn_attacks[Color::Black.index()][sq("a5").index()];
        assert_eq!(b, bit(sq("b4")));
    }
}
