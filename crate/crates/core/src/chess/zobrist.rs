//! Zobrist keys, generated from a fixed SplitMix64 stream so hashes are
//! stable across runs and platforms.

use std::sync::LazyLock;

pub struct Zobrist {
    pub piece: [[[u64; 64]; 6]; 2],
    pub black_to_move: u64,
    pub castling: [u64; 16],
    /// Keyed only when an en-passant capture is actually available.
    pub ep_file: [u64; 8],
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub static ZOBRIST: LazyLock<Box<Zobrist>> = LazyLock::new(|| {
    let mut s = 0x43464b5f5a4f4252u64; // arbitrary fixed seed
    let mut z = Box::new(Zobrist {
        piece: [[[0; 64]; 6]; 2],
        black_to_move: 0,
        castling: [0; 16],
        ep_file: [0; 8],
    });
    for color in &mut z.piece {
        for kind in color {
            for sq in kind {
                *sq = splitmix(&mut s);
            }
        }
    }
    z.black_to_move = splitmix(&mut s);
    for c in &mut z.castling {
        *c = splitmix(&mut s);
    }
    for f in &mut z.ep_file {
        *f = splitmix(&mut s);
    }
    z
});
