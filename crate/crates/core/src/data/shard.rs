//! Binary game shards: "CFTD" magic, little-endian, length-prefixed and
//! self-delimiting, so truncation is always detectable.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::chess::{Color, GameResult, Outcome, ResultCause};
use crate::encoding::{PolicyIndex, ENCODING_VERSION, POLICY_SIZE};

use super::{validate_record, DataError, GameRecord, PlyRecord};

pub const SHARD_MAGIC: &[u8; 4] = b"CFTD";
pub const SHARD_VERSION: u32 = 1;

fn outcome_byte(o: Outcome) -> u8 {
    match o {
        Outcome::WhiteWin => 0,
        Outcome::BlackWin => 1,
        Outcome::Draw => 2,
    }
}

fn cause_byte(c: ResultCause) -> u8 {
    match c {
        ResultCause::Checkmate => 0,
        ResultCause::Stalemate => 1,
        ResultCause::FiftyMove => 2,
        ResultCause::Threefold => 3,
        ResultCause::InsufficientMaterial => 4,
        ResultCause::MoveCap => 5,
    }
}

fn parse_result(outcome: u8, cause: u8) -> Result<GameResult, String> {
    let outcome = match outcome {
        0 => Outcome::WhiteWin,
        1 => Outcome::BlackWin,
        2 => Outcome::Draw,
        other => return Err(format!("unknown outcome byte {other}")),
    };
    let cause = match cause {
        0 => ResultCause::Checkmate,
        1 => ResultCause::Stalemate,
        2 => ResultCause::FiftyMove,
        3 => ResultCause::Threefold,
        4 => ResultCause::InsufficientMaterial,
        5 => ResultCause::MoveCap,
        other => return Err(format!("unknown cause byte {other}")),
    };
    Ok(GameResult { outcome, cause })
}

/// Write games little-endian: header (magic, shard version, game count,
/// encoding version), then per game the FEN (u16 length prefix), result
/// (outcome and cause bytes), and plies (u32 count; each ply is index
/// u16, side byte, reward f32, then the u16-counted sparse pi entries).
pub fn write_shard(games: &[GameRecord], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    assert!(games.len() <= u32::MAX as usize, "too many games for one shard");
    w.write_all(&(games.len() as u32).to_le_bytes())?;
    w.write_all(&ENCODING_VERSION.to_le_bytes())?;
    for game in games {
        assert!(game.initial_fen.len() <= u16::MAX as usize, "oversized FEN");
        w.write_all(&(game.initial_fen.len() as u16).to_le_bytes())?;
        w.write_all(game.initial_fen.as_bytes())?;
        w.write_all(&[outcome_byte(game.result.outcome), cause_byte(game.result.cause)])?;
        w.write_all(&(game.plies.len() as u32).to_le_bytes())?;
        for ply in &game.plies {
            w.write_all(&(ply.index.index() as u16).to_le_bytes())?;
            w.write_all(&[ply.stm.index() as u8])?;
            w.write_all(&ply.r.to_le_bytes())?;
            assert!(ply.pi.len() <= u16::MAX as usize, "oversized pi");
            w.write_all(&(ply.pi.len() as u16).to_le_bytes())?;
            for &(idx, p) in &ply.pi {
                w.write_all(&(idx.index() as u16).to_le_bytes())?;
                w.write_all(&p.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated in {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn parse_policy_index(raw: u16) -> Result<PolicyIndex, String> {
    if (raw as usize) < POLICY_SIZE {
        Ok(PolicyIndex::new(raw as usize).unwrap())
    } else {
        Err(format!("policy index {raw} out of range"))
    }
}

fn read_game(r: &mut Reader) -> Result<GameRecord, String> {
    let fen_len = r.u16("fen length")? as usize;
    let fen_bytes = r.take(fen_len, "fen")?;
    let initial_fen = std::str::from_utf8(fen_bytes)
        .map_err(|_| "fen is not utf-8".to_string())?
        .to_string();
    let outcome = r.u8("outcome")?;
    let cause = r.u8("cause")?;
    let result = parse_result(outcome, cause)?;
    let ply_count = r.u32("ply count")? as usize;
    let mut plies = Vec::with_capacity(ply_count.min(1 << 16));
    for p in 0..ply_count {
        let index = parse_policy_index(r.u16(&format!("ply {p} move"))?)?;
        let stm = match r.u8(&format!("ply {p} side"))? {
            0 => Color::White,
            1 => Color::Black,
            other => return Err(format!("unknown side byte {other}")),
        };
        let reward = r.f32(&format!("ply {p} reward"))?;
        if !reward.is_finite() {
            return Err(format!("ply {p} reward is not finite"));
        }
        let pi_len = r.u16(&format!("ply {p} pi length"))? as usize;
        let mut pi = Vec::with_capacity(pi_len);
        for e in 0..pi_len {
            let idx = parse_policy_index(r.u16(&format!("ply {p} pi entry {e}"))?)?;
            let prob = r.f32(&format!("ply {p} pi entry {e}"))?;
            if !prob.is_finite() {
                return Err(format!("ply {p} pi probability is not finite"));
            }
            pi.push((idx, prob));
        }
        plies.push(PlyRecord {
            index,
            stm,
            pi,
            r: reward,
        });
    }
    Ok(GameRecord {
        initial_fen,
        plies,
        result,
    })
}

/// Read a shard back, checking the header, every record's structure, and
/// each game's legality by replay. Nothing is yielded from a bad file.
pub fn read_shard(path: &Path) -> Result<Vec<GameRecord>, DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(DataError::Corrupt)?;
    if magic != SHARD_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32("version").map_err(DataError::Corrupt)?;
    if version != SHARD_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let count = r.u32("game count").map_err(DataError::Corrupt)? as usize;
    let encoding = r.u32("encoding version").map_err(DataError::Corrupt)?;
    if encoding != ENCODING_VERSION {
        return Err(DataError::BadEncodingVersion(encoding));
    }
    let mut games = Vec::with_capacity(count.min(1 << 20));
    for g in 0..count {
        let game =
            read_game(&mut r).map_err(|e| DataError::Corrupt(format!("game {g}: {e}")))?;
        validate_record(&game).map_err(|e| DataError::BadGame {
            game: g,
            reason: e.to_string(),
        })?;
        games.push(game);
    }
    if r.pos != r.bytes.len() {
        return Err(DataError::Corrupt(format!(
            "{} trailing bytes after game {count}",
            r.bytes.len() - r.pos
        )));
    }
    Ok(games)
}
