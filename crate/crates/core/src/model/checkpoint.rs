//! Binary checkpoint format. Layout, all integers little-endian:
//!
//!   "CFCK"  magic
//!   u32     format version
//!   u32     config JSON length, then the JSON bytes
//!   u32     parameter count
//!   per parameter, in registration order:
//!     u16   name length, then the UTF-8 name
//!     u8    rank
//!     u32×rank  dims
//!     f32×len   row-major data

use super::{Model, ModelConfig, FORMAT_VERSION};
use crate::autodiff::Tensor;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CFCK";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {FORMAT_VERSION}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("checkpoint names unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {name} has shape {file:?} in the file, model wants {expected:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (_, name, tensor) in model.params.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!("truncated in {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    if c.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(config_len, "config")?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = Model::zeroed(config).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = c.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "file declares {count} parameters, model has {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; model.params.len()];
    for _ in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".to_string()))?
            .to_string();
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * 4, &format!("data for {name}"))?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        if seen[id.0] {
            return Err(CheckpointError::Corrupt(format!(
                "duplicate parameter {name:?}"
            )));
        }
        seen[id.0] = true;
        let expected = model.params.value(id).shape().to_vec();
        if expected != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                file: shape,
                expected,
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        *model.params.value_mut(id) = Tensor::from_vec(&expected, data);
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let (_, name, _) = model
            .params
            .iter()
            .nth(missing)
            .expect("index within param set");
        return Err(CheckpointError::MissingParam(name.to_string()));
    }
    Ok(model)
}
