//! Versioned model container.
//!
//! Layout: 8-byte magic `LOOKLAB\x01`, u32 LE format version, u32 LE header
//! length, a JSON header `{kind, config, shapes}`, then every tensor as
//! little-endian f32 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LookError, Result};

const MAGIC: &[u8; 8] = b"LOOKLAB\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: &impl Serialize,
    shapes: Vec<Vec<usize>>,
    data: &[f32],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        shapes,
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| LookError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| LookError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| LookError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| LookError::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(LookError::Checkpoint(format!(
            "{} is not a looklab checkpoint",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(LookError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut word).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.kind != expected_kind {
        return Err(LookError::Checkpoint(format!(
            "expected a `{expected_kind}` checkpoint, found `{}`",
            header.kind
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() % 4 != 0 {
        return Err(LookError::Checkpoint("weight payload is not f32-aligned".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        shapes: header.shapes,
        data,
    })
}
