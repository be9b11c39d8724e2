//! Self-describing weight files.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header holding the model config, `u64` parameter count, then the
//! parameters as little-endian `f32`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Cvae, CvaeConfig};

const MAGIC: &[u8; 8] = b"PVAECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: CvaeConfig,
}

fn io(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Cvae<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
        })
        .expect("serialisable");
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("in-memory write");
        out.write_u32::<LittleEndian>(header.len() as u32)
            .expect("in-memory write");
        out.extend_from_slice(&header);
        out.write_u64::<LittleEndian>(self.params.len() as u64)
            .expect("in-memory write");
        for &p in &self.params {
            out.write_f32::<LittleEndian>(p).expect("in-memory write");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| io(path, e))?;
        let bad = |msg: String| CheckpointError::Format {
            path: path.display().to_string(),
            msg,
        };
        let mut r = Cursor::new(&bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header".into()))? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)
            .map_err(|_| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header".into()))? as usize;
        let mut params = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut params)
            .map_err(|_| bad("truncated parameter block".into()))?;
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after parameters".into()));
        }
        Cvae::with_params(header.config, params).map_err(|e| bad(e.to_string()))
    }
}

/// Hex SHA-256 of a checkpoint file, used to tie downstream artifacts to
/// the exact encoder weights they were built from.
pub fn checkpoint_hash(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
