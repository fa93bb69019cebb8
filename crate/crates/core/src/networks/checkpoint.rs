//! Binary checkpoint format.
//!
//! ```text
//! "PALN"                      4 bytes magic
//! format_version              u32 LE
//! config length               u32 LE, followed by that many bytes of JSON
//! tensor count                u32 LE
//! per tensor:
//!   name length               u32 LE
//!   name                      UTF-8, "lid.<tensor>" or "phonetic.<tensor>"
//!   rows, cols                u32 LE each
//!   payload                   rows*cols f64 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelBundle, Network, NetworkConfig};
use crate::lstmp::ReceiverKind;

pub const MAGIC: &[u8; 4] = b"PALN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("unsupported version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad config block: {0}")]
    BadConfig(String),
    #[error("tensor {name}: header says {got:?}, config implies {expected:?}")]
    DimensionMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::NotACheckpoint => 2,
            CheckpointError::UnsupportedVersion { .. } => 3,
            CheckpointError::Truncated => 4,
            CheckpointError::BadConfig(_) => 5,
            CheckpointError::DimensionMismatch { .. } => 6,
            CheckpointError::UnexpectedTensor(_) => 7,
            CheckpointError::NonFinite(_) => 8,
            CheckpointError::TrailingBytes(_) => 9,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    receiver: ReceiverKind,
    lid: NetworkConfig,
    phonetic: Option<NetworkConfig>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

fn write_network(out: &mut Vec<u8>, prefix: &str, net: &Network) {
    for t in net.params.tensors() {
        let name = format!("{prefix}.{}", t.name);
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rows);
        put_u32(out, t.cols);
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            receiver: self.receiver,
            lid: self.lid_model.config.clone(),
            phonetic: self.phonetic_model.as_ref().map(|n| n.config.clone()),
        };
        let json = serde_json::to_vec(&header).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        let count = self.lid_model.params.tensors().len()
            + self
                .phonetic_model
                .as_ref()
                .map_or(0, |n| n.params.tensors().len());
        put_u32(&mut out, count);
        write_network(&mut out, "lid", &self.lid_model);
        if let Some(ph) = &self.phonetic_model {
            write_network(&mut out, "phonetic", ph);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut rd = Reader { bytes, at: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::NotACheckpoint);
        }
        rd.at = 4;
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let len = rd.u32()? as usize;
        let header: Header = serde_json::from_slice(rd.take(len)?)
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        if header.receiver != header.lid.receiver {
            return Err(CheckpointError::BadConfig(
                "bundle receiver differs from LID config".into(),
            ));
        }
        let mut lid = Network::zeros(header.lid).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        let mut phonetic = header
            .phonetic
            .map(Network::zeros)
            .transpose()
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

        let count = rd.u32()? as usize;
        let expected = lid.params.tensors().len()
            + phonetic.as_ref().map_or(0, |n| n.params.tensors().len());
        if count != expected {
            return Err(CheckpointError::BadConfig(format!(
                "{count} tensors in file, config implies {expected}"
            )));
        }
        read_network(&mut rd, "lid", &mut lid)?;
        if let Some(ph) = phonetic.as_mut() {
            read_network(&mut rd, "phonetic", ph)?;
        }
        if rd.at != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - rd.at));
        }
        ModelBundle::new(lid, phonetic).map_err(|e| CheckpointError::BadConfig(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn read_network(rd: &mut Reader<'_>, prefix: &str, net: &mut Network) -> Result<(), CheckpointError> {
    for t in net.params.tensors_mut() {
        let want = format!("{prefix}.{}", t.name);
        let len = rd.u32()? as usize;
        let name = String::from_utf8_lossy(rd.take(len)?).into_owned();
        if name != want {
            return Err(CheckpointError::UnexpectedTensor(name));
        }
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        if (rows, cols) != (t.rows, t.cols) {
            return Err(CheckpointError::DimensionMismatch {
                name,
                expected: (t.rows, t.cols),
                got: (rows, cols),
            });
        }
        let payload = rd.take(rows * cols * 8)?;
        for (dst, chunk) in t.data.iter_mut().zip(payload.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            if !dst.is_finite() {
                return Err(CheckpointError::NonFinite(name));
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle, CheckpointError> {
    ModelBundle::from_bytes(&fs::read(path)?)
}
