//! Self-describing binary container shared by datasets and model weights.
//!
//! Layout (little endian): 8-byte magic `OTFSISAC`, `u32` format version,
//! `u32` kind, `u64` header length, UTF-8 JSON header, then the body as
//! consecutive `f64` values to the end of the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"OTFSISAC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    Dataset = 1,
    PredictorWeights = 2,
    PreeqWeights = 3,
}

impl ContainerKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Self::Dataset),
            2 => Some(Self::PredictorWeights),
            3 => Some(Self::PreeqWeights),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an otfs-isac container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container kind {got} where {expected:?} was expected")]
    Kind { expected: ContainerKind, got: u32 },
    #[error("container is truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("body has {got} values, header implies {expected}")]
    BodyLength { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub header: serde_json::Value,
    pub body: Vec<f64>,
}

impl Container {
    pub fn new<H: Serialize>(kind: ContainerKind, header: &H, body: Vec<f64>) -> Result<Self, ContainerError> {
        Ok(Self {
            kind,
            header: serde_json::to_value(header)?,
            body,
        })
    }

    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H, ContainerError> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON values always serialize");
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.body {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: ContainerKind) -> Result<Self, ContainerError> {
        if bytes.len() < 24 {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(8)]) {
                ContainerError::Truncated
            } else {
                ContainerError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let kind = u32_at(12);
        if kind != expected as u32 {
            return Err(ContainerError::Kind { expected, got: kind });
        }
        let header_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body_start = 24usize.checked_add(header_len).ok_or(ContainerError::Truncated)?;
        if bytes.len() < body_start || !(bytes.len() - body_start).is_multiple_of(8) {
            return Err(ContainerError::Truncated);
        }
        let header = serde_json::from_slice(&bytes[24..body_start])?;
        let body = bytes[body_start..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            kind: ContainerKind::from_u32(kind).expect("checked against expected"),
            header,
            body,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path, expected: ContainerKind) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, expected)
    }
}
