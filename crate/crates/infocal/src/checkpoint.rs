//! Binary checkpoint format.
//!
//! Layout: magic `ICAL`, version byte `0x01`, then a sequence of records
//! until end of file. Each record is
//!
//! ```text
//! name_len: u32 LE | name: UTF-8 | rank: u32 LE | dims: rank * u32 LE | payload: f32 LE row-major
//! ```
//!
//! Payloads are moved through `f32::to_bits`/`from_bits`, so round trips are
//! bit-exact for every bit pattern. Non-tensor metadata (vocab hash, model
//! shape) rides along as small tensors under `meta.*` names.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ICAL";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0:#04x}")]
    BadVersion(u8),
    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: &'static str },
    #[error("record name is not valid UTF-8")]
    BadName,
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("checkpoint was written for a different vocabulary (hash {found:#018x}, expected {expected:#018x})")]
    VocabMismatch { found: u64, expected: u64 },
}

pub type CkptResult<T> = Result<T, CheckpointError>;

/// An ordered list of named f32 tensors, the in-memory form of a checkpoint.
#[derive(Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Store a u64 as two u32 words (low, high) reinterpreted as f32 bits.
    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) {
        let lo = f32::from_bits(v as u32);
        let hi = f32::from_bits((v >> 32) as u32);
        self.push(name, Tensor::new(vec![2], vec![lo, hi]));
    }

    pub fn get_u64(&self, name: &str) -> Option<u64> {
        let t = self.get(name)?;
        if t.numel() != 2 {
            return None;
        }
        let lo = t.data()[0].to_bits() as u64;
        let hi = t.data()[1].to_bits() as u64;
        Some(lo | (hi << 32))
    }

    /// Store a small non-negative integer as an exact f32 value.
    pub fn push_usize(&mut self, name: impl Into<String>, v: usize) {
        debug_assert!(v < (1 << 24));
        self.push(name, Tensor::scalar(v as f32));
    }

    pub fn get_usize(&self, name: &str) -> Option<usize> {
        self.get(name).map(|t| t.item() as usize)
    }

    /// Append every parameter of a set, names taken from the set.
    pub fn push_params(&mut self, params: &ParamSet<f32>) {
        for (_, name, tensor) in params.iter() {
            self.push(name, tensor.clone());
        }
    }

    /// Load values back into a parameter set for a given name prefix.
    pub fn restore_params(&self, params: &mut ParamSet<f32>, prefix: &str) -> CkptResult<()> {
        let entries: Vec<(String, Tensor<f32>)> = self
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .cloned()
            .collect();
        params
            .load_values(&entries)
            .map_err(CheckpointError::ParamMismatch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkptResult<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut version = [0u8; 1];
        read_exact(&mut r, &mut version, "version")?;
        if version[0] != VERSION {
            return Err(CheckpointError::BadVersion(version[0]));
        }
        let mut entries = Vec::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, "dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_bits(read_u32(&mut r, "payload")?));
            }
            entries.push((name, Tensor::new(shape, data)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> CkptResult<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> CkptResult<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Reject the checkpoint unless its recorded vocabulary hash matches.
    pub fn verify_vocab(&self, expected: u64) -> CkptResult<()> {
        let found = self
            .get_u64("meta.vocab_hash")
            .ok_or_else(|| CheckpointError::Missing("meta.vocab_hash".into()))?;
        if found != expected {
            return Err(CheckpointError::VocabMismatch { found, expected });
        }
        Ok(())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], context: &'static str) -> CkptResult<()> {
    if r.len() < buf.len() {
        return Err(CheckpointError::Truncated { context });
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8], context: &'static str) -> CkptResult<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}
