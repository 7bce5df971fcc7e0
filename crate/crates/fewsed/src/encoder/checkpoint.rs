//! Encoder checkpoint file: magic, format version, architecture descriptor,
//! little-endian f64 parameter tensors.

use super::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FSEC";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, encoder: &Encoder) -> Result<()> {
    let cfg = encoder.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.in_frames as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.in_bins as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.channels.len() as u32).to_le_bytes());
    for &c in &cfg.channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(encoder.n_params() as u64).to_le_bytes());
    for p in encoder.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let read_u32 = |file: &mut std::fs::File| -> Result<u32> {
        let mut b = [0u8; 4];
        file.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(b))
    };
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if read_u32(&mut file)? != VERSION {
        return Err(bad("unsupported version"));
    }
    let in_frames = read_u32(&mut file)? as usize;
    let in_bins = read_u32(&mut file)? as usize;
    let n_blocks = read_u32(&mut file)? as usize;
    if n_blocks == 0 || n_blocks > 64 {
        return Err(bad("implausible block count"));
    }
    let mut channels = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        channels.push(read_u32(&mut file)? as usize);
    }
    let mut b8 = [0u8; 8];
    file.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
    let n_params = u64::from_le_bytes(b8) as usize;
    let mut buf = vec![0u8; n_params * 8];
    file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let params: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Encoder::from_params(
        EncoderConfig {
            in_frames,
            in_bins,
            channels,
        },
        params,
    )
    .map_err(|e| match e {
        Error::ShapeMismatch { .. } => bad("parameter count does not match architecture"),
        other => other,
    })
}
