//! Audio front end: WAV ingest, resampling, STFT and log-mel features.
//!
//! The pipeline is `load_wav -> resample -> stft -> mel filterbank -> log`,
//! followed by per-bin normalization against training-set statistics.

mod mel;
mod norm;
mod resample;
mod stft;
mod wav;

pub use mel::{mel_filterbank, mel_spectrogram};
pub use norm::{compute_norm_stats, normalize, NormStats};
pub use resample::resample;
pub use stft::stft;
pub use wav::{load_wav, save_wav};

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Mono audio buffer with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty audio buffer".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel feature matrix for one audio file. `frames[t][b]` is the log-mel
/// energy of frame `t` in mel bin `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub frame_rate: f64,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.first().map(|f| f.len()).unwrap_or(0)
    }
}

/// STFT / mel front-end parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        // 22.05 kHz, 1024-sample window, hop 256 -> ~86 frames per second.
        Self {
            sample_rate: 22050,
            window_len: 1024,
            hop: 256,
            n_mels: 128,
        }
    }
}

impl FeatureConfig {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

const MATRIX_MAGIC: &[u8; 4] = b"FMAT";

/// Write a matrix as magic bytes, dims (little-endian u32) and row-major f32.
pub fn write_matrix<W: Write>(out: &mut W, rows: &[Vec<f64>]) -> std::io::Result<()> {
    out.write_all(MATRIX_MAGIC)?;
    let n_rows = rows.len() as u32;
    let n_cols = rows.first().map(|r| r.len()).unwrap_or(0) as u32;
    out.write_all(&n_rows.to_le_bytes())?;
    out.write_all(&n_cols.to_le_bytes())?;
    for row in rows {
        for &v in row {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a matrix written by [`write_matrix`].
pub fn read_matrix<R: Read>(input: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::io("<matrix>", e))?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::InvalidArgument("bad matrix magic".into()));
    }
    let mut dims = [0u8; 8];
    input
        .read_exact(&mut dims)
        .map_err(|e| Error::io("<matrix>", e))?;
    let n_rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let n_cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n_rows * n_cols * 4];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::io("<matrix>", e))?;
    let mut rows = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let mut row = Vec::with_capacity(n_cols);
        for c in 0..n_cols {
            let off = (r * n_cols + c) * 4;
            row.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Dump the log-mel features of one WAV file to the binary matrix format.
pub fn dump_features(
    wav_path: &Path,
    out_path: &Path,
    cfg: &FeatureConfig,
    stats: Option<&NormStats>,
) -> Result<()> {
    let wave = load_wav(wav_path)?;
    let wave = resample(&wave, cfg.sample_rate)?;
    let id = wav_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut mel = mel_spectrogram(&wave, cfg, &id)?;
    if let Some(s) = stats {
        mel = normalize(&mel, s)?;
    }
    let mut file = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut out = std::io::BufWriter::new(&mut file);
    write_matrix(&mut out, &mel.frames).map_err(|e| Error::io(out_path, e))
}
