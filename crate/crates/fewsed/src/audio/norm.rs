//! Per-bin normalization statistics from the training set.

use super::MelSpectrogram;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Floor applied to per-bin standard deviations (guards silent bins).
pub const STD_FLOOR: f64 = 1e-5;

/// Per-mel-bin mean and standard deviation of log-mel energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Two-pass mean / population-std reduction over all frames of the training
/// set. Standard deviations are floored at [`STD_FLOOR`].
pub fn compute_norm_stats(train: &[MelSpectrogram]) -> Result<NormStats> {
    let n_bins = train
        .first()
        .map(|m| m.n_bins())
        .filter(|&b| b > 0)
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;

    let mut count = 0u64;
    let mut mean = vec![0.0; n_bins];
    for m in train {
        for frame in &m.frames {
            if frame.len() != n_bins {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n_bins} bins"),
                    actual: format!("{} bins", frame.len()),
                });
            }
            for (acc, &v) in mean.iter_mut().zip(frame.iter()) {
                *acc += v;
            }
            count += 1;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= count as f64;
    }

    let mut var = vec![0.0; n_bins];
    for m in train {
        for frame in &m.frames {
            for ((acc, &mu), &v) in var.iter_mut().zip(mean.iter()).zip(frame.iter()) {
                let d = v - mu;
                *acc += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|&s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

/// Apply `(x - mean) / std` per bin.
pub fn normalize(m: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if m.n_bins() != stats.mean.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bins", stats.mean.len()),
            actual: format!("{} bins", m.n_bins()),
        });
    }
    let frames = m
        .frames
        .iter()
        .map(|frame| {
            frame
                .iter()
                .zip(stats.mean.iter().zip(stats.std.iter()))
                .map(|(&v, (&mu, &sd))| (v - mu) / sd)
                .collect()
        })
        .collect();
    Ok(MelSpectrogram {
        frames,
        frame_rate: m.frame_rate,
        source_id: m.source_id.clone(),
    })
}
