//! Mel filterbank and log-mel spectrogram.

use super::{stft, FeatureConfig, MelSpectrogram, WaveBuffer};
use crate::error::{Error, Result};

const LOG_EPS: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x n_fft_bins`, unnormalized.
/// `n_fft_bins` is the number of positive-frequency STFT bins
/// (`window_len / 2 + 1`).
pub fn mel_filterbank(n_fft_bins: usize, n_mels: usize, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    if n_mels == 0 || n_mels >= n_fft_bins {
        return Err(Error::InvalidArgument(
            "need 0 < n_mels < n_fft_bins".into(),
        ));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let window_len = 2 * (n_fft_bins - 1);
    let mel_max = hz_to_mel(nyquist);
    // n_mels + 2 edge points, uniformly spaced on the mel scale
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut bank = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row = vec![0.0; n_fft_bins];
        for (j, slot) in row.iter_mut().enumerate() {
            let f = j as f64 * sample_rate as f64 / window_len as f64;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            *slot = up.min(down).max(0.0);
        }
        bank.push(row);
    }
    Ok(bank)
}

/// Center frequencies of the filterbank rows, in Hz.
#[cfg(test)]
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Full front end: STFT magnitudes -> mel filterbank -> log(x + eps).
pub fn mel_spectrogram(
    wave: &WaveBuffer,
    cfg: &FeatureConfig,
    source_id: &str,
) -> Result<MelSpectrogram> {
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "expected {} Hz input, got {} Hz (resample first)",
            cfg.sample_rate, wave.sample_rate
        )));
    }
    let spec = stft(wave, cfg.window_len, cfg.hop)?;
    let n_fft_bins = cfg.window_len / 2 + 1;
    let bank = mel_filterbank(n_fft_bins, cfg.n_mels, cfg.sample_rate)?;
    let frames = spec
        .iter()
        .map(|mags| {
            bank.iter()
                .map(|row| {
                    let e: f64 = row.iter().zip(mags.iter()).map(|(w, m)| w * m).sum();
                    (e + LOG_EPS).ln()
                })
                .collect()
        })
        .collect();
    Ok(MelSpectrogram {
        frames,
        frame_rate: cfg.frame_rate(),
        source_id: source_id.to_string(),
    })
}
