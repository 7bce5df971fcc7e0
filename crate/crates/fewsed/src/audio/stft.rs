//! Short-time Fourier transform with Hann window and reflect padding.

use super::WaveBuffer;
use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};

/// Magnitude STFT. Frames are centered: the signal is reflect-padded by
/// `window_len / 2` on both ends, so frame `t` is centered at `t * hop`.
/// Returns a `T x (window_len / 2 + 1)` matrix of non-negative magnitudes,
/// with `T = 1 + (padded_len - window_len) / hop`.
pub fn stft(wave: &WaveBuffer, window_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if window_len == 0 || !window_len.is_power_of_two() {
        return Err(Error::InvalidArgument(
            "window_len must be a power of two".into(),
        ));
    }
    if hop == 0 || hop > window_len {
        return Err(Error::InvalidArgument(
            "hop must satisfy 0 < hop <= window_len".into(),
        ));
    }

    let padded = reflect_pad(&wave.samples, window_len / 2);
    let n_frames = if padded.len() >= window_len {
        1 + (padded.len() - window_len) / hop
    } else {
        1
    };
    let window = hann(window_len);
    let n_bins = window_len / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_len);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * hop;
        let mut buf: Vec<Complex<f64>> = (0..window_len)
            .map(|i| {
                let s = padded.get(start + i).copied().unwrap_or(0.0);
                Complex::new(s * window[i], 0.0)
            })
            .collect();
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.push(buf[..n_bins].iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Reflect (mirror without edge repetition) padding; degenerates to edge
/// repetition for length-1 inputs.
fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let total = n + 2 * pad;
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let idx = i as isize - pad as isize;
        out.push(samples[mirror_index(idx, n)]);
    }
    out
}

fn mirror_index(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}
