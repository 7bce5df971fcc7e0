//! Windowed-sinc (polyphase-style) sample-rate conversion.

use super::WaveBuffer;
use crate::error::{Error, Result};

/// Half-width of the sinc kernel in input samples (at the lower Nyquist).
const HALF_TAPS: usize = 32;

/// Resample to `target_rate` with a Hann-windowed sinc kernel cut off at the
/// lower of the two Nyquist frequencies. The identity rate is a no-op clone.
pub fn resample(wave: &WaveBuffer, target_rate: u32) -> Result<WaveBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target_rate must be > 0".into()));
    }
    if target_rate == wave.sample_rate {
        return Ok(wave.clone());
    }
    let src_rate = wave.sample_rate as f64;
    let dst_rate = target_rate as f64;
    let n_in = wave.samples.len();
    let n_out = ((n_in as u64 * target_rate as u64 + wave.sample_rate as u64 / 2)
        / wave.sample_rate as u64)
        .max(1) as usize;

    // cutoff relative to the input Nyquist; when downsampling the kernel is
    // widened by 1/cutoff so the stopband still attenuates
    let cutoff = (dst_rate / src_rate).min(1.0);
    let half_width = (HALF_TAPS as f64 / cutoff).ceil() as isize;

    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let center = i as f64 * src_rate / dst_rate;
        let j0 = (center.floor() as isize) - half_width + 1;
        let j1 = (center.floor() as isize) + half_width;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for j in j0..=j1 {
            let u = center - j as f64;
            let w = kernel(u, cutoff, half_width as f64);
            wsum += w;
            if j >= 0 && (j as usize) < n_in {
                acc += wave.samples[j as usize] * w;
            }
        }
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 });
    }
    WaveBuffer::new(out, target_rate)
}

fn kernel(u: f64, cutoff: f64, half_width: f64) -> f64 {
    let x = u / half_width;
    if x.abs() >= 1.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (std::f64::consts::PI * x).cos());
    cutoff * sinc(cutoff * u) * window
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}
