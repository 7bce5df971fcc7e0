//! Minimal RIFF/WAVE codec: 16-bit integer and 32-bit float PCM.

use super::WaveBuffer;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Load a PCM WAV file and fold it down to a mono buffer in [-1, 1].
/// Multi-channel audio is averaged across channels.
pub fn load_wav(path: &Path) -> Result<WaveBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |reason: &str| Error::WavDecode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(decode_err("missing RIFF/WAVE header"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).ok_or_else(|| decode_err("chunk size overflow"))?;
        if body_end > bytes.len() {
            return Err(decode_err("chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(decode_err("fmt chunk too short"));
                }
                fmt = Some(FmtChunk {
                    format: u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    channels: u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    sample_rate: u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    bits_per_sample: u16::from_le_bytes(body[14..16].try_into().unwrap()),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| decode_err("missing fmt chunk"))?;
    let data = data.ok_or_else(|| decode_err("missing data chunk"))?;
    if fmt.channels == 0 {
        return Err(decode_err("zero channels"));
    }
    let unsupported = |reason: String| Error::WavUnsupported {
        path: path.to_path_buf(),
        reason,
    };

    let per_sample: Box<dyn Fn(&[u8]) -> f64> = match (fmt.format, fmt.bits_per_sample) {
        (1, 16) => Box::new(|b: &[u8]| {
            i16::from_le_bytes(b.try_into().unwrap()) as f64 / 32768.0
        }),
        (3, 32) => Box::new(|b: &[u8]| {
            f32::from_le_bytes(b.try_into().unwrap()) as f64
        }),
        (f, b) => {
            return Err(unsupported(format!(
                "format tag {f} with {b} bits per sample (need 16-bit int or 32-bit float)"
            )))
        }
    };
    let bytes_per_sample = fmt.bits_per_sample as usize / 8;
    let frame_size = bytes_per_sample * fmt.channels as usize;
    if frame_size == 0 || data.len() % frame_size != 0 {
        return Err(decode_err("data chunk not a whole number of frames"));
    }
    let n_frames = data.len() / frame_size;
    let mut samples = Vec::with_capacity(n_frames);
    for frame in data.chunks_exact(frame_size) {
        let mut acc = 0.0;
        for ch in frame.chunks_exact(bytes_per_sample) {
            acc += per_sample(ch);
        }
        samples.push(acc / fmt.channels as f64);
    }
    WaveBuffer::new(samples, fmt.sample_rate)
}

/// Write a mono 16-bit PCM WAV. Samples are clamped to [-1, 1].
pub fn save_wav(path: &Path, wave: &WaveBuffer) -> Result<()> {
    let n = wave.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &wave.samples {
        // inverse of the loader's /32768 scaling, saturating at full scale
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_raw_wav(path: &Path, format: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        let byte_rate = rate * channels as u32 * bits as u32 / 8;
        out.extend_from_slice(&byte_rate.to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        std::fs::write(path, out).unwrap();
    }

    #[test]
    fn loads_16bit_mono_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mono.wav");
        let mut data = Vec::new();
        for i in 0..22050i32 {
            data.extend_from_slice(&((i % 100) as i16).to_le_bytes());
        }
        write_raw_wav(&path, 1, 1, 22050, 16, &data);
        let w = load_wav(&path).unwrap();
        assert_eq!(w.samples.len(), 22050);
        assert_eq!(w.sample_rate, 22050);
    }

    #[test]
    fn stereo_opposite_channels_average_to_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let mut data = Vec::new();
        let plus = (0.5f32 * 32768.0) as i16;
        for _ in 0..100 {
            data.extend_from_slice(&plus.to_le_bytes());
            data.extend_from_slice(&(-plus).to_le_bytes());
        }
        write_raw_wav(&path, 1, 2, 8000, 16, &data);
        let w = load_wav(&path).unwrap();
        assert!(w.samples.iter().all(|&s| s.abs() < 1e-12));
    }

    #[test]
    fn int16_full_scale_value() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fs.wav");
        let mut data = Vec::new();
        data.extend_from_slice(&32767i16.to_le_bytes());
        write_raw_wav(&path, 1, 1, 8000, 16, &data);
        let w = load_wav(&path).unwrap();
        // direct integer-scaling oracle: 32767 / 32768
        assert!((w.samples[0] - 32767.0 / 32768.0).abs() < 1e-12);
    }

    #[test]
    fn loads_float32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let mut data = Vec::new();
        for v in [0.25f32, -0.75, 1.0] {
            data.extend_from_slice(&v.to_le_bytes());
        }
        write_raw_wav(&path, 3, 1, 16000, 32, &data);
        let w = load_wav(&path).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.75, 1.0]);
    }

    #[test]
    fn rejects_malformed_and_unsupported() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"not a wav at all").unwrap();
        assert!(matches!(load_wav(&bad), Err(Error::WavDecode { .. })));

        let unsupported = dir.path().join("u8.wav");
        write_raw_wav(&unsupported, 1, 1, 8000, 8, &[128, 128]);
        assert!(matches!(
            load_wav(&unsupported),
            Err(Error::WavUnsupported { .. })
        ));
    }

    #[test]
    fn save_load_roundtrip_close() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let samples: Vec<f64> = (0..500)
            .map(|i| (i as f64 * 0.05).sin() * 0.8)
            .collect();
        let w = WaveBuffer::new(samples.clone(), 22050).unwrap();
        save_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 22050);
        for (a, b) in samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}
