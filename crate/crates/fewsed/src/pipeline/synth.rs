//! Synthetic corpus generation: a desk-scale stand-in for a real bioacoustic
//! corpus. Base files carry tonal event classes, test files carry chirp
//! classes (the two class sets are disjoint), everything over pink noise at
//! a configurable SNR. Annotations are exact by construction.

use super::corpus::{AnnotationRow, AnnotationTable, CorpusManifest, ManifestEntry, Split};
use crate::audio::{save_wav, WaveBuffer};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_base_files: usize,
    pub n_test_files: usize,
    /// Number of distinct tonal base classes.
    pub class_count: usize,
    /// Approximate events per second.
    pub event_rate: f64,
    /// Approximate rate of unannotated distractor sounds in test files
    /// (other chirp class and an off-class tone); they never overlap target
    /// events. Zero disables them.
    pub distractor_rate: f64,
    pub snr_db: f64,
    pub base_duration_s: f64,
    pub test_duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_base_files: 4,
            n_test_files: 8,
            class_count: 4,
            event_rate: 0.7,
            distractor_rate: 0.5,
            snr_db: 10.0,
            base_duration_s: 15.0,
            test_duration_s: 20.0,
            sample_rate: 22050,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_base_files == 0 || self.n_test_files == 0 {
            return Err(Error::InvalidArgument("need base and test files".into()));
        }
        if self.class_count == 0 || self.class_count > 8 {
            return Err(Error::InvalidArgument(
                "class_count must be in [1, 8]".into(),
            ));
        }
        if !(self.event_rate > 0.0) || !(self.base_duration_s > 1.0) || !(self.test_duration_s > 1.0)
        {
            return Err(Error::InvalidArgument("implausible synthesis spec".into()));
        }
        Ok(())
    }
}

/// Tone frequency of a base class; all below the chirp band.
fn base_class_freq(class: usize) -> f64 {
    400.0 + 250.0 * class as f64
}

const EVENT_AMP: f64 = 0.3;
const RAMP_S: f64 = 0.01;
const MIN_EVENT_S: f64 = 0.15;
const MAX_EVENT_S: f64 = 0.35;

#[derive(Debug, Clone, Copy)]
enum Template {
    Tone { freq: f64 },
    Chirp { f0: f64, f1: f64 },
}

/// Trapezoid envelope with short linear attack/release ramps.
fn envelope(t: f64, dur: f64) -> f64 {
    let ramp = RAMP_S.min(dur / 4.0);
    if t < ramp {
        t / ramp
    } else if t > dur - ramp {
        (dur - t) / ramp
    } else {
        1.0
    }
}

fn render_event(samples: &mut [f64], sr: f64, onset: f64, dur: f64, template: Template) {
    let start = (onset * sr).round() as usize;
    let n = (dur * sr).round() as usize;
    for i in 0..n {
        let idx = start + i;
        if idx >= samples.len() {
            break;
        }
        let t = i as f64 / sr;
        let phase = match template {
            Template::Tone { freq } => 2.0 * PI * freq * t,
            // linear sweep: instantaneous frequency f0 + (f1-f0) * t / dur
            Template::Chirp { f0, f1 } => 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / dur),
        };
        samples[idx] += EVENT_AMP * envelope(t, dur) * (0.8 * phase.sin() + 0.2 * (2.0 * phase).sin());
    }
}

/// Seeded pink noise (Paul Kellet's economy filter over white noise).
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 6];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.random_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        out.push(b.iter().sum::<f64>() + w * 0.5362);
    }
    out
}

fn rms(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

struct RenderedFile {
    wave: WaveBuffer,
    events: Vec<(f64, f64, usize)>, // onset, offset, class index
}

fn render_file(
    duration_s: f64,
    sr: u32,
    templates: &[Template],
    distractors: &[Template],
    event_rate: f64,
    distractor_rate: f64,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> RenderedFile {
    let n = (duration_s * sr as f64).round() as usize;
    let mut clean = vec![0.0; n];
    let mut events = Vec::new();
    let mean_gap = 1.0 / event_rate;
    let mut t = rng.random_range(0.5 * mean_gap..mean_gap);
    while t + MAX_EVENT_S + 0.1 < duration_s {
        let dur = rng.random_range(MIN_EVENT_S..MAX_EVENT_S);
        let class = rng.random_range(0..templates.len());
        render_event(&mut clean, sr as f64, t, dur, templates[class]);
        events.push((t, t + dur, class));
        t += dur + rng.random_range(0.5 * mean_gap..1.5 * mean_gap);
    }

    // unannotated distractor sounds, kept clear of the target events
    if !distractors.is_empty() && distractor_rate > 0.0 {
        let margin = 0.1;
        let mean_gap = 1.0 / distractor_rate;
        let mut t = rng.random_range(0.0..mean_gap);
        while t + MAX_EVENT_S + 0.1 < duration_s {
            let dur = rng.random_range(MIN_EVENT_S..MAX_EVENT_S);
            let clear = events
                .iter()
                .all(|&(on, off, _)| t + dur + margin <= on || t >= off + margin);
            if clear {
                let template = distractors[rng.random_range(0..distractors.len())];
                render_event(&mut clean, sr as f64, t, dur, template);
            }
            t += dur + rng.random_range(0.5 * mean_gap..1.5 * mean_gap);
        }
    }

    // scale noise so that event-region SNR hits the target
    let event_rms = rms(events.iter().flat_map(|&(on, off, _)| {
        let a = (on * sr as f64).round() as usize;
        let b = ((off * sr as f64).round() as usize).min(n);
        clean[a..b].iter().copied().collect::<Vec<_>>()
    }));
    let noise = pink_noise(n, rng);
    let noise_rms = rms(noise.iter().copied()).max(1e-12);
    let gain = event_rms / 10f64.powf(snr_db / 20.0) / noise_rms;

    let samples: Vec<f64> = clean
        .iter()
        .zip(noise.iter())
        .map(|(&c, &w)| (c + gain * w).clamp(-1.0, 1.0))
        .collect();
    RenderedFile {
        wave: WaveBuffer::new(samples, sr).expect("non-empty synthetic buffer"),
        events,
    }
}

/// Generate the corpus under `out_dir` and write `manifest.json` there.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();

    let base_templates: Vec<Template> = (0..spec.class_count)
        .map(|c| Template::Tone {
            freq: base_class_freq(c),
        })
        .collect();
    // test classes are chirps in a band above every base tone
    let test_templates = [
        Template::Chirp {
            f0: 2500.0,
            f1: 4500.0,
        },
        Template::Chirp {
            f0: 4500.0,
            f1: 2500.0,
        },
    ];

    for i in 0..spec.n_base_files {
        let name = format!("base_{i:02}");
        let rendered = render_file(
            spec.base_duration_s,
            spec.sample_rate,
            &base_templates,
            &[],
            spec.event_rate,
            0.0,
            spec.snr_db,
            &mut rng,
        );
        let wav = out_dir.join(format!("{name}.wav"));
        let csv = out_dir.join(format!("{name}.csv"));
        save_wav(&wav, &rendered.wave)?;
        AnnotationTable {
            rows: rendered
                .events
                .iter()
                .map(|&(onset, offset, class)| AnnotationRow {
                    audio_id: format!("{name}.wav"),
                    onset,
                    offset,
                    label: format!("tone_{class}"),
                })
                .collect(),
        }
        .save(&csv)?;
        entries.push(ManifestEntry {
            audio: format!("{name}.wav").into(),
            annotations: format!("{name}.csv").into(),
            split: Split::Base,
        });
    }

    for i in 0..spec.n_test_files {
        let name = format!("test_{i:02}");
        // one chirp class per test file; the other chirp plus an off-class
        // tone act as unannotated distractors
        let template = [test_templates[i % 2]];
        let distractors = [
            test_templates[(i + 1) % 2],
            Template::Tone { freq: 3500.0 },
        ];
        let rendered = render_file(
            spec.test_duration_s,
            spec.sample_rate,
            &template,
            &distractors,
            spec.event_rate,
            spec.distractor_rate,
            spec.snr_db,
            &mut rng,
        );
        let wav = out_dir.join(format!("{name}.wav"));
        let csv = out_dir.join(format!("{name}.csv"));
        save_wav(&wav, &rendered.wave)?;
        AnnotationTable {
            rows: rendered
                .events
                .iter()
                .map(|&(onset, offset, _)| AnnotationRow {
                    audio_id: format!("{name}.wav"),
                    onset,
                    offset,
                    label: "POS".into(),
                })
                .collect(),
        }
        .save(&csv)?;
        entries.push(ManifestEntry {
            audio: format!("{name}.wav").into(),
            annotations: format!("{name}.csv").into(),
            split: Split::Test,
        });
    }

    let manifest = CorpusManifest {
        entries,
        norm_stats: None,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    // reload so the caller gets resolved absolute paths
    CorpusManifest::load(&out_dir.join("manifest.json"))
}
