//! End-to-end orchestration: base training, per-file adaptation and the
//! full detection run with per-file isolation and a micro-averaged
//! aggregate.

use super::config::{RunConfig, TiMode};
use super::corpus::{AnnotationTable, CorpusManifest, ManifestEntry, Split};
use super::episode::{build_episode, flatten_segment, frame_probabilities, segment_starts};
use crate::audio::{
    compute_norm_stats, load_wav, mel_spectrogram, normalize, resample, MelSpectrogram, NormStats,
};
use crate::encoder::{train_base, ClassificationHead, Encoder, EncoderConfig, TrainExample, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::{frames_to_events, score, Event, EventExtraction, EventList, ScoreReport};
use crate::mutual::{FinetuneOptions, LoopConfig, MutualLearningReport, mutual_learning_loop};
use crate::transductive::{
    init_prototypes, posterior_table, update_classifier, Episode, PosteriorTable, UpdateOptions, POS,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Load one WAV as a (optionally normalized) log-mel spectrogram.
pub fn load_mel(
    audio: &Path,
    cfg: &RunConfig,
    stats: Option<&NormStats>,
) -> Result<MelSpectrogram> {
    let wave = load_wav(audio)?;
    let wave = resample(&wave, cfg.sample_rate)?;
    let id = audio
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mel = mel_spectrogram(&wave, &cfg.feature_config(), &id)?;
    match stats {
        Some(s) => normalize(&mel, s),
        None => Ok(mel),
    }
}

/// Artifacts of base-class training.
pub struct BaseTrainOutput {
    pub encoder: Encoder,
    pub head: ClassificationHead,
    pub stats: NormStats,
    pub class_names: Vec<String>,
    pub epoch_losses: Vec<f64>,
}

/// Train the encoder on the base split: per-bin normalization stats are
/// computed from the base files, segments are labeled by majority overlap
/// with the annotated events, and a background class absorbs event-free
/// segments (capped to keep classes balanced).
pub fn train_base_from_manifest(manifest: &CorpusManifest, cfg: &RunConfig) -> Result<BaseTrainOutput> {
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Base).collect();
    if entries.is_empty() {
        return Err(Error::Training("manifest has no base files".into()));
    }

    let raw_mels: Vec<MelSpectrogram> = entries
        .iter()
        .map(|e| load_mel(&e.audio, cfg, None))
        .collect::<Result<_>>()?;
    let stats = compute_norm_stats(&raw_mels)?;
    let mels: Vec<MelSpectrogram> = raw_mels
        .iter()
        .map(|m| normalize(m, &stats))
        .collect::<Result<_>>()?;

    let tables: Vec<AnnotationTable> = entries
        .iter()
        .map(|e| AnnotationTable::load(&e.annotations))
        .collect::<Result<_>>()?;
    let mut class_names: Vec<String> = tables
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| r.label.clone()))
        .collect();
    class_names.sort();
    class_names.dedup();
    if class_names.is_empty() {
        return Err(Error::Training("base split has no annotated events".into()));
    }
    let background = class_names.len();

    let mut data = Vec::new();
    let mut background_idx = Vec::new();
    for (mel, table) in mels.iter().zip(tables.iter()) {
        let rate = mel.frame_rate;
        for start in segment_starts(mel.n_frames(), cfg.seg_len_frames, cfg.base_seg_hop_frames) {
            let t0 = start as f64 / rate;
            let t1 = (start + cfg.seg_len_frames) as f64 / rate;
            // overlap per class
            let mut best: Option<(usize, f64)> = None;
            let mut any_overlap = 0.0;
            for row in &table.rows {
                let ov = (t1.min(row.offset) - t0.max(row.onset)).max(0.0);
                any_overlap += ov;
                if ov > 0.0 {
                    let class = class_names.iter().position(|c| *c == row.label).unwrap();
                    match best {
                        Some((_, b)) if b >= ov => {}
                        _ => best = Some((class, ov)),
                    }
                }
            }
            let class = match best {
                Some((class, ov)) if ov >= 0.5 * (t1 - t0) => class,
                _ if any_overlap == 0.0 => background,
                _ => continue, // ambiguous partial overlap
            };
            if class == background {
                background_idx.push(data.len());
            }
            data.push(TrainExample {
                segment: flatten_segment(mel, start, cfg.seg_len_frames),
                class,
            });
        }
    }

    // balance: keep at most the mean per-event-class count of background segments
    let n_event = data.len() - background_idx.len();
    let cap = (n_event / class_names.len()).max(1);
    if background_idx.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261636b);
        background_idx.shuffle(&mut rng);
        let drop: std::collections::HashSet<usize> =
            background_idx[cap..].iter().copied().collect();
        data = data
            .into_iter()
            .enumerate()
            .filter_map(|(i, ex)| (!drop.contains(&i)).then_some(ex))
            .collect();
    }

    let mut encoder = Encoder::new_seeded(
        EncoderConfig {
            in_frames: cfg.seg_len_frames,
            in_bins: cfg.n_mels,
            channels: cfg.channels.clone(),
        },
        cfg.seed,
    )?;
    let mut head = ClassificationHead::new_seeded(background + 1, encoder.embed_dim(), cfg.seed ^ 1);
    let epoch_losses = train_base(
        &mut encoder,
        &mut head,
        &data,
        &TrainOptions {
            epochs: cfg.epochs_base,
            lr: cfg.lr_base,
            batch_size: cfg.batch_size,
            seed: cfg.seed ^ 2,
        },
    )?;
    Ok(BaseTrainOutput {
        encoder,
        head,
        stats,
        class_names,
        epoch_losses,
    })
}

fn file_episode(
    entry: &ManifestEntry,
    cfg: &RunConfig,
    encoder: &Encoder,
    stats: &NormStats,
    file_seed: u64,
) -> Result<(MelSpectrogram, Vec<Event>, Episode)> {
    let mel = load_mel(&entry.audio, cfg, Some(stats))?;
    let table = AnnotationTable::load(&entry.annotations)?;
    let positives: Vec<Event> = table
        .positive_rows()
        .iter()
        .map(|r| Event {
            onset: r.onset,
            offset: r.offset,
        })
        .collect();
    let episode = build_episode(
        &mel,
        &positives,
        encoder,
        cfg.neg_count,
        file_seed,
        cfg.seg_len_frames,
        cfg.seg_hop_frames,
    )?;
    Ok((mel, positives, episode))
}

/// Turn query posteriors into a scored event list against the part of the
/// reference after the fifth event's offset.
fn score_posteriors(
    table: &PosteriorTable,
    episode: &Episode,
    n_frames: usize,
    reference_after: &EventList,
    cfg: &RunConfig,
) -> Result<(EventList, ScoreReport)> {
    let starts: Vec<usize> = episode.query.iter().map(|q| q.start_frame).collect();
    let pos_probs: Vec<f64> = table.rows.iter().map(|r| r[POS]).collect();
    let frame_probs = frame_probabilities(n_frames, episode.seg_len_frames, &starts, &pos_probs);
    let events = frames_to_events(
        &frame_probs,
        episode.frame_rate,
        &EventExtraction {
            threshold: cfg.threshold,
            min_duration: cfg.min_duration,
            merge_gap: cfg.merge_gap,
        },
    )?;
    let report = score(&events, reference_after, cfg.iou_min);
    Ok((events, report))
}

fn update_options(cfg: &RunConfig) -> UpdateOptions {
    UpdateOptions {
        epochs: cfg.epochs_w,
        lr: cfg.lr_w,
        lambda_ce: cfg.lambda_ce,
        mode: cfg.loss.loss_mode().unwrap_or(crate::transductive::LossMode::CeMi),
    }
}

fn loop_config(cfg: &RunConfig, file_seed: u64) -> LoopConfig {
    LoopConfig {
        iterations: cfg.iterations,
        tau: cfg.tau,
        normalize_prototypes: cfg.normalize_prototypes,
        update: update_options(cfg),
        finetune: FinetuneOptions {
            epochs: cfg.epochs_ft,
            lr_encoder: cfg.lr_ft,
            lr_head: cfg.lr_head,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            negatives_cap: cfg.negatives_cap,
            pseudo_cap: cfg.pseudo_cap,
            include_support: true,
            seed: file_seed,
        },
    }
}

/// Per-file result inside a run report. A failed file carries an error
/// message and contributes nothing to the aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileReport {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreReport>,
    pub n_pred_events: usize,
    pub n_ref_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutual: Option<MutualLearningReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicted: Vec<Event>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub files: Vec<FileReport>,
    pub aggregate: ScoreReport,
}

fn failed(name: &str, e: &Error) -> FileReport {
    FileReport {
        file: name.to_string(),
        error: Some(e.to_string()),
        score: None,
        n_pred_events: 0,
        n_ref_events: 0,
        mutual: None,
        predicted: Vec::new(),
    }
}

fn run_one_file(entry: &ManifestEntry, index: usize, cfg: &RunConfig, encoder: &Encoder, stats: &NormStats) -> Result<FileReport> {
    let name = entry
        .audio
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file_seed = cfg.seed.wrapping_add(1 + index as u64);
    let (mel, positives, episode) = file_episode(entry, cfg, encoder, stats, file_seed)?;
    let fifth_offset = positives[4].offset;
    let reference_after = EventList::new(positives.clone())?.after(fifth_offset);
    let n_frames = mel.n_frames();

    let (final_posteriors, mutual) = if cfg.loss == TiMode::None {
        // raw-prototype baseline: no update, no mutual learning
        let c0 = init_prototypes(&episode.support, cfg.normalize_prototypes)?;
        (posterior_table(&c0, &episode.query)?, None)
    } else {
        let outcome = mutual_learning_loop(encoder, &episode, &loop_config(cfg, file_seed), |pt| {
            score_posteriors(pt, &episode, n_frames, &reference_after, cfg)
                .map(|(_, report)| report)
                .ok()
        })?;
        (outcome.posteriors, Some(outcome.report))
    };

    let (events, report) =
        score_posteriors(&final_posteriors, &episode, n_frames, &reference_after, cfg)?;
    Ok(FileReport {
        file: name,
        error: None,
        score: Some(report),
        n_pred_events: events.len(),
        n_ref_events: reference_after.len(),
        mutual,
        predicted: events.events().to_vec(),
    })
}

/// Full detection run over the manifest's test split. Per-file failures are
/// isolated into their report entry; the aggregate micro-averages the counts
/// of the successful files.
pub fn run_detection(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    encoder: &Encoder,
    stats: &NormStats,
) -> Result<RunReport> {
    cfg.validate()?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument("manifest has no test files".into()));
    }
    let files: Vec<FileReport> = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let name = entry
                .audio
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            run_one_file(entry, i, cfg, encoder, stats).unwrap_or_else(|e| failed(&name, &e))
        })
        .collect();

    let (tp, fp, fn_) = files
        .iter()
        .filter_map(|f| f.score.as_ref())
        .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
    Ok(RunReport {
        config: cfg.clone(),
        files,
        aggregate: ScoreReport::from_counts(tp, fp, fn_),
    })
}

/// Per-episode record of the `adapt` command: transductive refinement of one
/// file's classifier with the configured loss, without mutual learning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub epoch_losses: Vec<f64>,
    pub marginal: [f64; 2],
    pub mean_max_posterior: f64,
    pub n_support: usize,
    pub n_query: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    pub config: RunConfig,
    pub episodes: Vec<AdaptRecord>,
}

fn adapt_one_file(
    entry: &ManifestEntry,
    index: usize,
    cfg: &RunConfig,
    encoder: &Encoder,
    stats: &NormStats,
) -> Result<AdaptRecord> {
    let name = entry
        .audio
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file_seed = cfg.seed.wrapping_add(1 + index as u64);
    let (_, _, episode) = file_episode(entry, cfg, encoder, stats, file_seed)?;
    let c0 = init_prototypes(&episode.support, cfg.normalize_prototypes)?;
    let (posteriors, epoch_losses) = match cfg.loss.loss_mode() {
        None => (posterior_table(&c0, &episode.query)?, Vec::new()),
        Some(_) => {
            let result = update_classifier(&c0, &episode, &update_options(cfg))?;
            (result.posteriors, result.epoch_losses)
        }
    };
    let mean_max = posteriors
        .rows
        .iter()
        .map(|r| r[0].max(r[1]))
        .sum::<f64>()
        / posteriors.rows.len() as f64;
    Ok(AdaptRecord {
        file: name,
        error: None,
        epoch_losses,
        marginal: posteriors.marginal,
        mean_max_posterior: mean_max,
        n_support: episode.support.len(),
        n_query: episode.query.len(),
    })
}

/// Run the transductive-adaptation stage alone on every test file.
pub fn adapt_detection(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    encoder: &Encoder,
    stats: &NormStats,
) -> Result<AdaptReport> {
    cfg.validate()?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument("manifest has no test files".into()));
    }
    let episodes = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            adapt_one_file(entry, i, cfg, encoder, stats).unwrap_or_else(|e| AdaptRecord {
                file: entry
                    .audio
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                error: Some(e.to_string()),
                epoch_losses: Vec::new(),
                marginal: [0.0; 2],
                mean_max_posterior: 0.0,
                n_support: 0,
                n_query: 0,
            })
        })
        .collect();
    Ok(AdaptReport {
        config: cfg.clone(),
        episodes,
    })
}
