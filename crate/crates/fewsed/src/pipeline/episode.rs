//! Episode construction: turn one annotated test file into a support set
//! (segments covering the first five positive events plus sampled negative
//! segments) and a query set (everything after the fifth event's offset).

use crate::audio::MelSpectrogram;
use crate::encoder::{l2_normalize, Encoder};
use crate::error::{Error, Result};
use crate::eval::EventList;
use crate::transductive::{Episode, Label, QueryExample, SupportExample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Start frames of every full-length sliding window.
pub fn segment_starts(n_frames: usize, seg_len: usize, seg_hop: usize) -> Vec<usize> {
    if n_frames < seg_len {
        return Vec::new();
    }
    (0..=n_frames - seg_len).step_by(seg_hop.max(1)).collect()
}

/// Flatten `seg_len` frames starting at `start` into the encoder's input
/// layout (frame-major).
pub fn flatten_segment(mel: &MelSpectrogram, start: usize, seg_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg_len * mel.n_bins());
    for frame in &mel.frames[start..start + seg_len] {
        out.extend_from_slice(frame);
    }
    out
}

/// Seconds of overlap between `[a0, a1)` and the (disjoint, sorted) events.
fn overlap_with(events: &EventList, a0: f64, a1: f64) -> f64 {
    events
        .events()
        .iter()
        .map(|e| (a1.min(e.offset) - a0.max(e.onset)).max(0.0))
        .sum()
}

/// Build a few-shot episode from one annotated file.
///
/// * support POS: segments whose duration overlaps the union of the first
///   five positive events by at least 50%;
/// * support NEG: `neg_count` seeded-random segments that overlap no
///   positive annotation and end no later than the fifth event's offset;
/// * query: every segment starting at or after the fifth event's offset.
pub fn build_episode(
    mel: &MelSpectrogram,
    positives: &[crate::eval::Event],
    encoder: &Encoder,
    neg_count: usize,
    seed: u64,
    seg_len: usize,
    seg_hop: usize,
) -> Result<Episode> {
    let fail = |reason: String| Error::Episode {
        source_id: mel.source_id.clone(),
        reason,
    };
    if positives.len() < 5 {
        return Err(fail(format!(
            "need at least 5 positive annotations, got {}",
            positives.len()
        )));
    }
    if neg_count == 0 {
        return Err(fail("neg_count must be positive".into()));
    }
    let first_five = EventList::new(positives[..5].to_vec())?;
    let all_pos = EventList::new(positives.to_vec())?;
    let fifth_offset = positives[4].offset;
    let rate = mel.frame_rate;

    let mut pos_starts = Vec::new();
    let mut neg_candidates = Vec::new();
    let mut query_starts = Vec::new();
    for start in segment_starts(mel.n_frames(), seg_len, seg_hop) {
        let t0 = start as f64 / rate;
        let t1 = (start + seg_len) as f64 / rate;
        if t0 >= fifth_offset {
            query_starts.push(start);
            continue;
        }
        if overlap_with(&first_five, t0, t1) >= 0.5 * (t1 - t0) {
            pos_starts.push(start);
        } else if overlap_with(&all_pos, t0, t1) == 0.0 && t1 <= fifth_offset {
            neg_candidates.push(start);
        }
    }
    if pos_starts.is_empty() {
        return Err(fail("no segment overlaps the first five events by 50%".into()));
    }
    if neg_candidates.is_empty() {
        return Err(fail("no unlabeled region before the fifth event's offset".into()));
    }
    if query_starts.is_empty() {
        return Err(fail("no query segments after the fifth event's offset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    neg_candidates.shuffle(&mut rng);
    neg_candidates.truncate(neg_count);
    neg_candidates.sort_unstable();

    let embed = |start: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let segment = flatten_segment(mel, start, seg_len);
        let raw = encoder.forward(&segment)?;
        let (z, degenerate) = l2_normalize(&raw);
        if degenerate {
            return Err(fail(format!("zero embedding at frame {start}")));
        }
        Ok((segment, raw, z))
    };

    let mut support = Vec::new();
    for (starts, label) in [(&pos_starts, Label::Pos), (&neg_candidates, Label::Neg)] {
        for &start in starts.iter() {
            let (segment, embed_raw, z) = embed(start)?;
            support.push(SupportExample {
                segment,
                label,
                embed_raw,
                z,
                start_frame: start,
            });
        }
    }
    let mut query = Vec::new();
    for &start in &query_starts {
        let (segment, _, z) = embed(start)?;
        query.push(QueryExample {
            segment,
            z,
            start_frame: start,
        });
    }

    let episode = Episode {
        support,
        query,
        source_id: mel.source_id.clone(),
        seg_len_frames: seg_len,
        seg_hop_frames: seg_hop,
        frame_rate: rate,
    };
    episode.validate()?;
    Ok(episode)
}

/// Spread per-segment positive posteriors back onto frames by averaging all
/// windows covering each frame; uncovered frames get probability zero.
pub fn frame_probabilities(
    n_frames: usize,
    seg_len: usize,
    starts: &[usize],
    pos_probs: &[f64],
) -> Vec<f64> {
    let mut sum = vec![0.0; n_frames];
    let mut count = vec![0u32; n_frames];
    for (&start, &p) in starts.iter().zip(pos_probs.iter()) {
        for f in start..(start + seg_len).min(n_frames) {
            sum[f] += p;
            count[f] += 1;
        }
    }
    sum.iter()
        .zip(count.iter())
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}
