//! Event extraction from frame posteriors and event-based scoring.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One detected or reference event, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset: f64,
    pub offset: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Sorted, non-overlapping events.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    /// Build from arbitrary intervals: validates, sorts by onset and merges
    /// overlapping intervals.
    pub fn new(mut events: Vec<Event>) -> Result<Self> {
        for e in &events {
            if !e.onset.is_finite() || !e.offset.is_finite() || e.offset <= e.onset {
                return Err(Error::InvalidArgument(format!(
                    "invalid event ({}, {})",
                    e.onset, e.offset
                )));
            }
        }
        events.sort_by(|a, b| a.onset.partial_cmp(&b.onset).unwrap());
        let mut merged: Vec<Event> = Vec::with_capacity(events.len());
        for e in events {
            match merged.last_mut() {
                Some(last) if e.onset <= last.offset => {
                    last.offset = last.offset.max(e.offset);
                }
                _ => merged.push(e),
            }
        }
        Ok(Self { events: merged })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Keep only events whose onset is at or after `t`.
    pub fn after(&self, t: f64) -> Self {
        Self {
            events: self
                .events
                .iter()
                .copied()
                .filter(|e| e.onset >= t)
                .collect(),
        }
    }

    /// Shift all events by `dt` seconds.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    onset: e.onset + dt,
                    offset: e.offset + dt,
                })
                .collect(),
        }
    }
}

/// Counts and derived ratios of one scoring run. Ratios use the convention
/// 0/0 = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl ScoreReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_score = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f_score,
        }
    }
}

/// Frame-posterior postprocessing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventExtraction {
    pub threshold: f64,
    pub min_duration: f64,
    pub merge_gap: f64,
}

impl Default for EventExtraction {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_duration: 0.06,
            merge_gap: 0.05,
        }
    }
}

/// Threshold the positive-class posterior sequence, turn runs into events,
/// merge events separated by less than `merge_gap`, then drop events shorter
/// than `min_duration`. Index `i` covers `[i / rate, (i + 1) / rate)`.
pub fn frames_to_events(
    posteriors: &[f64],
    frame_rate: f64,
    params: &EventExtraction,
) -> Result<EventList> {
    if frame_rate <= 0.0 {
        return Err(Error::InvalidArgument("frame_rate must be > 0".into()));
    }
    let mut raw: Vec<Event> = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &p) in posteriors.iter().enumerate() {
        if p >= params.threshold {
            run_start.get_or_insert(i);
        } else if let Some(s) = run_start.take() {
            raw.push(Event {
                onset: s as f64 / frame_rate,
                offset: i as f64 / frame_rate,
            });
        }
    }
    if let Some(s) = run_start {
        raw.push(Event {
            onset: s as f64 / frame_rate,
            offset: posteriors.len() as f64 / frame_rate,
        });
    }

    // merge near-adjacent events
    let mut merged: Vec<Event> = Vec::with_capacity(raw.len());
    for e in raw {
        match merged.last_mut() {
            Some(last) if e.onset - last.offset < params.merge_gap => {
                last.offset = e.offset;
            }
            _ => merged.push(e),
        }
    }
    merged.retain(|e| e.duration() >= params.min_duration);
    EventList::new(merged)
}

fn interval_iou(a: &Event, b: &Event) -> f64 {
    let inter = (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0);
    let union = (a.offset.max(b.offset) - a.onset.min(b.onset)).max(1e-12);
    inter / union
}

/// Greedy one-to-one matching in onset order: each prediction consumes the
/// first unconsumed reference with temporal IoU >= `iou_min`.
pub fn match_events(pred: &EventList, reference: &EventList, iou_min: f64) -> (usize, usize, usize) {
    let mut consumed = vec![false; reference.len()];
    let mut tp = 0usize;
    for p in pred.events() {
        if let Some(idx) = reference
            .events()
            .iter()
            .enumerate()
            .position(|(i, r)| !consumed[i] && interval_iou(p, r) >= iou_min)
        {
            consumed[idx] = true;
            tp += 1;
        }
    }
    let fp = pred.len() - tp;
    let fn_ = reference.len() - tp;
    (tp, fp, fn_)
}

/// Event-based precision / recall / F-score.
pub fn score(pred: &EventList, reference: &EventList, iou_min: f64) -> ScoreReport {
    let (tp, fp, fn_) = match_events(pred, reference, iou_min);
    ScoreReport::from_counts(tp, fp, fn_)
}

/// Read a `Audiofilename,Starttime,Endtime` CSV into per-file event lists,
/// preserving first-seen file order.
pub fn read_event_csv(path: &Path) -> Result<Vec<(String, EventList)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let bad = |line: usize, reason: String| Error::Annotation {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut order: Vec<String> = Vec::new();
    let mut events: std::collections::HashMap<String, Vec<Event>> = Default::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if !line.to_lowercase().starts_with("audiofilename") {
                return Err(bad(1, "expected header Audiofilename,Starttime,Endtime".into()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(bad(i + 1, "expected 3 fields".into()));
        }
        let onset: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("bad start time {:?}", fields[1])))?;
        let offset: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("bad end time {:?}", fields[2])))?;
        let name = fields[0].trim().to_string();
        if !events.contains_key(&name) {
            order.push(name.clone());
        }
        events
            .entry(name)
            .or_default()
            .push(Event { onset, offset });
    }
    order
        .into_iter()
        .map(|name| {
            let list = EventList::new(events.remove(&name).unwrap()).map_err(|e| {
                Error::Annotation {
                    path: path.to_path_buf(),
                    reason: format!("{name}: {e}"),
                }
            })?;
            Ok((name, list))
        })
        .collect()
}

/// Write per-file event lists in the same CSV format.
pub fn write_event_csv(path: &Path, files: &[(String, EventList)]) -> Result<()> {
    let mut out = String::from("Audiofilename,Starttime,Endtime\n");
    for (name, list) in files {
        for e in list.events() {
            out.push_str(&format!("{},{},{}\n", name, e.onset, e.offset));
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn list(pairs: &[(f64, f64)]) -> EventList {
        EventList::new(
            pairs
                .iter()
                .map(|&(onset, offset)| Event { onset, offset })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn all_zero_posteriors_give_no_events() {
        let e = frames_to_events(&[0.0; 50], 10.0, &EventExtraction::default()).unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn single_run_hand_trace() {
        let probs = [0.0, 1.0, 1.0, 1.0, 0.0];
        let e = frames_to_events(&probs, 10.0, &EventExtraction::default()).unwrap();
        assert_eq!(e.len(), 1);
        assert!((e.events()[0].onset - 0.1).abs() < 1e-12);
        assert!((e.events()[0].offset - 0.4).abs() < 1e-12);
    }

    #[test]
    fn close_runs_are_merged() {
        // gap of one frame at 100 fps = 0.01 s < merge_gap 0.05
        let mut probs = vec![0.0; 30];
        for i in 5..10 {
            probs[i] = 1.0;
        }
        for i in 11..16 {
            probs[i] = 1.0;
        }
        let e = frames_to_events(&probs, 100.0, &EventExtraction::default()).unwrap();
        assert_eq!(e.len(), 1);
        assert!((e.events()[0].onset - 0.05).abs() < 1e-12);
        assert!((e.events()[0].offset - 0.16).abs() < 1e-12);
    }

    #[test]
    fn short_events_are_dropped() {
        let mut probs = vec![0.0; 100];
        probs[50] = 1.0; // 0.01 s at 100 fps, below min_duration
        let e = frames_to_events(&probs, 100.0, &EventExtraction::default()).unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn perfect_prediction_matches_everything() {
        let l = list(&[(0.0, 1.0), (2.0, 2.5), (4.0, 6.0)]);
        let (tp, fp, fn_) = match_events(&l, &l, 0.3);
        assert_eq!((tp, fp, fn_), (3, 0, 0));
        let r = score(&l, &l, 0.3);
        assert!((r.f_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_counts_misses() {
        let reference = list(&[(0.0, 1.0), (2.0, 3.0), (4.0, 5.0)]);
        let (tp, fp, fn_) = match_events(&EventList::empty(), &reference, 0.3);
        assert_eq!((tp, fp, fn_), (0, 0, 3));
    }

    #[test]
    fn iou_hand_computation() {
        // pred (0,1) vs ref (0.5,1.5): inter 0.5, union 1.5 -> IoU 1/3 >= 0.3
        let pred = list(&[(0.0, 1.0), (2.0, 3.0)]);
        let reference = list(&[(0.5, 1.5)]);
        let (tp, fp, fn_) = match_events(&pred, &reference, 0.3);
        assert_eq!((tp, fp, fn_), (1, 1, 0));
        let r = score(&pred, &reference, 0.3);
        assert!((r.precision - 0.5).abs() < 1e-12);
        assert!((r.recall - 1.0).abs() < 1e-12);
        assert!((r.f_score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_over_zero_convention() {
        let r = score(&EventList::empty(), &EventList::empty(), 0.3);
        assert_eq!((r.precision, r.recall, r.f_score), (0.0, 0.0, 0.0));
    }

    #[test]
    fn removing_predictions_never_decreases_fn() {
        let reference = list(&[(0.0, 1.0), (2.0, 3.0)]);
        let full = list(&[(0.1, 1.1), (2.0, 3.0)]);
        let partial = list(&[(0.1, 1.1)]);
        let (_, _, fn_full) = match_events(&full, &reference, 0.3);
        let (_, _, fn_partial) = match_events(&partial, &reference, 0.3);
        assert!(fn_partial >= fn_full);
    }

    #[test]
    fn greedy_close_to_optimal_on_random_small_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut agree = 0usize;
        let total = 400usize;
        for _ in 0..total {
            let make = |rng: &mut ChaCha8Rng| {
                let n = rng.random_range(0..=4);
                let mut events = Vec::new();
                let mut t = 0.0;
                for _ in 0..n {
                    t += rng.random_range(0.05..1.0);
                    let d = rng.random_range(0.05..1.0);
                    events.push(Event {
                        onset: t,
                        offset: t + d,
                    });
                    t += d;
                }
                EventList::new(events).unwrap()
            };
            let pred = make(&mut rng);
            let reference = make(&mut rng);
            let (tp, _, _) = match_events(&pred, &reference, 0.3);
            let best = oracle::optimal_matching(&pred, &reference, 0.3);
            if tp == best {
                agree += 1;
            }
        }
        // greedy is a documented approximation; it must agree almost always
        assert!(agree as f64 >= 0.95 * total as f64, "agreement {agree}/{total}");
    }

    #[test]
    fn event_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let files = vec![
            ("a.wav".to_string(), list(&[(0.5, 1.0), (2.0, 2.25)])),
            ("b.wav".to_string(), list(&[(10.0, 11.5)])),
        ];
        write_event_csv(&path, &files).unwrap();
        let back = read_event_csv(&path).unwrap();
        assert_eq!(back, files);
    }

    #[test]
    fn bad_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "nope\n1,2\n").unwrap();
        assert!(read_event_csv(&path).is_err());
    }

    proptest! {
        #[test]
        fn extracted_events_satisfy_invariants(
            probs in proptest::collection::vec(0.0f64..1.0, 0..200),
            rate in 1.0f64..200.0,
        ) {
            let e = frames_to_events(&probs, rate, &EventExtraction::default()).unwrap();
            let events = e.events();
            for ev in events {
                prop_assert!(ev.offset > ev.onset);
                prop_assert!(ev.duration() >= EventExtraction::default().min_duration - 1e-12);
            }
            for pair in events.windows(2) {
                prop_assert!(pair[1].onset >= pair[0].offset);
            }
        }

        #[test]
        fn self_score_is_perfect(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..8);
            let mut events = Vec::new();
            let mut t = 0.0;
            for _ in 0..n {
                t += rng.random_range(0.01..2.0);
                let d = rng.random_range(0.01..2.0);
                events.push(Event { onset: t, offset: t + d });
                t += d;
            }
            let l = EventList::new(events).unwrap();
            let r = score(&l, &l, 0.3);
            prop_assert!((r.f_score - 1.0).abs() < 1e-12);
        }
    }
}
