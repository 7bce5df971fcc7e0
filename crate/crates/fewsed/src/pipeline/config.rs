//! Run configuration: every tunable with its default, loadable from a flat
//! key=value file, overridable by CLI flags (flags win). The effective
//! config is echoed into every report.

use crate::audio::FeatureConfig;
use crate::error::{Error, Result};
use crate::transductive::LossMode;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

/// Transductive-update configuration, including the "no update" baseline
/// that predicts straight from the raw prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiMode {
    None,
    Ce,
    Mi,
    CeMi,
}

impl TiMode {
    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            TiMode::None => None,
            TiMode::Ce => Some(LossMode::Ce),
            TiMode::Mi => Some(LossMode::Mi),
            TiMode::CeMi => Some(LossMode::CeMi),
        }
    }
}

impl FromStr for TiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TiMode::None),
            "ce" => Ok(TiMode::Ce),
            "mi" => Ok(TiMode::Mi),
            "ce+mi" | "ce-mi" => Ok(TiMode::CeMi),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected none, ce, mi or ce+mi)"
            ))),
        }
    }
}

impl std::fmt::Display for TiMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TiMode::None => "none",
            TiMode::Ce => "ce",
            TiMode::Mi => "mi",
            TiMode::CeMi => "ce+mi",
        })
    }
}

/// All pipeline tunables. Field names double as the keys of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // front end
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    // segmentation
    pub seg_len_frames: usize,
    pub seg_hop_frames: usize,
    pub base_seg_hop_frames: usize,
    // base training
    pub lr_base: f64,
    pub epochs_base: usize,
    pub batch_size: usize,
    pub channels: Vec<usize>,
    // episode construction
    pub neg_count: usize,
    // transductive update
    pub lr_w: f64,
    pub epochs_w: usize,
    pub lambda_ce: f64,
    pub loss: TiMode,
    pub normalize_prototypes: bool,
    // mutual learning
    pub iterations: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_ft: f64,
    pub lr_head: f64,
    pub epochs_ft: usize,
    pub negatives_cap: usize,
    pub pseudo_cap: usize,
    // event extraction and scoring
    pub threshold: f64,
    pub min_duration: f64,
    pub merge_gap: f64,
    pub iou_min: f64,
    // misc
    pub seed: u64,
    /// Lifts the `epochs_w` range guard.
    #[serde(rename = "override")]
    pub override_guard: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            window_len: 1024,
            hop: 256,
            n_mels: 128,
            seg_len_frames: 17,
            seg_hop_frames: 4,
            base_seg_hop_frames: 8,
            lr_base: 1e-3,
            epochs_base: 15,
            batch_size: 32,
            channels: vec![16, 32, 64, 64],
            neg_count: 16,
            lr_w: 1e-5,
            epochs_w: 20,
            lambda_ce: 0.1,
            loss: TiMode::CeMi,
            normalize_prototypes: false,
            iterations: 1,
            tau: 0.8,
            lambda1: 0.5,
            lambda2: 0.5,
            lr_ft: 1e-4,
            lr_head: 1e-3,
            epochs_ft: 5,
            negatives_cap: 64,
            pseudo_cap: 128,
            threshold: 0.5,
            min_duration: 0.06,
            merge_gap: 0.05,
            iou_min: 0.3,
            seed: 0,
            override_guard: false,
        }
    }
}

impl RunConfig {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            sample_rate: self.sample_rate,
            window_len: self.window_len,
            hop: self.hop,
            n_mels: self.n_mels,
        }
    }

    /// Load from a flat key=value file ('#' starts a comment).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    /// Set one tunable by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
        }
        match key {
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "window_len" => self.window_len = parse(key, value)?,
            "hop" => self.hop = parse(key, value)?,
            "n_mels" => self.n_mels = parse(key, value)?,
            "seg_len_frames" => self.seg_len_frames = parse(key, value)?,
            "seg_hop_frames" => self.seg_hop_frames = parse(key, value)?,
            "base_seg_hop_frames" => self.base_seg_hop_frames = parse(key, value)?,
            "lr_base" => self.lr_base = parse(key, value)?,
            "epochs_base" => self.epochs_base = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| parse::<usize>(key, c.trim()))
                    .collect::<Result<_>>()?;
            }
            "neg_count" => self.neg_count = parse(key, value)?,
            "lr_w" => self.lr_w = parse(key, value)?,
            "epochs_w" => self.epochs_w = parse(key, value)?,
            "lambda_ce" => self.lambda_ce = parse(key, value)?,
            "loss" => self.loss = value.parse()?,
            "normalize_prototypes" => self.normalize_prototypes = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "lr_ft" => self.lr_ft = parse(key, value)?,
            "lr_head" => self.lr_head = parse(key, value)?,
            "epochs_ft" => self.epochs_ft = parse(key, value)?,
            "negatives_cap" => self.negatives_cap = parse(key, value)?,
            "pseudo_cap" => self.pseudo_cap = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "min_duration" => self.min_duration = parse(key, value)?,
            "merge_gap" => self.merge_gap = parse(key, value)?,
            "iou_min" => self.iou_min = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "override" => self.override_guard = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_base", self.lr_base),
            ("lr_w", self.lr_w),
            ("lr_ft", self.lr_ft),
            ("lr_head", self.lr_head),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.sample_rate == 0 || self.window_len == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Config("front-end sizes must be positive".into()));
        }
        if self.seg_len_frames == 0 || self.seg_hop_frames == 0 || self.base_seg_hop_frames == 0 {
            return Err(Error::Config("segment sizes must be positive".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("need at least one encoder block".into()));
        }
        if !(self.tau > 0.5 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must be in (0.5, 1], got {}",
                self.tau
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.iou_min > 0.0 && self.iou_min <= 1.0) {
            return Err(Error::Config(format!(
                "iou_min must be in (0, 1], got {}",
                self.iou_min
            )));
        }
        if !self.override_guard && !(5..=30).contains(&self.epochs_w) {
            return Err(Error::Config(format!(
                "epochs_w must be in [5, 30] (got {}); set override=true to lift the guard",
                self.epochs_w
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_roundtrip_overrides_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\nlr_w = 1e-2  # boosted\nepochs_w=30\nloss = mi\nchannels = 4, 8\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.lr_w, 1e-2);
        assert_eq!(cfg.epochs_w, 30);
        assert_eq!(cfg.loss, TiMode::Mi);
        assert_eq!(cfg.channels, vec![4, 8]);
        // untouched keys keep their defaults
        assert_eq!(cfg.tau, 0.8);
    }

    #[test]
    fn unknown_key_and_bad_value_are_config_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "no_such_key=1\n").unwrap();
        assert!(matches!(
            RunConfig::from_file(&path),
            Err(Error::Config(_))
        ));
        std::fs::write(&path, "tau=not-a-number\n").unwrap();
        assert!(matches!(
            RunConfig::from_file(&path),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn epochs_w_guard_requires_override() {
        let mut cfg = RunConfig::default();
        cfg.epochs_w = 100;
        assert!(cfg.validate().is_err());
        cfg.override_guard = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn loss_mode_parses_all_variants() {
        for (s, m) in [
            ("none", TiMode::None),
            ("ce", TiMode::Ce),
            ("mi", TiMode::Mi),
            ("ce+mi", TiMode::CeMi),
        ] {
            assert_eq!(s.parse::<TiMode>().unwrap(), m);
            assert_eq!(m.to_string(), s);
        }
        assert!("banana".parse::<TiMode>().is_err());
    }
}
