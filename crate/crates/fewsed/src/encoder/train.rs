//! Base-class supervised training of the encoder.

use super::{AdamState, Encoder};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Linear + softmax classification head over raw embeddings. Parameters are
/// flat: weights (`n_classes * dim`, row-major) followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub n_classes: usize,
    pub dim: usize,
    pub params: Vec<f64>,
}

impl ClassificationHead {
    pub fn new_seeded(n_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / dim as f64).sqrt();
        let mut params: Vec<f64> = (0..n_classes * dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        params.extend(std::iter::repeat_n(0.0, n_classes));
        Self {
            n_classes,
            dim,
            params,
        }
    }

    pub fn logits(&self, embed: &[f64]) -> Vec<f64> {
        let (w, b) = self.params.split_at(self.n_classes * self.dim);
        (0..self.n_classes)
            .map(|k| {
                let row = &w[k * self.dim..(k + 1) * self.dim];
                b[k] + row.iter().zip(embed.iter()).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    /// Softmax with max subtraction.
    pub fn probs(&self, embed: &[f64]) -> Vec<f64> {
        softmax(&self.logits(embed))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// One labeled training segment.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub segment: Vec<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Cross-entropy training of encoder + head on base-class segments.
/// Returns mean training loss per epoch.
pub fn train_base(
    encoder: &mut Encoder,
    head: &mut ClassificationHead,
    data: &[TrainExample],
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let mut seen = vec![false; head.n_classes];
    for ex in data {
        if ex.class >= head.n_classes {
            return Err(Error::Training(format!(
                "class {} out of range (head has {})",
                ex.class, head.n_classes
            )));
        }
        seen[ex.class] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Training(
            "need at least two base classes for cross-entropy".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut enc_adam = AdamState::new(encoder.n_params());
    let mut head_adam = AdamState::new(head.params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut enc_grads = vec![0.0; encoder.n_params()];
            let mut head_grads = vec![0.0; head.params.len()];
            for &idx in batch {
                let ex = &data[idx];
                let (embed, cache) = encoder.forward_cached(&ex.segment)?;
                let probs = head.probs(&embed);
                epoch_loss -= probs[ex.class].max(1e-12).ln();

                // d loss / d logits = p - y
                let mut d_logits = probs;
                d_logits[ex.class] -= 1.0;

                let w_len = head.n_classes * head.dim;
                let w = &head.params[..w_len];
                let mut d_embed = vec![0.0; head.dim];
                for k in 0..head.n_classes {
                    let g = d_logits[k] * scale;
                    head_grads[w_len + k] += g;
                    let row = &w[k * head.dim..(k + 1) * head.dim];
                    for j in 0..head.dim {
                        head_grads[k * head.dim + j] += g * embed[j];
                        d_embed[j] += row[j] * d_logits[k];
                    }
                }
                for d in d_embed.iter_mut() {
                    *d *= scale;
                }
                let g = encoder.backward(&cache, &d_embed)?;
                for (acc, gi) in enc_grads.iter_mut().zip(g.iter()) {
                    *acc += gi;
                }
            }
            enc_adam.step(encoder.params_mut(), &enc_grads, opts.lr)?;
            head_adam.step(&mut head.params, &head_grads, opts.lr)?;
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(epoch_losses)
}

/// Fraction of examples whose argmax class is correct.
#[cfg(test)]
pub fn accuracy(encoder: &Encoder, head: &ClassificationHead, data: &[TrainExample]) -> Result<f64> {
    let mut correct = 0usize;
    for ex in data {
        let embed = encoder.forward(&ex.segment)?;
        let probs = head.probs(&embed);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == ex.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::Rng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            in_frames: 8,
            in_bins: 8,
            channels: vec![4, 4],
        }
    }

    /// Two classes separable by mean energy.
    fn toy_data(cfg: &EncoderConfig, n_per_class: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for class in 0..2 {
            let level = if class == 0 { -0.8 } else { 0.8 };
            for _ in 0..n_per_class {
                let segment = (0..cfg.segment_len())
                    .map(|_| level + rng.random_range(-0.3..0.3))
                    .collect();
                data.push(TrainExample { segment, class });
            }
        }
        data
    }

    #[test]
    fn separable_toy_set_reaches_high_accuracy() {
        let cfg = toy_cfg();
        let mut enc = Encoder::new_seeded(cfg.clone(), 3).unwrap();
        let mut head = ClassificationHead::new_seeded(2, enc.embed_dim(), 4);
        let data = toy_data(&cfg, 24, 5);
        let losses = train_base(
            &mut enc,
            &mut head,
            &data,
            &TrainOptions {
                epochs: 15,
                lr: 1e-3,
                batch_size: 32,
                seed: 6,
            },
        )
        .unwrap();
        assert_eq!(losses.len(), 15);
        // non-increasing trend on a separable set: end well below start
        assert!(losses.last().unwrap() < losses.first().unwrap());
        assert!(accuracy(&enc, &head, &data).unwrap() >= 0.95);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let cfg = toy_cfg();
        let mut enc = Encoder::new_seeded(cfg.clone(), 7).unwrap();
        let mut head = ClassificationHead::new_seeded(2, enc.embed_dim(), 8);
        let before_enc = enc.params().to_vec();
        let before_head = head.params.clone();
        let data = toy_data(&cfg, 4, 9);
        train_base(
            &mut enc,
            &mut head,
            &data,
            &TrainOptions {
                epochs: 3,
                lr: 0.0,
                batch_size: 32,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(enc.params(), before_enc.as_slice());
        assert_eq!(head.params, before_head);
    }

    #[test]
    fn single_class_data_is_refused() {
        let cfg = toy_cfg();
        let mut enc = Encoder::new_seeded(cfg.clone(), 1).unwrap();
        let mut head = ClassificationHead::new_seeded(2, enc.embed_dim(), 2);
        let data: Vec<TrainExample> = toy_data(&cfg, 6, 3)
            .into_iter()
            .filter(|ex| ex.class == 0)
            .collect();
        assert!(matches!(
            train_base(&mut enc, &mut head, &data, &TrainOptions::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn head_output_dimension_matches_class_count() {
        let cfg = toy_cfg();
        let enc = Encoder::new_seeded(cfg.clone(), 1).unwrap();
        for n in [2usize, 3, 5] {
            let head = ClassificationHead::new_seeded(n, enc.embed_dim(), 1);
            let embed = vec![0.1; enc.embed_dim()];
            assert_eq!(head.probs(&embed).len(), n);
        }
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let cfg = toy_cfg();
        let data = toy_data(&cfg, 8, 11);
        let opts = TrainOptions {
            epochs: 4,
            lr: 1e-3,
            batch_size: 8,
            seed: 12,
        };
        let run = || {
            let mut enc = Encoder::new_seeded(cfg.clone(), 13).unwrap();
            let mut head = ClassificationHead::new_seeded(2, enc.embed_dim(), 14);
            train_base(&mut enc, &mut head, &data, &opts).unwrap();
            (enc.params().to_vec(), head.params)
        };
        assert_eq!(run(), run());
    }
}
