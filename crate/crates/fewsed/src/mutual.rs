//! Mutual learning: fine-tune the encoder against the refined classifier
//! with pseudo-labeled queries and a prototype-anchored contrastive loss,
//! then re-run transductive adaptation. Iterated, the classifier and the
//! feature extractor improve each other.

use crate::encoder::{AdamState, ClassificationHead, Encoder};
use crate::error::{Error, Result};
use crate::eval::ScoreReport;
use crate::transductive::{
    init_prototypes, update_classifier, Classifier, Episode, Label, PosteriorTable, UpdateOptions,
    POS,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One confidently pseudo-labeled query item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub query_index: usize,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub items: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Keep queries whose maximum posterior reaches `tau`; the pseudo label is
/// the argmax class.
pub fn select_confident(table: &PosteriorTable, tau: f64) -> Result<PseudoLabelSet> {
    if !(tau > 0.5 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be in (0.5, 1], got {tau}"
        )));
    }
    let items = table
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let (label, confidence) = if row[0] >= row[1] {
                (Label::Pos, row[0])
            } else {
                (Label::Neg, row[1])
            };
            (confidence >= tau).then_some(PseudoLabel {
                query_index: i,
                label,
                confidence,
            })
        })
        .collect();
    Ok(PseudoLabelSet { items })
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateSimilarity("zero-norm vector".into()));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Contrastive loss anchored on the refined positive prototype:
/// `-log(exp(sim(w_pos, z_pos_mean)) / sum_k exp(sim(w_pos, z_neg_k)))`.
/// The positive term is not part of the denominator, so the loss can be
/// negative.
pub fn contrastive_loss(
    w_pos: &[f64],
    z_pos_mean: &[f64],
    negatives: &[Vec<f64>],
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("need at least one negative".into()));
    }
    let sim_pos = cosine(w_pos, z_pos_mean)?;
    let sims: Vec<f64> = negatives
        .iter()
        .map(|z| cosine(w_pos, z))
        .collect::<Result<_>>()?;
    Ok(-sim_pos + log_sum_exp(&sims))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Fine-tuning loss `lambda1 * CE + lambda2 * L_c`.
pub fn finetune_loss(ce_pseudo: f64, l_c: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * ce_pseudo + lambda2 * l_c
}

/// One full-batch evaluation of the fine-tuning objective: the segments the
/// cross-entropy sees, the positive support segments behind `z_pos_mean`,
/// and the sampled negative segments.
pub struct FinetuneBatch<'a> {
    pub ce_items: Vec<(&'a [f64], Label)>,
    pub pos_support: Vec<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

/// Loss breakdown and analytic gradients for one fine-tuning step.
pub struct FinetuneEval {
    pub ce: f64,
    pub contrastive: f64,
    pub total: f64,
    pub encoder_grads: Vec<f64>,
    pub head_grads: Vec<f64>,
}

/// Evaluate `L_f = lambda1 * CE + lambda2 * L_c` and its gradients wrt the
/// encoder and head parameters. `w_hat` stays fixed (contrastive anchor).
pub fn finetune_step_eval(
    encoder: &Encoder,
    head: &ClassificationHead,
    w_hat: &Classifier,
    batch: &FinetuneBatch,
    lambda1: f64,
    lambda2: f64,
) -> Result<FinetuneEval> {
    if batch.ce_items.is_empty() || batch.pos_support.is_empty() || batch.negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "fine-tune batch needs CE items, positive support and negatives".into(),
        ));
    }
    let dim = encoder.embed_dim();
    let mut encoder_grads = vec![0.0; encoder.n_params()];
    let mut head_grads = vec![0.0; head.params.len()];

    // ---- pseudo-label cross entropy through the new head -------------------
    let n_ce = batch.ce_items.len() as f64;
    let mut ce = 0.0;
    for &(segment, label) in &batch.ce_items {
        let (embed, cache) = encoder.forward_cached(segment)?;
        let probs = head.probs(&embed);
        let y = label.index();
        ce -= probs[y].max(1e-12).ln();

        let mut d_logits = probs;
        d_logits[y] -= 1.0;
        let w_len = head.n_classes * head.dim;
        let mut d_embed = vec![0.0; dim];
        for k in 0..head.n_classes {
            let g = d_logits[k] * lambda1 / n_ce;
            head_grads[w_len + k] += g;
            let row = &head.params[k * head.dim..(k + 1) * head.dim];
            for j in 0..dim {
                head_grads[k * head.dim + j] += g * embed[j];
                d_embed[j] += row[j] * d_logits[k] * lambda1 / n_ce;
            }
        }
        accumulate(&mut encoder_grads, &encoder.backward(&cache, &d_embed)?);
    }
    ce /= n_ce;

    // ---- contrastive term --------------------------------------------------
    let anchor = w_hat.row(POS);
    let anchor_norm = norm(anchor);
    if anchor_norm == 0.0 {
        return Err(Error::DegenerateSimilarity("zero positive prototype".into()));
    }
    let anchor_unit: Vec<f64> = anchor.iter().map(|x| x / anchor_norm).collect();

    // positive side: mean of normalized support embeddings
    struct Emb {
        raw_norm: f64,
        unit: Vec<f64>,
        cache: crate::encoder::ForwardCache,
    }
    let embed_unit = |segment: &[f64]| -> Result<Emb> {
        let (raw, cache) = encoder.forward_cached(segment)?;
        let n = norm(&raw);
        if n == 0.0 {
            return Err(Error::DegenerateSimilarity("zero embedding".into()));
        }
        Ok(Emb {
            raw_norm: n,
            unit: raw.iter().map(|x| x / n).collect(),
            cache,
        })
    };

    let pos_embs: Vec<Emb> = batch
        .pos_support
        .iter()
        .map(|s| embed_unit(s))
        .collect::<Result<_>>()?;
    let n_pos = pos_embs.len() as f64;
    let mut z_mean = vec![0.0; dim];
    for e in &pos_embs {
        for (acc, &v) in z_mean.iter_mut().zip(&e.unit) {
            *acc += v / n_pos;
        }
    }
    let z_mean_norm = norm(&z_mean);
    if z_mean_norm == 0.0 {
        return Err(Error::DegenerateSimilarity("zero positive mean".into()));
    }
    let sim_pos = dot(&anchor_unit, &z_mean) / z_mean_norm;

    let neg_embs: Vec<Emb> = batch
        .negatives
        .iter()
        .map(|s| embed_unit(s))
        .collect::<Result<_>>()?;
    let sims_neg: Vec<f64> = neg_embs.iter().map(|e| dot(&anchor_unit, &e.unit)).collect();
    let lse = log_sum_exp(&sims_neg);
    let l_c = -sim_pos + lse;

    // d L_c / d z_mean = -(a_unit - sim_pos * z_mean_unit) / ||z_mean||
    let z_mean_unit: Vec<f64> = z_mean.iter().map(|x| x / z_mean_norm).collect();
    let d_z_mean: Vec<f64> = anchor_unit
        .iter()
        .zip(&z_mean_unit)
        .map(|(&a, &zu)| -lambda2 * (a - sim_pos * zu) / z_mean_norm)
        .collect();
    for e in &pos_embs {
        // chain through the normalization of each positive embedding
        let d_unit: Vec<f64> = d_z_mean.iter().map(|&g| g / n_pos).collect();
        let d_raw = normalize_backward(&e.unit, e.raw_norm, &d_unit);
        accumulate(&mut encoder_grads, &encoder.backward(&e.cache, &d_raw)?);
    }

    // negatives: softmax weights over their similarities
    let max_sim = sims_neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = sims_neg.iter().map(|s| (s - max_sim).exp()).sum();
    for (e, &sim) in neg_embs.iter().zip(&sims_neg) {
        let weight = (sim - max_sim).exp() / exp_sum;
        // d sim / d z = a_unit - sim * z (z is unit)
        let d_unit: Vec<f64> = anchor_unit
            .iter()
            .zip(&e.unit)
            .map(|(&a, &z)| lambda2 * weight * (a - sim * z))
            .collect();
        let d_raw = normalize_backward(&e.unit, e.raw_norm, &d_unit);
        accumulate(&mut encoder_grads, &encoder.backward(&e.cache, &d_raw)?);
    }

    Ok(FinetuneEval {
        ce,
        contrastive: l_c,
        total: finetune_loss(ce, l_c, lambda1, lambda2),
        encoder_grads,
        head_grads,
    })
}

/// Vector-Jacobian product of `z = e / ||e||`: `(v - (z . v) z) / ||e||`.
fn normalize_backward(unit: &[f64], raw_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let zv = dot(unit, upstream);
    unit.iter()
        .zip(upstream.iter())
        .map(|(&z, &v)| (v - zv * z) / raw_norm)
        .collect()
}

fn accumulate(acc: &mut [f64], grads: &[f64]) {
    for (a, &g) in acc.iter_mut().zip(grads.iter()) {
        *a += g;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Options for [`finetune_encoder`].
#[derive(Debug, Clone, Copy)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub negatives_cap: usize,
    pub pseudo_cap: usize,
    pub include_support: bool,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr_encoder: 1e-4,
            lr_head: 1e-3,
            lambda1: 0.5,
            lambda2: 0.5,
            negatives_cap: 64,
            pseudo_cap: 128,
            include_support: true,
            seed: 0,
        }
    }
}

/// Loss values of one fine-tuning epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpochLoss {
    pub ce: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Fine-tune the encoder against the refined classifier `w_hat` with a fresh
/// binary head. The classifier is never modified. Returns the updated
/// encoder and per-epoch losses.
pub fn finetune_encoder(
    encoder: &Encoder,
    w_hat: &Classifier,
    episode: &Episode,
    pseudo: &PseudoLabelSet,
    opts: &FinetuneOptions,
) -> Result<(Encoder, Vec<FinetuneEpochLoss>)> {
    if pseudo.is_empty() {
        return Err(Error::InvalidArgument("empty pseudo-label set".into()));
    }
    for item in &pseudo.items {
        if item.query_index >= episode.query.len() {
            return Err(Error::InvalidArgument(format!(
                "pseudo label index {} out of range",
                item.query_index
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // pseudo subsample is fixed for the whole call
    let mut pseudo_items: Vec<PseudoLabel> = pseudo.items.clone();
    if pseudo_items.len() > opts.pseudo_cap {
        pseudo_items.shuffle(&mut rng);
        pseudo_items.truncate(opts.pseudo_cap);
        pseudo_items.sort_by_key(|p| p.query_index);
    }

    // negative candidates: NEG support plus NEG pseudo-labeled queries
    enum NegRef {
        Support(usize),
        Query(usize),
    }
    let mut neg_candidates: Vec<NegRef> = episode
        .support
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Neg)
        .map(|(i, _)| NegRef::Support(i))
        .collect();
    neg_candidates.extend(
        pseudo_items
            .iter()
            .filter(|p| p.label == Label::Neg)
            .map(|p| NegRef::Query(p.query_index)),
    );
    if neg_candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "no negative samples available for the contrastive loss".into(),
        ));
    }

    let mut enc = encoder.clone();
    let mut head = ClassificationHead::new_seeded(2, enc.embed_dim(), opts.seed ^ 0x9e3779b9);
    let mut enc_adam = AdamState::new(enc.n_params());
    let mut head_adam = AdamState::new(head.params.len());
    let mut losses = Vec::with_capacity(opts.epochs);

    for _ in 0..opts.epochs {
        // seeded per-step subsample of the negatives
        let mut chosen: Vec<usize> = (0..neg_candidates.len()).collect();
        if chosen.len() > opts.negatives_cap {
            chosen.shuffle(&mut rng);
            chosen.truncate(opts.negatives_cap);
            chosen.sort_unstable();
        }

        let mut ce_items: Vec<(&[f64], Label)> = pseudo_items
            .iter()
            .map(|p| (episode.query[p.query_index].segment.as_slice(), p.label))
            .collect();
        if opts.include_support {
            ce_items.extend(
                episode
                    .support
                    .iter()
                    .map(|s| (s.segment.as_slice(), s.label)),
            );
        }
        let batch = FinetuneBatch {
            ce_items,
            pos_support: episode
                .support
                .iter()
                .filter(|s| s.label == Label::Pos)
                .map(|s| s.segment.as_slice())
                .collect(),
            negatives: chosen
                .iter()
                .map(|&i| match neg_candidates[i] {
                    NegRef::Support(s) => episode.support[s].segment.as_slice(),
                    NegRef::Query(q) => episode.query[q].segment.as_slice(),
                })
                .collect(),
        };
        let eval = finetune_step_eval(&enc, &head, w_hat, &batch, opts.lambda1, opts.lambda2)?;
        enc_adam.step(enc.params_mut(), &eval.encoder_grads, opts.lr_encoder)?;
        head_adam.step(&mut head.params, &eval.head_grads, opts.lr_head)?;
        losses.push(FinetuneEpochLoss {
            ce: eval.ce,
            contrastive: eval.contrastive,
            total: eval.total,
        });
    }
    Ok((enc, losses))
}

/// Recompute all episode embeddings from the raw segments.
pub fn reembed(episode: &mut Episode, encoder: &Encoder) -> Result<()> {
    for s in episode.support.iter_mut() {
        let raw = encoder.forward(&s.segment)?;
        let (z, degenerate) = crate::encoder::l2_normalize(&raw);
        if degenerate {
            return Err(Error::DegenerateSimilarity(format!(
                "zero embedding for support segment at frame {}",
                s.start_frame
            )));
        }
        s.embed_raw = raw;
        s.z = z;
    }
    for q in episode.query.iter_mut() {
        let raw = encoder.forward(&q.segment)?;
        let (z, degenerate) = crate::encoder::l2_normalize(&raw);
        if degenerate {
            return Err(Error::DegenerateSimilarity(format!(
                "zero embedding for query segment at frame {}",
                q.start_frame
            )));
        }
        q.z = z;
    }
    Ok(())
}

/// Configuration of the mutual-learning loop.
#[derive(Debug, Clone, Copy)]
pub struct LoopConfig {
    pub iterations: usize,
    pub tau: f64,
    pub normalize_prototypes: bool,
    pub update: UpdateOptions,
    pub finetune: FinetuneOptions,
}

/// Record of one loop iteration. Iteration 0 is transductive adaptation
/// only; later iterations fine-tune the encoder first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub score: Option<ScoreReport>,
    pub ti_losses: Vec<f64>,
    pub finetune_skipped: bool,
    pub finetune_losses: Vec<FinetuneEpochLoss>,
    pub n_pseudo: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutualLearningReport {
    pub iterations: Vec<IterationRecord>,
}

/// Output of the full loop: report plus final model state and predictions.
pub struct LoopOutcome {
    pub report: MutualLearningReport,
    pub posteriors: PosteriorTable,
    pub classifier: Classifier,
    pub encoder: Encoder,
}

/// Run transductive adaptation, then `iterations` rounds of
/// fine-tune -> re-embed -> re-adapt. `score_fn` turns the query posteriors
/// of an iteration into a metric record (None when no reference exists).
pub fn mutual_learning_loop<F>(
    encoder: &Encoder,
    episode: &Episode,
    cfg: &LoopConfig,
    score_fn: F,
) -> Result<LoopOutcome>
where
    F: Fn(&PosteriorTable) -> Option<ScoreReport>,
{
    let mut episode = episode.clone();
    let mut enc = encoder.clone();
    reembed(&mut episode, &enc)?;

    let adapt = |ep: &Episode| -> Result<crate::transductive::UpdateResult> {
        let c0 = init_prototypes(&ep.support, cfg.normalize_prototypes)?;
        update_classifier(&c0, ep, &cfg.update)
    };

    let mut result = adapt(&episode)?;
    let mut records = vec![IterationRecord {
        iteration: 0,
        score: score_fn(&result.posteriors),
        ti_losses: result.epoch_losses.clone(),
        finetune_skipped: false,
        finetune_losses: Vec::new(),
        n_pseudo: 0,
    }];

    for it in 1..=cfg.iterations {
        let pseudo = select_confident(&result.posteriors, cfg.tau)?;
        if pseudo.is_empty() {
            // nothing confident enough; keep the previous model this round
            records.push(IterationRecord {
                iteration: it,
                score: score_fn(&result.posteriors),
                ti_losses: Vec::new(),
                finetune_skipped: true,
                finetune_losses: Vec::new(),
                n_pseudo: 0,
            });
            continue;
        }
        let mut ft_opts = cfg.finetune;
        ft_opts.seed = cfg.finetune.seed.wrapping_add(it as u64);
        let n_pseudo = pseudo.items.len();
        let (new_enc, ft_losses) =
            finetune_encoder(&enc, &result.classifier, &episode, &pseudo, &ft_opts)?;
        enc = new_enc;
        reembed(&mut episode, &enc)?;
        result = adapt(&episode)?;
        records.push(IterationRecord {
            iteration: it,
            score: score_fn(&result.posteriors),
            ti_losses: result.epoch_losses.clone(),
            finetune_skipped: false,
            finetune_losses: ft_losses,
            n_pseudo,
        });
    }

    Ok(LoopOutcome {
        report: MutualLearningReport {
            iterations: records,
        },
        posteriors: result.posteriors,
        classifier: result.classifier,
        encoder: enc,
    })
}
