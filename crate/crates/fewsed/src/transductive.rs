//! Transductive classifier refinement.
//!
//! A two-class linear classifier over L2-normalized embeddings is
//! initialized from support-set prototypes and refined by minimizing a
//! weighted support cross-entropy minus the mutual information between
//! query features and their predicted labels. Only the weight matrix moves;
//! the encoder stays frozen.

use crate::encoder::AdamState;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Probability floor inside every log term.
pub const PROB_CLAMP: f64 = 1e-12;

/// Row index of the positive class in the weight matrix.
pub const POS: usize = 0;
/// Row index of the negative class.
pub const NEG: usize = 1;

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Pos => POS,
            Label::Neg => NEG,
        }
    }
}

/// One labeled support segment: raw mel window, its unnormalized embedding
/// and the L2-normalized embedding.
#[derive(Debug, Clone)]
pub struct SupportExample {
    pub segment: Vec<f64>,
    pub label: Label,
    pub embed_raw: Vec<f64>,
    pub z: Vec<f64>,
    pub start_frame: usize,
}

/// One unlabeled query segment.
#[derive(Debug, Clone)]
pub struct QueryExample {
    pub segment: Vec<f64>,
    pub z: Vec<f64>,
    pub start_frame: usize,
}

/// One few-shot task: support and query windows from a single test audio.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<SupportExample>,
    pub query: Vec<QueryExample>,
    pub source_id: String,
    pub seg_len_frames: usize,
    pub seg_hop_frames: usize,
    pub frame_rate: f64,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let has_pos = self.support.iter().any(|s| s.label == Label::Pos);
        let has_neg = self.support.iter().any(|s| s.label == Label::Neg);
        if !has_pos || !has_neg {
            return Err(Error::Episode {
                source_id: self.source_id.clone(),
                reason: "support must contain both POS and NEG examples".into(),
            });
        }
        if self.query.is_empty() {
            return Err(Error::Episode {
                source_id: self.source_id.clone(),
                reason: "query set is empty".into(),
            });
        }
        for z in self
            .support
            .iter()
            .map(|s| &s.z)
            .chain(self.query.iter().map(|q| &q.z))
        {
            let norm: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Episode {
                    source_id: self.source_id.clone(),
                    reason: format!("embedding norm {norm} not unit"),
                });
            }
        }
        Ok(())
    }
}

/// Linear 2-class classifier; `weights` holds the POS row then the NEG row.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weights: Vec<f64>,
    pub dim: usize,
}

impl Classifier {
    pub fn new(weights: Vec<f64>, dim: usize) -> Result<Self> {
        if weights.len() != N_CLASSES * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", N_CLASSES * dim),
                actual: format!("{}", weights.len()),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("classifier weight".into()));
        }
        Ok(Self { weights, dim })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    /// FNV-1a over the raw weight bytes.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for p in &self.weights {
            for byte in p.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }
}

/// Query posteriors and their column-mean marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub rows: Vec<[f64; N_CLASSES]>,
    pub marginal: [f64; N_CLASSES],
}

/// Initialize the classifier rows as per-class means of the unnormalized
/// support embeddings. `normalize_prototypes` optionally L2-normalizes each
/// prototype row afterwards.
pub fn init_prototypes(
    support: &[SupportExample],
    normalize_prototypes: bool,
) -> Result<Classifier> {
    let dim = support
        .first()
        .map(|s| s.embed_raw.len())
        .ok_or_else(|| Error::InvalidArgument("empty support set".into()))?;
    let mut weights = vec![0.0; N_CLASSES * dim];
    let mut counts = [0usize; N_CLASSES];
    for s in support {
        let k = s.label.index();
        counts[k] += 1;
        for (acc, &v) in weights[k * dim..(k + 1) * dim].iter_mut().zip(&s.embed_raw) {
            *acc += v;
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Episode {
                source_id: String::new(),
                reason: format!("no support examples for class {k}"),
            });
        }
        let row = &mut weights[k * dim..(k + 1) * dim];
        for w in row.iter_mut() {
            *w /= count as f64;
        }
        if normalize_prototypes {
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for w in row.iter_mut() {
                    *w /= norm;
                }
            }
        }
    }
    Classifier::new(weights, dim)
}

/// Softmax posterior over the two classes for one normalized embedding.
pub fn posterior(c: &Classifier, z: &[f64]) -> [f64; N_CLASSES] {
    let logits = [dot(c.row(POS), z), dot(c.row(NEG), z)];
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let sum = e0 + e1;
    [e0 / sum, e1 / sum]
}

/// Posteriors for every query plus the marginal (column mean).
pub fn posterior_table(c: &Classifier, query: &[QueryExample]) -> Result<PosteriorTable> {
    if query.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let rows: Vec<[f64; N_CLASSES]> = query.iter().map(|q| posterior(c, &q.z)).collect();
    Ok(PosteriorTable {
        marginal: marginal_of(&rows),
        rows,
    })
}

/// Marginal distribution over query labels.
pub fn marginal(c: &Classifier, query: &[QueryExample]) -> Result<[f64; N_CLASSES]> {
    Ok(posterior_table(c, query)?.marginal)
}

fn marginal_of(rows: &[[f64; N_CLASSES]]) -> [f64; N_CLASSES] {
    let mut m = [0.0; N_CLASSES];
    for row in rows {
        for (acc, &p) in m.iter_mut().zip(row.iter()) {
            *acc += p;
        }
    }
    for acc in m.iter_mut() {
        *acc /= rows.len() as f64;
    }
    m
}

/// Mean cross-entropy of the classifier on the labeled support set.
pub fn support_ce(c: &Classifier, support: &[SupportExample]) -> f64 {
    let mut total = 0.0;
    for s in support {
        let p = posterior(c, &s.z);
        total -= p[s.label.index()].max(PROB_CLAMP).ln();
    }
    total / support.len() as f64
}

/// Mutual-information estimate and its two entropy terms (nats).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiTerms {
    pub mi: f64,
    pub h_marginal: f64,
    pub h_conditional: f64,
}

/// `I = H(Y_Q) - H(Y_Q | X_Q)` over the query posteriors.
pub fn mutual_information(c: &Classifier, query: &[QueryExample]) -> Result<MiTerms> {
    let table = posterior_table(c, query)?;
    Ok(mi_of_table(&table))
}

pub fn mi_of_table(table: &PosteriorTable) -> MiTerms {
    let h_marginal = -table
        .marginal
        .iter()
        .map(|&p| p * p.max(PROB_CLAMP).ln())
        .sum::<f64>();
    let h_conditional = -table
        .rows
        .iter()
        .flat_map(|row| row.iter())
        .map(|&p| p * p.max(PROB_CLAMP).ln())
        .sum::<f64>()
        / table.rows.len() as f64;
    MiTerms {
        mi: h_marginal - h_conditional,
        h_marginal,
        h_conditional,
    }
}

/// Which terms of the refinement loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Support cross-entropy only.
    Ce,
    /// Mutual-information term only.
    Mi,
    /// `lambda_ce * CE - I`.
    CeMi,
}

/// Transductive loss `lambda_ce * CE - I(X_Q; Y_Q)`.
pub fn ti_loss(
    c: &Classifier,
    support: &[SupportExample],
    query: &[QueryExample],
    lambda_ce: f64,
) -> Result<f64> {
    loss_for_mode(c, support, query, lambda_ce, LossMode::CeMi)
}

pub fn loss_for_mode(
    c: &Classifier,
    support: &[SupportExample],
    query: &[QueryExample],
    lambda_ce: f64,
    mode: LossMode,
) -> Result<f64> {
    Ok(match mode {
        LossMode::Ce => support_ce(c, support),
        LossMode::Mi => -mutual_information(c, query)?.mi,
        LossMode::CeMi => {
            lambda_ce * support_ce(c, support) - mutual_information(c, query)?.mi
        }
    })
}

/// Analytic gradient of [`ti_loss`] wrt the flat weight matrix.
pub fn ti_loss_grad(
    c: &Classifier,
    support: &[SupportExample],
    query: &[QueryExample],
    lambda_ce: f64,
) -> Result<Vec<f64>> {
    grad_for_mode(c, support, query, lambda_ce, LossMode::CeMi)
}

pub fn grad_for_mode(
    c: &Classifier,
    support: &[SupportExample],
    query: &[QueryExample],
    lambda_ce: f64,
    mode: LossMode,
) -> Result<Vec<f64>> {
    let dim = c.dim;
    let mut grad = vec![0.0; N_CLASSES * dim];

    let ce_weight = match mode {
        LossMode::Ce => 1.0,
        LossMode::Mi => 0.0,
        LossMode::CeMi => lambda_ce,
    };
    if ce_weight != 0.0 {
        let scale = ce_weight / support.len() as f64;
        for s in support {
            let p = posterior(c, &s.z);
            for k in 0..N_CLASSES {
                let y = if k == s.label.index() { 1.0 } else { 0.0 };
                let g = scale * (p[k] - y);
                for (acc, &zj) in grad[k * dim..(k + 1) * dim].iter_mut().zip(&s.z) {
                    *acc += g * zj;
                }
            }
        }
    }

    if matches!(mode, LossMode::Mi | LossMode::CeMi) {
        let table = posterior_table(c, query)?;
        let n_q = query.len() as f64;
        // d(-I)/dp_ik = (ln p_hat_k - ln p_ik) / |Q|
        for (q, row) in query.iter().zip(table.rows.iter()) {
            let g: Vec<f64> = (0..N_CLASSES)
                .map(|k| {
                    (table.marginal[k].max(PROB_CLAMP).ln() - row[k].max(PROB_CLAMP).ln()) / n_q
                })
                .collect();
            let g_mean: f64 = g.iter().zip(row.iter()).map(|(gi, pi)| gi * pi).sum();
            for k in 0..N_CLASSES {
                let coeff = row[k] * (g[k] - g_mean);
                for (acc, &zj) in grad[k * dim..(k + 1) * dim].iter_mut().zip(&q.z) {
                    *acc += coeff * zj;
                }
            }
        }
    }
    Ok(grad)
}

/// Options for [`update_classifier`].
#[derive(Debug, Clone, Copy)]
pub struct UpdateOptions {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_ce: f64,
    pub mode: LossMode,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-5,
            lambda_ce: 0.1,
            mode: LossMode::CeMi,
        }
    }
}

/// Result of the transductive refinement.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub classifier: Classifier,
    pub posteriors: PosteriorTable,
    /// Loss before any step, then after each epoch (length `epochs + 1`).
    pub epoch_losses: Vec<f64>,
}

/// Run `epochs` full-batch Adam steps on the weight matrix and return the
/// refined classifier with the final query posteriors.
pub fn update_classifier(
    c: &Classifier,
    episode: &Episode,
    opts: &UpdateOptions,
) -> Result<UpdateResult> {
    episode.validate()?;
    let mut classifier = c.clone();
    let mut adam = AdamState::new(classifier.weights.len());
    let mut epoch_losses = Vec::with_capacity(opts.epochs + 1);
    let loss = loss_for_mode(
        &classifier,
        &episode.support,
        &episode.query,
        opts.lambda_ce,
        opts.mode,
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("transductive loss = {loss}")));
    }
    epoch_losses.push(loss);
    for _ in 0..opts.epochs {
        let grad = grad_for_mode(
            &classifier,
            &episode.support,
            &episode.query,
            opts.lambda_ce,
            opts.mode,
        )?;
        adam.step(&mut classifier.weights, &grad, opts.lr)?;
        let loss = loss_for_mode(
            &classifier,
            &episode.support,
            &episode.query,
            opts.lambda_ce,
            opts.mode,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("transductive loss = {loss}")));
        }
        epoch_losses.push(loss);
    }
    let posteriors = posterior_table(&classifier, &episode.query)?;
    Ok(UpdateResult {
        classifier,
        posteriors,
        epoch_losses,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::l2_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).0
    }

    fn support_item(z_dir: &[f64], label: Label) -> SupportExample {
        SupportExample {
            segment: vec![],
            label,
            embed_raw: z_dir.to_vec(),
            z: unit(z_dir),
            start_frame: 0,
        }
    }

    fn query_item(z_dir: &[f64]) -> QueryExample {
        QueryExample {
            segment: vec![],
            z: unit(z_dir),
            start_frame: 0,
        }
    }

    fn random_units(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                unit(&v)
            })
            .collect()
    }

    /// A small separable episode: POS along +e0, NEG along +e1, with noise.
    fn toy_episode(dim: usize, n_support: usize, n_query: usize, seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |axis: usize| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.2..0.2)).collect();
            v[axis] += 1.0;
            v
        };
        let mut support = Vec::new();
        for _ in 0..n_support {
            support.push(support_item(&gen(0), Label::Pos));
            support.push(support_item(&gen(1), Label::Neg));
        }
        let mut query = Vec::new();
        for i in 0..n_query {
            query.push(query_item(&gen(i % 2)));
        }
        Episode {
            support,
            query,
            source_id: "toy".into(),
            seg_len_frames: 17,
            seg_hop_frames: 4,
            frame_rate: 86.13,
        }
    }

    #[test]
    fn prototypes_are_class_means() {
        let support = vec![
            support_item(&[1.0, 0.0], Label::Pos),
            support_item(&[0.0, 1.0], Label::Pos),
            support_item(&[-1.0, 0.0], Label::Neg),
        ];
        let c = init_prototypes(&support, false).unwrap();
        assert_eq!(c.row(POS), &[0.5, 0.5]);
        assert_eq!(c.row(NEG), &[-1.0, 0.0]);
    }

    #[test]
    fn single_item_prototype_is_that_embedding() {
        let support = vec![
            support_item(&[0.3, -0.7, 0.1], Label::Pos),
            support_item(&[0.9, 0.2, -0.4], Label::Neg),
        ];
        let c = init_prototypes(&support, false).unwrap();
        assert_eq!(c.row(POS), &[0.3, -0.7, 0.1]);
        assert_eq!(c.row(NEG), &[0.9, 0.2, -0.4]);
    }

    #[test]
    fn prototype_matches_mean_oracle() {
        let dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut support = Vec::new();
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        for k in 0..2 {
            for _ in 0..10 {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                for (acc, &x) in sums[k].iter_mut().zip(&v) {
                    *acc += x;
                }
                support.push(support_item(
                    &v,
                    if k == 0 { Label::Pos } else { Label::Neg },
                ));
            }
        }
        let c = init_prototypes(&support, false).unwrap();
        for k in 0..2 {
            for (w, s) in c.row(k).iter().zip(&sums[k]) {
                assert!((w - s / 10.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_class_is_an_error() {
        let support = vec![support_item(&[1.0, 0.0], Label::Pos)];
        assert!(init_prototypes(&support, false).is_err());
    }

    #[test]
    fn equal_rows_give_uniform_posterior() {
        let c = Classifier::new(vec![0.3, -0.2, 0.3, -0.2], 2).unwrap();
        let p = posterior(&c, &unit(&[0.6, 0.8]));
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log3_logit_gap_gives_three_quarters() {
        // w_pos . z - w_neg . z = ln 3  ->  p = (0.75, 0.25)
        let gap = 3f64.ln();
        let c = Classifier::new(vec![gap, 0.0, 0.0, 0.0], 2).unwrap();
        let p = posterior(&c, &[1.0, 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn posterior_is_shift_invariant() {
        let z = unit(&[0.2, -0.9, 0.4]);
        let c1 = Classifier::new(vec![0.5, -1.0, 0.3, 0.1, 0.2, -0.7], 3).unwrap();
        let shift = [2.5, -1.3, 0.8];
        let mut w2 = c1.weights.clone();
        for k in 0..2 {
            for j in 0..3 {
                w2[k * 3 + j] += shift[j];
            }
        }
        let c2 = Classifier::new(w2, 3).unwrap();
        let p1 = posterior(&c1, &z);
        let p2 = posterior(&c2, &z);
        assert!((p1[0] - p2[0]).abs() < 1e-12);
        assert!((p1[1] - p2[1]).abs() < 1e-12);
    }

    #[test]
    fn marginal_trivial_cases() {
        // strongly one-sided posteriors
        let c = Classifier::new(vec![60.0, 0.0, -60.0, 0.0], 2).unwrap();
        let query = vec![query_item(&[1.0, 0.0]); 4];
        let m = marginal(&c, &query).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);

        // one item per side
        let query = vec![query_item(&[1.0, 0.0]), query_item(&[-1.0, 0.0])];
        let m = marginal(&c, &query).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12);
        assert!((m[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_column_mean_oracle() {
        let dim = 6;
        let c = Classifier::new(
            random_units(2, dim, 3).concat(),
            dim,
        )
        .unwrap();
        let query: Vec<QueryExample> = random_units(50, dim, 4)
            .into_iter()
            .map(|z| QueryExample {
                segment: vec![],
                z,
                start_frame: 0,
            })
            .collect();
        let table = posterior_table(&c, &query).unwrap();
        let mut oracle = [0.0; 2];
        for row in &table.rows {
            oracle[0] += row[0];
            oracle[1] += row[1];
        }
        oracle[0] /= 50.0;
        oracle[1] /= 50.0;
        assert!((table.marginal[0] - oracle[0]).abs() < 1e-12);
        assert!((table.marginal[1] - oracle[1]).abs() < 1e-12);
    }

    #[test]
    fn support_ce_trivial_and_hand_cases() {
        // saturated correct posteriors -> ~0
        let c = Classifier::new(vec![60.0, 0.0, -60.0, 0.0], 2).unwrap();
        let support = vec![
            support_item(&[1.0, 0.0], Label::Pos),
            support_item(&[-1.0, 0.0], Label::Neg),
        ];
        assert!(support_ce(&c, &support) < 1e-12);

        // uniform posteriors -> ln 2
        let c = Classifier::new(vec![0.0; 4], 2).unwrap();
        assert!((support_ce(&c, &support) - 2f64.ln()).abs() < 1e-12);

        // p_true = 0.9 and 0.5 -> -(ln .9 + ln .5) / 2
        let c = Classifier::new(vec![9f64.ln(), 0.0, 0.0, 0.0], 2).unwrap();
        let support = vec![
            support_item(&[1.0, 0.0], Label::Pos),
            support_item(&[0.0, 1.0], Label::Pos),
        ];
        let expected = -(0.9f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((support_ce(&c, &support) - expected).abs() < 1e-12);
    }

    #[test]
    fn mi_trivial_cases() {
        // all posteriors uniform -> I = 0
        let c = Classifier::new(vec![0.0; 4], 2).unwrap();
        let query = random_units(8, 2, 5)
            .into_iter()
            .map(|z| QueryExample {
                segment: vec![],
                z,
                start_frame: 0,
            })
            .collect::<Vec<_>>();
        let t = mutual_information(&c, &query).unwrap();
        assert!(t.mi.abs() < 1e-12);

        // confident and balanced -> I = ln 2
        let c = Classifier::new(vec![60.0, 0.0, -60.0, 0.0], 2).unwrap();
        let query = vec![
            query_item(&[1.0, 0.0]),
            query_item(&[-1.0, 0.0]),
            query_item(&[1.0, 0.0]),
            query_item(&[-1.0, 0.0]),
        ];
        let t = mutual_information(&c, &query).unwrap();
        assert!((t.mi - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn mi_matches_direct_summation_oracle() {
        let dim = 5;
        let c = Classifier::new(random_units(2, dim, 8).concat(), dim).unwrap();
        let query: Vec<QueryExample> = random_units(40, dim, 9)
            .into_iter()
            .map(|z| QueryExample {
                segment: vec![],
                z,
                start_frame: 0,
            })
            .collect();
        let t = mutual_information(&c, &query).unwrap();

        // oracle: recompute from the posterior rows directly
        let rows: Vec<[f64; 2]> = query.iter().map(|q| posterior(&c, &q.z)).collect();
        let mut marg = [0.0; 2];
        for r in &rows {
            marg[0] += r[0] / 40.0;
            marg[1] += r[1] / 40.0;
        }
        let h_marg: f64 = -marg.iter().map(|&p| p * p.ln()).sum::<f64>();
        let h_cond: f64 = -rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|&p| p * p.ln())
            .sum::<f64>()
            / 40.0;
        assert!((t.mi - (h_marg - h_cond)).abs() < 1e-10);
        assert!((t.h_marginal - h_marg).abs() < 1e-10);
        assert!((t.h_conditional - h_cond).abs() < 1e-10);
    }

    #[test]
    fn ti_loss_composition() {
        let ep = toy_episode(4, 3, 20, 10);
        let c = init_prototypes(&ep.support, false).unwrap();

        // lambda = 0 -> exactly -I
        let l0 = ti_loss(&c, &ep.support, &ep.query, 0.0).unwrap();
        let mi = mutual_information(&c, &ep.query).unwrap().mi;
        assert!((l0 + mi).abs() < 1e-12);

        // compositional oracle
        let l = ti_loss(&c, &ep.support, &ep.query, 0.1).unwrap();
        let ce = support_ce(&c, &ep.support);
        assert!((l - (0.1 * ce - mi)).abs() < 1e-12);
    }

    #[test]
    fn perfect_support_confident_balanced_queries_give_minus_ln2() {
        let c = Classifier::new(vec![60.0, 0.0, -60.0, 0.0], 2).unwrap();
        let support = vec![
            support_item(&[1.0, 0.0], Label::Pos),
            support_item(&[-1.0, 0.0], Label::Neg),
        ];
        let query = vec![query_item(&[1.0, 0.0]), query_item(&[-1.0, 0.0])];
        let l = ti_loss(&c, &support, &query, 0.1).unwrap();
        assert!((l + 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn symmetric_classifier_ce_grad_rows_cancel_per_column() {
        // softmax gradient rows sum to zero per sample
        let ep = toy_episode(4, 2, 10, 11);
        let c = Classifier::new(vec![0.1; 8], 4).unwrap();
        let g = grad_for_mode(&c, &ep.support, &ep.query, 1.0, LossMode::Ce).unwrap();
        for j in 0..4 {
            assert!((g[j] + g[4 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn ti_grad_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let ep = toy_episode(5, 2, 15, 100 + seed);
            let c = init_prototypes(&ep.support, false).unwrap();
            let grad = ti_loss_grad(&c, &ep.support, &ep.query, 0.1).unwrap();
            for i in 0..c.weights.len() {
                let mut plus = c.clone();
                plus.weights[i] += h;
                let mut minus = c.clone();
                minus.weights[i] -= h;
                let fd = (ti_loss(&plus, &ep.support, &ep.query, 0.1).unwrap()
                    - ti_loss(&minus, &ep.support, &ep.query, 0.1).unwrap())
                    / (2.0 * h);
                let diff = (grad[i] - fd).abs();
                assert!(
                    diff <= 1e-5 * fd.abs().max(1.0),
                    "seed {seed} i {i}: {} vs {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn long_optimization_drives_gradient_to_zero() {
        let ep = toy_episode(3, 2, 8, 33);
        let mut c = init_prototypes(&ep.support, false).unwrap();
        let mut adam = AdamState::new(c.weights.len());
        for _ in 0..10_000 {
            let g = ti_loss_grad(&c, &ep.support, &ep.query, 0.1).unwrap();
            adam.step(&mut c.weights, &g, 1e-2).unwrap();
        }
        let g = ti_loss_grad(&c, &ep.support, &ep.query, 0.1).unwrap();
        let inf_norm = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(inf_norm < 1e-4, "grad inf norm {inf_norm}");
    }

    #[test]
    fn update_with_zero_epochs_or_zero_lr_is_identity() {
        let ep = toy_episode(4, 2, 12, 44);
        let c = init_prototypes(&ep.support, false).unwrap();

        let r = update_classifier(
            &c,
            &ep,
            &UpdateOptions {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.classifier.weights, c.weights);
        assert_eq!(r.posteriors, posterior_table(&c, &ep.query).unwrap());

        let r = update_classifier(
            &c,
            &ep,
            &UpdateOptions {
                epochs: 10,
                lr: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.classifier.weights, c.weights);
    }

    #[test]
    fn loss_never_exceeds_initial_on_separable_episode() {
        let ep = toy_episode(4, 3, 30, 55);
        let c = init_prototypes(&ep.support, false).unwrap();
        let r = update_classifier(
            &c,
            &ep,
            &UpdateOptions {
                epochs: 20,
                lr: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.epoch_losses.len(), 21);
        for e in 1..r.epoch_losses.len() {
            assert!(r.epoch_losses[e] <= r.epoch_losses[0] + 1e-12);
        }
    }

    #[test]
    fn query_permutation_changes_nothing() {
        let ep = toy_episode(4, 2, 25, 66);
        let c = init_prototypes(&ep.support, false).unwrap();
        let mut shuffled = ep.clone();
        shuffled.query.reverse();
        shuffled.query.swap(0, 7);

        let l1 = ti_loss(&c, &ep.support, &ep.query, 0.1).unwrap();
        let l2 = ti_loss(&c, &shuffled.support, &shuffled.query, 0.1).unwrap();
        assert!((l1 - l2).abs() < 1e-12);

        let opts = UpdateOptions {
            epochs: 10,
            lr: 1e-3,
            ..Default::default()
        };
        let r1 = update_classifier(&c, &ep, &opts).unwrap();
        let r2 = update_classifier(&c, &shuffled, &opts).unwrap();
        for (a, b) in r1.classifier.weights.iter().zip(&r2.classifier.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn posterior_rows_are_stochastic(
            w in proptest::collection::vec(-10.0f64..10.0, 8),
            z in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            prop_assume!(z.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let c = Classifier::new(w, 4).unwrap();
            let p = posterior(&c, &unit(&z));
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            prop_assert!(p[0] >= 0.0 && p[0] <= 1.0);
        }

        #[test]
        fn entropy_bounds_hold(
            w in proptest::collection::vec(-20.0f64..20.0, 12),
            seed in 0u64..1000,
        ) {
            let c = Classifier::new(w, 6).unwrap();
            let query: Vec<QueryExample> = random_units(12, 6, seed)
                .into_iter()
                .map(|z| QueryExample { segment: vec![], z, start_frame: 0 })
                .collect();
            let t = mutual_information(&c, &query).unwrap();
            prop_assert!(t.h_marginal >= -1e-12 && t.h_marginal <= 2f64.ln() + 1e-12);
            prop_assert!(t.h_conditional >= -1e-12 && t.h_conditional <= 2f64.ln() + 1e-12);
            prop_assert!(t.mi <= t.h_marginal + 1e-12);
        }
    }
}
