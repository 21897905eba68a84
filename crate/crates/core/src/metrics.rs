//! Evaluation and diagnostic statistics.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{anchor_terms, SimMatrix};
use crate::corpus::FunctionInstance;
use crate::embedding::{dot, Embedding};
use crate::encoder::{EncoderParams, View};
use crate::error::{Error, Result};
use crate::pools::EvalPool;

/// Default cap on the number of embeddings entering the uniformity statistic.
pub const UNIFORMITY_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub score: f64,
    /// `true` for a similar pair.
    pub label: bool,
}

impl ScoredPair {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted
/// half.
pub fn roc_auc(pairs: &[ScoredPair]) -> Result<f64> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {}", p.score)));
    }
    let n_pos = pairs.iter().filter(|p| p.label).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUC needs both positive and negative pairs".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].score.total_cmp(&pairs[b].score));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].score == pairs[order[i]].score {
            j += 1;
        }
        // 1-based mean rank of the tie run
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| pairs[k].label).count();
        pos_rank_sum += rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Source of evaluation embeddings for instances.
pub trait EmbeddingProvider {
    fn embedding(&self, instance: &FunctionInstance) -> Result<Embedding>;
}

/// Pre-head representation, truncated to the encoder's input length.
impl EmbeddingProvider for EncoderParams {
    fn embedding(&self, instance: &FunctionInstance) -> Result<Embedding> {
        let max = self.config().max_input_length;
        let tokens = &instance.tokens[..instance.tokens.len().min(max)];
        self.encode_view(tokens, View::Representation)
    }
}

/// Precomputed embeddings keyed by instance id.
impl EmbeddingProvider for HashMap<String, Embedding> {
    fn embedding(&self, instance: &FunctionInstance) -> Result<Embedding> {
        self.get(&instance.instance_id)
            .cloned()
            .ok_or_else(|| Error::UnknownId(instance.instance_id.clone()))
    }
}

/// 1-based rank of `relevant` when candidates are sorted by descending
/// score; equal scores keep candidate order.
pub fn rank_of(scores: &[f64], relevant: usize) -> usize {
    let s = scores[relevant];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < relevant))
        .count()
}

/// Rank of the relevant candidate in every pool.
pub fn pool_ranks<P: EmbeddingProvider + ?Sized>(pools: &[EvalPool], provider: &P) -> Result<Vec<usize>> {
    if pools.is_empty() {
        return Err(Error::InvalidInput("no pools".into()));
    }
    pools
        .iter()
        .enumerate()
        .map(|(i, pool)| {
            pool.validate().map_err(|reason| Error::InvalidPool { index: i, reason })?;
            let at = |e: Error| Error::AtIndex {
                index: i,
                source: Box::new(e),
            };
            let q = provider.embedding(&pool.query).map_err(at)?;
            let scores = pool
                .candidates
                .iter()
                .map(|c| provider.embedding(c).map(|e| dot(&q, &e)))
                .collect::<Result<Vec<f64>>>()
                .map_err(at)?;
            Ok(rank_of(&scores, pool.relevant))
        })
        .collect()
}

pub fn mrr<P: EmbeddingProvider + ?Sized>(pools: &[EvalPool], provider: &P) -> Result<f64> {
    let ranks = pool_ranks(pools, provider)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_1<P: EmbeddingProvider + ?Sized>(pools: &[EvalPool], provider: &P) -> Result<f64> {
    let ranks = pool_ranks(pools, provider)?;
    Ok(ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance between the members of each positive pair.
pub fn alignment<E: AsRef<[f64]>>(pairs: &[(E, E)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("alignment needs at least one pair".into()));
    }
    Ok(pairs.iter().map(|(a, b)| distance(a.as_ref(), b.as_ref())).sum::<f64>() / pairs.len() as f64)
}

/// `log mean_{i<j} exp(-2 |x_i - x_j|^2)` over every unordered pair.
pub fn uniformity<E: AsRef<[f64]>>(embeddings: &[E]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidInput("uniformity needs at least two embeddings".into()));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(embeddings[i].as_ref(), embeddings[j].as_ref());
            sum += (-2.0 * d * d).exp();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((sum / pairs).ln())
}

/// [`uniformity`] over at most `cap` embeddings chosen with `seed`.
pub fn uniformity_sampled<E: AsRef<[f64]>>(embeddings: &[E], cap: usize, seed: u64) -> Result<f64> {
    if embeddings.len() <= cap {
        return uniformity(embeddings);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, embeddings.len(), cap).into_vec();
    picked.sort_unstable();
    let subset: Vec<&[f64]> = picked.iter().map(|&i| embeddings[i].as_ref()).collect();
    uniformity(&subset)
}

/// Per-class counts over equal-width buckets covering `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityHistogram {
    pub bucket_width: f64,
    pub similar: Vec<u64>,
    pub dissimilar: Vec<u64>,
}

impl SimilarityHistogram {
    pub fn buckets(&self) -> usize {
        self.similar.len()
    }

    /// Lower edge of bucket `i`.
    pub fn lower(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.bucket_width
    }

    pub fn upper(&self, i: usize) -> f64 {
        (-1.0 + (i + 1) as f64 * self.bucket_width).min(1.0)
    }

    /// Fraction of a class whose bucket starts at or above `threshold`.
    pub fn mass_from(&self, similar: bool, threshold: f64) -> f64 {
        let counts = if similar { &self.similar } else { &self.dissimilar };
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let above: u64 = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| self.lower(i) >= threshold - 1e-9)
            .map(|(_, c)| c)
            .sum();
        above as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,similar,dissimilar\n");
        for i in 0..self.buckets() {
            out.push_str(&format!(
                "{:.6},{:.6},{},{}\n",
                self.lower(i),
                self.upper(i),
                self.similar[i],
                self.dissimilar[i]
            ));
        }
        out
    }
}

pub fn similarity_histogram(pairs: &[ScoredPair], bucket_width: f64) -> Result<SimilarityHistogram> {
    if !(bucket_width > 0.0 && bucket_width.is_finite()) {
        return Err(Error::InvalidConfig(format!("bucket width must be positive, got {bucket_width}")));
    }
    let buckets = ((2.0 / bucket_width) - 1e-9).ceil().max(1.0) as usize;
    let mut h = SimilarityHistogram {
        bucket_width,
        similar: vec![0; buckets],
        dissimilar: vec![0; buckets],
    };
    for p in pairs {
        let raw = ((p.score + 1.0) / bucket_width + 1e-9).floor();
        let idx = if raw.is_nan() { 0 } else { (raw.max(0.0) as usize).min(buckets - 1) };
        if p.label {
            h.similar[idx] += 1;
        } else {
            h.dissimilar[idx] += 1;
        }
    }
    Ok(h)
}

/// The two addends of the contrastive loss, each averaged over anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean of `-s(a,p)/t`.
    pub positive: f64,
    /// Mean of `log sum_{k != a} exp(s(a,k)/t)`.
    pub negative: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.positive + self.negative
    }
}

pub fn loss_decomposition<E: AsRef<[f64]>>(embeddings: &[E], tau: f64) -> Result<LossTerms> {
    let (_, sims) = crate::contrastive::nt_xent_loss(embeddings, tau)?;
    Ok(terms_from_sims(&sims, tau))
}

pub(crate) fn terms_from_sims(sims: &SimMatrix, tau: f64) -> LossTerms {
    let terms = anchor_terms(sims, tau);
    let n = terms.len() as f64;
    LossTerms {
        positive: terms.iter().map(|t| t.positive).sum::<f64>() / n,
        negative: terms.iter().map(|t| t.negative).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::nt_xent_loss;
    use proptest::prelude::*;
    use rand::Rng;

    fn sp(score: f64, label: bool) -> ScoredPair {
        ScoredPair::new(score, label)
    }

    /// Quadratic count over every positive/negative comparison.
    fn brute_auc(pairs: &[ScoredPair]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for p in pairs.iter().filter(|p| p.label) {
            for n in pairs.iter().filter(|p| !p.label) {
                total += 1.0;
                if p.score > n.score {
                    wins += 1.0;
                } else if p.score == n.score {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn auc_examples() {
        let sep: Vec<_> = (0..5).map(|_| sp(0.9, true)).chain((0..5).map(|_| sp(0.1, false))).collect();
        assert_eq!(roc_auc(&sep).unwrap(), 1.0);
        let four = [sp(0.8, true), sp(0.6, false), sp(0.4, true), sp(0.2, false)];
        assert!((roc_auc(&four).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(roc_auc(&[sp(0.5, true), sp(0.5, false)]).unwrap(), 0.5);
        assert!(roc_auc(&[sp(0.5, true)]).is_err());
        assert!(roc_auc(&[sp(f64::NAN, true), sp(0.1, false)]).is_err());
    }

    #[test]
    fn auc_of_random_labels_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = (0..10_000)
            .map(|_| sp(rng.random_range(-1.0..1.0), rng.random_bool(0.5)))
            .collect();
        assert!((roc_auc(&pairs).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn rank_tie_break_is_stable() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 1);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 3);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], 0), 3);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], 1), 1);
    }

    #[test]
    fn alignment_and_uniformity_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let e3 = vec![0.0, 0.0, 1.0];
        assert_eq!(alignment(&[(e1.clone(), e1.clone())]).unwrap(), 0.0);
        let a = alignment(&[(e1.clone(), e2.clone()), (e2.clone(), e3.clone())]).unwrap();
        assert!((a - 2f64.sqrt()).abs() < 1e-12);
        assert!(alignment::<Vec<f64>>(&[]).is_err());

        assert_eq!(uniformity(&[e1.clone(), e1.clone(), e1.clone()]).unwrap(), 0.0);
        assert!((uniformity(&[e1.clone(), e2.clone(), e3.clone()]).unwrap() + 4.0).abs() < 1e-12);
        assert!(uniformity(std::slice::from_ref(&e1)).is_err());
    }

    #[test]
    fn uniformity_subsample_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let embs: Vec<Vec<f64>> = (0..50)
            .map(|_| Embedding::normalize((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().into_inner())
            .collect();
        let a = uniformity_sampled(&embs, 20, 9).unwrap();
        assert_eq!(a, uniformity_sampled(&embs, 20, 9).unwrap());
        assert_eq!(uniformity_sampled(&embs, 50, 9).unwrap(), uniformity(&embs).unwrap());
    }

    #[test]
    fn histogram_examples() {
        let h = similarity_histogram(&[sp(0.65, true)], 0.1).unwrap();
        assert_eq!(h.buckets(), 20);
        let i = h.similar.iter().position(|&c| c == 1).unwrap();
        assert!((h.lower(i) - 0.6).abs() < 1e-9 && (h.upper(i) - 0.7).abs() < 1e-9);

        let same: Vec<_> = (0..7).map(|k| sp(0.2, k % 2 == 0)).collect();
        let h = similarity_histogram(&same, 0.25).unwrap();
        let nonempty = (0..h.buckets()).filter(|&i| h.similar[i] + h.dissimilar[i] > 0).count();
        assert_eq!(nonempty, 1);
        assert_eq!(h.similar.iter().sum::<u64>(), 4);
        assert_eq!(h.dissimilar.iter().sum::<u64>(), 3);

        let edges = similarity_histogram(&[sp(-1.0, true), sp(1.0, true)], 0.1).unwrap();
        assert_eq!(edges.similar[0], 1);
        assert_eq!(edges.similar[19], 1);
        assert!(similarity_histogram(&[], 0.0).is_err());
        assert!(edges.to_csv().starts_with("lower,upper,similar,dissimilar\n"));
    }

    #[test]
    fn decomposition_of_single_pair() {
        let z = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let t = loss_decomposition(&z, 0.07).unwrap();
        assert!((t.positive + 0.6 / 0.07).abs() < 1e-12);
        assert!((t.negative - 0.6 / 0.07).abs() < 1e-12);
        assert_eq!(t.total(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn auc_matches_pairwise_count(scores in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)) {
            let pairs: Vec<_> = scores.iter().map(|&(s, l)| sp(s as f64 / 10.0, l)).collect();
            let has_both = pairs.iter().any(|p| p.label) && pairs.iter().any(|p| !p.label);
            prop_assume!(has_both);
            let auc = roc_auc(&pairs).unwrap();
            prop_assert!((auc - brute_auc(&pairs)).abs() < 1e-12);
            // strictly increasing transform
            let moved: Vec<_> = pairs.iter().map(|p| sp((3.0 * p.score).exp() - 7.0, p.label)).collect();
            prop_assert!((roc_auc(&moved).unwrap() - auc).abs() < 1e-12);
        }

        #[test]
        fn decomposition_sums_to_loss(seed in any::<u64>(), pairs in 1usize..6, tau in 0.05f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<Vec<f64>> = (0..2 * pairs)
                .map(|_| Embedding::normalize((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().into_inner())
                .collect();
            let (loss, _) = nt_xent_loss(&z, tau).unwrap();
            prop_assert!((loss_decomposition(&z, tau).unwrap().total() - loss).abs() < 1e-9);
        }

        #[test]
        fn uniformity_bounds(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<Vec<f64>> = (0..n)
                .map(|_| Embedding::normalize((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().into_inner())
                .collect();
            prop_assert!(uniformity(&z).unwrap() <= 0.0);
            prop_assert!(alignment(&[(z[0].clone(), z[1].clone())]).unwrap() >= 0.0);
        }
    }
}
