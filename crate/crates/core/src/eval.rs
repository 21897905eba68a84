//! Held-out evaluation: pair AUC, pool retrieval and embedding geometry.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FunctionGroup, FunctionInstance};
use crate::embedding::{dot, Embedding};
use crate::encoder::{EncoderParams, View};
use crate::error::{Error, Result};
use crate::metrics::{
    alignment, mrr, recall_at_1, roc_auc, similarity_histogram, uniformity_sampled, ScoredPair,
    SimilarityHistogram, UNIFORMITY_CAP,
};
use crate::pools::make_pools;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pool_sizes: Vec<usize>,
    pub seed: u64,
    pub bucket_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_sizes: vec![32],
            seed: 0,
            bucket_width: 0.1,
        }
    }
}

/// One labelled pair of instances.
#[derive(Debug, Clone, Copy)]
pub struct LabeledPair<'a> {
    pub a: &'a FunctionInstance,
    pub b: &'a FunctionInstance,
    pub similar: bool,
}

/// For every pair-eligible group, each unordered pair of its members as a
/// positive, and as many negatives pairing a random member with a member of
/// a random other group.
pub fn make_eval_pairs<'a, R: Rng + ?Sized>(groups: &'a [FunctionGroup], rng: &mut R) -> Result<Vec<LabeledPair<'a>>> {
    let nonempty: Vec<&FunctionGroup> = groups.iter().filter(|g| !g.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::InvalidInput("evaluation needs at least two groups".into()));
    }
    let mut out = Vec::new();
    for (gi, g) in nonempty.iter().enumerate() {
        let m = g.len();
        for i in 0..m {
            for j in i + 1..m {
                out.push(LabeledPair {
                    a: &g.members[i],
                    b: &g.members[j],
                    similar: true,
                });
                let mut other = rng.random_range(0..nonempty.len() - 1);
                if other >= gi {
                    other += 1;
                }
                let o = nonempty[other];
                out.push(LabeledPair {
                    a: &g.members[rng.random_range(0..m)],
                    b: &o.members[rng.random_range(0..o.len())],
                    similar: false,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no pair-eligible groups".into()));
    }
    Ok(out)
}

/// Evaluation-view embeddings of every instance, keyed by id.
pub fn embed_instances<'a, I>(params: &EncoderParams, instances: I) -> Result<HashMap<String, Embedding>>
where
    I: IntoIterator<Item = &'a FunctionInstance>,
{
    let max = params.config().max_input_length;
    let list: Vec<&FunctionInstance> = instances.into_iter().collect();
    let embs: Vec<Result<Embedding>> = list
        .par_iter()
        .map(|i| params.encode_view(&i.tokens[..i.tokens.len().min(max)], View::Representation))
        .collect();
    let mut out = HashMap::with_capacity(list.len());
    for (inst, e) in list.into_iter().zip(embs) {
        let e = e.map_err(|err| Error::InvalidInput(format!("encoding {}: {err}", inst.instance_id)))?;
        out.insert(inst.instance_id.clone(), e);
    }
    Ok(out)
}

fn score(table: &HashMap<String, Embedding>, p: &LabeledPair) -> ScoredPair {
    ScoredPair::new(dot(&table[&p.a.instance_id], &table[&p.b.instance_id]), p.similar)
}

/// Flat metrics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: f64,
    /// Keyed by pool size.
    pub mrr: BTreeMap<usize, f64>,
    pub recall_at_1: BTreeMap<usize, f64>,
    pub alignment: f64,
    pub uniformity: f64,
    pub num_pairs: usize,
    pub num_pools: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub scored: Vec<ScoredPair>,
    pub histogram: SimilarityHistogram,
    /// Every evaluated instance, in group order.
    pub ids: Vec<String>,
    pub embeddings: Vec<Embedding>,
}

pub fn evaluate(params: &EncoderParams, groups: &[FunctionGroup], config: &EvalConfig) -> Result<Evaluation> {
    let instances: Vec<&FunctionInstance> = groups.iter().flat_map(|g| g.members.iter()).collect();
    let table = embed_instances(params, instances.iter().copied())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pairs = make_eval_pairs(groups, &mut rng)?;
    let scored: Vec<ScoredPair> = pairs.iter().map(|p| score(&table, p)).collect();
    let auc = roc_auc(&scored)?;
    let positives: Vec<(&[f64], &[f64])> = pairs
        .iter()
        .filter(|p| p.similar)
        .map(|p| (&table[&p.a.instance_id][..], &table[&p.b.instance_id][..]))
        .collect();
    let align = alignment(&positives)?;
    let ids: Vec<String> = instances.iter().map(|i| i.instance_id.clone()).collect();
    let embeddings: Vec<Embedding> = ids.iter().map(|id| table[id].clone()).collect();
    let unif = uniformity_sampled(&embeddings, UNIFORMITY_CAP, config.seed)?;

    let mut mrr_by = BTreeMap::new();
    let mut r1_by = BTreeMap::new();
    let mut pools_by = BTreeMap::new();
    for &size in &config.pool_sizes {
        let pools = make_pools(groups, size, &mut rng)?;
        mrr_by.insert(size, mrr(&pools, &table)?);
        r1_by.insert(size, recall_at_1(&pools, &table)?);
        pools_by.insert(size, pools.len());
    }
    let histogram = similarity_histogram(&scored, config.bucket_width)?;
    Ok(Evaluation {
        metrics: EvalMetrics {
            auc,
            mrr: mrr_by,
            recall_at_1: r1_by,
            alignment: align,
            uniformity: unif,
            num_pairs: scored.len(),
            num_pools: pools_by,
        },
        scored,
        histogram,
        ids,
        embeddings,
    })
}

/// Held-out pair AUC only.
pub fn pair_auc(params: &EncoderParams, groups: &[FunctionGroup], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = make_eval_pairs(groups, &mut rng)?;
    let table = embed_instances(params, pairs.iter().flat_map(|p| [p.a, p.b]))?;
    roc_auc(&pairs.iter().map(|p| score(&table, p)).collect::<Vec<_>>())
}
