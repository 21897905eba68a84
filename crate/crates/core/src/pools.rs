//! Retrieval pools: one query, one relevant variant, and distractors from
//! other functions.

use rand::seq::index;
use rand::Rng;

use crate::corpus::{sample_positive_pair, FunctionGroup, FunctionInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPool {
    pub query: FunctionInstance,
    pub candidates: Vec<FunctionInstance>,
    /// Position of the relevant candidate.
    pub relevant: usize,
}

impl EvalPool {
    pub fn pool_size(&self) -> usize {
        self.candidates.len()
    }

    /// Checks the pool contract; returns the violated rule.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.candidates.is_empty() {
            return Err("no candidates".into());
        }
        if self.relevant >= self.candidates.len() {
            return Err(format!("relevant index {} outside {} candidates", self.relevant, self.candidates.len()));
        }
        if self.candidates.iter().any(|c| c.instance_id == self.query.instance_id) {
            return Err(format!("query {} appears among its candidates", self.query.instance_id));
        }
        let g = &self.query.group_id;
        if self.candidates[self.relevant].group_id != *g {
            return Err("relevant candidate belongs to another group".into());
        }
        let same_group = self.candidates.iter().filter(|c| c.group_id == *g).count();
        if same_group != 1 {
            return Err(format!("{same_group} candidates share the query's group"));
        }
        Ok(())
    }
}

/// One pool per pair-eligible group, in group order. The relevant candidate
/// is another variant of the query's function and sits at a random
/// position among `pool_size - 1` distractors from distinct other groups.
pub fn make_pools<R: Rng + ?Sized>(groups: &[FunctionGroup], pool_size: usize, rng: &mut R) -> Result<Vec<EvalPool>> {
    if pool_size < 2 {
        return Err(Error::InvalidConfig(format!("pool size must be >= 2, got {pool_size}")));
    }
    let nonempty: Vec<usize> = (0..groups.len()).filter(|&i| !groups[i].is_empty()).collect();
    if nonempty.len() < pool_size {
        return Err(Error::InvalidInput(format!(
            "pool size {pool_size} needs at least {pool_size} distinct groups, found {}",
            nonempty.len()
        )));
    }
    let mut pools = Vec::new();
    for (pos, &gi) in nonempty.iter().enumerate() {
        let group = &groups[gi];
        if !group.is_pair_eligible() {
            continue;
        }
        let (query, relevant) = sample_positive_pair(group, rng)?;
        let mut candidates = Vec::with_capacity(pool_size);
        for k in index::sample(rng, nonempty.len() - 1, pool_size - 1) {
            // skip the query's own slot
            let other = &groups[nonempty[if k >= pos { k + 1 } else { k }]];
            candidates.push(other.members[rng.random_range(0..other.len())].clone());
        }
        let at = rng.random_range(0..pool_size);
        candidates.insert(at, relevant.clone());
        pools.push(EvalPool {
            query: query.clone(),
            candidates,
            relevant: at,
        });
    }
    if pools.is_empty() {
        return Err(Error::InvalidInput("no pair-eligible groups to build pools from".into()));
    }
    Ok(pools)
}
