//! Temperature-scaled instance discrimination over in-batch negatives.
//!
//! A batch holds `2N` embeddings laid out as pairs `(2i, 2i+1)`. For anchor
//! `a` with positive `p = a ^ 1`
//!
//! ```text
//! l_a = -s(a,p)/t + log sum_{k != a} exp(s(a,k)/t)
//! L   = 1/(2N) sum_a l_a
//! ```
//!
//! which is the mean over pairs of the two directional losses.

use serde::Serialize;

use crate::embedding::{dot, l2_norm};
use crate::error::{Error, Result};

/// Cosine of the angle between `a` and `b`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("dims {} and {}", a.len(), b.len())));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `log sum exp(xs)` with the maximum subtracted first.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax over the batch of `sim(z_j, z)/tau`, evaluated at each `j`.
pub fn instance_probs<E: AsRef<[f64]>>(z: &[f64], batch: &[E], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let logits = batch
        .iter()
        .map(|e| cosine_sim(e.as_ref(), z).map(|s| s / tau))
        .collect::<Result<Vec<f64>>>()?;
    let lse = log_sum_exp(logits.iter().copied());
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Probability that `z` belongs to instance `i` of the batch.
pub fn instance_prob<E: AsRef<[f64]>>(i: usize, z: &[f64], batch: &[E], tau: f64) -> Result<f64> {
    if i >= batch.len() {
        return Err(Error::InvalidInput(format!("index {i} outside batch of {}", batch.len())));
    }
    Ok(instance_probs(z, batch, tau)?[i])
}

/// Symmetric `2N x 2N` matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimMatrix {
    pub fn from_embeddings<E: AsRef<[f64]>>(embeddings: &[E]) -> Result<Self> {
        let n = embeddings.len();
        let dim = embeddings.first().map(|e| e.as_ref().len()).unwrap_or(0);
        let mut unit = Vec::with_capacity(n);
        for e in embeddings {
            let e = e.as_ref();
            if e.len() != dim {
                return Err(Error::ShapeMismatch(format!("embedding dims {} and {dim}", e.len())));
            }
            let norm = l2_norm(e);
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            unit.push(e.iter().map(|x| x / norm).collect::<Vec<f64>>());
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = dot(&unit[i], &unit[i]).clamp(-1.0, 1.0);
            for j in i + 1..n {
                let s = dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

fn check_batch<E: AsRef<[f64]>>(embeddings: &[E], tau: f64) -> Result<()> {
    check_temperature(tau)?;
    if embeddings.is_empty() {
        return Err(Error::InvalidInput("batch must contain at least one pair".into()));
    }
    if !embeddings.len().is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "batch of {} embeddings is not made of pairs",
            embeddings.len()
        )));
    }
    Ok(())
}

/// Per-anchor split of the loss into its positive and normalizer parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnchorTerms {
    /// `-s(a,p)/t`
    pub positive: f64,
    /// `log sum_{k != a} exp(s(a,k)/t)`
    pub negative: f64,
}

impl AnchorTerms {
    pub fn loss(&self) -> f64 {
        self.negative + self.positive
    }
}

pub(crate) fn anchor_terms(sims: &SimMatrix, tau: f64) -> Vec<AnchorTerms> {
    let n = sims.size();
    (0..n)
        .map(|a| {
            let row = sims.row(a);
            let positive = row[a ^ 1] / tau;
            let negative = log_sum_exp((0..n).filter(|&k| k != a).map(|k| row[k] / tau));
            AnchorTerms {
                positive: -positive,
                negative,
            }
        })
        .collect()
}

/// NT-Xent loss of a paired batch, plus the similarity matrix it used.
pub fn nt_xent_loss<E: AsRef<[f64]>>(embeddings: &[E], tau: f64) -> Result<(f64, SimMatrix)> {
    check_batch(embeddings, tau)?;
    let sims = SimMatrix::from_embeddings(embeddings)?;
    let terms = anchor_terms(&sims, tau);
    let total: f64 = terms.iter().map(AnchorTerms::loss).sum();
    Ok((total / embeddings.len() as f64, sims))
}

/// `d l_a / d s(a,k)` for every anchor `a` (unscaled per-anchor loss);
/// the diagonal is zero.
pub fn similarity_grads<E: AsRef<[f64]>>(embeddings: &[E], tau: f64) -> Result<SimMatrix> {
    check_batch(embeddings, tau)?;
    let sims = SimMatrix::from_embeddings(embeddings)?;
    Ok(similarity_grads_from(&sims, tau))
}

fn similarity_grads_from(sims: &SimMatrix, tau: f64) -> SimMatrix {
    let n = sims.size();
    let mut data = vec![0.0; n * n];
    for a in 0..n {
        let row = sims.row(a);
        let lse = log_sum_exp((0..n).filter(|&k| k != a).map(|k| row[k] / tau));
        for k in (0..n).filter(|&k| k != a) {
            let p = (row[k] / tau - lse).exp();
            let target = if k == a ^ 1 { 1.0 } else { 0.0 };
            data[a * n + k] = (p - target) / tau;
        }
    }
    SimMatrix { n, data }
}

/// `dL/dz_k` for each embedding, treating similarities as dot products of
/// the given (unit) vectors. The normalization Jacobian is applied by the
/// encoder.
pub fn nt_xent_grad<E: AsRef<[f64]>>(embeddings: &[E], tau: f64) -> Result<Vec<Vec<f64>>> {
    check_batch(embeddings, tau)?;
    let n = embeddings.len();
    let dim = embeddings[0].as_ref().len();
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        let zi = embeddings[i].as_ref();
        if zi.len() != dim {
            return Err(Error::ShapeMismatch(format!("embedding dims {} and {dim}", zi.len())));
        }
        for j in 0..n {
            raw[i * n + j] = dot(zi, embeddings[j].as_ref());
        }
    }
    let sims = SimMatrix { n, data: raw };
    let coef = similarity_grads_from(&sims, tau);
    let scale = 1.0 / n as f64;
    let mut grads = vec![vec![0.0; dim]; n];
    for a in 0..n {
        let za = embeddings[a].as_ref();
        for k in (0..n).filter(|&k| k != a) {
            let c = coef.get(a, k) * scale;
            if c == 0.0 {
                continue;
            }
            let zk = embeddings[k].as_ref();
            for d in 0..dim {
                grads[a][d] += c * zk[d];
                grads[k][d] += c * za[d];
            }
        }
    }
    Ok(grads)
}
