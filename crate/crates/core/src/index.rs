//! Exact cosine nearest-neighbour search over unit embeddings.
//!
//! Serialized form, little-endian:
//!
//! ```text
//! magic    b"SIDX"
//! version  u32
//! count    u64
//! dim      u64
//! ids      count * (u32 byte length, UTF-8 bytes)
//! matrix   count * dim f64, row-major
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::corpus::write_atomic;
use crate::embedding::{dot, l2_norm, Embedding};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"SIDX";
pub const INDEX_VERSION: u32 = 1;
/// Norm tolerance accepted when building an index.
pub const INDEX_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

pub fn build_index<I>(entries: I) -> Result<EmbeddingIndex>
where
    I: IntoIterator<Item = (String, Embedding)>,
{
    let mut idx = EmbeddingIndex {
        ids: Vec::new(),
        rows: HashMap::new(),
        dim: 0,
        data: Vec::new(),
    };
    for (id, e) in entries {
        if idx.ids.is_empty() {
            idx.dim = e.dim();
        } else if e.dim() != idx.dim {
            return Err(Error::ShapeMismatch(format!("{id} has dim {} (index dim {})", e.dim(), idx.dim)));
        }
        let norm = l2_norm(&e);
        if (norm - 1.0).abs() > INDEX_NORM_TOL {
            return Err(Error::NotUnitNorm { id, norm });
        }
        if idx.rows.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        idx.rows.insert(id.clone(), idx.ids.len());
        idx.ids.push(id);
        idx.data.extend_from_slice(&e);
    }
    Ok(idx)
}

fn by_score_then_id(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    fn scan(&self, query: &[f64], skip: Option<usize>, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be >= 1".into()));
        }
        if self.is_empty() {
            return Ok(SearchResult::default());
        }
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("query dim {} vs index dim {}", query.len(), self.dim)));
        }
        let mut hits: Vec<Hit> = (0..self.len())
            .filter(|&r| Some(r) != skip)
            .map(|r| Hit {
                id: self.ids[r].clone(),
                score: dot(query, &self.data[r * self.dim..(r + 1) * self.dim]),
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k, by_score_then_id);
            hits.truncate(k);
        }
        hits.sort_by(by_score_then_id);
        Ok(SearchResult { hits })
    }

    /// Exact top-`k` by cosine, ties broken by ascending id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<SearchResult> {
        self.scan(query, None, k)
    }

    /// Top-`k` neighbours of a stored entry, excluding the entry itself.
    pub fn top_k_of(&self, id: &str, k: usize) -> Result<SearchResult> {
        let &r = self.rows.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let q = self.data[r * self.dim..(r + 1) * self.dim].to_vec();
        self.scan(&q, Some(r), k)
    }
}

/// Known-vulnerable functions of one advisory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnGroup {
    pub name: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnQuery {
    pub query: String,
    /// Group members among the top-k results, the query included.
    pub found: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnRow {
    pub name: String,
    pub k: usize,
    pub queries: Vec<VulnQuery>,
    /// Mean over queries of `found / k`.
    pub recall: f64,
    pub min_found: usize,
}

/// Queries the index with every known-vulnerable function of each group
/// and counts how many of the group's functions land in the top `k`
/// (the group size unless overridden). The query itself is a result.
pub fn vulnerability_search(index: &EmbeddingIndex, groups: &[VulnGroup], k: Option<usize>) -> Result<Vec<VulnRow>> {
    groups
        .iter()
        .map(|g| {
            if g.ids.is_empty() {
                return Err(Error::InvalidInput(format!("group {} has no known-vulnerable ids", g.name)));
            }
            let k = k.unwrap_or(g.ids.len());
            let mut queries = Vec::with_capacity(g.ids.len());
            for q in &g.ids {
                let row = index.row(q).ok_or_else(|| Error::UnknownId(q.clone()))?;
                let res = index.top_k(row, k)?;
                let found = res.ids().filter(|id| g.ids.iter().any(|m| m == id)).count();
                queries.push(VulnQuery { query: q.clone(), found });
            }
            let recall = queries.iter().map(|q| q.found as f64 / k as f64).sum::<f64>() / queries.len() as f64;
            let min_found = queries.iter().map(|q| q.found).min().unwrap_or(0);
            Ok(VulnRow {
                name: g.name.clone(),
                k,
                queries,
                recall,
                min_found,
            })
        })
        .collect()
}

pub fn index_bytes(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + index.data.len() * 8 + index.ids.iter().map(|s| s.len() + 4).sum::<usize>());
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&(index.dim as u64).to_le_bytes());
    for id in &index.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for x in &index.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn index_from_bytes(bytes: &[u8]) -> Result<EmbeddingIndex> {
    if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
        return Err(Error::NotAnIndex);
    }
    let mut r = Reader::new(bytes);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != INDEX_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: INDEX_VERSION,
        });
    }
    let count = r.usize("count")?;
    let dim = r.usize("dim")?;
    let mut ids = Vec::new();
    for _ in 0..count {
        let len = r.u32("id length")? as usize;
        let raw = r.take(len, "id")?;
        ids.push(
            String::from_utf8(raw.to_vec()).map_err(|_| Error::InvalidInput("index id is not UTF-8".into()))?,
        );
    }
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Error::InvalidInput("index shape overflows".into()))?;
    let data = r.f64s(total, "matrix")?;
    r.finish()?;
    let entries = ids.into_iter().enumerate().map(|(i, id)| {
        let row = data[i * dim..(i + 1) * dim].to_vec();
        (id, row)
    });
    let mut checked = Vec::with_capacity(count);
    for (id, row) in entries {
        let e = Embedding::from_unit(row, INDEX_NORM_TOL).map_err(|e| match e {
            Error::NotUnitNorm { norm, .. } => Error::NotUnitNorm { id: id.clone(), norm },
            other => other,
        })?;
        checked.push((id, e));
    }
    build_index(checked)
}

pub fn save_index(index: &EmbeddingIndex, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &index_bytes(index))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    index_from_bytes(&bytes)
}
