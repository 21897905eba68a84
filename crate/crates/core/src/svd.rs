//! Rank-2 projection of centered embeddings by power iteration.

use serde::Serialize;

use crate::error::{Error, Result};

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rank2 {
    /// One `[c1, c2]` row per input embedding.
    pub coords: Vec<[f64; 2]>,
    pub singular_values: [f64; 2],
    /// Right singular vectors, unit length (zero when absent).
    pub components: [Vec<f64>; 2],
}

impl Rank2 {
    pub fn to_csv(&self, ids: Option<&[String]>) -> String {
        let mut out = String::from(if ids.is_some() { "id,x,y\n" } else { "index,x,y\n" });
        for (i, c) in self.coords.iter().enumerate() {
            let label = ids.and_then(|v| v.get(i)).cloned().unwrap_or_else(|| i.to_string());
            out.push_str(&format!("{label},{:.9},{:.9}\n", c[0], c[1]));
        }
        out
    }
}

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenpair of a symmetric PSD matrix.
fn power_iteration(c: &[f64], d: usize, scale: f64) -> (f64, Vec<f64>) {
    // fixed, non-symmetric start so it is unlikely to be orthogonal to the target
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..POWER_MAX_ITERS {
        let w = mat_vec(c, d, &v);
        let nw = norm(&w);
        if nw <= scale * 1e-14 {
            return (0.0, vec![0.0; d]);
        }
        let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let cv = mat_vec(c, d, &v);
    let lambda = v.iter().zip(&cv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    (lambda, v)
}

/// Centers the rows by column means and projects them onto the top two
/// right singular vectors. Identical inputs give all-zero coordinates.
pub fn svd_rank2<E: AsRef<[f64]>>(embeddings: &[E]) -> Result<Rank2> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidInput("rank-2 projection needs at least two embeddings".into()));
    }
    let d = embeddings[0].as_ref().len();
    if d < 2 {
        return Err(Error::InvalidInput("rank-2 projection needs dimension >= 2".into()));
    }
    if let Some(bad) = embeddings.iter().find(|e| e.as_ref().len() != d) {
        return Err(Error::ShapeMismatch(format!("dims {} and {d}", bad.as_ref().len())));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, x) in mean.iter_mut().zip(e.as_ref()) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut singular_values = [0.0; 2];
    if trace > 0.0 {
        for k in 0..2 {
            let (lambda, v) = power_iteration(&cov, d, trace);
            if lambda <= trace * 1e-15 {
                break;
            }
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] -= lambda * v[i] * v[j];
                }
            }
            singular_values[k] = lambda.sqrt();
            components[k] = v;
        }
    }
    let coords = centered
        .iter()
        .map(|r| {
            let p = |c: &[f64]| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Rank2 {
        coords,
        singular_values,
        components,
    })
}
