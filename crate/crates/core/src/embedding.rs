use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A unit-norm function embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Scales `v` to unit length.
    pub fn normalize(mut v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    /// Wraps an already unit-length vector, checking it within `tol`.
    pub fn from_unit(v: Vec<f64>, tol: f64) -> Result<Self> {
        let norm = l2_norm(&v);
        if (norm - 1.0).abs() > tol {
            return Err(Error::NotUnitNorm {
                id: String::new(),
                norm,
            });
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
