//! Per-token importance distributions.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-mass invariant of an [`ImportanceSignal`].
pub const MASS_TOL: f64 = 1e-6;

/// A nonnegative, unit-mass score per token.
///
/// `token_ids` are indices into the original (unpruned) token space, so a
/// signal computed on a sliced attention view still names the right tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSignal {
    values: Vec<f64>,
    token_ids: Vec<usize>,
}

impl ImportanceSignal {
    /// Builds a signal from already-normalized values.
    pub fn new(values: Vec<f64>, token_ids: Vec<usize>) -> Result<Self> {
        if values.len() != token_ids.len() {
            return Err(Error::Signal(format!(
                "{} values for {} token ids",
                values.len(),
                token_ids.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::Signal("empty signal".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Signal(format!("entry {v} is not a finite nonnegative value")));
        }
        let mass: f64 = values.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Signal(format!("mass {mass} is not 1")));
        }
        let mut seen = HashSet::with_capacity(token_ids.len());
        if !token_ids.iter().all(|id| seen.insert(*id)) {
            return Err(Error::Signal("duplicate token ids".into()));
        }
        Ok(Self { values, token_ids })
    }

    /// Rescales nonnegative raw scores to unit mass.
    ///
    /// An all-zero input becomes the uniform distribution.
    pub fn from_unnormalized(raw: Vec<f64>, token_ids: Vec<usize>) -> Result<Self> {
        let values = normalize_mass(raw)?;
        Self::new(values, token_ids)
    }

    /// Uniform distribution over `0..n`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::uniform_over((0..n).collect())
    }

    pub fn uniform_over(token_ids: Vec<usize>) -> Result<Self> {
        let n = token_ids.len();
        Self::new(vec![1.0 / n as f64; n], token_ids)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Score of an original token id, if present.
    pub fn score_of(&self, token: usize) -> Option<f64> {
        self.token_ids
            .iter()
            .position(|&id| id == token)
            .map(|pos| self.values[pos])
    }

    /// Token ids ordered by descending score; ties go to the lower id.
    pub fn ranked_ids(&self) -> Vec<usize> {
        self.ranked_positions()
            .into_iter()
            .map(|pos| self.token_ids[pos])
            .collect()
    }

    /// Local positions ordered by descending score; ties go to the lower id.
    pub fn ranked_positions(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| rank_cmp((self.values[a], self.token_ids[a]), (self.values[b], self.token_ids[b])));
        order
    }

    /// Restricts to `keep` (original ids, any order) and renormalizes.
    /// Ids in `keep` that the signal does not carry are an error.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let mut raw = Vec::with_capacity(keep.len());
        for &id in keep {
            let v = self
                .score_of(id)
                .ok_or_else(|| Error::Signal(format!("token {id} not in signal")))?;
            raw.push(v);
        }
        Self::from_unnormalized(raw, keep.to_vec())
    }

    /// Total score carried by `tokens`.
    pub fn mass_of(&self, tokens: &[usize]) -> f64 {
        let set: HashSet<usize> = tokens.iter().copied().collect();
        self.token_ids
            .iter()
            .zip(&self.values)
            .filter(|(id, _)| set.contains(id))
            .map(|(_, v)| v)
            .sum()
    }
}

/// Descending-score comparator with lower-id tie-break.
pub fn rank_cmp(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Divides by the total; an all-zero vector becomes uniform.
pub(crate) fn normalize_mass(mut raw: Vec<f64>) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Signal("empty signal".into()));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite {
            what: "importance scores".into(),
        });
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        let u = 1.0 / raw.len() as f64;
        raw.iter_mut().for_each(|v| *v = u);
    } else {
        raw.iter_mut().for_each(|v| *v /= total);
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_mass_and_duplicates() {
        assert!(ImportanceSignal::new(vec![0.5, 0.4], vec![0, 1]).is_err());
        assert!(ImportanceSignal::new(vec![0.5, 0.5], vec![3, 3]).is_err());
        assert!(ImportanceSignal::new(vec![1.0], vec![0, 1]).is_err());
        assert!(ImportanceSignal::new(vec![1.5, -0.5], vec![0, 1]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_lower_id() {
        let s = ImportanceSignal::new(vec![0.25, 0.25, 0.5], vec![9, 4, 7]).unwrap();
        assert_eq!(s.ranked_ids(), vec![7, 4, 9]);
    }

    #[test]
    fn restrict_renormalizes() {
        let s = ImportanceSignal::new(vec![0.1, 0.3, 0.6], vec![0, 1, 2]).unwrap();
        let r = s.restrict(&[0, 2]).unwrap();
        assert!((r.values()[0] - 0.1 / 0.7).abs() < 1e-12);
        assert_eq!(r.token_ids(), &[0, 2]);
        assert!(s.restrict(&[5]).is_err());
    }

    #[test]
    fn zero_raw_becomes_uniform() {
        let s = ImportanceSignal::from_unnormalized(vec![0.0; 4], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(s.values(), &[0.25; 4]);
    }
}
