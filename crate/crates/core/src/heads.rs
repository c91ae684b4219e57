//! Cross-head aggregation: variance-based head filtering, then a root mean
//! of squares over the surviving heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ImportanceSignal;

/// Per-head signals for one layer, all over the same tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBundle {
    per_head: Vec<ImportanceSignal>,
    variances: Vec<f64>,
}

impl HeadBundle {
    pub fn new(per_head: Vec<ImportanceSignal>) -> Result<Self> {
        let first = per_head
            .first()
            .ok_or_else(|| Error::Signal("head bundle needs at least one head".into()))?;
        if per_head.iter().any(|s| s.token_ids() != first.token_ids()) {
            return Err(Error::Signal("heads disagree on the token set".into()));
        }
        let variances = per_head.iter().map(head_variance).collect();
        Ok(Self { per_head, variances })
    }

    pub fn heads(&self) -> &[ImportanceSignal] {
        &self.per_head
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn token_ids(&self) -> &[usize] {
        self.per_head[0].token_ids()
    }
}

/// Head-variance window. Variances are measured on `N·s`, which has mean 1,
/// so the same window applies at every token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VhfThresholds {
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for VhfThresholds {
    fn default() -> Self {
        Self {
            v_min: 0.01,
            v_max: 0.7,
        }
    }
}

impl VhfThresholds {
    pub fn new(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min >= 0.0 && v_max >= v_min) {
            return Err(Error::InvalidParameter(format!(
                "VHF window [{v_min}, {v_max}] must satisfy 0 <= v_min <= v_max"
            )));
        }
        Ok(Self { v_min, v_max })
    }

    /// Window that keeps every head.
    pub fn open() -> Self {
        Self {
            v_min: 0.0,
            v_max: f64::INFINITY,
        }
    }
}

/// Population variance of `N·s`.
pub fn head_variance(s: &ImportanceSignal) -> f64 {
    let n = s.len() as f64;
    let scaled: Vec<f64> = s.values().iter().map(|v| v * n).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Heads whose variance lies in the closed window. When no head qualifies
/// every head is kept, so a layer always produces a ranking.
pub fn vhf_mask(bundle: &HeadBundle, thresholds: &VhfThresholds) -> Vec<bool> {
    let mask = vhf_mask_strict(bundle.variances(), thresholds);
    if mask.iter().any(|&m| m) {
        mask
    } else {
        vec![true; mask.len()]
    }
}

/// The raw indicator, without the all-excluded fallback.
pub fn vhf_mask_strict(variances: &[f64], thresholds: &VhfThresholds) -> Vec<bool> {
    variances
        .iter()
        .map(|&v| thresholds.v_min <= v && v <= thresholds.v_max)
        .collect()
}

/// `sqrt(Σ_h η_h·x_h² / Σ_h η_h)` per token, on raw per-head scores.
pub fn rms_combine(per_head: &[&[f64]], mask: &[bool]) -> Result<Vec<f64>> {
    let n = per_head.first().map(|h| h.len()).unwrap_or(0);
    if per_head.len() != mask.len() || per_head.iter().any(|h| h.len() != n) {
        return Err(Error::Shape("per-head scores and mask disagree".into()));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::InvalidParameter("no active head to aggregate".into()));
    }
    let mut out = vec![0.0; n];
    for (scores, _) in per_head.iter().zip(mask).filter(|(_, &m)| m) {
        for (acc, x) in out.iter_mut().zip(scores.iter()) {
            *acc += x * x;
        }
    }
    Ok(out.into_iter().map(|v| (v / active as f64).sqrt()).collect())
}

/// Plain mean over active heads, for comparison with [`rms_combine`].
pub fn mean_combine(per_head: &[&[f64]], mask: &[bool]) -> Result<Vec<f64>> {
    let n = per_head.first().map(|h| h.len()).unwrap_or(0);
    if per_head.len() != mask.len() || per_head.iter().any(|h| h.len() != n) {
        return Err(Error::Shape("per-head scores and mask disagree".into()));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::InvalidParameter("no active head to aggregate".into()));
    }
    let mut out = vec![0.0; n];
    for (scores, _) in per_head.iter().zip(mask).filter(|(_, &m)| m) {
        for (acc, x) in out.iter_mut().zip(scores.iter()) {
            *acc += x;
        }
    }
    Ok(out.into_iter().map(|v| v / active as f64).collect())
}

/// Root-mean-square aggregation over the masked heads, rescaled to unit mass.
pub fn eir_aggregate(bundle: &HeadBundle, mask: &[bool]) -> Result<ImportanceSignal> {
    let per_head: Vec<&[f64]> = bundle.heads().iter().map(|s| s.values()).collect();
    let raw = rms_combine(&per_head, mask)?;
    ImportanceSignal::from_unnormalized(raw, bundle.token_ids().to_vec())
}
