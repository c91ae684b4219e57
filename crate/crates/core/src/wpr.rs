//! Weighted Page Rank on the attention graph.
//!
//! Each token votes for the tokens it attends to, with a vote weighted by its
//! own current importance. With rows of `A` holding the attention a query
//! pays, the importance a token receives is a column of `A`, so one voting
//! round is `s ← Aᵀ s`. There is no damping or teleport term.
//!
//! Every shift is followed by a rescale to unit mass. For row-stochastic `A`
//! the shift already preserves mass, so the rescale only removes float drift;
//! a constant `1/N` prefactor would change no ranking either.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{normalize_mass, ImportanceSignal};

/// Iteration cap for tolerance-driven runs.
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// Stopping rule for [`wpr_run`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stopping {
    /// Run exactly this many shifts (at least one).
    Fixed(usize),
    /// Stop once the L1 change between consecutive signals is `<= tol`.
    Tolerance { tol: f64, max_iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WprConfig {
    pub stopping: Stopping,
}

impl WprConfig {
    pub fn fixed(iterations: usize) -> Self {
        Self {
            stopping: Stopping::Fixed(iterations),
        }
    }

    pub fn tolerance(tol: f64) -> Self {
        Self {
            stopping: Stopping::Tolerance {
                tol,
                max_iterations: DEFAULT_MAX_ITERATIONS,
            },
        }
    }
}

/// How the CLS token is weighted at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClsBoostMode {
    /// CLS starts `√N` times heavier than the other tokens.
    #[default]
    Classification,
    /// Uniform start.
    Uniform,
}

impl ClsBoostMode {
    pub fn boost(self, n: usize) -> f64 {
        match self {
            ClsBoostMode::Classification => (n as f64).sqrt(),
            ClsBoostMode::Uniform => 1.0,
        }
    }
}

/// Initial signal over tokens `0..n`.
pub fn init_signal(n: usize, cls_index: Option<usize>, cls_boost: f64) -> Result<ImportanceSignal> {
    init_signal_over((0..n).collect(), cls_index, cls_boost)
}

/// Initial signal over explicit token ids; `cls_position` indexes `token_ids`.
///
/// Without CLS (or with boost 1) every entry is `1/n`. Otherwise CLS gets
/// `boost·u` and everyone else `u`, with `u = 1/(n − 1 + boost)`.
pub fn init_signal_over(
    token_ids: Vec<usize>,
    cls_position: Option<usize>,
    cls_boost: f64,
) -> Result<ImportanceSignal> {
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::InvalidParameter("cannot initialize an empty signal".into()));
    }
    if !(cls_boost >= 0.0 && cls_boost.is_finite()) {
        return Err(Error::InvalidParameter(format!("CLS boost {cls_boost} must be finite and >= 0")));
    }
    match cls_position {
        Some(pos) if pos >= n => Err(Error::InvalidParameter(format!(
            "CLS position {pos} out of range for {n} tokens"
        ))),
        Some(pos) if cls_boost != 1.0 => {
            let u = 1.0 / (n as f64 - 1.0 + cls_boost);
            let mut values = vec![u; n];
            values[pos] = cls_boost * u;
            ImportanceSignal::new(values, token_ids)
        }
        _ => ImportanceSignal::uniform_over(token_ids),
    }
}

/// One voting round without the mass rescale: `out_i = Σ_j A[j, i]·s_j`.
pub fn shift_raw(attention: ArrayView2<'_, f64>, s: &ImportanceSignal) -> Result<Vec<f64>> {
    let (rows, cols) = attention.dim();
    if rows != cols || rows != s.len() {
        return Err(Error::Shape(format!(
            "attention is {rows}x{cols} but the signal has {} entries",
            s.len()
        )));
    }
    let mut out = vec![0.0; cols];
    for (j, row) in attention.outer_iter().enumerate() {
        let vote = s.values()[j];
        for (acc, a) in out.iter_mut().zip(row.iter()) {
            *acc += a * vote;
        }
    }
    Ok(out)
}

/// One voting round, rescaled to unit mass.
pub fn shift(attention: ArrayView2<'_, f64>, s: &ImportanceSignal) -> Result<ImportanceSignal> {
    let raw = shift_raw(attention, s)?;
    let values = normalize_mass(raw)?;
    ImportanceSignal::new(values, s.token_ids().to_vec())
}

/// Result of [`wpr_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct WprOutcome {
    pub signal: ImportanceSignal,
    pub iterations: usize,
    /// L1 change produced by the last shift.
    pub residual: f64,
}

/// Repeats [`shift`] until the stopping rule is met. At least one shift is
/// always executed.
pub fn wpr_run(
    attention: ArrayView2<'_, f64>,
    s0: &ImportanceSignal,
    config: &WprConfig,
) -> Result<WprOutcome> {
    let (limit, tol) = match config.stopping {
        Stopping::Fixed(0) => {
            return Err(Error::InvalidParameter("WPR needs at least one iteration".into()))
        }
        Stopping::Fixed(k) => (k, None),
        Stopping::Tolerance { tol, max_iterations } => {
            if !(tol > 0.0) {
                return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
            }
            (max_iterations.max(1), Some(tol))
        }
    };

    let mut current = s0.clone();
    let mut residual = f64::INFINITY;
    for iteration in 1..=limit {
        let raw = shift_raw(attention, &current)?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        let values = normalize_mass(raw).map_err(|_| Error::Diverged { iteration })?;
        residual = values
            .iter()
            .zip(current.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        current = ImportanceSignal::new(values, current.token_ids().to_vec())?;
        if let Some(tol) = tol {
            if residual <= tol {
                return Ok(WprOutcome {
                    signal: current,
                    iterations: iteration,
                    residual,
                });
            }
        }
    }
    match tol {
        Some(tol) => Err(Error::NotConverged {
            tol,
            max_iterations: limit,
        }),
        None => Ok(WprOutcome {
            signal: current,
            iterations: limit,
            residual,
        }),
    }
}

/// Smoothing floor applied to `q` before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &ImportanceSignal, q: &ImportanceSignal) -> Result<f64> {
    kl_divergence_values(p.values(), q.values())
}

pub fn kl_divergence_values(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL over {} vs {} entries", p.len(), q.len())));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}
