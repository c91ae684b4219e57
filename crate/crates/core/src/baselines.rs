//! Reference token rankings and ranking-quality metrics.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::VhfThresholds;
use crate::pipeline::{rank_view, slice_attention};
use crate::signal::ImportanceSignal;
use crate::trace::ModelTrace;
use crate::wpr::{ClsBoostMode, WprConfig};

/// Ranks tokens by a seeded random permutation. Scores are
/// `(n − rank)/(n(n+1)/2)`, strictly decreasing along the permutation.
pub fn random_rank(n: usize, seed: u64) -> Result<ImportanceSignal> {
    random_rank_over((0..n).collect(), seed)
}

pub fn random_rank_over(token_ids: Vec<usize>, seed: u64) -> Result<ImportanceSignal> {
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::InvalidParameter("cannot rank zero tokens".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = (n * (n + 1) / 2) as f64;
    let mut values = vec![0.0; n];
    for (rank, &pos) in order.iter().enumerate() {
        values[pos] = (n - rank) as f64 / total;
    }
    ImportanceSignal::new(values, token_ids)
}

/// Attention the CLS row pays to each token, averaged over heads.
///
/// The CLS entry stays in the signal; use [`ranking_without`] to drop it
/// from candidate lists.
pub fn cls_attention_rank(attention: &Array3<f64>, cls_index: usize) -> Result<ImportanceSignal> {
    cls_attention_rank_over(attention, cls_index, None)
}

fn cls_attention_rank_over(
    attention: &Array3<f64>,
    cls_position: usize,
    token_ids: Option<&[usize]>,
) -> Result<ImportanceSignal> {
    let (h, n, m) = attention.dim();
    if n != m || h == 0 {
        return Err(Error::Shape(format!("attention has shape {:?}", attention.dim())));
    }
    if cls_position >= n {
        return Err(Error::InvalidParameter(format!("CLS index {cls_position} out of range")));
    }
    let mut raw = vec![0.0; n];
    for head in attention.outer_iter() {
        for (acc, v) in raw.iter_mut().zip(head.row(cls_position).iter()) {
            *acc += v;
        }
    }
    raw.iter_mut().for_each(|v| *v /= h as f64);
    let ids = token_ids.map(<[usize]>::to_vec).unwrap_or_else(|| (0..n).collect());
    ImportanceSignal::from_unnormalized(raw, ids)
}

/// Mean received attention: column means averaged over heads.
///
/// Summation follows the same order as a single WPR shift from a uniform
/// start, so on one head both give bit-identical scores.
pub fn avg_attention_rank(attention: &Array3<f64>) -> Result<ImportanceSignal> {
    let n = attention.dim().1;
    avg_attention_rank_over(attention, (0..n).collect())
}

pub fn avg_attention_rank_over(attention: &Array3<f64>, token_ids: Vec<usize>) -> Result<ImportanceSignal> {
    let (h, n, m) = attention.dim();
    if n != m || h == 0 || token_ids.len() != n {
        return Err(Error::Shape(format!(
            "attention {:?} for {} token ids",
            attention.dim(),
            token_ids.len()
        )));
    }
    let w = 1.0 / n as f64;
    let mut total = vec![0.0; n];
    for head in attention.outer_iter() {
        let mut col = vec![0.0; n];
        for row in head.outer_iter() {
            for (acc, a) in col.iter_mut().zip(row.iter()) {
                *acc += a * w;
            }
        }
        for (t, c) in total.iter_mut().zip(col) {
            *t += c;
        }
    }
    total.iter_mut().for_each(|v| *v /= h as f64);
    ImportanceSignal::from_unnormalized(total, token_ids)
}

/// Running mean of per-block average-attention signals, each restricted to
/// `survivors` and renormalized first.
pub fn accumulated_avg_rank(history: &[ImportanceSignal], survivors: &[usize]) -> Result<ImportanceSignal> {
    if history.is_empty() {
        return Err(Error::InvalidParameter("empty attention history".into()));
    }
    let mut acc = vec![0.0; survivors.len()];
    for block in history {
        let r = block.restrict(survivors)?;
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= history.len() as f64);
    ImportanceSignal::from_unnormalized(acc, survivors.to_vec())
}

/// Ranked ids with `excluded` tokens removed.
pub fn ranking_without(s: &ImportanceSignal, excluded: &[usize]) -> Vec<usize> {
    s.ranked_ids().into_iter().filter(|t| !excluded.contains(t)).collect()
}

/// `|top-k ∩ truth| / min(k, |truth|)`.
pub fn precision_at_k(ranking: &ImportanceSignal, truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    precision_at_k_excluding(ranking, truth, k, &[])
}

/// [`precision_at_k`] over the ranking with `excluded` tokens removed first.
pub fn precision_at_k_excluding(
    ranking: &ImportanceSignal,
    truth: &BTreeSet<usize>,
    k: usize,
    excluded: &[usize],
) -> Result<f64> {
    let order = ranking_without(ranking, excluded);
    if k > order.len() {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds {} candidates", order.len())));
    }
    let denom = k.min(truth.len());
    if denom == 0 {
        return Ok(0.0);
    }
    let hits = order[..k].iter().filter(|t| truth.contains(t)).count();
    Ok(hits as f64 / denom as f64)
}

/// A token-ranking strategy evaluated on one block of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RankingStrategy {
    Random(u64),
    ClsAttention,
    AverageAttention,
    AccumulatedAverage,
    /// Per-head WPR with this many shifts, head filtering, RMS aggregation.
    Wpr(usize),
}

impl fmt::Display for RankingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankingStrategy::Random(seed) => write!(f, "random:{seed}"),
            RankingStrategy::ClsAttention => f.write_str("cls-attention"),
            RankingStrategy::AverageAttention => f.write_str("average-attention"),
            RankingStrategy::AccumulatedAverage => f.write_str("accumulated-average"),
            RankingStrategy::Wpr(it) => write!(f, "wpr:{it}"),
        }
    }
}

impl FromStr for RankingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let parse_arg = |default: u64| -> Result<u64> {
            arg.map(|a| a.parse().map_err(|_| Error::InvalidParameter(format!("bad argument in {s:?}"))))
                .unwrap_or(Ok(default))
        };
        match name {
            "random" => Ok(Self::Random(parse_arg(0)?)),
            "cls-attention" | "cls" => Ok(Self::ClsAttention),
            "average-attention" | "avg" => Ok(Self::AverageAttention),
            "accumulated-average" | "accu" => Ok(Self::AccumulatedAverage),
            "wpr" => {
                let it = parse_arg(30)? as usize;
                if it == 0 {
                    return Err(Error::InvalidParameter("wpr needs at least one iteration".into()));
                }
                Ok(Self::Wpr(it))
            }
            _ => Err(Error::InvalidParameter(format!("unknown ranking strategy {s:?}"))),
        }
    }
}

impl TryFrom<String> for RankingStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RankingStrategy> for String {
    fn from(s: RankingStrategy) -> Self {
        s.to_string()
    }
}

impl RankingStrategy {
    /// Signal over all tokens at 0-based `block` of `trace`.
    pub fn rank_block(&self, trace: &ModelTrace, block: usize, mode: ClsBoostMode) -> Result<ImportanceSignal> {
        let g = &trace.geometry;
        let layer = trace
            .layers
            .get(block)
            .ok_or_else(|| Error::Shape(format!("trace has no block {block}")))?;
        let ids: Vec<usize> = (0..g.num_tokens).collect();
        let full = |b: usize| slice_attention(&trace.layers[b], &ids);
        match *self {
            RankingStrategy::Random(seed) => random_rank_over(ids, seed),
            RankingStrategy::ClsAttention => {
                let cls = g
                    .cls_index()
                    .ok_or_else(|| Error::InvalidParameter("CLS attention needs a CLS token".into()))?;
                cls_attention_rank(&full(block)?, cls)
            }
            RankingStrategy::AverageAttention => avg_attention_rank(&full(block)?),
            RankingStrategy::AccumulatedAverage => {
                let history = (0..=block)
                    .map(|b| avg_attention_rank(&full(b)?))
                    .collect::<Result<Vec<_>>>()?;
                accumulated_avg_rank(&history, &ids)
            }
            RankingStrategy::Wpr(iterations) => {
                let view = slice_attention(layer, &ids)?;
                let ranking = rank_view(
                    &view,
                    &ids,
                    g.cls_index(),
                    mode,
                    &WprConfig::fixed(iterations),
                    &VhfThresholds::default(),
                )?;
                Ok(ranking.importance)
            }
        }
    }
}
