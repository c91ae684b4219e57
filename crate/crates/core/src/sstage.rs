//! Similarity stage: split tokens into two groups by importance rank, pair
//! every group-A token with its most similar group-B token, and prune the
//! A side of the `r` most similar pairs.
//!
//! Tokens are pruned, never merged: survivors keep their feature vectors
//! untouched.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How ranked tokens are split into groups A (prunable) and B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum PartitionMethod {
    /// Less important half to A.
    #[default]
    SequentialU,
    /// More important half to A.
    SequentialI,
    /// Even ranks to B, odd ranks to A.
    Alternate,
    /// Seeded shuffle, then halve.
    Random(u64),
    /// Every token in both groups.
    NoPartition,
}

impl fmt::Display for PartitionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionMethod::SequentialU => f.write_str("sequential-u"),
            PartitionMethod::SequentialI => f.write_str("sequential-i"),
            PartitionMethod::Alternate => f.write_str("alternate"),
            PartitionMethod::Random(seed) => write!(f, "random:{seed}"),
            PartitionMethod::NoPartition => f.write_str("none"),
        }
    }
}

impl FromStr for PartitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "sequential-u" => Ok(Self::SequentialU),
            "sequential-i" => Ok(Self::SequentialI),
            "alternate" => Ok(Self::Alternate),
            "none" | "no-partition" => Ok(Self::NoPartition),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(Self::Random)
                    .map_err(|_| Error::InvalidParameter(format!("bad random seed in {s:?}"))),
                None => Err(Error::InvalidParameter(format!("unknown partition method {s:?}"))),
            },
        }
    }
}

impl TryFrom<String> for PartitionMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PartitionMethod> for String {
    fn from(m: PartitionMethod) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
    pub method: PartitionMethod,
}

/// Splits `ranked` (most important first). Tokens in `pinned` always land in
/// group B and are never pruning candidates; the remaining tokens are split
/// with any odd surplus going to B.
pub fn partition(ranked: &[usize], method: PartitionMethod, pinned: &[usize]) -> Result<Partition> {
    if ranked.is_empty() {
        return Err(Error::InvalidParameter("cannot partition an empty token list".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if !ranked.iter().all(|t| seen.insert(*t)) {
        return Err(Error::InvalidParameter("ranked token ids are not unique".into()));
    }
    let free: Vec<usize> = ranked.iter().copied().filter(|t| !pinned.contains(t)).collect();
    let pinned_present: Vec<usize> = ranked.iter().copied().filter(|t| pinned.contains(t)).collect();
    let half_a = free.len() / 2;

    let (group_a, mut group_b) = match method {
        PartitionMethod::SequentialU => {
            let split = free.len() - half_a;
            (free[split..].to_vec(), free[..split].to_vec())
        }
        PartitionMethod::SequentialI => (free[..half_a].to_vec(), free[half_a..].to_vec()),
        PartitionMethod::Alternate => {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (rank, &t) in free.iter().enumerate() {
                if rank % 2 == 0 {
                    b.push(t);
                } else {
                    a.push(t);
                }
            }
            (a, b)
        }
        PartitionMethod::Random(seed) => {
            let mut shuffled = free.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            (shuffled[..half_a].to_vec(), shuffled[half_a..].to_vec())
        }
        PartitionMethod::NoPartition => (free.clone(), ranked.to_vec()),
    };
    if method != PartitionMethod::NoPartition {
        group_b.extend(pinned_present);
    }
    Ok(Partition {
        group_a,
        group_b,
        method,
    })
}

/// Similarity measure between feature vectors; larger means more similar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    Dot,
    /// Negated Minkowski distance; `p = ∞` is the Chebyshev distance.
    Minkowski(f64),
}

impl SimilarityMetric {
    pub fn minkowski(p: f64) -> Result<Self> {
        if p >= 1.0 {
            Ok(Self::Minkowski(p))
        } else {
            Err(Error::InvalidParameter(format!("Minkowski p = {p} must be >= 1")))
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityMetric::Cosine => f.write_str("cosine"),
            SimilarityMetric::Dot => f.write_str("dot"),
            SimilarityMetric::Minkowski(p) if p.is_infinite() => f.write_str("minkowski:inf"),
            SimilarityMetric::Minkowski(p) => write!(f, "minkowski:{p}"),
        }
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "cosine" => Ok(Self::Cosine),
            "dot" => Ok(Self::Dot),
            other => match other.strip_prefix("minkowski:") {
                Some("inf") => Ok(Self::Minkowski(f64::INFINITY)),
                Some(p) => {
                    let p: f64 = p
                        .parse()
                        .map_err(|_| Error::InvalidParameter(format!("bad Minkowski order in {s:?}")))?;
                    Self::minkowski(p)
                }
                None => Err(Error::InvalidParameter(format!("unknown similarity metric {s:?}"))),
            },
        }
    }
}

impl TryFrom<String> for SimilarityMetric {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SimilarityMetric> for String {
    fn from(m: SimilarityMetric) -> Self {
        m.to_string()
    }
}

static ZERO_COSINE_WARNED: AtomicBool = AtomicBool::new(false);

/// Similarity of two equal-length vectors. Cosine against a zero vector is 0.
pub fn similarity(u: ArrayView1<'_, f32>, v: ArrayView1<'_, f32>, metric: SimilarityMetric) -> f64 {
    let u: Vec<f64> = u.iter().map(|&x| f64::from(x)).collect();
    let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    similarity_f64(&u, &v, metric)
}

fn sum_sq(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn cosine_from_parts(dot: f64, nu: f64, nv: f64) -> f64 {
    if nu == 0.0 || nv == 0.0 {
        if !ZERO_COSINE_WARNED.swap(true, AtomicOrdering::Relaxed) {
            log::warn!("cosine similarity with a zero feature vector; treating as 0");
        }
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

fn similarity_f64(u: &[f64], v: &[f64], metric: SimilarityMetric) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let diffs = u.iter().zip(v).map(|(a, b)| (a - b).abs());
    match metric {
        SimilarityMetric::Dot => dot(u, v),
        SimilarityMetric::Cosine => cosine_from_parts(dot(u, v), sum_sq(u), sum_sq(v)),
        SimilarityMetric::Minkowski(p) if p.is_infinite() => -diffs.fold(0.0, f64::max),
        SimilarityMetric::Minkowski(p) => -diffs.map(|d| d.powf(p)).sum::<f64>().powf(1.0 / p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub a_token: usize,
    pub b_token: usize,
    pub similarity: f64,
}

/// Pairs every A token with its most similar B token (ties to the lower B
/// id). `features` rows are indexed by original token id. A token never
/// matches itself; an A token with no other candidate produces no pair.
pub fn match_pairs(
    group_a: &[usize],
    group_b: &[usize],
    features: ArrayView2<'_, f32>,
    metric: SimilarityMetric,
) -> Result<Vec<MatchedPair>> {
    let n = features.nrows();
    if let Some(bad) = group_a.iter().chain(group_b).find(|&&t| t >= n) {
        return Err(Error::Shape(format!("token {bad} has no feature row ({n} rows)")));
    }
    let d = features.ncols();
    let rows: Vec<f64> = features.iter().map(|&x| f64::from(x)).collect();
    let row = |t: usize| &rows[t * d..(t + 1) * d];
    // Norms are reused across pairs; same sums as `similarity` computes.
    let norms: Vec<f64> = match metric {
        SimilarityMetric::Cosine => (0..n).map(|t| sum_sq(row(t))).collect(),
        _ => Vec::new(),
    };
    let mut pairs = Vec::with_capacity(group_a.len());
    for &a in group_a {
        let fa = row(a);
        let mut best: Option<(f64, usize)> = None;
        for &b in group_b {
            if b == a {
                continue;
            }
            let sim = match metric {
                SimilarityMetric::Cosine => cosine_from_parts(dot(fa, row(b)), norms[a], norms[b]),
                _ => similarity_f64(fa, row(b), metric),
            };
            let better = match best {
                None => true,
                Some((s, id)) => sim > s || (sim == s && b < id),
            };
            if better {
                best = Some((sim, b));
            }
        }
        if let Some((similarity, b_token)) = best {
            pairs.push(MatchedPair {
                a_token: a,
                b_token,
                similarity,
            });
        }
    }
    Ok(pairs)
}

/// A tokens of the `r` most similar pairs (ties to the lower A id), sorted by id.
pub fn prune_similar(pairs: &[MatchedPair], r: usize) -> Result<Vec<usize>> {
    if r > pairs.len() {
        return Err(Error::Schedule(format!(
            "cannot prune {r} tokens from {} matched pairs",
            pairs.len()
        )));
    }
    let mut order: Vec<&MatchedPair> = pairs.iter().collect();
    order.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then(x.a_token.cmp(&y.a_token))
    });
    let mut pruned: Vec<usize> = order.into_iter().take(r).map(|p| p.a_token).collect();
    pruned.sort_unstable();
    Ok(pruned)
}
