//! Ranking-quality comparison over planted trace ensembles.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{avg_attention_rank, precision_at_k_excluding, ranking_without, RankingStrategy};
use crate::error::{Error, Result};
use crate::pipeline::slice_attention;
use crate::search::EnsembleMember;
use crate::synth::{synth_trace, PlantedModel};
use crate::trace::ModelGeometry;
use crate::wpr::ClsBoostMode;

/// Parameters of a planted ensemble; member `i` is seeded with `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedEnsemble {
    pub count: usize,
    pub salient: usize,
    pub salience_mass: f64,
    #[serde(default)]
    pub noise_temp: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PlantedEnsemble {
    pub fn member_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    pub fn planted(&self, geometry: &ModelGeometry, index: usize) -> Result<PlantedModel> {
        PlantedModel::random_salient(
            geometry,
            self.salient,
            self.salience_mass,
            self.noise_temp,
            self.member_seed(index),
        )
    }

    pub fn build(&self, geometry: &ModelGeometry) -> Result<Vec<EnsembleMember>> {
        if self.count == 0 {
            return Err(Error::InvalidParameter("ensemble count must be >= 1".into()));
        }
        (0..self.count)
            .into_par_iter()
            .map(|i| {
                let planted = self.planted(geometry, i)?;
                let trace = synth_trace(geometry, &planted)?;
                Ok(EnsembleMember {
                    trace,
                    truth: Some(planted.salient),
                })
            })
            .collect()
    }
}

/// Aggregate scores of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: RankingStrategy,
    pub k: usize,
    pub precision_mean: f64,
    pub precision_std: f64,
    /// Average-received-attention mass of the top-k, relative to the
    /// largest mass any k tokens can hold.
    pub mass_retention_mean: f64,
    pub traces: usize,
}

/// Random strategies get a distinct seed per member so that the ensemble
/// average is over independent draws.
fn strategy_for(strategy: RankingStrategy, member: usize) -> RankingStrategy {
    match strategy {
        RankingStrategy::Random(seed) => RankingStrategy::Random(seed.wrapping_add(member as u64)),
        other => other,
    }
}

/// Scores each strategy at 0-based `block` of every member. The CLS token is
/// excluded from the candidate lists; `k` defaults to the planted set size.
pub fn bench_strategies(
    ensemble: &[EnsembleMember],
    strategies: &[RankingStrategy],
    block: usize,
    k: Option<usize>,
    mode: ClsBoostMode,
) -> Result<Vec<StrategyScore>> {
    if ensemble.is_empty() || strategies.is_empty() {
        return Err(Error::InvalidParameter("bench needs traces and strategies".into()));
    }
    // (precision, mass) per member and strategy
    let rows = ensemble
        .par_iter()
        .enumerate()
        .map(|(i, m)| -> Result<Vec<(f64, f64, usize)>> {
            let truth: &BTreeSet<usize> = m
                .truth
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("trace {} has no planted truth", m.trace.source_id)))?;
            let g = &m.trace.geometry;
            let k = k.unwrap_or(truth.len());
            let excluded: Vec<usize> = g.cls_index().into_iter().collect();
            let layer = m
                .trace
                .layers
                .get(block)
                .ok_or_else(|| Error::Shape(format!("trace has no block {block}")))?;
            let ids: Vec<usize> = (0..g.num_tokens).collect();
            let reference = avg_attention_rank(&slice_attention(layer, &ids)?)?;
            let best: Vec<usize> = ranking_without(&reference, &excluded).into_iter().take(k).collect();
            let reference_mass = reference.mass_of(&best);
            strategies
                .iter()
                .map(|&s| {
                    let signal = strategy_for(s, i).rank_block(&m.trace, block, mode)?;
                    let precision = precision_at_k_excluding(&signal, truth, k, &excluded)?;
                    let top: Vec<usize> = ranking_without(&signal, &excluded).into_iter().take(k).collect();
                    let mass = if reference_mass > 0.0 {
                        reference.mass_of(&top) / reference_mass
                    } else {
                        0.0
                    };
                    Ok((precision, mass, k))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let t = rows.len() as f64;
    Ok(strategies
        .iter()
        .enumerate()
        .map(|(j, &strategy)| {
            let p: Vec<f64> = rows.iter().map(|r| r[j].0).collect();
            let mean = p.iter().sum::<f64>() / t;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
            StrategyScore {
                strategy,
                k: rows[0][j].2,
                precision_mean: mean,
                precision_std: var.sqrt(),
                mass_retention_mean: rows.iter().map(|r| r[j].1).sum::<f64>() / t,
                traces: rows.len(),
            }
        })
        .collect())
}
