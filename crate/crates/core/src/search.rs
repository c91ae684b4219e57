//! Monte-Carlo search over pruning schedules under a FLOPs budget.
//!
//! Each trial draws a schedule uniformly from the space (layer count,
//! positions, retention rate and S-stage count per layer), rejects it until
//! it fits the budget, then scores it by an objective averaged over a trace
//! ensemble.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{budget_check, FlopsOptions};
use crate::heads::VhfThresholds;
use crate::pipeline::{run_schedule_with, PruneReport};
use crate::schedule::{DepthBuckets, PruningLayerConfig, PruningSchedule};
use crate::sstage::{PartitionMethod, SimilarityMetric};
use crate::trace::{FeatureSource, ModelGeometry, ModelTrace};
use crate::wpr::ClsBoostMode;

/// Rejection-sampling attempts before a space is declared infeasible.
pub const MAX_ATTEMPTS: usize = 1000;

/// Ranges for one candidate pruning position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionSpace {
    /// 1-based block the layer would follow.
    pub after_block: usize,
    pub retention: [f64; 2],
    pub s_prune: [usize; 2],
    /// Overrides the depth buckets for this position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wpr_iterations: Option<usize>,
}

/// Hyperparameter space for [`sample_schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub positions: Vec<PositionSpace>,
    pub min_layers: usize,
    pub max_layers: usize,
    pub budget_gflops: f64,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub depth_buckets: DepthBuckets,
    #[serde(default)]
    pub cls_boost_mode: ClsBoostMode,
    #[serde(default)]
    pub vhf: Option<VhfThresholds>,
    #[serde(default)]
    pub feature_source: FeatureSource,
    #[serde(default)]
    pub metric: SimilarityMetric,
    #[serde(default)]
    pub partition: PartitionMethod,
}

impl SearchSpace {
    /// Every block in `blocks` shares the same ranges.
    pub fn uniform(
        blocks: impl IntoIterator<Item = usize>,
        retention: [f64; 2],
        s_prune: [usize; 2],
        layers: [usize; 2],
        budget_gflops: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            positions: blocks
                .into_iter()
                .map(|after_block| PositionSpace {
                    after_block,
                    retention,
                    s_prune,
                    wpr_iterations: None,
                })
                .collect(),
            min_layers: layers[0],
            max_layers: layers[1],
            budget_gflops,
            tolerance,
            depth_buckets: DepthBuckets::default(),
            cls_boost_mode: ClsBoostMode::Classification,
            vhf: None,
            feature_source: FeatureSource::default(),
            metric: SimilarityMetric::default(),
            partition: PartitionMethod::default(),
        }
    }

    /// A single-point space that can only produce `schedule`.
    pub fn pinned(schedule: &PruningSchedule, budget_gflops: f64, tolerance: f64) -> Self {
        let first = schedule.layers.first();
        Self {
            positions: schedule
                .layers
                .iter()
                .map(|l| PositionSpace {
                    after_block: l.after_block,
                    retention: [l.retention_rate; 2],
                    s_prune: [l.s_prune_count; 2],
                    wpr_iterations: l.wpr_iterations,
                })
                .collect(),
            min_layers: schedule.layers.len(),
            max_layers: schedule.layers.len(),
            budget_gflops,
            tolerance,
            depth_buckets: schedule.depth_buckets,
            cls_boost_mode: schedule.cls_boost_mode,
            vhf: first.map(PruningLayerConfig::vhf),
            feature_source: first.map(|l| l.feature_source).unwrap_or_default(),
            metric: first.map(|l| l.metric).unwrap_or_default(),
            partition: first.map(|l| l.partition).unwrap_or_default(),
        }
    }

    pub fn validate(&self, geometry: &ModelGeometry) -> Result<()> {
        if self.min_layers < 1 || self.min_layers > self.max_layers {
            return Err(Error::InvalidParameter(format!(
                "layer count range [{}, {}] must satisfy 1 <= min <= max",
                self.min_layers, self.max_layers
            )));
        }
        if self.min_layers > self.positions.len() {
            return Err(Error::InvalidParameter(format!(
                "min_layers {} exceeds the {} candidate positions",
                self.min_layers,
                self.positions.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &self.positions {
            if !seen.insert(p.after_block) {
                return Err(Error::InvalidParameter(format!("position {} listed twice", p.after_block)));
            }
            if p.after_block == 0 || p.after_block > geometry.num_blocks {
                return Err(Error::InvalidParameter(format!(
                    "position {} outside 1..={}",
                    p.after_block, geometry.num_blocks
                )));
            }
            let [lo, hi] = p.retention;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidParameter(format!("retention range [{lo}, {hi}] invalid")));
            }
            if p.s_prune[0] > p.s_prune[1] {
                return Err(Error::InvalidParameter("s_prune range is reversed".into()));
            }
        }
        if !(self.budget_gflops > 0.0 && self.tolerance >= 0.0) {
            return Err(Error::InvalidParameter("budget must be positive, tolerance >= 0".into()));
        }
        Ok(())
    }
}

fn draw(space: &SearchSpace, geometry: &ModelGeometry, rng: &mut ChaCha8Rng) -> PruningSchedule {
    let max = space.max_layers.min(space.positions.len());
    let count = rng.random_range(space.min_layers..=max);
    let mut picks = rand::seq::index::sample(rng, space.positions.len(), count).into_vec();
    picks.sort_by_key(|&i| space.positions[i].after_block);
    let vhf = space.vhf.unwrap_or_default();
    let layers = picks
        .into_iter()
        .map(|i| {
            let p = &space.positions[i];
            let [lo, hi] = p.retention;
            let retention_rate = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let s_prune_count = rng.random_range(p.s_prune[0]..=p.s_prune[1]);
            let iterations = p
                .wpr_iterations
                .unwrap_or_else(|| space.depth_buckets.iterations(p.after_block, geometry.num_blocks));
            PruningLayerConfig {
                after_block: p.after_block,
                retention_rate,
                wpr_iterations: Some(iterations),
                s_prune_count,
                vhf_min: vhf.v_min,
                vhf_max: vhf.v_max,
                feature_source: space.feature_source,
                metric: space.metric,
                partition: space.partition,
            }
        })
        .collect();
    PruningSchedule {
        cls_boost_mode: space.cls_boost_mode,
        depth_buckets: space.depth_buckets,
        layers,
    }
}

/// Draws schedules until one is valid and fits the budget.
pub fn sample_schedule(
    space: &SearchSpace,
    geometry: &ModelGeometry,
    seed: u64,
    flops_opts: &FlopsOptions,
) -> Result<(PruningSchedule, f64)> {
    space.validate(geometry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let schedule = draw(space, geometry, &mut rng);
        match budget_check(&schedule, geometry, space.budget_gflops, space.tolerance, flops_opts) {
            Ok(check) if check.pass => return Ok((schedule, check.achieved_gflops)),
            Ok(_) | Err(Error::Schedule(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InfeasibleSpace {
        attempts: MAX_ATTEMPTS,
    })
}

/// One member of the evaluation ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub trace: ModelTrace,
    /// Planted salient tokens, when known.
    pub truth: Option<BTreeSet<usize>>,
}

/// Scores a schedule's outcome on one trace; larger is better.
pub trait Objective: Sync {
    fn name(&self) -> &str;
    fn score(&self, report: &PruneReport, member: &EnsembleMember) -> Result<f64>;
}

/// Fraction of the last block's unpruned pre-ranking mass that survives.
pub fn importance_mass_objective(report: &PruneReport) -> f64 {
    report.importance_mass_retained
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ImportanceMass;

impl Objective for ImportanceMass {
    fn name(&self) -> &str {
        "importance-mass"
    }

    fn score(&self, report: &PruneReport, _member: &EnsembleMember) -> Result<f64> {
        Ok(importance_mass_objective(report))
    }
}

/// Share of planted salient tokens among the final survivors.
#[derive(Debug, Clone, Copy, Default)]
pub struct SalientRetention;

impl Objective for SalientRetention {
    fn name(&self) -> &str {
        "salient-retention"
    }

    fn score(&self, report: &PruneReport, member: &EnsembleMember) -> Result<f64> {
        let truth = member
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("trace {} has no planted truth", report.source_id)))?;
        if truth.is_empty() {
            return Ok(0.0);
        }
        let hits = report.final_survivors.iter().filter(|t| truth.contains(t)).count();
        Ok(hits as f64 / truth.len() as f64)
    }
}

/// A scored schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trial: usize,
    pub seed: u64,
    pub schedule: PruningSchedule,
    pub achieved_gflops: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    pub trials: usize,
    pub seed: u64,
    /// Schedules evaluated alongside the sampled ones, as extra trials
    /// numbered after the sampled trials.
    pub extra: Vec<PruningSchedule>,
    /// Previously recorded candidates; their trials are not re-run.
    pub resume: Vec<Candidate>,
    pub flops: FlopsOptions,
}

/// Seed of trial `t`, drawn from a stream keyed by the search seed.
pub fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| rng.random()).collect()
}

fn evaluate(
    schedule: &PruningSchedule,
    ensemble: &[EnsembleMember],
    objective: &dyn Objective,
    flops_opts: &FlopsOptions,
) -> Result<f64> {
    let mut total = 0.0;
    for member in ensemble {
        let report = run_schedule_with(&member.trace, schedule, flops_opts)?;
        total += objective.score(&report, member)?;
    }
    Ok(total / ensemble.len() as f64)
}

/// Samples and scores `opts.trials` schedules and returns all candidates,
/// best objective first (ties by seed, then trial).
pub fn mcs_search(
    space: &SearchSpace,
    ensemble: &[EnsembleMember],
    objective: &dyn Objective,
    opts: &SearchOptions,
) -> Result<Vec<Candidate>> {
    if opts.trials + opts.extra.len() == 0 {
        return Err(Error::InvalidParameter("search needs at least one trial".into()));
    }
    let first = ensemble
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty trace ensemble".into()))?;
    let geometry = &first.trace.geometry;
    if ensemble.iter().any(|m| &m.trace.geometry != geometry) {
        return Err(Error::InvalidParameter("ensemble mixes geometries".into()));
    }
    space.validate(geometry)?;

    let done: BTreeMap<usize, &Candidate> = opts.resume.iter().map(|c| (c.trial, c)).collect();
    let seeds = trial_seeds(opts.seed, opts.trials);
    let extra_seed_base = opts.trials;

    let mut candidates: Vec<Candidate> = (0..opts.trials + opts.extra.len())
        .into_par_iter()
        .map(|trial| -> Result<Candidate> {
            if let Some(c) = done.get(&trial) {
                return Ok((*c).clone());
            }
            let (seed, schedule, achieved_gflops) = if trial < opts.trials {
                let seed = seeds[trial];
                let (schedule, gflops) = sample_schedule(space, geometry, seed, &opts.flops)?;
                (seed, schedule, gflops)
            } else {
                let schedule = opts.extra[trial - extra_seed_base].clone();
                let check = budget_check(&schedule, geometry, space.budget_gflops, space.tolerance, &opts.flops)?;
                if !check.pass {
                    return Err(Error::InvalidParameter(format!(
                        "extra schedule {} needs {:.3} GFLOPs, over budget",
                        trial - extra_seed_base,
                        check.achieved_gflops
                    )));
                }
                (trial as u64, schedule, check.achieved_gflops)
            };
            let objective = evaluate(&schedule, ensemble, objective, &opts.flops)?;
            Ok(Candidate {
                trial,
                seed,
                schedule,
                achieved_gflops,
                objective,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    candidates.sort_by(|a, b| {
        b.objective
            .total_cmp(&a.objective)
            .then(a.seed.cmp(&b.seed))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(candidates)
}
