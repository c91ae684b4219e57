//! Pruning layers and schedule execution over a recorded trace.
//!
//! A pruning layer runs three stages in order:
//! 1. pre-ranking: one WPR shift per head, head filtering and RMS
//!    aggregation; nothing is pruned;
//! 2. similarity stage guided by that ranking, removing `r` tokens;
//! 3. importance stage: full WPR on the reduced attention, then the top
//!    `round(ρ·n)` tokens are kept.
//!
//! The trace holds unpruned attention. A pruned forward pass is approximated
//! by slicing each stored matrix to the surviving tokens and renormalizing
//! its rows.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{model_flops, pruning_overhead, FlopsBreakdown, FlopsOptions};
use crate::heads::{eir_aggregate, vhf_mask, HeadBundle, VhfThresholds};
use crate::schedule::{retained_count, PruningLayerConfig, PruningSchedule};
use crate::signal::{rank_cmp, ImportanceSignal};
use crate::sstage::{match_pairs, partition, prune_similar};
use crate::trace::{LayerTrace, ModelTrace};
use crate::wpr::{init_signal_over, wpr_run, ClsBoostMode, WprConfig};

/// Surviving tokens, in ascending original id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenState {
    surviving_ids: Vec<usize>,
    cls: Option<usize>,
}

impl TokenState {
    pub fn full(n: usize, cls: Option<usize>) -> Self {
        Self {
            surviving_ids: (0..n).collect(),
            cls,
        }
    }

    pub fn new(mut surviving_ids: Vec<usize>, cls: Option<usize>) -> Result<Self> {
        surviving_ids.sort_unstable();
        surviving_ids.dedup();
        if surviving_ids.is_empty() {
            return Err(Error::Schedule("no surviving tokens".into()));
        }
        Ok(Self { surviving_ids, cls })
    }

    pub fn surviving_ids(&self) -> &[usize] {
        &self.surviving_ids
    }

    pub fn len(&self) -> usize {
        self.surviving_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surviving_ids.is_empty()
    }

    /// CLS id when it is still alive.
    pub fn cls(&self) -> Option<usize> {
        self.cls.filter(|c| self.surviving_ids.binary_search(c).is_ok())
    }

    fn cls_position(&self) -> Option<usize> {
        self.cls.and_then(|c| self.surviving_ids.binary_search(&c).ok())
    }

    fn pinned(&self) -> Vec<usize> {
        self.cls().into_iter().collect()
    }
}

/// `[N_h, n, n]` attention restricted to `ids` with rows rescaled to sum to
/// one. A row left with no mass becomes uniform.
pub fn slice_attention(layer: &LayerTrace, ids: &[usize]) -> Result<Array3<f64>> {
    let (h, n, _) = layer.attention.dim();
    if let Some(bad) = ids.iter().find(|&&t| t >= n) {
        return Err(Error::Shape(format!("token {bad} outside attention of size {n}")));
    }
    let m = ids.len();
    let mut data = Vec::with_capacity(h * m * m);
    for head in layer.attention.outer_iter() {
        for &i in ids {
            let row = head.row(i);
            data.extend(ids.iter().map(|&j| f64::from(row[j])));
        }
    }
    let mut view = Array3::from_shape_vec((h, m, m), data).expect("shape matches data length");
    renormalize_rows(&mut view);
    Ok(view)
}

pub(crate) fn renormalize_rows(view: &mut Array3<f64>) {
    let m = view.dim().1;
    for mut head in view.axis_iter_mut(Axis(0)) {
        for mut row in head.axis_iter_mut(Axis(0)) {
            let sum = row.sum();
            if sum > 0.0 {
                row.mapv_inplace(|v| v / sum);
            } else {
                row.fill(1.0 / m as f64);
            }
        }
    }
}

/// Importance ranking of one layer together with its head statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub importance: ImportanceSignal,
    pub head_mask: Vec<bool>,
    pub head_variances: Vec<f64>,
    /// WPR iterations used per head.
    pub iterations: Vec<usize>,
}

/// Per-head WPR on `view`, then head filtering and RMS aggregation.
pub fn rank_view(
    view: &Array3<f64>,
    token_ids: &[usize],
    cls_position: Option<usize>,
    mode: ClsBoostMode,
    config: &WprConfig,
    thresholds: &VhfThresholds,
) -> Result<LayerRanking> {
    let n = token_ids.len();
    let s0 = init_signal_over(token_ids.to_vec(), cls_position, mode.boost(n))?;
    let mut per_head = Vec::with_capacity(view.dim().0);
    let mut iterations = Vec::with_capacity(view.dim().0);
    for head in view.outer_iter() {
        let out = wpr_run(head, &s0, config)?;
        iterations.push(out.iterations);
        per_head.push(out.signal);
    }
    let bundle = HeadBundle::new(per_head)?;
    let head_mask = vhf_mask(&bundle, thresholds);
    let importance = eir_aggregate(&bundle, &head_mask)?;
    Ok(LayerRanking {
        importance,
        head_mask,
        head_variances: bundle.variances().to_vec(),
        iterations,
    })
}

/// Keeps `pinned` plus the highest-scoring other tokens, `k` in total; ties
/// go to the lower id. Returned ids are ascending.
pub fn top_k_retain(s: &ImportanceSignal, k: usize, pinned: &[usize]) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Schedule("a layer may not drop every token".into()));
    }
    if k > s.len() {
        return Err(Error::Schedule(format!("cannot keep {k} of {} tokens", s.len())));
    }
    let pinned: Vec<usize> = pinned.iter().copied().filter(|p| s.score_of(*p).is_some()).collect();
    if pinned.len() > k {
        return Err(Error::Schedule(format!(
            "{} pinned tokens exceed k = {k}",
            pinned.len()
        )));
    }
    let mut rest: Vec<(f64, usize)> = s
        .values()
        .iter()
        .zip(s.token_ids())
        .filter(|(_, id)| !pinned.contains(id))
        .map(|(&v, &id)| (v, id))
        .collect();
    rest.sort_by(|a, b| rank_cmp(*a, *b));
    let mut keep = pinned;
    keep.extend(rest.into_iter().take(k - keep.len()).map(|(_, id)| id));
    keep.sort_unstable();
    Ok(keep)
}

/// What one pruning layer did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// 1-based block the layer follows.
    pub after_block: usize,
    pub tokens_in: usize,
    pub prerank: LayerRanking,
    pub group_a_size: usize,
    pub s_pruned: Vec<usize>,
    pub ranking: LayerRanking,
    pub kept: usize,
    pub i_pruned: Vec<usize>,
    pub survivors: Vec<usize>,
}

/// Runs one pruning layer on the attention and features of `layer`.
pub fn run_pruning_layer(
    state: &TokenState,
    cfg: &PruningLayerConfig,
    layer: &LayerTrace,
    mode: ClsBoostMode,
    wpr_iterations: usize,
) -> Result<(TokenState, LayerReport)> {
    let ids = state.surviving_ids().to_vec();
    let pinned = state.pinned();

    // Pre-ranking: a single voting round.
    let view = slice_attention(layer, &ids)?;
    let prerank = rank_view(
        &view,
        &ids,
        state.cls_position(),
        mode,
        &WprConfig::fixed(1),
        &cfg.vhf(),
    )?;

    // Similarity stage.
    let r = cfg.s_prune_count;
    let groups = partition(&prerank.importance.ranked_ids(), cfg.partition, &pinned)?;
    if r > 0 && r >= groups.group_a.len() {
        return Err(Error::Schedule(format!(
            "S-stage asked to prune {r} tokens but group A holds {}",
            groups.group_a.len()
        )));
    }
    let s_pruned = if r > 0 {
        let features = layer.feature_matrix(cfg.feature_source)?;
        let pairs = match_pairs(&groups.group_a, &groups.group_b, features.view(), cfg.metric)?;
        prune_similar(&pairs, r)?
    } else {
        Vec::new()
    };
    let after_s: Vec<usize> = ids.iter().copied().filter(|t| s_pruned.binary_search(t).is_err()).collect();
    let state_s = TokenState::new(after_s.clone(), state.cls)?;

    // Importance stage on the reduced attention.
    let view = slice_attention(layer, &after_s)?;
    let ranking = rank_view(
        &view,
        &after_s,
        state_s.cls_position(),
        mode,
        &WprConfig::fixed(wpr_iterations),
        &cfg.vhf(),
    )?;
    let k = retained_count(cfg.retention_rate, after_s.len());
    let keep = top_k_retain(&ranking.importance, k, &pinned)?;
    let i_pruned: Vec<usize> = after_s.iter().copied().filter(|t| keep.binary_search(t).is_err()).collect();
    let next = TokenState::new(keep.clone(), state.cls)?;

    let report = LayerReport {
        after_block: cfg.after_block,
        tokens_in: ids.len(),
        prerank,
        group_a_size: groups.group_a.len(),
        s_pruned,
        ranking,
        kept: keep.len(),
        i_pruned,
        survivors: keep,
    };
    Ok((next, report))
}

/// Outcome of a whole schedule on one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub source_id: String,
    pub layers: Vec<LayerReport>,
    /// Tokens entering each block.
    pub block_token_counts: Vec<usize>,
    pub final_survivors: Vec<usize>,
    pub flops: FlopsBreakdown,
    /// Share of the last block's pre-ranking mass, computed on the unpruned
    /// token set, that the final survivors carry.
    pub importance_mass_retained: f64,
}

/// Walks the blocks in order and applies every scheduled pruning layer.
pub fn run_schedule(trace: &ModelTrace, schedule: &PruningSchedule) -> Result<PruneReport> {
    run_schedule_with(trace, schedule, &FlopsOptions::default())
}

pub fn run_schedule_with(
    trace: &ModelTrace,
    schedule: &PruningSchedule,
    flops_opts: &FlopsOptions,
) -> Result<PruneReport> {
    let g = &trace.geometry;
    schedule.validate(g)?;
    let mut state = TokenState::full(g.num_tokens, g.cls_index());
    let mut counts = Vec::with_capacity(g.num_blocks);
    let mut layers = Vec::with_capacity(schedule.layers.len());
    for (b, layer_trace) in trace.layers.iter().enumerate() {
        let block = b + 1;
        counts.push(state.len());
        if let Some(cfg) = schedule.layer_after(block) {
            let iterations = cfg.iterations(g.num_blocks, &schedule.depth_buckets);
            let (next, report) =
                run_pruning_layer(&state, cfg, layer_trace, schedule.cls_boost_mode, iterations)
                    .map_err(|e| e.at_block(block))?;
            state = next;
            layers.push(report);
        }
    }

    let mut flops = model_flops(g, &counts, flops_opts)?;
    flops.pruning_overhead = pruning_overhead(schedule, g, &counts);

    let importance_mass_retained = match trace.layers.last() {
        Some(last) => {
            let full = TokenState::full(g.num_tokens, g.cls_index());
            let view = slice_attention(last, full.surviving_ids())?;
            let reference = rank_view(
                &view,
                full.surviving_ids(),
                full.cls_position(),
                schedule.cls_boost_mode,
                &WprConfig::fixed(1),
                &VhfThresholds::default(),
            )?;
            reference.importance.mass_of(state.surviving_ids()).min(1.0)
        }
        None => 1.0,
    };

    Ok(PruneReport {
        source_id: trace.source_id.clone(),
        layers,
        block_token_counts: counts,
        final_survivors: state.surviving_ids().to_vec(),
        flops,
        importance_mass_retained,
    })
}

/// `σ((s_i − θ)/T)` per token.
pub fn soft_mask(s: &ImportanceSignal, theta: f64, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature {temperature} must be positive"
        )));
    }
    Ok(s
        .values()
        .iter()
        .map(|&v| 1.0 / (1.0 + (-(v - theta) / temperature).exp()))
        .collect())
}

/// Threshold midway between the k-th and (k+1)-th largest scores, with
/// `k = round(ρ·N)`. Retaining everything puts θ below the minimum.
pub fn threshold_for_rate(s: &ImportanceSignal, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!("retention rate {rho} outside (0, 1]")));
    }
    let mut sorted = s.values().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let margin = 1.0 / n as f64;
    let k = retained_count(rho, n);
    let theta = if k >= n {
        sorted[n - 1] - margin
    } else if k == 0 {
        sorted[0] + margin
    } else {
        if sorted[k - 1] == sorted[k] {
            log::warn!("soft-mask threshold falls on tied scores ({})", sorted[k]);
        }
        0.5 * (sorted[k - 1] + sorted[k])
    };
    Ok(theta)
}
