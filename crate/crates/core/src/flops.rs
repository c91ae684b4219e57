//! Analytic multiply-accumulate counts for a ViT encoder.
//!
//! One MAC counts as one FLOP, which is the convention behind the usual
//! "4.6 GFLOPs" figure for DeiT-S. Softmax, normalization, activations and
//! biases are not counted.
//!
//! Per block with `n` tokens and width `d`:
//! - attention: `4·n·d²` for the Q/K/V/output projections plus `2·n²·d`
//!   for `QKᵀ` and `A·V`;
//! - FFN: `2·ratio·n·d²`.
//!
//! With ratio 4 this is `12·n·d² + 2·n²·d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{retained_count, PruningSchedule};
use crate::sstage::PartitionMethod;
use crate::trace::ModelGeometry;

/// Parts of the model outside the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopsOptions {
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for FlopsOptions {
    fn default() -> Self {
        Self {
            patch_size: 16,
            in_channels: 3,
            num_classes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub per_block: Vec<u64>,
    pub patch_embed: u64,
    pub head: u64,
    /// Ranking and matching cost of the pruning layers; not part of `total_macs`.
    pub pruning_overhead: u64,
    pub total_macs: u64,
    pub total_gflops: f64,
}

/// MACs of one encoder block at `n` tokens.
pub fn block_flops(n: usize, geometry: &ModelGeometry) -> u64 {
    let n = n as u128;
    let d = geometry.embed_dim as u128;
    let attention = 4 * n * d * d + 2 * n * n * d;
    let ffn = 2 * n * d * d * u128::from(geometry.ffn_ratio.num) / u128::from(geometry.ffn_ratio.den);
    (attention + ffn) as u64
}

/// Whole-model MACs given the token count entering every block.
pub fn model_flops(
    geometry: &ModelGeometry,
    token_counts: &[usize],
    opts: &FlopsOptions,
) -> Result<FlopsBreakdown> {
    if token_counts.len() != geometry.num_blocks {
        return Err(Error::Shape(format!(
            "{} token counts for {} blocks",
            token_counts.len(),
            geometry.num_blocks
        )));
    }
    let per_block: Vec<u64> = token_counts.iter().map(|&n| block_flops(n, geometry)).collect();
    let patch_pixels = (opts.patch_size * opts.patch_size * opts.in_channels) as u64;
    let patch_embed = geometry.num_patches() as u64 * geometry.embed_dim as u64 * patch_pixels;
    let head = geometry.embed_dim as u64 * opts.num_classes as u64;
    let total_macs = per_block.iter().sum::<u64>() + patch_embed + head;
    Ok(FlopsBreakdown {
        per_block,
        patch_embed,
        head,
        pruning_overhead: 0,
        total_macs,
        total_gflops: total_macs as f64 / 1e9,
    })
}

/// Size of the prunable group for `n` tokens of which `pinned` are protected.
fn group_a_size(n: usize, pinned: usize, method: PartitionMethod) -> usize {
    let free = n.saturating_sub(pinned);
    match method {
        PartitionMethod::NoPartition => free,
        _ => free / 2,
    }
}

/// Token count entering every block, derived from schedule arithmetic alone:
/// each layer maps `n` to `round(ρ·(n − r))`.
pub fn predicted_token_counts(schedule: &PruningSchedule, geometry: &ModelGeometry) -> Result<Vec<usize>> {
    schedule.validate(geometry)?;
    let pinned = usize::from(geometry.cls_present);
    let mut n = geometry.num_tokens;
    let mut counts = Vec::with_capacity(geometry.num_blocks);
    for block in 1..=geometry.num_blocks {
        counts.push(n);
        if let Some(layer) = schedule.layer_after(block) {
            let r = layer.s_prune_count;
            let prunable = group_a_size(n, pinned, layer.partition);
            if r > 0 && r >= prunable {
                return Err(Error::Schedule(format!(
                    "layer after block {block}: S-stage would prune {r} of {prunable} group-A tokens"
                )));
            }
            let k = retained_count(layer.retention_rate, n - r);
            if k < 1 || k < pinned {
                return Err(Error::Schedule(format!(
                    "layer after block {block} keeps {k} tokens"
                )));
            }
            n = k;
        }
    }
    Ok(counts)
}

/// Ranking and matching MACs of the schedule's pruning layers.
pub fn pruning_overhead(
    schedule: &PruningSchedule,
    geometry: &ModelGeometry,
    token_counts: &[usize],
) -> u64 {
    let h = geometry.num_heads as u64;
    let d = geometry.embed_dim as u64;
    let pinned = usize::from(geometry.cls_present);
    schedule
        .layers
        .iter()
        .filter_map(|layer| {
            let n = *token_counts.get(layer.after_block - 1)?;
            let r = layer.s_prune_count;
            let prerank = h * (n * n) as u64;
            let matching = if r > 0 {
                let a = group_a_size(n, pinned, layer.partition) as u64;
                let b = (n as u64).saturating_sub(a);
                a * b * d
            } else {
                0
            };
            let m = n.saturating_sub(r) as u64;
            let iters = layer.iterations(geometry.num_blocks, &schedule.depth_buckets) as u64;
            Some(prerank + matching + iters * h * m * m)
        })
        .sum()
}

/// Result of [`budget_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub pass: bool,
    pub achieved_gflops: f64,
    pub token_counts: Vec<usize>,
}

/// Passes when the schedule's predicted cost is at most
/// `budget_gflops·(1 + tolerance)`.
pub fn budget_check(
    schedule: &PruningSchedule,
    geometry: &ModelGeometry,
    budget_gflops: f64,
    tolerance: f64,
    opts: &FlopsOptions,
) -> Result<BudgetCheck> {
    let token_counts = predicted_token_counts(schedule, geometry)?;
    let achieved_gflops = model_flops(geometry, &token_counts, opts)?.total_gflops;
    Ok(BudgetCheck {
        pass: achieved_gflops <= budget_gflops * (1.0 + tolerance),
        achieved_gflops,
        token_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_examples() {
        let g = ModelGeometry::deit_small();
        assert_eq!(block_flops(0, &g), 0);
        // 12·197·384² = 348,585,984 linear; 2·197²·384 = 29,805,312 attention.
        assert_eq!(block_flops(197, &g), 348_585_984 + 29_805_312);
        assert!(block_flops(394, &g) > 2 * block_flops(197, &g));
    }

    #[test]
    fn ffn_ratio_is_respected() {
        let mut g = ModelGeometry::deit_small();
        g.ffn_ratio = crate::trace::FfnRatio { num: 2, den: 1 };
        let n = 10u64;
        let d = 384u64;
        assert_eq!(block_flops(10, &g), 4 * n * d * d + 2 * n * n * d + 4 * n * d * d);
    }

    #[test]
    fn zero_blocks_is_embed_plus_head() {
        let g = ModelGeometry::vit(0, 6, 384, 197);
        let b = model_flops(&g, &[], &FlopsOptions::default()).unwrap();
        assert_eq!(b.total_macs, 196 * 384 * 768 + 384 * 1000);
        assert!(model_flops(&g, &[1], &FlopsOptions::default()).is_err());
    }

    #[test]
    fn reference_counts_from_arithmetic() {
        let counts = predicted_token_counts(&PruningSchedule::deit_s_reference(), &ModelGeometry::deit_small()).unwrap();
        assert_eq!(counts, vec![197, 187, 187, 159, 159, 159, 119, 119, 119, 76, 76, 66]);
    }

    #[test]
    fn budget_examples() {
        let g = ModelGeometry::deit_small();
        let opts = FlopsOptions::default();
        let full = model_flops(&g, &[197; 12], &opts).unwrap().total_gflops;
        let empty = budget_check(&PruningSchedule::empty(), &g, full, 0.0, &opts).unwrap();
        assert!(empty.pass);
        assert_eq!(empty.achieved_gflops, full);
        let t1 = PruningSchedule::deit_s_reference();
        assert!(budget_check(&t1, &g, 3.08, 0.05, &opts).unwrap().pass);
        assert!(!budget_check(&t1, &g, 2.5, 0.0, &opts).unwrap().pass);
    }

    #[test]
    fn oversized_s_stage_is_a_schedule_error() {
        let g = ModelGeometry::vit(2, 1, 4, 9);
        let mut s = PruningSchedule::empty();
        s.layers.push(crate::schedule::PruningLayerConfig::new(1, 1.0, 4));
        assert!(matches!(predicted_token_counts(&s, &g), Err(Error::Schedule(_))));
        s.layers[0].s_prune_count = 3;
        assert_eq!(predicted_token_counts(&s, &g).unwrap(), vec![9, 6]);
    }
}
