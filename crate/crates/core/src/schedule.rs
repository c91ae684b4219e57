//! Pruning schedules: where pruning layers sit and how hard they prune.
//!
//! Block indices in schedules are 1-based: `after_block = 3` places a
//! pruning layer between blocks 3 and 4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::VhfThresholds;
use crate::sstage::{PartitionMethod, SimilarityMetric};
use crate::trace::{FeatureSource, ModelGeometry};
use crate::wpr::ClsBoostMode;

/// WPR iteration counts by depth: shallow blocks converge slowly, deep
/// blocks after a single shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthBuckets {
    pub shallow_blocks: usize,
    pub deep_blocks: usize,
    pub shallow_iterations: usize,
    pub middle_iterations: usize,
    pub deep_iterations: usize,
}

impl Default for DepthBuckets {
    fn default() -> Self {
        Self {
            shallow_blocks: 3,
            deep_blocks: 3,
            shallow_iterations: 30,
            middle_iterations: 5,
            deep_iterations: 1,
        }
    }
}

impl DepthBuckets {
    /// Iterations for a layer after 1-based `after_block`.
    pub fn iterations(&self, after_block: usize, num_blocks: usize) -> usize {
        if after_block <= self.shallow_blocks {
            self.shallow_iterations
        } else if after_block + self.deep_blocks > num_blocks {
            self.deep_iterations
        } else {
            self.middle_iterations
        }
    }
}

fn default_retention() -> f64 {
    1.0
}

fn default_s_prune() -> usize {
    10
}

fn default_vhf_min() -> f64 {
    VhfThresholds::default().v_min
}

fn default_vhf_max() -> f64 {
    VhfThresholds::default().v_max
}

/// One pruning layer. Fields other than `after_block` default to the
/// reference DeiT-S setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningLayerConfig {
    pub after_block: usize,
    #[serde(default = "default_retention")]
    pub retention_rate: f64,
    /// Fixed I-stage WPR iterations; `None` picks from [`DepthBuckets`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wpr_iterations: Option<usize>,
    #[serde(default = "default_s_prune")]
    pub s_prune_count: usize,
    #[serde(default = "default_vhf_min")]
    pub vhf_min: f64,
    #[serde(default = "default_vhf_max")]
    pub vhf_max: f64,
    #[serde(default)]
    pub feature_source: FeatureSource,
    #[serde(default)]
    pub metric: SimilarityMetric,
    #[serde(default)]
    pub partition: PartitionMethod,
}

impl PruningLayerConfig {
    pub fn new(after_block: usize, retention_rate: f64, s_prune_count: usize) -> Self {
        Self {
            after_block,
            retention_rate,
            wpr_iterations: None,
            s_prune_count,
            vhf_min: default_vhf_min(),
            vhf_max: default_vhf_max(),
            feature_source: FeatureSource::default(),
            metric: SimilarityMetric::default(),
            partition: PartitionMethod::default(),
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.wpr_iterations = Some(iterations);
        self
    }

    pub fn vhf(&self) -> VhfThresholds {
        VhfThresholds {
            v_min: self.vhf_min,
            v_max: self.vhf_max,
        }
    }

    pub fn iterations(&self, num_blocks: usize, buckets: &DepthBuckets) -> usize {
        self.wpr_iterations
            .unwrap_or_else(|| buckets.iterations(self.after_block, num_blocks))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PruningSchedule {
    #[serde(default)]
    pub cls_boost_mode: ClsBoostMode,
    #[serde(default)]
    pub depth_buckets: DepthBuckets,
    #[serde(default)]
    pub layers: Vec<PruningLayerConfig>,
}

impl PruningSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Reference DeiT-S schedule: layers after blocks 1, 3, 6, 9, 11 with
    /// retention 1, 0.9, 0.8, 0.7, 1, I-stage iterations 30, 5, 5, 1, 1 and
    /// 10 tokens removed by each S-stage.
    pub fn deit_s_reference() -> Self {
        let layers = [(1, 1.0, 30), (3, 0.9, 5), (6, 0.8, 5), (9, 0.7, 1), (11, 1.0, 1)]
            .into_iter()
            .map(|(b, rho, it)| PruningLayerConfig::new(b, rho, 10).with_iterations(it))
            .collect();
        Self {
            cls_boost_mode: ClsBoostMode::Classification,
            depth_buckets: DepthBuckets::default(),
            layers,
        }
    }

    /// Checks block positions, rates and thresholds against a geometry.
    pub fn validate(&self, geometry: &ModelGeometry) -> Result<()> {
        let mut previous = 0;
        for layer in &self.layers {
            if layer.after_block == 0 || layer.after_block > geometry.num_blocks {
                return Err(Error::Schedule(format!(
                    "after_block {} outside 1..={}",
                    layer.after_block, geometry.num_blocks
                )));
            }
            if layer.after_block <= previous {
                return Err(Error::Schedule("after_block values must strictly increase".into()));
            }
            previous = layer.after_block;
            if !(layer.retention_rate > 0.0 && layer.retention_rate <= 1.0) {
                return Err(Error::Schedule(format!(
                    "retention rate {} outside (0, 1]",
                    layer.retention_rate
                )));
            }
            if layer.wpr_iterations == Some(0) {
                return Err(Error::Schedule("wpr_iterations must be >= 1".into()));
            }
            VhfThresholds::new(layer.vhf_min, layer.vhf_max)
                .map_err(|e| Error::Schedule(e.to_string()))?;
        }
        Ok(())
    }

    /// Layer placed after 1-based block `block`, if any.
    pub fn layer_after(&self, block: usize) -> Option<&PruningLayerConfig> {
        self.layers.iter().find(|l| l.after_block == block)
    }
}

/// Tokens kept by an I-stage: `round(ρ·n)`, halves rounding up.
pub fn retained_count(retention_rate: f64, n: usize) -> usize {
    // The epsilon keeps products like 0.7·5 = 3.4999999999999996 on the
    // intended side of the half.
    (retention_rate * n as f64 + 0.5 + 1e-9).floor() as usize
}
