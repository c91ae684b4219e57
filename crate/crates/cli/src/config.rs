//! TOML configuration for each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ztprune::bench::PlantedEnsemble;
use ztprune::baselines::RankingStrategy;
use ztprune::search::SearchSpace;
use ztprune::synth::DepthProfile;
use ztprune::{ClsBoostMode, FlopsOptions, ModelGeometry, PruningSchedule};

use crate::error::CliError;

/// Reads and parses `path`, or returns the default when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// A preset name (`deit-t`, `deit-s`, `deit-b`) or explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeometrySpec {
    Preset(String),
    Explicit(ModelGeometry),
}

impl Default for GeometrySpec {
    fn default() -> Self {
        GeometrySpec::Preset("deit-s".into())
    }
}

impl GeometrySpec {
    pub fn resolve(&self) -> Result<ModelGeometry, CliError> {
        let g = match self {
            GeometrySpec::Preset(name) => ModelGeometry::preset(name)
                .ok_or_else(|| CliError::Config(format!("unknown geometry preset {name:?}")))?,
            GeometrySpec::Explicit(g) => g.clone(),
        };
        g.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(g)
    }
}

pub fn named_schedule(name: &str) -> Result<PruningSchedule, CliError> {
    match name {
        "reference" => Ok(PruningSchedule::deit_s_reference()),
        "none" | "empty" => Ok(PruningSchedule::empty()),
        other => Err(CliError::Config(format!("unknown schedule preset {other:?}"))),
    }
}

fn default_traces() -> usize {
    1
}

fn default_salient() -> usize {
    8
}

fn default_salience_mass() -> f64 {
    0.5
}

fn default_tensors() -> Vec<String> {
    vec!["k".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub geometry: GeometrySpec,
    #[serde(default = "default_traces")]
    pub traces: usize,
    #[serde(default = "default_salient")]
    pub salient: usize,
    #[serde(default = "default_salience_mass")]
    pub salience_mass: f64,
    #[serde(default)]
    pub noise_temp: f64,
    #[serde(default)]
    pub seed: u64,
    /// Attention that sharpens with depth, for convergence studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_profile: Option<DepthProfile>,
    /// Feature tensors to store: any of `k`, `q`/`v` (stored together), `x`.
    #[serde(default = "default_tensors")]
    pub tensors: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

/// Shared by `simulate` and `flops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometrySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PruningSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_gflops: Option<f64>,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub flops: FlopsOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    #[default]
    ImportanceMass,
    SalientRetention,
}

/// Trace files with optional truth sidecars, or a generated planted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedEnsemble>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<PathBuf>,
}

fn default_trials() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default)]
    pub geometry: GeometrySpec,
    pub space: SearchSpace,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    /// Also evaluate the reference DeiT-S schedule as an extra trial.
    #[serde(default)]
    pub include_reference: bool,
    #[serde(default)]
    pub flops: FlopsOptions,
}

fn default_strategies() -> Vec<RankingStrategy> {
    vec![
        RankingStrategy::Wpr(30),
        RankingStrategy::ClsAttention,
        RankingStrategy::AverageAttention,
        RankingStrategy::AccumulatedAverage,
        RankingStrategy::Random(0),
    ]
}

fn default_bench_geometry() -> GeometrySpec {
    GeometrySpec::Explicit(ModelGeometry::vit(12, 6, 384, 64))
}

fn default_bench_ensemble() -> EnsembleSpec {
    EnsembleSpec {
        planted: Some(PlantedEnsemble {
            count: 100,
            salient: 8,
            salience_mass: 0.5,
            noise_temp: 0.05,
            seed: 0,
        }),
        traces: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_bench_geometry")]
    pub geometry: GeometrySpec,
    #[serde(default = "default_bench_ensemble")]
    pub ensemble: EnsembleSpec,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<RankingStrategy>,
    /// 1-based block to rank; defaults to the last block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    /// Defaults to the planted set size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub cls_boost_mode: ClsBoostMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}
