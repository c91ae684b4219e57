//! Training-free token pruning for ViT attention traces.
//!
//! A pruning layer first drops near-duplicate tokens (S-stage) and then keeps
//! the top fraction by a graph-based importance ranking (I-stage). Everything
//! operates on recorded attention traces, so no model runtime is needed.

pub mod baselines;
pub mod bench;
pub mod converge;
pub mod error;
pub mod flops;
pub mod format;
pub mod heads;
pub mod pipeline;
pub mod schedule;
pub mod search;
pub mod signal;
pub mod sstage;
pub mod synth;
pub mod trace;
pub mod wpr;

pub use error::{Error, ErrorCategory, Result};
pub use flops::{budget_check, model_flops, predicted_token_counts, FlopsBreakdown, FlopsOptions};
pub use format::{read_trace, read_trace_with, write_trace, ReadOptions};
pub use pipeline::{run_schedule, run_schedule_with, PruneReport, TokenState};
pub use schedule::{PruningLayerConfig, PruningSchedule};
pub use signal::ImportanceSignal;
pub use trace::{FeatureSource, LayerTrace, ModelGeometry, ModelTrace};
pub use wpr::{ClsBoostMode, WprConfig};
