//! How far a truncated WPR run is from a long reference run, per block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::slice_attention;
use crate::trace::ModelTrace;
use crate::wpr::{init_signal, kl_divergence, wpr_run, ClsBoostMode, WprConfig};

/// Head-averaged `KL(s_t ‖ s_ref)` for one block and iteration count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    /// 1-based.
    pub block: usize,
    pub iterations: usize,
    pub kl_mean: f64,
    pub kl_max: f64,
}

/// Runs every head of every block for each count in `iterations` and for
/// `reference` shifts, all from the same initial signal.
pub fn convergence_study(
    trace: &ModelTrace,
    iterations: &[usize],
    reference: usize,
    mode: ClsBoostMode,
) -> Result<Vec<ConvergencePoint>> {
    if iterations.is_empty() || iterations.contains(&0) || reference == 0 {
        return Err(Error::InvalidParameter("iteration counts must be >= 1".into()));
    }
    let g = &trace.geometry;
    let n = g.num_tokens;
    let ids: Vec<usize> = (0..n).collect();
    let s0 = init_signal(n, g.cls_index(), mode.boost(n))?;
    let mut out = Vec::with_capacity(trace.layers.len() * iterations.len());
    for (b, layer) in trace.layers.iter().enumerate() {
        let view = slice_attention(layer, &ids).map_err(|e| e.at_block(b + 1))?;
        let refs = view
            .outer_iter()
            .map(|head| wpr_run(head, &s0, &WprConfig::fixed(reference)).map(|o| o.signal))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_block(b + 1))?;
        for &t in iterations {
            let mut kls = Vec::with_capacity(refs.len());
            for (head, r) in view.outer_iter().zip(&refs) {
                let s = wpr_run(head, &s0, &WprConfig::fixed(t)).map_err(|e| e.at_block(b + 1))?.signal;
                kls.push(kl_divergence(&s, r)?);
            }
            out.push(ConvergencePoint {
                block: b + 1,
                iterations: t,
                kl_mean: kls.iter().sum::<f64>() / kls.len() as f64,
                kl_max: kls.iter().copied().fold(0.0, f64::max),
            });
        }
    }
    Ok(out)
}
