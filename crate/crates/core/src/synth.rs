//! Synthetic traces with planted ground-truth importance.
//!
//! Every attention row is drawn around one shared mixture row `a` that puts
//! mass `β` on the salient set and spreads `1 − β` uniformly. With zero noise
//! all rows equal `a`, so the attention is rank one and a single graph shift
//! lands exactly on `a`.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{LayerTrace, ModelGeometry, ModelTrace, TensorFlags};

/// Spread of salient-token features around their shared direction.
const SALIENT_FEATURE_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub salient: BTreeSet<usize>,
    /// Attention mass `β` placed on the salient set, in (0, 1).
    pub salience_mass: f64,
    /// Dirichlet jitter temperature; 0 disables jitter.
    pub noise_temp: f64,
    pub seed: u64,
}

impl PlantedModel {
    pub fn new(
        salient: impl IntoIterator<Item = usize>,
        salience_mass: f64,
        noise_temp: f64,
        seed: u64,
    ) -> Self {
        Self {
            salient: salient.into_iter().collect(),
            salience_mass,
            noise_temp,
            seed,
        }
    }

    /// Draws `count` distinct salient tokens from the non-CLS range.
    pub fn random_salient(
        geometry: &ModelGeometry,
        count: usize,
        salience_mass: f64,
        noise_temp: f64,
        seed: u64,
    ) -> Result<Self> {
        let first = usize::from(geometry.cls_present);
        let pool = geometry.num_tokens.saturating_sub(first);
        if count == 0 || count >= pool {
            return Err(Error::InvalidParameter(format!(
                "cannot draw {count} salient tokens from {pool} candidates"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A11_E27);
        let picks = rand::seq::index::sample(&mut rng, pool, count);
        Ok(Self::new(
            picks.into_iter().map(|i| i + first),
            salience_mass,
            noise_temp,
            seed,
        ))
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.salient.is_empty() {
            return Err(Error::InvalidParameter("salient set is empty".into()));
        }
        if self.salient.len() >= n {
            return Err(Error::InvalidParameter(format!(
                "salient set of size {} must be smaller than N = {n}",
                self.salient.len()
            )));
        }
        if let Some(&bad) = self.salient.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidParameter(format!("salient token {bad} out of range")));
        }
        if !(self.salience_mass > 0.0 && self.salience_mass < 1.0) {
            return Err(Error::InvalidParameter("salience_mass must lie in (0, 1)".into()));
        }
        if !(self.noise_temp >= 0.0 && self.noise_temp.is_finite()) {
            return Err(Error::InvalidParameter("noise_temp must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The shared mixture row `a`.
    pub fn mixture_row(&self, n: usize) -> Result<Vec<f64>> {
        self.check(n)?;
        let beta = self.salience_mass;
        let spike = beta / self.salient.len() as f64;
        let base = (1.0 - beta) / n as f64;
        let mut a: Vec<f64> = (0..n)
            .map(|j| base + if self.salient.contains(&j) { spike } else { 0.0 })
            .collect();
        let total: f64 = a.iter().sum();
        a.iter_mut().for_each(|v| *v /= total);
        Ok(a)
    }
}

/// Ring-local attention blended with the planted row, sharpening with depth.
///
/// Block `l` uses weight `λ_l` on the planted row, interpolated linearly from
/// `mix_first` to `mix_last`; the rest goes to a uniform window of
/// `2·half_window + 1` ring neighbours. Shallow blocks mix slowly under
/// repeated graph shifts while deep blocks are close to rank one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub half_window: usize,
    pub mix_first: f64,
    pub mix_last: f64,
}

impl Default for DepthProfile {
    fn default() -> Self {
        Self {
            half_window: 8,
            mix_first: 0.05,
            mix_last: 0.95,
        }
    }
}

/// Planted trace carrying attention and keys.
pub fn synth_trace(geometry: &ModelGeometry, planted: &PlantedModel) -> Result<ModelTrace> {
    synth_trace_with(
        geometry,
        planted,
        TensorFlags {
            has_k: true,
            ..Default::default()
        },
    )
}

/// Planted trace with an explicit choice of feature tensors.
pub fn synth_trace_with(
    geometry: &ModelGeometry,
    planted: &PlantedModel,
    tensors: TensorFlags,
) -> Result<ModelTrace> {
    build(geometry, planted, None, tensors)
}

/// Planted trace whose attention sharpens with depth; see [`DepthProfile`].
pub fn synth_depth_trace(
    geometry: &ModelGeometry,
    planted: &PlantedModel,
    profile: DepthProfile,
    tensors: TensorFlags,
) -> Result<ModelTrace> {
    if !(0.0..=1.0).contains(&profile.mix_first) || !(0.0..=1.0).contains(&profile.mix_last) {
        return Err(Error::InvalidParameter("depth mix weights must lie in [0, 1]".into()));
    }
    build(geometry, planted, Some(profile), tensors)
}

fn build(
    geometry: &ModelGeometry,
    planted: &PlantedModel,
    profile: Option<DepthProfile>,
    tensors: TensorFlags,
) -> Result<ModelTrace> {
    geometry.validate()?;
    let n = geometry.num_tokens;
    let a = planted.mixture_row(n)?;
    let (h, d, dh) = (geometry.num_heads, geometry.embed_dim, geometry.head_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(planted.seed);

    // Shared feature direction for the salient set.
    let direction = unit_gaussian(&mut rng, d);
    let mut base_features = Array2::<f64>::zeros((n, d));
    for tok in 0..n {
        let noise = gaussian(&mut rng, d, 1.0 / (d as f64).sqrt());
        let row = if planted.salient.contains(&tok) {
            &direction + &(noise * SALIENT_FEATURE_NOISE)
        } else {
            noise
        };
        base_features.row_mut(tok).assign(&row);
    }

    let blocks = geometry.num_blocks;
    let mut layers = Vec::with_capacity(blocks);
    for block in 0..blocks {
        let mix = profile.map(|p| {
            let t = if blocks > 1 {
                block as f64 / (blocks - 1) as f64
            } else {
                1.0
            };
            (p, p.mix_first + (p.mix_last - p.mix_first) * t)
        });
        let mut attention = Array3::<f32>::zeros((h, n, n));
        for head in 0..h {
            for row in 0..n {
                let centre: Vec<f64> = match mix {
                    None => a.clone(),
                    Some((p, lambda)) => {
                        let local = ring_window(n, row + head, p.half_window);
                        local
                            .iter()
                            .zip(&a)
                            .map(|(l, s)| (1.0 - lambda) * l + lambda * s)
                            .collect()
                    }
                };
                let drawn = jitter(&mut rng, &centre, planted.noise_temp);
                for (col, v) in drawn.into_iter().enumerate() {
                    attention[[head, row, col]] = v as f32;
                }
            }
        }

        let mut layer = LayerTrace::attention_only(attention);
        let per_head = |feat: &Array2<f64>| {
            Array3::from_shape_fn((h, n, dh), |(hd, tok, k)| feat[[tok, hd * dh + k]] as f32)
        };
        if tensors.has_k {
            layer.keys = Some(per_head(&base_features));
        }
        if tensors.has_qv {
            let q = perturb(&mut rng, &base_features, 0.05);
            let v = perturb(&mut rng, &base_features, 0.5);
            layer.queries = Some(per_head(&q));
            layer.values = Some(per_head(&v));
        }
        if tensors.has_x {
            let x_out = perturb(&mut rng, &base_features, 0.05);
            layer.x_pre = Some(base_features.mapv(|v| v as f32));
            layer.x_out = Some(x_out.mapv(|v| v as f32));
        }
        layers.push(layer);
    }

    ModelTrace::new(
        geometry.clone(),
        layers,
        None,
        format!("planted-{}", planted.seed),
    )
}

fn ring_window(n: usize, centre: usize, half: usize) -> Vec<f64> {
    let width = (2 * half + 1).min(n);
    let mut row = vec![0.0; n];
    let start = (centre % n + n - half.min(n / 2)) % n;
    for k in 0..width {
        row[(start + k) % n] = 1.0 / width as f64;
    }
    row
}

/// Dirichlet draw with concentration `centre / temp`; `temp = 0` returns `centre`.
fn jitter(rng: &mut ChaCha8Rng, centre: &[f64], temp: f64) -> Vec<f64> {
    if temp == 0.0 {
        return centre.to_vec();
    }
    let mut draw: Vec<f64> = centre
        .iter()
        .map(|&c| {
            if c <= 0.0 {
                0.0
            } else {
                Gamma::new(c / temp, 1.0)
                    .map(|g| g.sample(rng))
                    .unwrap_or(0.0)
            }
        })
        .collect();
    let total: f64 = draw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return centre.to_vec();
    }
    draw.iter_mut().for_each(|v| *v /= total);
    draw
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v = gaussian(rng, d, 1.0);
    let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
    v / norm
}

fn perturb(rng: &mut ChaCha8Rng, base: &Array2<f64>, scale: f64) -> Array2<f64> {
    let d = base.ncols();
    let s = scale / (d as f64).sqrt();
    base.mapv(|v| {
        let z: f64 = rng.sample(StandardNormal);
        v + s * z
    })
}
