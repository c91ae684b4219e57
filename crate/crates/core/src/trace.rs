//! Attention traces: model geometry, per-layer tensors, and validation.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance applied to traces read from disk.
pub const READ_ROW_SUM_TOL: f64 = 1e-3;
/// Row-sum tolerance for attention computed in-process.
pub const COMPUTED_ROW_SUM_TOL: f64 = 1e-6;

/// FFN hidden width as a ratio of the embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnRatio {
    pub num: u32,
    pub den: u32,
}

impl Default for FfnRatio {
    fn default() -> Self {
        Self { num: 4, den: 1 }
    }
}

impl FfnRatio {
    pub fn as_f64(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

/// Shape of a ViT encoder stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Token count including CLS when `cls_present`.
    pub num_tokens: usize,
    #[serde(default = "default_true")]
    pub cls_present: bool,
    #[serde(default)]
    pub ffn_ratio: FfnRatio,
}

fn default_true() -> bool {
    true
}

impl ModelGeometry {
    /// DeiT-Tiny at 224px: 12 blocks, d=192, 3 heads, 197 tokens.
    pub fn deit_tiny() -> Self {
        Self::vit(12, 3, 192, 197)
    }

    /// DeiT-Small at 224px: 12 blocks, d=384, 6 heads, 197 tokens.
    pub fn deit_small() -> Self {
        Self::vit(12, 6, 384, 197)
    }

    /// DeiT-Base at 224px: 12 blocks, d=768, 12 heads, 197 tokens.
    pub fn deit_base() -> Self {
        Self::vit(12, 12, 768, 197)
    }

    /// A CLS-carrying geometry with FFN ratio 4.
    pub fn vit(num_blocks: usize, num_heads: usize, embed_dim: usize, num_tokens: usize) -> Self {
        Self {
            num_blocks,
            num_heads,
            embed_dim,
            num_tokens,
            cls_present: true,
            ffn_ratio: FfnRatio::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "deit-t" | "deit-tiny" => Some(Self::deit_tiny()),
            "deit-s" | "deit-small" => Some(Self::deit_small()),
            "deit-b" | "deit-base" => Some(Self::deit_base()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    /// Index of the CLS token, which is always token 0 when present.
    pub fn cls_index(&self) -> Option<usize> {
        self.cls_present.then_some(0)
    }

    /// Number of image patches (tokens minus CLS).
    pub fn num_patches(&self) -> usize {
        self.num_tokens - usize::from(self.cls_present)
    }

    /// Side of the square patch grid, when the patch count is a square.
    pub fn image_tokens_edge(&self) -> Option<usize> {
        let p = self.num_patches();
        let edge = (p as f64).sqrt().round() as usize;
        (edge * edge == p).then_some(edge)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || self.num_tokens == 0 {
            return Err(Error::Geometry(
                "num_heads, embed_dim and num_tokens must be positive".into(),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Geometry(format!(
                "embed_dim {} is not a multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.cls_present && self.num_tokens < 2 {
            return Err(Error::Geometry("a CLS geometry needs at least 2 tokens".into()));
        }
        if self.ffn_ratio.num == 0 || self.ffn_ratio.den == 0 {
            return Err(Error::Geometry("ffn_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Tensors captured at one encoder block.
///
/// `attention[h, i, j]` is the attention query token `i` pays to key token
/// `j` in head `h`; rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub attention: Array3<f32>,
    pub keys: Option<Array3<f32>>,
    pub queries: Option<Array3<f32>>,
    pub values: Option<Array3<f32>>,
    pub x_pre: Option<Array2<f32>>,
    pub x_out: Option<Array2<f32>>,
}

impl LayerTrace {
    pub fn attention_only(attention: Array3<f32>) -> Self {
        Self {
            attention,
            keys: None,
            queries: None,
            values: None,
            x_pre: None,
            x_out: None,
        }
    }

    /// `[N, d]` feature rows indexed by token id. Per-head tensors are
    /// concatenated across heads.
    pub fn feature_matrix(&self, source: FeatureSource) -> Result<Array2<f32>> {
        let missing = || Error::MissingTensor(format!("{source:?} features"));
        match source {
            FeatureSource::Key => concat_heads(self.keys.as_ref().ok_or_else(missing)?),
            FeatureSource::Query => concat_heads(self.queries.as_ref().ok_or_else(missing)?),
            FeatureSource::Value => concat_heads(self.values.as_ref().ok_or_else(missing)?),
            FeatureSource::XPre => self.x_pre.clone().ok_or_else(missing),
            FeatureSource::XOut => self.x_out.clone().ok_or_else(missing),
        }
    }

    fn flags(&self) -> TensorFlags {
        TensorFlags {
            has_k: self.keys.is_some(),
            has_qv: self.queries.is_some() || self.values.is_some(),
            has_x: self.x_pre.is_some() || self.x_out.is_some(),
        }
    }
}

/// Which optional tensors a trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TensorFlags {
    pub has_k: bool,
    /// Queries and values, always together.
    pub has_qv: bool,
    /// Pre-block and output embeddings, always together.
    pub has_x: bool,
}

/// One input's forward-pass trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace {
    pub geometry: ModelGeometry,
    pub layers: Vec<LayerTrace>,
    pub label: Option<u32>,
    pub source_id: String,
}

impl ModelTrace {
    /// Builds a trace after checking shapes and finiteness.
    ///
    /// Row sums are not checked here; see [`ModelTrace::validate`].
    pub fn new(
        geometry: ModelGeometry,
        layers: Vec<LayerTrace>,
        label: Option<u32>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let trace = Self {
            geometry,
            layers,
            label,
            source_id: source_id.into(),
        };
        trace.check_structure()?;
        Ok(trace)
    }

    /// Optional-tensor flags shared by every layer.
    pub fn flags(&self) -> TensorFlags {
        self.layers.first().map(LayerTrace::flags).unwrap_or_default()
    }

    /// Shapes, flag consistency and finiteness.
    pub fn check_structure(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        if self.label == Some(u32::MAX) {
            return Err(Error::InvalidParameter("label 0xFFFFFFFF is reserved".into()));
        }
        if self.layers.len() != g.num_blocks {
            return Err(Error::Shape(format!(
                "{} layers for {} blocks",
                self.layers.len(),
                g.num_blocks
            )));
        }
        let flags = self.flags();
        let (h, n, dh, d) = (g.num_heads, g.num_tokens, g.head_dim(), g.embed_dim);
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.flags() != flags {
                return Err(Error::Shape(format!("layer {l} carries a different tensor set")));
            }
            check_shape(layer.attention.shape(), &[h, n, n], l, "attention")?;
            check_finite(layer.attention.iter(), l, "attention")?;
            let per_head = [
                ("keys", &layer.keys),
                ("queries", &layer.queries),
                ("values", &layer.values),
            ];
            for (name, t) in per_head {
                match t {
                    Some(t) => {
                        check_shape(t.shape(), &[h, n, dh], l, name)?;
                        check_finite(t.iter(), l, name)?;
                    }
                    None if (name != "keys" && flags.has_qv) => {
                        return Err(Error::Shape(format!("layer {l}: {name} missing")));
                    }
                    None => {}
                }
            }
            for (name, t) in [("x_pre", &layer.x_pre), ("x_out", &layer.x_out)] {
                match t {
                    Some(t) => {
                        check_shape(t.shape(), &[n, d], l, name)?;
                        check_finite(t.iter(), l, name)?;
                    }
                    None if flags.has_x => {
                        return Err(Error::Shape(format!("layer {l}: {name} missing")));
                    }
                    None => {}
                }
            }
        }
        Ok(())
    }

    /// Full validation: structure plus attention entries in `[0, 1]` and
    /// rows summing to 1 within `row_tol`. Stops at the first failure.
    pub fn validate(&self, row_tol: f64) -> Result<()> {
        self.check_structure()?;
        match self.lint_rows(row_tol).into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Every attention-row violation, for reporting.
    pub fn lint_rows(&self, row_tol: f64) -> Vec<Error> {
        let mut issues = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (hd, head) in layer.attention.axis_iter(Axis(0)).enumerate() {
                for (row, r) in head.axis_iter(Axis(0)).enumerate() {
                    if let Some((col, &value)) =
                        r.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v))
                    {
                        issues.push(Error::EntryRange {
                            layer: l,
                            head: hd,
                            row,
                            col,
                            value,
                        });
                    }
                    let sum: f64 = r.iter().map(|&v| f64::from(v)).sum();
                    if (sum - 1.0).abs() > row_tol {
                        issues.push(Error::RowSum {
                            layer: l,
                            head: hd,
                            row,
                            sum,
                        });
                    }
                }
            }
        }
        issues
    }

    /// Feature rows of one block; see [`LayerTrace::feature_matrix`].
    pub fn feature_matrix(&self, block: usize, source: FeatureSource) -> Result<Array2<f32>> {
        self.layers
            .get(block)
            .ok_or_else(|| Error::Shape(format!("no layer {block}")))?
            .feature_matrix(source)
            .map_err(|e| e.at_block(block + 1))
    }
}

/// Where S-stage feature vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    #[default]
    Key,
    Query,
    Value,
    XPre,
    XOut,
}

fn concat_heads(t: &Array3<f32>) -> Result<Array2<f32>> {
    let (h, n, dh) = t.dim();
    let mut out = Array2::<f32>::zeros((n, h * dh));
    for hd in 0..h {
        for tok in 0..n {
            for k in 0..dh {
                out[[tok, hd * dh + k]] = t[[hd, tok, k]];
            }
        }
    }
    Ok(out)
}

fn check_shape(actual: &[usize], expected: &[usize], layer: usize, name: &str) -> Result<()> {
    if actual != expected {
        return Err(Error::Shape(format!(
            "layer {layer}: {name} has shape {actual:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

fn check_finite<'a>(mut it: impl Iterator<Item = &'a f32>, layer: usize, name: &str) -> Result<()> {
    if it.any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("layer {layer} {name}"),
        });
    }
    Ok(())
}

/// Row softmax of `Q·Kᵀ/√scale_dim`.
pub fn compute_attention<A>(
    queries: ArrayView2<'_, A>,
    keys: ArrayView2<'_, A>,
    scale_dim: usize,
) -> Result<Array2<f64>>
where
    A: Copy + Into<f64>,
{
    if scale_dim == 0 {
        return Err(Error::InvalidParameter("scale_dim must be positive".into()));
    }
    let (n, dq) = queries.dim();
    let (nk, dk) = keys.dim();
    if dq != dk {
        return Err(Error::Shape(format!(
            "query dim {dq} != key dim {dk}"
        )));
    }
    let q = queries.mapv(Into::into);
    let k = keys.mapv(Into::into);
    if q.iter().chain(k.iter()).any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "attention inputs".into(),
        });
    }
    let scale = (scale_dim as f64).sqrt();
    let mut logits = q.dot(&k.t()) / scale;
    debug_assert_eq!(logits.dim(), (n, nk));
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let q = Array2::<f64>::zeros((4, 3));
        let a = compute_attention(q.view(), q.view(), 3).unwrap();
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_softmax_example() {
        // Q·Kᵀ = [[0, ln3], [0, 0]] with scale_dim 1.
        let ln3 = 3f64.ln();
        let q = array![[1.0, 0.0], [0.0, 0.0]];
        let k = array![[0.0, 0.0], [ln3, 0.0]];
        let a = compute_attention(q.view(), k.view(), 1).unwrap();
        let expected = array![[0.25, 0.75], [0.5, 0.5]];
        for (x, y) in a.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let q = array![[f64::NAN, 0.0]];
        let k = array![[0.0, 0.0]];
        assert!(matches!(
            compute_attention(q.view(), k.view(), 2),
            Err(Error::NonFinite { .. })
        ));
        assert!(compute_attention(k.view(), k.view(), 0).is_err());
    }

    #[test]
    fn geometry_invariants() {
        assert!(ModelGeometry::deit_small().validate().is_ok());
        assert_eq!(ModelGeometry::deit_small().head_dim(), 64);
        assert_eq!(ModelGeometry::deit_small().image_tokens_edge(), Some(14));
        let mut g = ModelGeometry::vit(1, 5, 384, 197);
        assert!(g.validate().is_err());
        g = ModelGeometry::vit(1, 1, 4, 1);
        assert!(g.validate().is_err());
    }

    #[test]
    fn concatenates_heads_in_head_order() {
        let t = Array3::from_shape_fn((2, 3, 2), |(h, n, k)| (h * 100 + n * 10 + k) as f32);
        let m = concat_heads(&t).unwrap();
        assert_eq!(m.row(1).to_vec(), vec![10.0, 11.0, 110.0, 111.0]);
    }
}
