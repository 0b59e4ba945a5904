//! Forward passes for the learned blocks: geometric transformer,
//! kernelized cross-attention, the sparse-to-dense point transformer, and
//! the multi-scale set-abstraction positional encoder.
//!
//! Everything here is inference only; parameters are deterministic
//! functions of a seed or loaded from a weight directory. All blocks
//! preserve the `(N+1)×C` layout with the background token in row 0.

pub(crate) mod attention;
mod blocks;
mod posenc;
mod weights;

pub use attention::{distance_embedding, kernel_attention_reference, DIST_EMB_DIM};
pub use blocks::{
    geometric_transformer_block, linear_attention_block, linear_cross_attention, sdpt_block,
};
pub use posenc::{positional_encoding, POS_ENC_NEIGHBOR_CAPS, POS_ENC_RADII};
pub use weights::{
    init_or_load_weights, FineVariant, ModelConfig, ModelWeights, WeightSource, POS_ENC_HIDDEN,
};

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

/// `(N+1) × C` features whose row 0 is the background token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    features: Array2<f64>,
}

impl FeatureBlock {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.nrows() < 1 {
            return Err(Error::ShapeMismatch {
                expected: "at least the background row".into(),
                actual: "0 rows".into(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "features contain non-finite values".into(),
            ));
        }
        Ok(Self { features })
    }

    /// Stacks a background token over per-point feature rows.
    pub fn with_background(background: ArrayView1<f64>, points: ArrayView2<f64>) -> Result<Self> {
        if points.nrows() > 0 && points.ncols() != background.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("point feature width {}", background.len()),
                actual: format!("{}", points.ncols()),
            });
        }
        let mut features = Array2::zeros((points.nrows() + 1, background.len()));
        features.row_mut(0).assign(&background);
        if points.nrows() > 0 {
            features.slice_mut(ndarray::s![1.., ..]).assign(&points);
        }
        Self::new(features)
    }

    /// Point count excluding the background row.
    pub fn point_count(&self) -> usize {
        self.features.nrows() - 1
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.features
    }
}

/// Applies the linear layer stored at `{prefix}.w` / `{prefix}.b`.
pub fn apply_linear(w: &ModelWeights, prefix: &str, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let weight = w.mat(&format!("{prefix}.w"))?;
    let bias = w.vec(&format!("{prefix}.b"))?;
    if x.ncols() != weight.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("input width {}", weight.ncols()),
            actual: format!("{}", x.ncols()),
        });
    }
    let mut out = x.dot(&weight.t());
    out += &bias.insert_axis(Axis(0));
    Ok(out)
}
