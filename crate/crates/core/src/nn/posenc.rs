//! Multi-scale set-abstraction positional encoder.
//!
//! For each point, neighbors inside two ball radii are gathered (nearest
//! first, capped per scale), their local offsets run through a shared
//! two-layer MLP, max-pooled per scale, concatenated, and projected to C
//! channels. Rows are unit-normalized and scaled by a learned gain so the
//! positional term has a controlled weight against the descriptors.

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::nn::weights::{ModelWeights, POS_ENC_HIDDEN};
use crate::par;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Ball-query radii in unit-sphere coordinates.
pub const POS_ENC_RADII: [f64; 2] = [0.1, 0.2];
/// Neighbor caps per scale.
pub const POS_ENC_NEIGHBOR_CAPS: [usize; 2] = [16, 32];

struct ScaleMlp<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

impl<'a> ScaleMlp<'a> {
    fn fetch(w: &'a ModelWeights, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: w.mat(&format!("{prefix}.l1.w"))?,
            b1: w.vec(&format!("{prefix}.l1.b"))?,
            w2: w.mat(&format!("{prefix}.l2.w"))?,
            b2: w.vec(&format!("{prefix}.l2.b"))?,
        })
    }

    /// Shared per-point MLP with ReLU, then max-pool over the group.
    fn pooled(&self, offsets: &[[f64; 3]]) -> Array1<f64> {
        let h1 = POS_ENC_HIDDEN[0];
        let h2 = POS_ENC_HIDDEN[1];
        let mut pooled = Array1::from_elem(h2, f64::NEG_INFINITY);
        let mut hidden = vec![0.0f64; h1];
        for off in offsets {
            for (i, h) in hidden.iter_mut().enumerate() {
                let mut acc = self.b1[i];
                for (j, &x) in off.iter().enumerate() {
                    acc += self.w1[(i, j)] * x;
                }
                *h = acc.max(0.0);
            }
            for i in 0..h2 {
                let mut acc = self.b2[i];
                for (j, &h) in hidden.iter().enumerate() {
                    acc += self.w2[(i, j)] * h;
                }
                let v = acc.max(0.0);
                if v > pooled[i] {
                    pooled[i] = v;
                }
            }
        }
        pooled
    }
}

/// Positional encodings for every point, `N × C`.
///
/// The block path points at a parameter subtree laid out like
/// `fine.pos_enc`. The background token is handled by the caller (it has
/// no position and receives a zero encoding).
pub fn positional_encoding(
    pc: &PointCloud,
    weights: &ModelWeights,
    block_path: &str,
) -> Result<Array2<f64>> {
    let c = weights.config().channels;
    let mlp0 = ScaleMlp::fetch(weights, &format!("{block_path}.s0"))?;
    let mlp1 = ScaleMlp::fetch(weights, &format!("{block_path}.s1"))?;
    let proj_w = weights.mat(&format!("{block_path}.proj.w"))?;
    let proj_b = weights.vec(&format!("{block_path}.proj.b"))?;
    let gain = weights.scalar(&format!("{block_path}.gain"))?;

    let pts = pc.points();
    let n = pts.len();
    let r_max2 = POS_ENC_RADII[1] * POS_ENC_RADII[1];
    let h2 = POS_ENC_HIDDEN[1];

    let rows: Vec<Vec<f64>> = par::map_range(n, |i| {
        // one pass collecting candidates inside the outer radius,
        // nearest-first with index tie-break, capped at the larger cap
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for (j, p) in pts.iter().enumerate() {
            let d2 = (p - pts[i]).norm_squared();
            if d2 <= r_max2 {
                cand.push((d2, j));
            }
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        let mut concat = Array1::zeros(2 * h2);
        for (scale, (mlp, (&radius, &cap))) in [&mlp0, &mlp1]
            .iter()
            .zip(POS_ENC_RADII.iter().zip(POS_ENC_NEIGHBOR_CAPS.iter()))
            .enumerate()
        {
            let r2 = radius * radius;
            let mut offsets: Vec<[f64; 3]> = Vec::with_capacity(cap);
            for &(d2, j) in cand.iter() {
                if d2 > r2 {
                    break;
                }
                if offsets.len() >= cap {
                    break;
                }
                let off = pts[j] - pts[i];
                offsets.push([off.x, off.y, off.z]);
            }
            if offsets.is_empty() {
                offsets.push([0.0, 0.0, 0.0]); // the point itself
            }
            let pooled = mlp.pooled(&offsets);
            concat
                .slice_mut(ndarray::s![scale * h2..(scale + 1) * h2])
                .assign(&pooled);
        }

        // project to C channels, then normalize the row and apply the gain
        let mut row = vec![0.0f64; c];
        for (k, r) in row.iter_mut().enumerate() {
            let mut acc = proj_b[k];
            for (j, &x) in concat.iter().enumerate() {
                acc += proj_w[(k, j)] * x;
            }
            *r = acc;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v = *v / norm * gain;
        }
        row
    });

    let mut out = Array2::zeros((n, c));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&Array1::from_vec(row));
    }
    Ok(out)
}
