//! Correspondence labels and the cross-entropy matching objective, with
//! analytic gradients at the loss head and helpers for noise-augmented
//! initial poses.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};
use crate::rng::{bounded_rotation, derive_seed, unit_vector};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Distance threshold deciding whether a point has a correspondence, in
/// unit-sphere coordinates.
pub const DELTA_DIS: f64 = 0.15;

/// Ground-truth class labels; 0 is the background class, `k` means point
/// `k-1` of the other set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceLabels {
    pub y_m: Vec<usize>,
    pub y_o: Vec<usize>,
}

/// Nearest-neighbor labels under the ground-truth transform.
///
/// `gt` maps proposal points into the object frame (both clouds
/// normalized). A point farther than `delta_dis` from every counterpart
/// gets the background label 0; nearest-neighbor ties break to the lowest
/// index.
pub fn correspondence_labels(
    pc_m: &PointCloud,
    pc_o: &PointCloud,
    gt: &Pose,
    delta_dis: f64,
) -> CorrespondenceLabels {
    let transformed: Vec<_> = pc_m.points().iter().map(|p| gt.apply(p)).collect();
    let nearest = |p: &nalgebra::Vector3<f64>, set: &[nalgebra::Vector3<f64>]| -> (usize, f64) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, q) in set.iter().enumerate() {
            let d = (p - q).norm();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        (best, best_d)
    };
    let y_m = transformed
        .iter()
        .map(|p| {
            let (k, d) = nearest(p, pc_o.points());
            if d < delta_dis {
                k + 1
            } else {
                0
            }
        })
        .collect();
    let y_o = pc_o
        .points()
        .iter()
        .map(|q| {
            let (k, d) = nearest(q, &transformed);
            if d < delta_dis {
                k + 1
            } else {
                0
            }
        })
        .collect();
    CorrespondenceLabels { y_m, y_o }
}

fn row_ce_and_grad(
    logits: &[f64],
    target: usize,
    weight: f64,
    grad_row: &mut [f64],
) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in logits {
        sum += (v - max).exp();
    }
    let log_sum = max + sum.ln();
    for (g, &v) in grad_row.iter_mut().zip(logits) {
        *g += weight * (v - log_sum).exp();
    }
    grad_row[target] -= weight;
    weight * (log_sum - logits[target])
}

/// One direction of the objective: classify rows 1.. over columns
/// (`along_rows`) or columns 1.. over rows, mean-reduced.
fn directional_ce(
    a: ArrayView2<f64>,
    targets: &[usize],
    along_rows: bool,
) -> (f64, Array2<f64>) {
    let (rows, cols) = a.dim();
    let mut grad = Array2::<f64>::zeros((rows, cols));
    let mut loss = 0.0;
    if along_rows {
        let w = 1.0 / targets.len() as f64;
        let mut buf = Vec::with_capacity(cols);
        for i in 1..rows {
            buf.clear();
            buf.extend(a.row(i).iter());
            let mut g = vec![0.0; cols];
            loss += row_ce_and_grad(&buf, targets[i - 1], w, &mut g);
            for (j, gv) in g.iter().enumerate() {
                grad[(i, j)] += gv;
            }
        }
    } else {
        let w = 1.0 / targets.len() as f64;
        let mut buf = Vec::with_capacity(rows);
        for j in 1..cols {
            buf.clear();
            buf.extend(a.column(j).iter());
            let mut g = vec![0.0; rows];
            loss += row_ce_and_grad(&buf, targets[j - 1], w, &mut g);
            for (i, gv) in g.iter().enumerate() {
                grad[(i, j)] += gv;
            }
        }
    }
    (loss, grad)
}

/// Softmax cross-entropy over the raw attention matrix, both directions.
///
/// Rows 1.. are classified over the `N_o+1` columns against `y_m`;
/// columns 1.. over the `N_m+1` rows against `y_o`. Each term is
/// mean-reduced over its points. Returns the loss and its analytic
/// gradient with respect to every entry of `a`.
pub fn matching_loss(
    a: ArrayView2<f64>,
    labels: &CorrespondenceLabels,
) -> Result<(f64, Array2<f64>)> {
    let (rows, cols) = a.dim();
    let (n_m, n_o) = (rows - 1, cols - 1);
    if labels.y_m.len() != n_m || labels.y_o.len() != n_o {
        return Err(Error::ShapeMismatch {
            expected: format!("labels for {n_m} and {n_o} points"),
            actual: format!("{} and {}", labels.y_m.len(), labels.y_o.len()),
        });
    }
    if labels.y_m.iter().any(|&y| y > n_o) || labels.y_o.iter().any(|&y| y > n_m) {
        return Err(Error::IndexOutOfRange {
            index: *labels.y_m.iter().chain(&labels.y_o).max().unwrap(),
            len: n_o.max(n_m) + 1,
        });
    }
    let (loss_m, grad_m) = directional_ce(a, &labels.y_m, true);
    let (loss_o, grad_o) = directional_ce(a, &labels.y_o, false);
    Ok((loss_m + loss_o, grad_m + grad_o))
}

/// Sum of the per-block losses of both matching stages.
pub fn total_objective(per_block_losses_coarse: &[f64], per_block_losses_fine: &[f64]) -> f64 {
    per_block_losses_coarse.iter().sum::<f64>() + per_block_losses_fine.iter().sum::<f64>()
}

/// Composes `gt` with bounded rotation and translation noise: the
/// rotation noise multiplies on the left (so the geodesic distance to
/// `gt` is the sampled angle) and the translation noise adds.
pub fn perturb_gt_pose(gt: &Pose, rot_deg_max: f64, trans_max: f64, seed: u64) -> Pose {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x9e1));
    let rot_noise = bounded_rotation(&mut rng, rot_deg_max.to_radians());
    let t_noise = unit_vector(&mut rng) * (rng.random::<f64>() * trans_max);
    Pose {
        rotation: rot_noise * gt.rotation,
        translation: gt.translation + t_noise,
    }
}
