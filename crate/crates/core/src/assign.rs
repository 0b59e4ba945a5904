//! Background-token point assignment and pose hypothesis selection.
//!
//! Two feature sets, each carrying a background token in row 0, are
//! compared through a raw attention matrix. A row-softmax/column-softmax
//! product turns it into a soft assignment whose first row and column
//! absorb points without a counterpart, which is what makes the matching
//! partial-to-partial. An entropic optimal-transport baseline with a slack
//! row/column is kept alongside for the ablation.

use crate::error::{Error, Result};
use crate::geometry::{kabsch_core, svd3, PointCloud, Pose};
use crate::par;
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Epsilon guard in the hypothesis score denominator.
pub const S_HYP_EPSILON: f64 = 1e-6;
/// Second-singular-value threshold below which a triplet is collinear.
pub const COLLINEARITY_TOL: f64 = 1e-9;
/// Resampling attempts allowed per hypothesis before giving up.
const TRIPLET_RETRY_CAP: usize = 1000;

/// `(N_m+1) × (N_o+1)` score matrix; row 0 and column 0 belong to the
/// background tokens.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    values: Array2<f64>,
}

impl AssignmentMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(Error::ShapeMismatch {
                expected: "at least 2×2 (one point plus background on each side)".into(),
                actual: format!("{}×{}", values.nrows(), values.ncols()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "assignment matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Point counts `(N_m, N_o)` excluding the background row/column.
    pub fn point_counts(&self) -> (usize, usize) {
        (self.values.nrows() - 1, self.values.ncols() - 1)
    }
}

/// Foreground flags per point; `false` means assigned to the background.
#[derive(Debug, Clone)]
pub struct ForegroundMasks {
    pub mask_m: Vec<bool>,
    pub mask_o: Vec<bool>,
}

impl ForegroundMasks {
    pub fn foreground_m(&self) -> usize {
        self.mask_m.iter().filter(|&&b| b).count()
    }

    pub fn foreground_o(&self) -> usize {
        self.mask_o.iter().filter(|&&b| b).count()
    }
}

/// Nonnegative `N_m × N_o` pair scores with background rows/columns zeroed.
///
/// Values are kept unnormalized; [`MatchProbabilities::normalized`] yields
/// the sum-to-one version used as a sampling distribution.
#[derive(Debug, Clone)]
pub struct MatchProbabilities {
    values: Array2<f64>,
    total: f64,
}

impl MatchProbabilities {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn normalized(&self) -> Array2<f64> {
        &self.values / self.total
    }
}

/// A candidate pose with its triplet fit residual and, once scored, the
/// pose matching score.
#[derive(Debug, Clone)]
pub struct PoseHypothesis {
    pub pose: Pose,
    pub mean_pair_distance: f64,
    pub s_hyp: Option<f64>,
}

/// Raw attention matrix `[f_bg_m; F_m] · [f_bg_o; F_o]ᵀ`.
///
/// Both feature blocks must carry their background token in row 0.
pub fn attention_matrix(feats_m: ArrayView2<f64>, feats_o: ArrayView2<f64>) -> Result<AssignmentMatrix> {
    if feats_m.ncols() != feats_o.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("feature width {}", feats_m.ncols()),
            actual: format!("{}", feats_o.ncols()),
        });
    }
    AssignmentMatrix::new(feats_m.dot(&feats_o.t()))
}

fn softmax_rows_scaled(a: &Array2<f64>, tau: f64) -> Array2<f64> {
    let (rows, cols) = a.dim();
    let mut out = a.clone();
    let slice = out.as_slice_mut().expect("row-major layout");
    par::for_each_chunk_mut(slice, cols, |_, row| {
        let mut max = f64::NEG_INFINITY;
        for v in row.iter() {
            max = max.max(*v / tau);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / tau - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    });
    debug_assert_eq!(out.dim(), (rows, cols));
    out
}

/// Soft assignment `softmax_row(A/τ) ⊙ softmax_col(A/τ)`.
pub fn soft_assignment(a: &AssignmentMatrix, tau: f64) -> Result<AssignmentMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let row = softmax_rows_scaled(&a.values, tau);
    let col_t = softmax_rows_scaled(&a.values.t().to_owned(), tau);
    let mut out = row;
    let cols = out.ncols();
    let col_t_ref = &col_t;
    let slice = out.as_slice_mut().expect("row-major layout");
    par::for_each_chunk_mut(slice, cols, |i, rowbuf| {
        for (j, v) in rowbuf.iter_mut().enumerate() {
            *v *= col_t_ref[(j, i)];
        }
    });
    AssignmentMatrix::new(out)
}

/// Background flags from the soft assignment's argmax structure.
///
/// A proposal point is background iff the argmax over its row lands in
/// column 0; symmetrically for object points over columns. Ties break
/// toward foreground.
pub fn foreground_masks(a_tilde: &AssignmentMatrix) -> ForegroundMasks {
    let v = &a_tilde.values;
    let (n_m, n_o) = a_tilde.point_counts();
    let mask_m = (0..n_m)
        .map(|i| {
            let row = v.row(i + 1);
            let bg = row[0];
            let best_fg = row.iter().skip(1).copied().fold(f64::NEG_INFINITY, f64::max);
            bg <= best_fg
        })
        .collect();
    let mask_o = (0..n_o)
        .map(|j| {
            let col = v.column(j + 1);
            let bg = col[0];
            let best_fg = col.iter().skip(1).copied().fold(f64::NEG_INFINITY, f64::max);
            bg <= best_fg
        })
        .collect();
    ForegroundMasks { mask_m, mask_o }
}

/// Masked, γ-sharpened pair scores `M_m · Ã[1:,1:]^γ · M_oᵀ`.
pub fn match_probabilities(
    a_tilde: &AssignmentMatrix,
    masks: &ForegroundMasks,
    gamma: f64,
) -> Result<MatchProbabilities> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidExponent(gamma));
    }
    let (n_m, n_o) = a_tilde.point_counts();
    if masks.mask_m.len() != n_m || masks.mask_o.len() != n_o {
        return Err(Error::ShapeMismatch {
            expected: format!("masks of length {n_m} and {n_o}"),
            actual: format!("{} and {}", masks.mask_m.len(), masks.mask_o.len()),
        });
    }
    let mut values = Array2::zeros((n_m, n_o));
    let mut total = 0.0;
    for i in 0..n_m {
        if !masks.mask_m[i] {
            continue;
        }
        for j in 0..n_o {
            if !masks.mask_o[j] {
                continue;
            }
            let a = a_tilde.values[(i + 1, j + 1)];
            let v = if gamma == 1.0 { a } else { a.powf(gamma) };
            values[(i, j)] = v;
            total += v;
        }
    }
    if total <= 0.0 {
        return Err(Error::AllBackground);
    }
    Ok(MatchProbabilities { values, total })
}

fn triplet_second_singular_value(points: [&Vector3<f64>; 3]) -> f64 {
    let c = (points[0] + points[1] + points[2]) / 3.0;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    svd3(&cov).sigma.y
}

/// Draws `count` triplets of point pairs with probability proportional to
/// `p`, rejecting and redrawing triplets whose source or destination
/// points are near-collinear (bounded retries). Deterministic under `seed`.
pub fn sample_correspondence_triplets(
    p: &MatchProbabilities,
    pc_m: &PointCloud,
    pc_o: &PointCloud,
    count: usize,
    seed: u64,
) -> Result<Vec<[(usize, usize); 3]>> {
    let (n_m, n_o) = p.values.dim();
    if pc_m.len() != n_m || pc_o.len() != n_o {
        return Err(Error::ShapeMismatch {
            expected: format!("{n_m} proposal and {n_o} object points"),
            actual: format!("{} and {}", pc_m.len(), pc_o.len()),
        });
    }
    let positive = p.values.iter().filter(|&&v| v > 0.0).count();
    if positive < 3 {
        return Err(Error::InsufficientCorrespondence {
            found: positive,
            needed: 3,
        });
    }

    // cumulative distribution over flattened pairs
    let flat = p.values.as_slice().expect("row-major layout");
    let mut cumulative = Vec::with_capacity(flat.len());
    let mut acc = 0.0;
    for &v in flat {
        acc += v;
        cumulative.push(acc);
    }
    let total = acc;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw_pair = |rng: &mut ChaCha12Rng| -> (usize, usize) {
        let x = rng.random::<f64>() * total;
        let mut idx = cumulative.partition_point(|&c| c <= x);
        if idx >= flat.len() {
            idx = flat.len() - 1;
        }
        (idx / n_o, idx % n_o)
    };

    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > TRIPLET_RETRY_CAP {
                return Err(Error::RetryExhausted {
                    attempts: TRIPLET_RETRY_CAP,
                });
            }
            let pairs = [draw_pair(&mut rng), draw_pair(&mut rng), draw_pair(&mut rng)];
            let src = [
                pc_m.point(pairs[0].0),
                pc_m.point(pairs[1].0),
                pc_m.point(pairs[2].0),
            ];
            let dst = [
                pc_o.point(pairs[0].1),
                pc_o.point(pairs[1].1),
                pc_o.point(pairs[2].1),
            ];
            if triplet_second_singular_value(src) < COLLINEARITY_TOL
                || triplet_second_singular_value(dst) < COLLINEARITY_TOL
            {
                continue;
            }
            triplets.push(pairs);
            break;
        }
    }
    Ok(triplets)
}

/// Samples `n_hyp` pose hypotheses from probability-weighted triplets.
///
/// Index triplets are drawn sequentially (so the seed stream stays
/// deterministic) and solved in parallel with uniform-weight Kabsch; the
/// stored residual is the mean pair distance under the fitted pose.
pub fn sample_pose_hypotheses(
    p: &MatchProbabilities,
    pc_m: &PointCloud,
    pc_o: &PointCloud,
    n_hyp: usize,
    seed: u64,
) -> Result<Vec<PoseHypothesis>> {
    if n_hyp == 0 {
        // still validate the inputs
        sample_correspondence_triplets(p, pc_m, pc_o, 0, seed)?;
        return Ok(Vec::new());
    }
    let triplets = sample_correspondence_triplets(p, pc_m, pc_o, n_hyp, seed)?;

    let solved: Vec<Result<PoseHypothesis>> = par::map_range(triplets.len(), |k| {
        let pairs = triplets[k];
        let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| *pc_m.point(i)).collect();
        let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| *pc_o.point(j)).collect();
        let pose = kabsch_core(&src, &dst, &[1.0, 1.0, 1.0])?;
        let mean_pair_distance = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| (pose.apply(s) - d).norm())
            .sum::<f64>()
            / 3.0;
        Ok(PoseHypothesis {
            pose,
            mean_pair_distance,
            s_hyp: None,
        })
    });
    solved.into_iter().collect()
}

fn hypothesis_score(pose: &Pose, pc_m: &PointCloud, pc_o: &PointCloud) -> f64 {
    // sum over proposal points of the distance to the nearest
    // inverse-transformed object point
    let rt = pose.rotation.transpose();
    let back: Vec<Vector3<f64>> = pc_o
        .points()
        .iter()
        .map(|q| rt * (q - pose.translation))
        .collect();
    let mut sum = 0.0;
    for pm in pc_m.points() {
        let mut best = f64::INFINITY;
        for b in &back {
            let d = (b - pm).norm_squared();
            if d < best {
                best = d;
            }
        }
        sum += best.sqrt();
    }
    pc_m.len() as f64 / (S_HYP_EPSILON + sum)
}

/// Keeps the `keep` hypotheses with the smallest mean pair distance,
/// scores them with `s_hyp = N_m / (ε + Σ min-distance)`, and returns the
/// best, with its score filled in.
pub fn score_and_select_pose(
    hyps: &[PoseHypothesis],
    pc_m: &PointCloud,
    pc_o: &PointCloud,
    keep: usize,
) -> Result<PoseHypothesis> {
    if hyps.is_empty() {
        return Err(Error::EmptyHypotheses);
    }
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| {
        hyps[a]
            .mean_pair_distance
            .partial_cmp(&hyps[b].mean_pair_distance)
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(keep.max(1));

    let scores = par::map_range(order.len(), |k| {
        hypothesis_score(&hyps[order[k]].pose, pc_m, pc_o)
    });
    let mut best = 0usize;
    for k in 1..scores.len() {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    let chosen = &hyps[order[best]];
    Ok(PoseHypothesis {
        pose: chosen.pose,
        mean_pair_distance: chosen.mean_pair_distance,
        s_hyp: Some(scores[best]),
    })
}

/// Outcome of the entropic optimal-transport baseline.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub assignment: AssignmentMatrix,
    /// Whether the marginal deviation fell below the tolerance.
    pub converged: bool,
    pub max_marginal_deviation: f64,
}

/// Entropic OT normalization with a slack row/column absorbing unmatched
/// mass, run in log space for `iterations` alternating updates.
///
/// Row 0 and column 0 act as the slack; after convergence every inner row
/// (including its slack entry) and every inner column (including its slack
/// entry) sums to 1 within `epsilon`. Non-convergence is flagged, not an
/// error: the result is still returned.
pub fn sinkhorn_assignment(
    a: &AssignmentMatrix,
    iterations: usize,
    epsilon: f64,
) -> Result<SinkhornResult> {
    if iterations == 0 {
        return Err(Error::InvalidCount {
            requested: 0,
            available: usize::MAX,
        });
    }
    let l = &a.values;
    let (rows, cols) = l.dim();
    let (n_m, n_o) = (rows - 1, cols - 1);
    let mut u = vec![0.0f64; rows]; // u[0] fixed at 0 (slack row)
    let mut v = vec![0.0f64; cols]; // v[0] fixed at 0 (slack column)

    for _ in 0..iterations {
        // rows 1..: u_i = -logsumexp_j(L[i,j] + v_j)
        let v_ref = &v;
        let new_u: Vec<f64> = par::map_range(n_m, |i| {
            let row = l.row(i + 1);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                max = max.max(row[j] + v_ref[j]);
            }
            let mut sum = 0.0;
            for j in 0..cols {
                sum += (row[j] + v_ref[j] - max).exp();
            }
            -(max + sum.ln())
        });
        u[1..].copy_from_slice(&new_u);

        // cols 1..: v_j = -logsumexp_i(L[i,j] + u_i)
        let u_ref = &u;
        let new_v: Vec<f64> = par::map_range(n_o, |j| {
            let col = l.column(j + 1);
            let mut max = f64::NEG_INFINITY;
            for i in 0..rows {
                max = max.max(col[i] + u_ref[i]);
            }
            let mut sum = 0.0;
            for i in 0..rows {
                sum += (col[i] + u_ref[i] - max).exp();
            }
            -(max + sum.ln())
        });
        v[1..].copy_from_slice(&new_v);
    }

    let mut t = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            t[(i, j)] = (l[(i, j)] + u[i] + v[j]).exp();
        }
    }
    let mut dev = 0.0f64;
    for i in 1..rows {
        dev = dev.max((t.row(i).sum() - 1.0).abs());
    }
    for j in 1..cols {
        dev = dev.max((t.column(j).sum() - 1.0).abs());
    }
    Ok(SinkhornResult {
        assignment: AssignmentMatrix::new(t)?,
        converged: dev < epsilon,
        max_marginal_deviation: dev,
    })
}
