//! Three-term object matching score for proposal filtering.
//!
//! Each proposal is compared against a bank of rendered templates: a
//! semantic term over class embeddings, an appearance term over patch
//! embeddings, and a geometric term comparing the proposal box with the
//! projection of the coarsely posed model. A visible ratio estimated from
//! the template patches weights the geometric term.

use crate::error::{Error, Result};
use crate::geometry::{
    bbox_iou, project_points_bbox, transform_points, BBox2D, Camera, PointCloud, Pose,
};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Number of templates rendered per object by default.
pub const DEFAULT_TEMPLATE_COUNT: usize = 42;
/// Default number of top semantic similarities averaged into `s_sem`.
pub const DEFAULT_TOP_K: usize = 5;
/// Patch visibility threshold for the visible ratio.
pub const DEFAULT_DELTA_VIS: f64 = 0.5;
/// Default acceptance threshold on the combined matching score.
pub const DEFAULT_DELTA_M: f64 = 0.5;

/// Class embedding plus the patch embeddings inside an object mask.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    cls: Array1<f64>,
    patches: Array2<f64>,
}

impl EmbeddingSet {
    /// Zero-norm class or patch embeddings are rejected at ingestion.
    pub fn new(cls: Array1<f64>, patches: Array2<f64>) -> Result<Self> {
        if cls.iter().any(|v| !v.is_finite()) || patches.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "embeddings contain non-finite values".into(),
            ));
        }
        if norm(&cls.view()) <= 0.0 {
            return Err(Error::DegenerateInput("class embedding has zero norm".into()));
        }
        if !patches.is_empty() && patches.ncols() != cls.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("patch width {}", cls.len()),
                actual: format!("{}", patches.ncols()),
            });
        }
        for (i, row) in patches.rows().into_iter().enumerate() {
            if norm(&row) <= 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "patch embedding {i} has zero norm"
                )));
            }
        }
        Ok(Self { cls, patches })
    }

    pub fn cls(&self) -> ArrayView1<'_, f64> {
        self.cls.view()
    }

    pub fn patch_count(&self) -> usize {
        self.patches.nrows()
    }
}

/// One rendered viewpoint: its embeddings and the render rotation.
#[derive(Debug, Clone)]
pub struct Template {
    pub embedding: EmbeddingSet,
    pub rotation: Matrix3<f64>,
}

/// Immutable set of templates for one object.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    templates: Vec<Template>,
}

impl TemplateBank {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::EmptyBank);
        }
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn template(&self, i: usize) -> &Template {
        &self.templates[i]
    }
}

/// Per-proposal inputs and, once computed, the score terms.
#[derive(Debug, Clone)]
pub struct ProposalRecord {
    pub embedding: EmbeddingSet,
    pub bbox: BBox2D,
    /// Mean of the proposal's cropped 3D points, camera frame.
    pub points_mean: Vector3<f64>,
    pub scores: Option<ScoreTerms>,
}

/// The three score terms, the visible ratio, and their combination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoreTerms {
    pub s_sem: f64,
    pub best_template: usize,
    pub s_appe: f64,
    pub r_vis: f64,
    pub s_geo: f64,
    pub s_m: f64,
}

fn norm(v: &ArrayView1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn cosine(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.dot(b) / (norm(a) * norm(b))
}

/// Mean of the top-`k` cosine similarities between the proposal class
/// embedding and the template class embeddings, plus the argmax template.
///
/// `k` is clamped to the bank size; argmax ties break to the lowest index.
pub fn semantic_score(
    proposal: &EmbeddingSet,
    bank: &TemplateBank,
    k: usize,
) -> Result<(f64, usize)> {
    if k == 0 {
        return Err(Error::InvalidCount {
            requested: 0,
            available: bank.len(),
        });
    }
    let mut sims: Vec<f64> = bank
        .templates
        .iter()
        .map(|t| cosine(&proposal.cls(), &t.embedding.cls()))
        .collect();
    // argmax with ties to the lowest index
    let mut best = 0usize;
    for i in 1..sims.len() {
        if sims[i] > sims[best] {
            best = i;
        }
    }
    let k = k.min(sims.len());
    sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let s_sem = sims[..k].iter().sum::<f64>() / k as f64;
    Ok((s_sem, best))
}

/// For each proposal patch, the max cosine similarity over template
/// patches; `s_appe` is the mean over proposal patches.
pub fn appearance_score(proposal: &EmbeddingSet, best_template: &EmbeddingSet) -> Result<f64> {
    if proposal.patch_count() == 0 || best_template.patch_count() == 0 {
        return Err(Error::EmptyPatches);
    }
    let mut total = 0.0;
    for p in proposal.patches.rows() {
        let mut best = f64::NEG_INFINITY;
        for t in best_template.patches.rows() {
            best = best.max(cosine(&p, &t));
        }
        total += best;
    }
    Ok(total / proposal.patch_count() as f64)
}

/// Fraction of template patches whose best proposal-patch similarity
/// reaches `delta_vis` — the reverse direction of the appearance score.
pub fn visible_ratio(
    proposal: &EmbeddingSet,
    best_template: &EmbeddingSet,
    delta_vis: f64,
) -> Result<f64> {
    if best_template.patch_count() == 0 {
        return Err(Error::EmptyPatches);
    }
    let mut visible = 0usize;
    for t in best_template.patches.rows() {
        let mut best = f64::NEG_INFINITY;
        for p in proposal.patches.rows() {
            best = best.max(cosine(&p, &t));
        }
        if best >= delta_vis {
            visible += 1;
        }
    }
    Ok(visible as f64 / best_template.patch_count() as f64)
}

/// IoU between the proposal box and the projection of the model under the
/// coarse pose (best-template rotation, mean crop location).
pub fn geometric_score(
    best_rotation: &Matrix3<f64>,
    points_mean: &Vector3<f64>,
    model: &PointCloud,
    cam: &Camera,
    proposal_bbox: &BBox2D,
) -> Result<f64> {
    let pose = Pose::new(*best_rotation, *points_mean)?;
    let projected = project_points_bbox(&transform_points(&pose, model), cam)?;
    Ok(bbox_iou(proposal_bbox, &projected))
}

/// `s_m = (s_sem + s_appe + r_vis·s_geo) / (2 + r_vis)`.
pub fn object_matching_score(s_sem: f64, s_appe: f64, s_geo: f64, r_vis: f64) -> f64 {
    (s_sem + s_appe + r_vis * s_geo) / (2.0 + r_vis)
}

/// Indices of records with `s_m ≥ delta_m`, in descending score order.
pub fn filter_proposals(records: &[ProposalRecord], delta_m: f64) -> Result<Vec<usize>> {
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let scores = r.scores.as_ref().ok_or(Error::UnscoredRecord { index: i })?;
        if scores.s_m >= delta_m {
            kept.push((i, scores.s_m));
        }
    }
    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(kept.into_iter().map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array2};

    fn set(cls: &[f64], patches: Vec<Vec<f64>>) -> EmbeddingSet {
        let c = cls.len();
        let flat: Vec<f64> = patches.iter().flatten().copied().collect();
        let p = Array2::from_shape_vec((patches.len(), c), flat).unwrap();
        EmbeddingSet::new(arr1(cls), p).unwrap()
    }

    fn bank_from_cls(cls_list: &[&[f64]]) -> TemplateBank {
        TemplateBank::new(
            cls_list
                .iter()
                .map(|c| Template {
                    embedding: set(c, vec![c.to_vec()]),
                    rotation: Matrix3::identity(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn semantic_score_cases() {
        let p = set(&[1.0, 0.0], vec![vec![1.0, 0.0]]);
        let identical = bank_from_cls(&[&[2.0, 0.0], &[5.0, 0.0], &[0.5, 0.0]]);
        let (s, best) = semantic_score(&p, &identical, 2).unwrap();
        assert_abs_diff_eq!(s, 1.0);
        assert_eq!(best, 0, "ties break to the lowest index");

        let orthogonal = bank_from_cls(&[&[0.0, 1.0], &[0.0, 3.0]]);
        let (s, _) = semantic_score(&p, &orthogonal, 2).unwrap();
        assert_abs_diff_eq!(s, 0.0);

        // sims {1.0, 0.5, 0.0}: top-2 mean = 0.75
        let mixed = bank_from_cls(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let p45 = set(&[1.0, 1.0], vec![vec![1.0, 1.0]]);
        let sims: Vec<f64> = (0..3)
            .map(|i| {
                cosine(
                    &p45.cls(),
                    &mixed.template(i).embedding.cls(),
                )
            })
            .collect();
        let (s, best) = semantic_score(&p45, &mixed, 2).unwrap();
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_abs_diff_eq!(s, (sorted[0] + sorted[1]) / 2.0, epsilon = 1e-15);
        assert_eq!(best, 2);

        // hand case: sims {1.0, 0.5, 0.0} -> top-2 mean 0.75
        let hand = bank_from_cls(&[&[1.0, 0.0], &[1.0, 3f64.sqrt()], &[0.0, 1.0]]);
        let (s, _) = semantic_score(&p, &hand, 2).unwrap();
        assert_abs_diff_eq!(s, 0.75, epsilon = 1e-12);

        assert!(semantic_score(&p, &identical, 0).is_err());
        assert!(TemplateBank::new(vec![]).is_err());
    }

    #[test]
    fn semantic_best_invariant_to_non_best_permutation() {
        let p = set(&[1.0, 0.2], vec![vec![1.0, 0.0]]);
        let a = bank_from_cls(&[&[0.1, 1.0], &[1.0, 0.2], &[0.4, 0.4]]);
        let b = bank_from_cls(&[&[0.4, 0.4], &[1.0, 0.2], &[0.1, 1.0]]);
        let (sa, ba) = semantic_score(&p, &a, 3).unwrap();
        let (sb, bb) = semantic_score(&p, &b, 3).unwrap();
        assert_abs_diff_eq!(sa, sb, epsilon = 1e-15);
        assert_eq!(ba, 1);
        assert_eq!(bb, 1);
    }

    #[test]
    fn appearance_score_cases() {
        let a = set(&[1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_abs_diff_eq!(appearance_score(&a, &a).unwrap(), 1.0);

        let ortho = set(&[1.0, 0.0], vec![vec![0.0, 1.0]]);
        let px = set(&[1.0, 0.0], vec![vec![1.0, 0.0]]);
        assert_abs_diff_eq!(appearance_score(&px, &ortho).unwrap(), 0.0);

        // proposal patches with best sims 0.8 and 0.4 -> mean 0.6
        let t = set(&[1.0, 0.0, 0.0], vec![vec![1.0, 0.0, 0.0]]);
        let p2 = set(
            &[1.0, 0.0, 0.0],
            vec![vec![0.8, 0.6, 0.0], vec![0.4, 0.84f64.sqrt(), 0.0]],
        );
        assert_abs_diff_eq!(appearance_score(&p2, &t).unwrap(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn appearance_scale_invariance() {
        let t = set(&[1.0, 1.0], vec![vec![0.3, 0.7], vec![0.9, 0.1]]);
        let p = set(&[1.0, 1.0], vec![vec![0.5, 0.5]]);
        let p_scaled = set(&[3.0, 3.0], vec![vec![2.5, 2.5]]);
        assert_abs_diff_eq!(
            appearance_score(&p, &t).unwrap(),
            appearance_score(&p_scaled, &t).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn visible_ratio_cases() {
        let t = set(
            &[1.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.0]],
        );
        assert_abs_diff_eq!(visible_ratio(&t, &t, DEFAULT_DELTA_VIS).unwrap(), 1.0);

        // every template patch orthogonal to the only proposal patch
        let p = set(&[1.0, 0.0], vec![vec![0.0, 1.0]]);
        let t_orth = set(&[1.0, 0.0], vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_abs_diff_eq!(visible_ratio(&p, &t_orth, 0.5).unwrap(), 0.0);

        // 3 of 4 template patches matched at >= 0.5
        let p34 = set(&[1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_abs_diff_eq!(visible_ratio(&p34, &t, 0.5).unwrap(), 0.75);
    }

    #[test]
    fn geometric_score_cases() {
        use crate::geometry::Camera;
        let cam = Camera::new(100.0, 100.0, 112.0, 112.0, 224, 224).unwrap();
        let half = 0.5;
        let cube: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                Vector3::new(
                    if i & 1 == 0 { -half } else { half },
                    if i & 2 == 0 { -half } else { half },
                    if i & 4 == 0 { -half } else { half },
                )
            })
            .collect();
        let model = PointCloud::new(cube).unwrap();
        let mean = Vector3::new(0.0, 0.0, 4.0);
        let projected = project_points_bbox(
            &transform_points(&Pose::new(Matrix3::identity(), mean).unwrap(), &model),
            &cam,
        )
        .unwrap();

        // identical boxes -> 1
        let s = geometric_score(&Matrix3::identity(), &mean, &model, &cam, &projected).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);

        // disjoint boxes -> 0
        let far = BBox2D::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let s = geometric_score(&Matrix3::identity(), &mean, &model, &cam, &far).unwrap();
        assert_abs_diff_eq!(s, 0.0);

        // equal boxes offset by half the projected width -> IoU = 1/3
        let w = projected.x_max - projected.x_min;
        let shifted = BBox2D::new(
            projected.x_min + w / 2.0,
            projected.y_min,
            projected.x_max + w / 2.0,
            projected.y_max,
        )
        .unwrap();
        let s = geometric_score(&Matrix3::identity(), &mean, &model, &cam, &shifted).unwrap();
        assert_abs_diff_eq!(s, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn combination_cases() {
        assert_abs_diff_eq!(object_matching_score(1.0, 1.0, 1.0, 1.0), 1.0);
        // r_vis = 0 degenerates to the two-term mean
        assert_abs_diff_eq!(object_matching_score(0.8, 0.4, 0.9, 0.0), 0.6);
        assert_abs_diff_eq!(
            object_matching_score(0.8, 0.6, 0.4, 0.5),
            0.64,
            epsilon = 1e-15
        );
    }

    #[test]
    fn combination_is_convex_and_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        for _ in 0..500 {
            let s1: f64 = rng.random();
            let s2: f64 = rng.random();
            let s3: f64 = rng.random();
            let r: f64 = rng.random();
            let s = object_matching_score(s1, s2, s3, r);
            let lo = s1.min(s2).min(s3);
            let hi = s1.max(s2).max(s3);
            assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            // raising any single term never lowers the combination
            let d = 0.05;
            assert!(object_matching_score(s1 + d, s2, s3, r) >= s - 1e-12);
            assert!(object_matching_score(s1, s2 + d, s3, r) >= s - 1e-12);
            assert!(object_matching_score(s1, s2, s3 + d, r) >= s - 1e-12);
            // all terms equal with full visibility reproduces the value
            assert_abs_diff_eq!(object_matching_score(s1, s1, s1, 1.0), s1, epsilon = 1e-12);
        }
    }

    #[test]
    fn filtering_cases() {
        let emb = set(&[1.0, 0.0], vec![vec![1.0, 0.0]]);
        let bbox = BBox2D::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mk = |s_m: Option<f64>| ProposalRecord {
            embedding: emb.clone(),
            bbox,
            points_mean: Vector3::new(0.0, 0.0, 1.0),
            scores: s_m.map(|v| ScoreTerms {
                s_sem: v,
                best_template: 0,
                s_appe: v,
                r_vis: 1.0,
                s_geo: v,
                s_m: v,
            }),
        };
        let records = vec![mk(Some(0.7)), mk(Some(0.3)), mk(Some(0.5))];
        assert_eq!(filter_proposals(&records, 0.4).unwrap(), vec![0, 2]);
        assert_eq!(filter_proposals(&records, 0.9).unwrap(), Vec::<usize>::new());
        assert_eq!(filter_proposals(&records, 0.0).unwrap(), vec![0, 2, 1]);
        let unscored = vec![mk(None)];
        assert!(matches!(
            filter_proposals(&unscored, 0.0),
            Err(Error::UnscoredRecord { index: 0 })
        ));
    }

    #[test]
    fn zero_norm_patch_rejected_at_ingestion() {
        let bad = EmbeddingSet::new(arr1(&[1.0, 0.0]), arr2(&[[0.0, 0.0]]));
        assert!(bad.is_err());
    }
}
