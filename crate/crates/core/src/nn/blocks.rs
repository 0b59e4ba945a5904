//! Transformer blocks assembled from the attention kernels.
//!
//! All sublayers are pre-norm residual: `x + W_o·f(LN(x))`, so zeroing an
//! output projection reduces a sublayer to the identity.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::attention::{
    kernel_attention, linear, multi_head_attention, AttnParams, GeoBias, NormParams,
};
use crate::nn::weights::ModelWeights;
use crate::nn::FeatureBlock;
use ndarray::Array2;

fn check_pair(pc: &PointCloud, fb: &FeatureBlock, channels: usize) -> Result<()> {
    if fb.point_count() != pc.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature rows (+ background)", pc.len()),
            actual: format!("{}", fb.point_count()),
        });
    }
    if fb.width() != channels {
        return Err(Error::ShapeMismatch {
            expected: format!("feature width {channels}"),
            actual: format!("{}", fb.width()),
        });
    }
    Ok(())
}

/// One geometric transformer block: distance-biased self-attention within
/// each set, then cross-attention between the sets. Weights are shared
/// between the two sets and both cross directions.
pub fn geometric_transformer_block(
    pc_m: &PointCloud,
    pc_o: &PointCloud,
    fm: &FeatureBlock,
    fo: &FeatureBlock,
    weights: &ModelWeights,
    block_path: &str,
) -> Result<(FeatureBlock, FeatureBlock)> {
    let c = weights.config().channels;
    let heads = weights.config().heads;
    check_pair(pc_m, fm, c)?;
    check_pair(pc_o, fo, c)?;

    let self_ln = NormParams::fetch(weights, &format!("{block_path}.self.ln"))?;
    let self_attn = AttnParams::fetch(weights, &format!("{block_path}.self"))?;
    let dist_proj = weights.mat(&format!("{block_path}.self.dist"))?;

    let mut xm = fm.array().clone();
    let mut xo = fo.array().clone();

    for (x, pc) in [(&mut xm, pc_m), (&mut xo, pc_o)] {
        let normed = self_ln.apply(x.view());
        let bias = GeoBias {
            points_q: pc.points(),
            points_k: pc.points(),
            proj: dist_proj,
        };
        let attn = multi_head_attention(normed.view(), normed.view(), &self_attn, heads, Some(&bias))?;
        *x += &attn;
    }

    let cross_ln = NormParams::fetch(weights, &format!("{block_path}.cross.ln"))?;
    let cross_attn = AttnParams::fetch(weights, &format!("{block_path}.cross"))?;
    let nm = cross_ln.apply(xm.view());
    let no = cross_ln.apply(xo.view());
    let am = multi_head_attention(nm.view(), no.view(), &cross_attn, heads, None)?;
    let ao = multi_head_attention(no.view(), nm.view(), &cross_attn, heads, None)?;
    xm += &am;
    xo += &ao;

    Ok((FeatureBlock::new(xm)?, FeatureBlock::new(xo)?))
}

/// Kernelized cross-attention: dense queries gather information from a
/// (typically sparse) key/value block in time linear in both lengths.
pub fn linear_cross_attention(
    queries: &FeatureBlock,
    keys_values: &FeatureBlock,
    weights: &ModelWeights,
    block_path: &str,
) -> Result<FeatureBlock> {
    let c = weights.config().channels;
    let heads = weights.config().heads;
    if queries.width() != c || keys_values.width() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("feature width {c}"),
            actual: format!("{} and {}", queries.width(), keys_values.width()),
        });
    }
    let lnq = NormParams::fetch(weights, &format!("{block_path}.lnq"))?;
    let lnkv = NormParams::fetch(weights, &format!("{block_path}.lnkv"))?;
    let p = AttnParams::fetch(weights, block_path)?;

    let nq = lnq.apply(queries.view());
    let nkv = lnkv.apply(keys_values.view());
    let q = linear(nq.view(), p.wq, p.bq);
    let k = linear(nkv.view(), p.wk, p.bk);
    let v = linear(nkv.view(), p.wv, p.bv);
    let attn = kernel_attention(q.view(), k.view(), v.view(), heads)?;
    let projected = linear(attn.view(), p.wo, p.bo);

    let mut out = queries.array().clone();
    out += &projected;
    FeatureBlock::new(out)
}

fn gather_sparse(
    pc: &PointCloud,
    fb: &FeatureBlock,
    point_indices: &[usize],
) -> Result<(PointCloud, FeatureBlock)> {
    for &i in point_indices {
        if i >= pc.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: pc.len(),
            });
        }
    }
    let sparse_pc = pc.select(point_indices)?;
    // background row 0 is always part of the sparse selection
    let mut rows = Array2::zeros((point_indices.len() + 1, fb.width()));
    rows.row_mut(0).assign(&fb.array().row(0));
    for (r, &i) in point_indices.iter().enumerate() {
        rows.row_mut(r + 1).assign(&fb.array().row(i + 1));
    }
    Ok((sparse_pc, FeatureBlock::new(rows)?))
}

/// Sparse-to-dense point transformer block.
///
/// Gathers sparse features (background token always included), enhances
/// them with a geometric transformer block, and spreads the result back to
/// the dense features through kernelized cross-attention, dense side as
/// the query. `sparse_idx_*` index points, not feature rows.
pub fn sdpt_block(
    dense_m: (&PointCloud, &FeatureBlock),
    dense_o: (&PointCloud, &FeatureBlock),
    sparse_idx_m: &[usize],
    sparse_idx_o: &[usize],
    weights: &ModelWeights,
    block_path: &str,
) -> Result<(FeatureBlock, FeatureBlock)> {
    let c = weights.config().channels;
    check_pair(dense_m.0, dense_m.1, c)?;
    check_pair(dense_o.0, dense_o.1, c)?;
    let (sparse_pc_m, sparse_fm) = gather_sparse(dense_m.0, dense_m.1, sparse_idx_m)?;
    let (sparse_pc_o, sparse_fo) = gather_sparse(dense_o.0, dense_o.1, sparse_idx_o)?;

    let (enh_m, enh_o) = geometric_transformer_block(
        &sparse_pc_m,
        &sparse_pc_o,
        &sparse_fm,
        &sparse_fo,
        weights,
        &format!("{block_path}.geo"),
    )?;

    let spread = format!("{block_path}.spread");
    let out_m = linear_cross_attention(dense_m.1, &enh_m, weights, &spread)?;
    let out_o = linear_cross_attention(dense_o.1, &enh_o, weights, &spread)?;
    Ok((out_m, out_o))
}

/// Dense kernel-attention block for the transformer ablation: kernelized
/// self-attention within each set, then kernelized cross-attention
/// between the sets. No geometric bias is representable here.
pub fn linear_attention_block(
    fm: &FeatureBlock,
    fo: &FeatureBlock,
    weights: &ModelWeights,
    block_path: &str,
) -> Result<(FeatureBlock, FeatureBlock)> {
    let self_path = format!("{block_path}.lin_self");
    let xm = linear_cross_attention(fm, fm, weights, &self_path)?;
    let xo = linear_cross_attention(fo, fo, weights, &self_path)?;
    let cross_path = format!("{block_path}.lin_cross");
    let ym = linear_cross_attention(&xm, &xo, weights, &cross_path)?;
    let yo = linear_cross_attention(&xo, &xm, weights, &cross_path)?;
    Ok((ym, yo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::weights::{FineVariant, ModelConfig, ModelWeights};
    use nalgebra::Vector3;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            channels: 16,
            heads: 2,
            coarse_blocks: 1,
            fine_blocks: 1,
            fine_variant: FineVariant::Sdpt,
        }
    }

    fn random_setup(
        n_m: usize,
        n_o: usize,
        seed: u64,
    ) -> (PointCloud, PointCloud, FeatureBlock, FeatureBlock) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mk_pc = |rng: &mut ChaCha12Rng, n: usize| {
            PointCloud::new((0..n).map(|_| crate::rng::ball_point(rng)).collect()).unwrap()
        };
        let pc_m = mk_pc(&mut rng, n_m);
        let pc_o = mk_pc(&mut rng, n_o);
        let mk_fb = |rng: &mut ChaCha12Rng, n: usize| {
            FeatureBlock::new(Array2::from_shape_fn((n + 1, 16), |_| {
                rng.random::<f64>() - 0.5
            }))
            .unwrap()
        };
        let fm = mk_fb(&mut rng, n_m);
        let fo = mk_fb(&mut rng, n_o);
        (pc_m, pc_o, fm, fo)
    }

    #[test]
    fn geometric_block_preserves_shapes() {
        let w = ModelWeights::seeded(1, &config()).unwrap();
        let (pc_m, pc_o, fm, fo) = random_setup(7, 5, 2);
        let (om, oo) =
            geometric_transformer_block(&pc_m, &pc_o, &fm, &fo, &w, "coarse.block0").unwrap();
        assert_eq!(om.array().dim(), (8, 16));
        assert_eq!(oo.array().dim(), (6, 16));
    }

    #[test]
    fn geometric_block_is_permutation_equivariant() {
        let w = ModelWeights::seeded(3, &config()).unwrap();
        let (pc_m, pc_o, fm, fo) = random_setup(6, 5, 9);
        let (om, oo) =
            geometric_transformer_block(&pc_m, &pc_o, &fm, &fo, &w, "coarse.block0").unwrap();

        // permute the m-side points (rows 1..N) and rerun
        let perm = [3usize, 0, 4, 1, 5, 2];
        let pc_m_perm = pc_m.select(&perm).unwrap();
        let mut fm_perm = fm.array().clone();
        for (new_row, &old) in perm.iter().enumerate() {
            fm_perm
                .row_mut(new_row + 1)
                .assign(&fm.array().row(old + 1));
        }
        let (om_perm, oo_perm) = geometric_transformer_block(
            &pc_m_perm,
            &pc_o,
            &FeatureBlock::new(fm_perm).unwrap(),
            &fo,
            &w,
            "coarse.block0",
        )
        .unwrap();

        for (new_row, &old) in perm.iter().enumerate() {
            for c in 0..16 {
                let a = om_perm.array()[(new_row + 1, c)];
                let b = om.array()[(old + 1, c)];
                assert!((a - b).abs() < 1e-10, "row {old}: {a} vs {b}");
            }
        }
        // the other set sees a permutation-invariant context
        for (a, b) in oo_perm.array().iter().zip(oo.array().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zeroed_output_projections_reduce_to_identity() {
        let cfg = config();
        let mut w = ModelWeights::seeded(5, &cfg).unwrap();
        for path in [
            "coarse.block0.self.wo",
            "coarse.block0.cross.wo",
        ] {
            let shape = w.tensor(path).unwrap().shape().to_vec();
            w.set_tensor(path, ArrayD::zeros(IxDyn(&shape))).unwrap();
        }
        let (pc_m, pc_o, fm, fo) = random_setup(5, 4, 11);
        let (om, oo) =
            geometric_transformer_block(&pc_m, &pc_o, &fm, &fo, &w, "coarse.block0").unwrap();
        assert_eq!(om, fm);
        assert_eq!(oo, fo);
    }

    #[test]
    fn geometric_bias_is_rigid_invariant() {
        // the block output depends on points only through pairwise
        // distances, so a common rigid motion changes nothing
        let w = ModelWeights::seeded(7, &config()).unwrap();
        let (pc_m, pc_o, fm, fo) = random_setup(6, 6, 13);
        let (om, oo) =
            geometric_transformer_block(&pc_m, &pc_o, &fm, &fo, &w, "coarse.block0").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let g = crate::geometry::Pose {
            rotation: crate::rng::random_rotation(&mut rng),
            translation: Vector3::new(0.4, -0.2, 0.9),
        };
        let (gm, go) = geometric_transformer_block(
            &crate::geometry::transform_points(&g, &pc_m),
            &crate::geometry::transform_points(&g, &pc_o),
            &fm,
            &fo,
            &w,
            "coarse.block0",
        )
        .unwrap();
        for (a, b) in gm.array().iter().zip(om.array().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in go.array().iter().zip(oo.array().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_cross_attention_single_kv_row() {
        let w = ModelWeights::seeded(2, &config()).unwrap();
        let (_, _, fm, _) = random_setup(5, 1, 21);
        let kv = FeatureBlock::new(Array2::from_shape_fn((1, 16), |(_, j)| j as f64 * 0.1)).unwrap();
        let out = linear_cross_attention(&fm, &kv, &w, "fine.block0.spread").unwrap();
        // with one key row, kernel attention returns exactly that value row
        // for every query; the block output is residual + projection of it
        let lnkv = NormParams::fetch(&w, "fine.block0.spread.lnkv").unwrap();
        let p = AttnParams::fetch(&w, "fine.block0.spread").unwrap();
        let nkv = lnkv.apply(kv.view());
        let v = linear(nkv.view(), p.wv, p.bv);
        let projected = linear(v.view(), p.wo, p.bo);
        for i in 0..6 {
            for j in 0..16 {
                let expected = fm.array()[(i, j)] + projected[(0, j)];
                assert!((out.array()[(i, j)] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sdpt_spreads_information_to_non_sparse_rows() {
        let cfg = config();
        let w = ModelWeights::seeded(4, &cfg).unwrap();
        let (pc_m, pc_o, fm, fo) = random_setup(10, 10, 31);
        let idx = [0usize, 2, 4, 6];
        let (om, _) =
            sdpt_block((&pc_m, &fm), (&pc_o, &fo), &idx, &idx, &w, "fine.block0").unwrap();
        assert_eq!(om.array().dim(), (11, 16));

        // perturb a sparse-selected feature; rows outside the sparse set
        // must still change (information spreads through the block)
        let mut fm2 = fm.array().clone();
        fm2[(1, 0)] += 0.5; // point 0 is in the sparse set
        let (om2, _) = sdpt_block(
            (&pc_m, &FeatureBlock::new(fm2).unwrap()),
            (&pc_o, &fo),
            &idx,
            &idx,
            &w,
            "fine.block0",
        )
        .unwrap();
        let non_sparse_row = 10; // point 9 is outside the sparse set
        let changed = (0..16).any(|c| {
            (om.array()[(non_sparse_row, c)] - om2.array()[(non_sparse_row, c)]).abs() > 1e-12
        });
        assert!(changed, "dense rows outside the sparse set must be updated");

        // determinism
        let (om3, oo3) =
            sdpt_block((&pc_m, &fm), (&pc_o, &fo), &idx, &idx, &w, "fine.block0").unwrap();
        let (om4, oo4) =
            sdpt_block((&pc_m, &fm), (&pc_o, &fo), &idx, &idx, &w, "fine.block0").unwrap();
        assert_eq!(om3, om4);
        assert_eq!(oo3, oo4);

        // out-of-range sparse index
        assert!(matches!(
            sdpt_block((&pc_m, &fm), (&pc_o, &fo), &[99], &idx, &w, "fine.block0"),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn linear_block_preserves_shapes() {
        let cfg = ModelConfig {
            fine_variant: FineVariant::LinearOnly,
            ..config()
        };
        let w = ModelWeights::seeded(6, &cfg).unwrap();
        let (_, _, fm, fo) = random_setup(9, 7, 41);
        let (om, oo) = linear_attention_block(&fm, &fo, &w, "fine.block0").unwrap();
        assert_eq!(om.array().dim(), (10, 16));
        assert_eq!(oo.array().dim(), (8, 16));
    }
}
