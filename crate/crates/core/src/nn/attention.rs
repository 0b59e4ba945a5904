//! Attention kernels: layer norm, multi-head softmax attention with an
//! optional pairwise-distance logit bias, and kernelized (linear-time)
//! attention with the elu(x)+1 feature map.

use crate::error::{Error, Result};
use crate::nn::weights::ModelWeights;
use crate::par;
use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Width of the sinusoidal distance embedding (8 sin/cos pairs).
pub const DIST_EMB_DIM: usize = 16;
const LN_EPS: f64 = 1e-5;
/// Row-chunk height for attention processing; bounds scratch memory.
const ATTN_CHUNK: usize = 64;

/// Sinusoidal embedding of a pairwise distance. Frequencies are a
/// geometric ladder starting at π/2, so the slowest bin spans the
/// unit-sphere diameter [0, 2] with a half period.
pub fn distance_embedding(d: f64, out: &mut [f64; DIST_EMB_DIM]) {
    let mut omega = std::f64::consts::FRAC_PI_2;
    for k in 0..DIST_EMB_DIM / 2 {
        let (sin, cos) = (omega * d).sin_cos();
        out[2 * k] = sin;
        out[2 * k + 1] = cos;
        omega *= 2.0;
    }
}

/// Per-row layer normalization with learned gain and bias.
pub(crate) fn layer_norm(
    x: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> Array2<f64> {
    let c = x.ncols() as f64;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gain.iter().zip(bias.iter())) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// `x · wᵀ + b`.
pub(crate) fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += &b.view().insert_axis(Axis(0));
    out
}

/// Projection weights of one attention sublayer.
pub(crate) struct AttnParams<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
}

impl<'a> AttnParams<'a> {
    pub fn fetch(w: &'a ModelWeights, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: w.mat(&format!("{prefix}.wq"))?,
            bq: w.vec(&format!("{prefix}.bq"))?,
            wk: w.mat(&format!("{prefix}.wk"))?,
            bk: w.vec(&format!("{prefix}.bk"))?,
            wv: w.mat(&format!("{prefix}.wv"))?,
            bv: w.vec(&format!("{prefix}.bv"))?,
            wo: w.mat(&format!("{prefix}.wo"))?,
            bo: w.vec(&format!("{prefix}.bo"))?,
        })
    }
}

/// Layer-norm parameters.
pub(crate) struct NormParams<'a> {
    pub gain: ArrayView1<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
}

impl<'a> NormParams<'a> {
    pub fn fetch(w: &'a ModelWeights, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: w.vec(&format!("{prefix}.gain"))?,
            bias: w.vec(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        layer_norm(x, self.gain, self.bias)
    }
}

/// Pairwise-distance logit bias for geometric self-attention.
///
/// Row/column 0 (the background tokens) receive no bias: the background
/// participates in attention like a point but has no position.
pub(crate) struct GeoBias<'a> {
    pub points_q: &'a [Vector3<f64>],
    pub points_k: &'a [Vector3<f64>],
    /// heads × DIST_EMB_DIM projection of the distance embedding.
    pub proj: ArrayView2<'a, f64>,
}

/// Multi-head softmax attention over feature blocks whose row 0 is the
/// background token. Rows are processed in fixed-size chunks so the
/// per-head logit scratch stays small; chunks are independent, keeping the
/// result identical for any thread count.
pub(crate) fn multi_head_attention(
    q_in: ArrayView2<f64>,
    kv_in: ArrayView2<f64>,
    params: &AttnParams,
    heads: usize,
    geo: Option<&GeoBias>,
) -> Result<Array2<f64>> {
    let c = q_in.ncols();
    if kv_in.ncols() != c || c % heads != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("feature width {c} divisible by {heads} heads"),
            actual: format!("{}", kv_in.ncols()),
        });
    }
    if let Some(g) = geo {
        if g.points_q.len() + 1 != q_in.nrows() || g.points_k.len() + 1 != kv_in.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} query and {} key points", q_in.nrows() - 1, kv_in.nrows() - 1),
                actual: format!("{} and {}", g.points_q.len(), g.points_k.len()),
            });
        }
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let nq = q_in.nrows();
    let nk = kv_in.nrows();

    let q = linear(q_in, params.wq, params.bq);
    let k = linear(kv_in, params.wk, params.bk);
    let v = linear(kv_in, params.wv, params.bv);

    let mut concat = Array2::<f64>::zeros((nq, c));
    {
        let q_ref = &q;
        let k_ref = &k;
        let v_ref = &v;
        let slice = concat.as_slice_mut().expect("row-major layout");
        par::for_each_chunk_mut(slice, ATTN_CHUNK * c, |chunk_idx, chunk| {
            let row0 = chunk_idx * ATTN_CHUNK;
            let rows = chunk.len() / c;
            let mut emb = [0.0f64; DIST_EMB_DIM];
            for h in 0..heads {
                let qh = q_ref.slice(s![row0..row0 + rows, h * d..(h + 1) * d]);
                let kh = k_ref.slice(s![.., h * d..(h + 1) * d]);
                let vh = v_ref.slice(s![.., h * d..(h + 1) * d]);
                let mut logits = qh.dot(&kh.t());
                logits *= scale;
                if let Some(g) = geo {
                    let proj_h = g.proj.row(h);
                    for li in 0..rows {
                        let i = row0 + li;
                        if i == 0 {
                            continue;
                        }
                        let pi = &g.points_q[i - 1];
                        for j in 1..nk {
                            let dist = (pi - g.points_k[j - 1]).norm();
                            distance_embedding(dist, &mut emb);
                            let mut bias = 0.0;
                            for (e, p) in emb.iter().zip(proj_h.iter()) {
                                bias += e * p;
                            }
                            logits[(li, j)] += bias;
                        }
                    }
                }
                // row softmax with max subtraction
                for mut row in logits.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                let out_h = logits.dot(&vh);
                for li in 0..rows {
                    for dj in 0..d {
                        chunk[li * c + h * d + dj] = out_h[(li, dj)];
                    }
                }
            }
        });
    }
    Ok(linear(concat.view(), params.wo, params.bo))
}

fn phi(x: f64) -> f64 {
    // elu(x) + 1, strictly positive
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Kernelized attention: `φ(Q)·(φ(K)ᵀV) / (φ(Q)·Σφ(K))` per head, linear
/// in both sequence lengths.
pub(crate) fn kernel_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<Array2<f64>> {
    let c = q.ncols();
    if k.ncols() != c || v.ncols() != c || k.nrows() != v.nrows() || c % heads != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("matching widths {c} and key/value rows"),
            actual: format!("k {}×{}, v {}×{}", k.nrows(), k.ncols(), v.nrows(), v.ncols()),
        });
    }
    let d = c / heads;
    let nq = q.nrows();
    let mut out = Array2::<f64>::zeros((nq, c));
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let phi_q = q.slice(s![.., cols.clone()]).mapv(phi);
        let phi_k = k.slice(s![.., cols.clone()]).mapv(phi);
        let vh = v.slice(s![.., cols.clone()]);
        let summary = phi_k.t().dot(&vh); // d×d
        let z = phi_k.sum_axis(Axis(0)); // d
        let numer = phi_q.dot(&summary); // Nq×d
        let denom = phi_q.dot(&z); // Nq
        let mut out_block = out.slice_mut(s![.., cols]);
        for i in 0..nq {
            let den = denom[i].max(f64::MIN_POSITIVE);
            for j in 0..d {
                out_block[(i, j)] = numer[(i, j)] / den;
            }
        }
    }
    Ok(out)
}

/// Quadratic-form reference for [`kernel_attention`], used by tests and
/// the verification suite. Computes the same quantity without the
/// associativity trick.
pub fn kernel_attention_reference(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<Array2<f64>> {
    let c = q.ncols();
    if k.ncols() != c || v.ncols() != c || k.nrows() != v.nrows() || c % heads != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("matching widths {c} and key/value rows"),
            actual: format!("k {}×{}, v {}×{}", k.nrows(), k.ncols(), v.nrows(), v.ncols()),
        });
    }
    let d = c / heads;
    let mut out = Array2::<f64>::zeros((q.nrows(), c));
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let phi_q = q.slice(s![.., cols.clone()]).mapv(phi);
        let phi_k = k.slice(s![.., cols.clone()]).mapv(phi);
        let vh = v.slice(s![.., cols.clone()]);
        for i in 0..q.nrows() {
            let mut weights = Array1::<f64>::zeros(k.nrows());
            for j in 0..k.nrows() {
                weights[j] = phi_q.row(i).dot(&phi_k.row(j));
            }
            let den = weights.sum().max(f64::MIN_POSITIVE);
            for j in 0..k.nrows() {
                let w = weights[j] / den;
                for dj in 0..d {
                    out[(i, h * d + dj)] += w * vh[(j, dj)];
                }
            }
        }
    }
    Ok(out)
}
