//! One-sided Jacobi SVD for 3×3 matrices.
//!
//! Columns of `B = A·V` are orthogonalized by right-multiplied plane
//! rotations; at convergence the column norms are the singular values and
//! `V` accumulates the rotations, so `A = U·Σ·Vᵀ`. Only the 3×3 case is
//! needed, which keeps the pose solver dependency-free and auditable.

use nalgebra::{Matrix3, Vector3};

pub(crate) struct Svd3 {
    pub u: Matrix3<f64>,
    /// Singular values, descending and nonnegative.
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

const MAX_SWEEPS: usize = 60;
const ORTHO_TOL: f64 = 1e-15;

pub(crate) fn svd3(a: &Matrix3<f64>) -> Svd3 {
    let mut b = *a;
    let mut v = Matrix3::<f64>::identity();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..2 {
            for q in (p + 1)..3 {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..3 {
                    alpha += b[(i, p)] * b[(i, p)];
                    beta += b[(i, q)] * b[(i, q)];
                    gamma += b[(i, p)] * b[(i, q)];
                }
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..3 {
                    let bip = b[(i, p)];
                    let biq = b[(i, q)];
                    b[(i, p)] = c * bip - s * biq;
                    b[(i, q)] = s * bip + c * biq;
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Sort singular values descending, permuting B and V columns together.
    let mut norms = [b.column(0).norm(), b.column(1).norm(), b.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let b_cols = [
        b.column(order[0]).into_owned(),
        b.column(order[1]).into_owned(),
        b.column(order[2]).into_owned(),
    ];
    let v_cols = [
        v.column(order[0]).into_owned(),
        v.column(order[1]).into_owned(),
        v.column(order[2]).into_owned(),
    ];
    norms = [norms[order[0]], norms[order[1]], norms[order[2]]];

    let mut v_sorted = Matrix3::zeros();
    for (k, col) in v_cols.iter().enumerate() {
        v_sorted.set_column(k, col);
    }

    // Columns with vanishing singular values carry no direction; complete
    // U to an orthonormal basis instead of dividing by ~0.
    let tiny = norms[0] * 1e-12;
    let mut u_cols: [Option<Vector3<f64>>; 3] = [None, None, None];
    for k in 0..3 {
        if norms[k] > tiny && norms[k] > 0.0 {
            u_cols[k] = Some(b_cols[k] / norms[k]);
        }
    }
    let u0 = u_cols[0].unwrap_or_else(|| Vector3::x());
    let u1 = match u_cols[1] {
        Some(c) => c,
        None => orthogonal_to(&u0),
    };
    let u2 = match u_cols[2] {
        Some(c) => c,
        None => u0.cross(&u1).normalize(),
    };
    let mut u = Matrix3::zeros();
    u.set_column(0, &u0);
    u.set_column(1, &u1);
    u.set_column(2, &u2);

    Svd3 {
        u,
        sigma: Vector3::new(norms[0], norms[1], norms[2]),
        v: v_sorted,
    }
}

fn orthogonal_to(u: &Vector3<f64>) -> Vector3<f64> {
    // Cross with the least-aligned axis for stability.
    let axis = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vector3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    u.cross(&axis).normalize()
}
