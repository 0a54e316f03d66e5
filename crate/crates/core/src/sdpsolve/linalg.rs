use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Householder QR with column pivoting, keeping the full orthogonal factor.
///
/// `a · P = Q · [R; 0]`, with `rank` decided by `|R_kk| > tol · |R_00|`.
pub struct HouseholderQr {
    /// Full `m × m` orthogonal factor.
    pub q: DMatrix<f64>,
    /// Leading `rank × rank` block of `R`.
    pub r: DMatrix<f64>,
    /// `perm[k]` is the original column placed at position `k`.
    pub perm: Vec<usize>,
    pub rank: usize,
}

impl HouseholderQr {
    pub fn new(a: &DMatrix<f64>, tol: f64) -> Self {
        let (m, n) = a.shape();
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut norms: Vec<f64> = (0..n).map(|j| r.column(j).norm_squared()).collect();
        let mut vs: Vec<(usize, DVector<f64>, f64)> = Vec::new();
        let steps = m.min(n);
        let mut rank = 0;
        let mut r00 = 0.0;
        for k in 0..steps {
            // Pivot: largest remaining column norm (recomputed, cheap enough here).
            for j in k..n {
                norms[j] = r.view((k, j), (m - k, 1)).norm_squared();
            }
            let (p, &best) = norms[k..]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, v)| (i + k, v))
                .unwrap();
            if k == 0 {
                r00 = best.sqrt();
            }
            if best.sqrt() <= tol * r00.max(f64::MIN_POSITIVE) {
                break;
            }
            r.swap_columns(k, p);
            perm.swap(k, p);
            norms.swap(k, p);
            let x: DVector<f64> = r.view((k, k), (m - k, 1)).column(0).into_owned();
            let xn = x.norm();
            let alpha = if x[0] >= 0.0 { -xn } else { xn };
            let mut v = x;
            v[0] -= alpha;
            let vn2 = v.norm_squared();
            if vn2 > 0.0 {
                let beta = 2.0 / vn2;
                // r[k.., k..] -= beta v (vᵀ r[k.., k..])
                let mut sub = r.view_mut((k, k), (m - k, n - k));
                let vt_r = v.transpose() * &sub;
                sub -= (&v * vt_r) * beta;
                vs.push((k, v, beta));
            }
            rank += 1;
        }
        // Accumulate Q = H₀ H₁ ⋯ applied to the identity.
        let mut q = DMatrix::<f64>::identity(m, m);
        for (k, v, beta) in vs.iter().rev() {
            let mut sub = q.view_mut((*k, 0), (m - k, m));
            let vt_q = v.transpose() * &sub;
            sub -= (v * vt_q) * *beta;
        }
        let rr = r.view((0, 0), (rank, rank)).upper_triangle();
        HouseholderQr {
            q,
            r: rr,
            perm,
            rank,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_reconstructs_and_detects_rank() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 3.0, 0.5, -1.0, -0.5, 2.0, 0.0, 2.0, 1.0, 1.0, 2.0]);
        // Third column = first + second → rank 2.
        let qr = HouseholderQr::new(&a, 1e-12);
        assert_eq!(qr.rank, 2);
        let qtq = qr.q.transpose() * &qr.q;
        assert!((qtq - DMatrix::identity(4, 4)).norm() < 1e-12);
        let q1 = qr.q.columns(0, 2);
        let ap = DMatrix::from_fn(4, 2, |i, j| a[(i, qr.perm[j])]);
        assert!((ap - q1 * &qr.r).norm() < 1e-12);
        // Remaining columns of Q are orthogonal to the column space.
        let q2 = qr.q.columns(2, 2);
        assert!((q2.transpose() * &a).norm() < 1e-12);
    }
}
