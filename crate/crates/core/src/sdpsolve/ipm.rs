//! Infeasible primal-dual path-following method with Nesterov–Todd scaling
//! and Mehrotra predictor-corrector steps.
//!
//! Free variables are handled exactly: the Newton system
//! `[M F; Fᵀ 0] [Δy; Δw] = [h; r_f]` is reduced with a null-space basis of
//! `Fᵀ` computed once per solve, so only `Q₂ᵀ M Q₂` is factored. That matrix
//! is never formed: `M = BᵀB` and `B Q₂` goes through a QR decomposition,
//! which keeps accuracy on the degenerate problems sum-of-squares relaxations
//! produce. Linearly dependent equality rows are dropped before iterating,
//! and every search direction is put back on the primal equations with the
//! well-conditioned projector `[A F][A F]ᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};

use super::linalg::HouseholderQr;
use super::{BlockKind, BlockMat, SdpError, SdpProblem, SdpSolution, SdpStatus};

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Target for every scaled residual.
    pub tol: f64,
    /// Largest PSD block accepted by the embedded solver.
    pub max_block: usize,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: 200,
            tol: 1e-9,
            max_block: 400,
            verbose: false,
        }
    }
}

/// Constraint data restricted to one block, rows already scaled.
enum BlockRows {
    /// `(row, full-symmetric entries (k, l, v))`.
    Psd(usize, Vec<(usize, Vec<(usize, usize, f64)>)>),
    /// `(row, diagonal entries (k, v))`.
    Diag(usize, Vec<(usize, Vec<(usize, f64)>)>),
}

struct Scaled {
    m: usize,
    p: usize,
    blocks: Vec<BlockKind>,
    rows: Vec<BlockRows>,
    b: DVector<f64>,
    c: Vec<BlockMat>,
    cf: DVector<f64>,
    f: DMatrix<f64>,
    row_scale: Vec<f64>,
}

impl Scaled {
    fn new(p: &SdpProblem) -> Self {
        let m = p.constraints.len();
        let nf = p.n_free;
        let row_scale: Vec<f64> = p
            .constraints
            .iter()
            .map(|c| {
                let s: f64 = c
                    .entries
                    .iter()
                    .map(|e| if e.i == e.j { e.value * e.value } else { 2.0 * e.value * e.value })
                    .sum::<f64>()
                    + c.free.iter().map(|(_, v)| v * v).sum::<f64>();
                if s > 0.0 {
                    s.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut per_block: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>> = vec![Vec::new(); p.blocks.len()];
        let mut f = DMatrix::zeros(m, nf);
        let mut b = DVector::zeros(m);
        for (i, c) in p.constraints.iter().enumerate() {
            let s = 1.0 / row_scale[i];
            b[i] = c.rhs * s;
            for &(k, v) in &c.free {
                f[(i, k)] += v * s;
            }
            let mut by_block: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); p.blocks.len()];
            for e in &c.entries {
                by_block[e.block].push((e.i, e.j, e.value * s));
                if e.i != e.j {
                    by_block[e.block].push((e.j, e.i, e.value * s));
                }
            }
            for (bk, list) in by_block.into_iter().enumerate() {
                if !list.is_empty() {
                    per_block[bk].push((i, list));
                }
            }
        }
        let rows = per_block
            .into_iter()
            .enumerate()
            .map(|(bk, list)| match p.blocks[bk] {
                BlockKind::Psd(_) => BlockRows::Psd(bk, list),
                BlockKind::Diag(_) => BlockRows::Diag(
                    bk,
                    list.into_iter()
                        .map(|(i, es)| (i, es.into_iter().map(|(k, _, v)| (k, v)).collect()))
                        .collect(),
                ),
            })
            .collect();
        let mut c: Vec<BlockMat> = p.blocks.iter().map(|&k| BlockMat::zeros(k)).collect();
        p.entries_to_blocks(&p.objective, 1.0, &mut c);
        let mut cf = DVector::zeros(nf);
        for &(k, v) in &p.free_objective {
            cf[k] += v;
        }
        Scaled {
            m,
            p: nf,
            blocks: p.blocks.clone(),
            rows,
            b,
            c,
            cf,
            f,
            row_scale,
        }
    }

    /// `A(Z)` for block values `Z`.
    fn apply(&self, z: &[BlockMat]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for rows in &self.rows {
            match rows {
                BlockRows::Psd(bk, list) => {
                    let BlockMat::Dense(zm) = &z[*bk] else { unreachable!() };
                    for (i, es) in list {
                        out[*i] += es.iter().map(|&(k, l, v)| v * zm[(k, l)]).sum::<f64>();
                    }
                }
                BlockRows::Diag(bk, list) => {
                    let BlockMat::Diag(zd) = &z[*bk] else { unreachable!() };
                    for (i, es) in list {
                        out[*i] += es.iter().map(|&(k, v)| v * zd[k]).sum::<f64>();
                    }
                }
            }
        }
        out
    }

    /// `Aᵀ(y) = Σ y_i A_i`.
    fn adjoint(&self, y: &DVector<f64>) -> Vec<BlockMat> {
        let mut out: Vec<BlockMat> = self.blocks.iter().map(|&k| BlockMat::zeros(k)).collect();
        for rows in &self.rows {
            match rows {
                BlockRows::Psd(bk, list) => {
                    let BlockMat::Dense(om) = &mut out[*bk] else { unreachable!() };
                    for (i, es) in list {
                        for &(k, l, v) in es {
                            om[(k, l)] += v * y[*i];
                        }
                    }
                }
                BlockRows::Diag(bk, list) => {
                    let BlockMat::Diag(od) = &mut out[*bk] else { unreachable!() };
                    for (i, es) in list {
                        for &(k, v) in es {
                            od[k] += v * y[*i];
                        }
                    }
                }
            }
        }
        out
    }
}

/// NT scaling data for one block.
enum Scaling {
    Dense {
        g: DMatrix<f64>,
        g_inv: DMatrix<f64>,
        w: DMatrix<f64>,
        d: DVector<f64>,
    },
    /// `g` holds `W = (X/S)^{1/2}` itself, so `G = W^{1/2}`.
    Diag {
        g: DVector<f64>,
        d: DVector<f64>,
    },
}

fn nt_scaling(x: &BlockMat, s: &BlockMat) -> Option<Scaling> {
    match (x, s) {
        (BlockMat::Dense(x), BlockMat::Dense(s)) => {
            let lx = Cholesky::new(x.clone())?.l();
            let ls = Cholesky::new(s.clone())?.l();
            let prod = ls.transpose() * &lx;
            let svd = SVD::new(prod, true, true);
            let v = svd.v_t?.transpose();
            let sig = svd.singular_values;
            let n = sig.len();
            let mut g = &lx * &v;
            for j in 0..n {
                let f = 1.0 / sig[j].sqrt();
                g.column_mut(j).scale_mut(f);
            }
            // G⁻¹ = Σ^{1/2} Vᵀ L⁻¹
            let lx_inv = lx.solve_lower_triangular(&DMatrix::identity(n, n))?;
            let mut g_inv = v.transpose() * lx_inv;
            for i in 0..n {
                let f = sig[i].sqrt();
                g_inv.row_mut(i).scale_mut(f);
            }
            let w = &g * g.transpose();
            Some(Scaling::Dense { g, g_inv, w, d: sig })
        }
        (BlockMat::Diag(x), BlockMat::Diag(s)) => {
            if x.iter().chain(s.iter()).any(|v| *v <= 0.0) {
                return None;
            }
            let g = x.zip_map(s, |a, b| (a / b).sqrt());
            let d = x.zip_map(s, |a, b| (a * b).sqrt());
            Some(Scaling::Diag { g, d })
        }
        _ => None,
    }
}

/// Largest `α ≤ cap` keeping `x + α dx` in the cone.
fn max_step(x: &BlockMat, dx: &BlockMat, cap: f64) -> f64 {
    match (x, dx) {
        (BlockMat::Dense(x), BlockMat::Dense(dx)) => {
            let Some(ch) = Cholesky::new(x.clone()) else { return 0.0 };
            let l = ch.l();
            let n = l.nrows();
            let Some(li) = l.solve_lower_triangular(&DMatrix::identity(n, n)) else { return 0.0 };
            let t = &li * dx * li.transpose();
            let lmin = super::linalg::min_eigenvalue(&t);
            if lmin >= 0.0 {
                cap
            } else {
                cap.min(-1.0 / lmin)
            }
        }
        (BlockMat::Diag(x), BlockMat::Diag(dx)) => {
            let mut a = cap;
            for (xi, di) in x.iter().zip(dx.iter()) {
                if *di < 0.0 {
                    a = a.min(-xi / di);
                }
            }
            a
        }
        _ => 0.0,
    }
}

fn axpy_blocks(y: &mut [BlockMat], a: f64, x: &[BlockMat]) {
    for (yb, xb) in y.iter_mut().zip(x) {
        match (yb, xb) {
            (BlockMat::Dense(ym), BlockMat::Dense(xm)) => {
                *ym += xm * a;
                let t = ym.transpose();
                *ym = (&*ym + t) * 0.5;
            }
            (BlockMat::Diag(yd), BlockMat::Diag(xd)) => *yd += xd * a,
            _ => unreachable!(),
        }
    }
}

fn sub_blocks(a: &[BlockMat], b: &[BlockMat]) -> Vec<BlockMat> {
    a.iter()
        .zip(b)
        .map(|(x, y)| match (x, y) {
            (BlockMat::Dense(p), BlockMat::Dense(q)) => BlockMat::Dense(p - q),
            (BlockMat::Diag(p), BlockMat::Diag(q)) => BlockMat::Diag(p - q),
            _ => unreachable!(),
        })
        .collect()
}

fn dot_blocks(a: &[BlockMat], b: &[BlockMat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Reduced solver for `[M F; Fᵀ 0] [Δy; Δw] = [h; r_f]`.
struct Kkt {
    m: usize,
    p: usize,
    // Present when there are free variables.
    null: Option<NullSpace>,
}

/// Cholesky factor of `[A F][A F]ᵀ`, used to put search directions back on
/// the primal equations. Unlike the Schur matrix it does not degrade as the
/// iterates approach the boundary.
struct PrimalProjector {
    chol: Cholesky<f64, Dyn>,
}

impl PrimalProjector {
    fn new(s: &Scaled) -> Option<Self> {
        let g = row_gram(s);
        let diag_max = g.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        let mut reg = 1e-13;
        for _ in 0..6 {
            let mut gg = g.clone();
            for i in 0..s.m {
                gg[(i, i)] += reg * diag_max;
            }
            if let Some(chol) = Cholesky::new(gg) {
                return Some(PrimalProjector { chol });
            }
            reg *= 100.0;
        }
        None
    }

    /// Minimum-norm `(ΔX, Δw)` correction so that `A(ΔX) + F Δw = r_p`.
    fn correct(&self, s: &Scaled, rp: &DVector<f64>, dx: &mut [BlockMat], dw: &mut DVector<f64>) {
        for _ in 0..2 {
            let r = rp - s.apply(dx) - &s.f * &*dw;
            let z = self.chol.solve(&r);
            axpy_blocks(dx, 1.0, &s.adjoint(&z));
            *dw += s.f.transpose() * z;
        }
    }
}

struct NullSpace {
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    r11: DMatrix<f64>,
    perm: Vec<usize>,
    rank: usize,
}

struct Factored {
    /// Triangular factor of the reduced Schur matrix, `K = RᵀR`.
    r: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl Factored {
    fn m_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.root.tr_mul(&(&self.root * v))
    }

    fn k_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if self.r.nrows() == 0 {
            return DVector::zeros(0);
        }
        let t = self.r.tr_solve_upper_triangular(rhs).unwrap_or_else(|| DVector::zeros(rhs.len()));
        self.r.solve_upper_triangular(&t).unwrap_or_else(|| DVector::zeros(rhs.len()))
    }
}

impl Kkt {
    fn new(s: &Scaled) -> Self {
        let null = if s.p > 0 {
            let qr = HouseholderQr::new(&s.f, 1e-11);
            let r = qr.rank;
            Some(NullSpace {
                q1: qr.q.columns(0, r).clone_owned(),
                q2: qr.q.columns(r, s.m - r).clone_owned(),
                r11: qr.r,
                perm: qr.perm,
                rank: r,
            })
        } else {
            None
        };
        Kkt { m: s.m, p: s.p, null }
    }

    /// Factors `Q₂ᵀ M Q₂` through a QR decomposition of `B Q₂`, which keeps
    /// the accuracy of the square root rather than of `M` itself.
    fn factor(&self, root: DMatrix<f64>) -> Option<Factored> {
        let k = match &self.null {
            None => root.clone(),
            Some(ns) => &root * &ns.q2,
        };
        let cols = k.ncols();
        if cols == 0 {
            return Some(Factored { r: DMatrix::zeros(0, 0), root });
        }
        let scale = k.column_iter().map(|c| c.norm()).fold(0.0f64, f64::max).max(1e-300);
        for delta in [0.0, 1e-10, 1e-8, 1e-6] {
            let r = if delta == 0.0 {
                if k.nrows() < cols {
                    continue;
                }
                nalgebra::linalg::QR::new(k.clone()).r()
            } else {
                let mut aug = DMatrix::<f64>::zeros(k.nrows() + cols, cols);
                aug.view_mut((0, 0), (k.nrows(), cols)).copy_from(&k);
                for j in 0..cols {
                    aug[(k.nrows() + j, j)] = delta * scale;
                }
                nalgebra::linalg::QR::new(aug).r()
            };
            let dmax = r.diagonal().amax();
            let dmin = r.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if dmin.is_finite() && dmin > 1e-15 * dmax {
                return Some(Factored { r, root });
            }
        }
        None
    }

    fn solve(&self, fac: &Factored, h: &DVector<f64>, rf: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match &self.null {
            None => (fac.k_solve(h), DVector::zeros(self.p)),
            Some(ns) => {
                let r = ns.rank;
                let rf_p = DVector::from_fn(r, |k, _| rf[ns.perm[k]]);
                let u = ns
                    .r11
                    .transpose()
                    .solve_lower_triangular(&rf_p)
                    .unwrap_or_else(|| DVector::zeros(r));
                let y1 = &ns.q1 * u;
                let rhs = ns.q2.transpose() * (h - fac.m_mul(&y1));
                let z = fac.k_solve(&rhs);
                let dy = y1 + &ns.q2 * z;
                let t = ns.q1.transpose() * (h - fac.m_mul(&dy));
                let wp = ns.r11.solve_upper_triangular(&t).unwrap_or_else(|| DVector::zeros(r));
                let mut dw = DVector::zeros(self.p);
                for k in 0..r {
                    dw[ns.perm[k]] = wp[k];
                }
                debug_assert_eq!(dy.len(), self.m);
                (dy, dw)
            }
        }
    }
}

/// Square root `B` of the Schur complement, `M = BᵀB`, with column `i`
/// holding `svec(Gᵀ A_i G)` per PSD block (so `M_ij = Σ_b ⟨A_i, W A_j W⟩`).
fn schur_root(s: &Scaled, scal: &[Scaling]) -> DMatrix<f64> {
    let offsets: Vec<usize> = s
        .blocks
        .iter()
        .scan(0, |acc, k| {
            let o = *acc;
            *acc += match *k {
                BlockKind::Psd(n) => n * (n + 1) / 2,
                BlockKind::Diag(n) => n,
            };
            Some(o)
        })
        .collect();
    let total = s.blocks.iter().map(|k| match *k {
        BlockKind::Psd(n) => n * (n + 1) / 2,
        BlockKind::Diag(n) => n,
    });
    let mut bm = DMatrix::<f64>::zeros(total.sum(), s.m);
    for rows in &s.rows {
        match rows {
            BlockRows::Psd(bk, list) => {
                let Scaling::Dense { g, .. } = &scal[*bk] else { unreachable!() };
                let n = g.nrows();
                let gt = g.transpose();
                let off = offsets[*bk];
                let mut t = DMatrix::<f64>::zeros(n, n);
                for (i, es) in list {
                    t.fill(0.0);
                    for &(k, l, v) in es {
                        t.ger(v, &gt.column(k), &gt.column(l), 1.0);
                    }
                    let mut idx = off;
                    for q in 0..n {
                        for pp in 0..=q {
                            bm[(idx, *i)] = if pp == q { t[(pp, q)] } else { std::f64::consts::SQRT_2 * t[(pp, q)] };
                            idx += 1;
                        }
                    }
                }
            }
            BlockRows::Diag(bk, list) => {
                let Scaling::Diag { g, .. } = &scal[*bk] else { unreachable!() };
                let off = offsets[*bk];
                for (i, es) in list {
                    for &(k, v) in es {
                        bm[(off + k, *i)] += v * g[k];
                    }
                }
            }
        }
    }
    bm
}

/// `W Z W` per block.
fn w_sandwich(scal: &[Scaling], z: &[BlockMat]) -> Vec<BlockMat> {
    scal.iter()
        .zip(z)
        .map(|(sc, zb)| match (sc, zb) {
            (Scaling::Dense { w, .. }, BlockMat::Dense(zm)) => BlockMat::Dense(w * zm * w),
            (Scaling::Diag { g, .. }, BlockMat::Diag(zd)) => {
                BlockMat::Diag(DVector::from_fn(zd.len(), |k, _| g[k] * g[k] * zd[k]))
            }
            _ => unreachable!(),
        })
        .collect()
}

/// `G T Gᵀ` with `T_ij = R_ij / (d_i + d_j)`, where
/// `R = 2σμ I − 2D² − (ΔX̃ΔS̃ + ΔS̃ΔX̃)` (corrector term optional).
fn complementarity_rhs(
    scal: &[Scaling],
    sigma_mu: f64,
    corr: Option<(&[BlockMat], &[BlockMat])>,
) -> Vec<BlockMat> {
    scal.iter()
        .enumerate()
        .map(|(b, sc)| match sc {
            Scaling::Dense { g, g_inv, d, .. } => {
                let n = d.len();
                let mut r = DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    r[(i, i)] = 2.0 * sigma_mu - 2.0 * d[i] * d[i];
                }
                if let Some((dx, ds)) = corr {
                    let (BlockMat::Dense(dxm), BlockMat::Dense(dsm)) = (&dx[b], &ds[b]) else { unreachable!() };
                    let xt = g_inv * dxm * g_inv.transpose();
                    let st = g.transpose() * dsm * g;
                    let prod = &xt * &st;
                    r -= &prod + prod.transpose();
                }
                let t = DMatrix::from_fn(n, n, |i, j| r[(i, j)] / (d[i] + d[j]));
                BlockMat::Dense(g * t * g.transpose())
            }
            Scaling::Diag { g, d } => {
                let n = d.len();
                let v = DVector::from_fn(n, |k, _| {
                    let mut r = 2.0 * sigma_mu - 2.0 * d[k] * d[k];
                    if let Some((dx, ds)) = corr {
                        let (BlockMat::Diag(dxd), BlockMat::Diag(dsd)) = (&dx[b], &ds[b]) else { unreachable!() };
                        // X̃ = ΔX / W, S̃ = W ΔS with W = g.
                        r -= 2.0 * (dxd[k] / g[k]) * (dsd[k] * g[k]);
                    }
                    g[k] * r / (2.0 * d[k])
                });
                BlockMat::Diag(v)
            }
        })
        .collect()
}

struct Iterate {
    x: Vec<BlockMat>,
    w: DVector<f64>,
    y: DVector<f64>,
    s: Vec<BlockMat>,
}

/// Gram matrix `[A F][A F]ᵀ` of the scaled constraint rows.
fn row_gram(s: &Scaled) -> DMatrix<f64> {
    let mut g = &s.f * s.f.transpose();
    let mut e = DVector::<f64>::zeros(s.m);
    for i in 0..s.m {
        e[i] = 1.0;
        let col = s.apply(&s.adjoint(&e));
        for j in 0..s.m {
            g[(j, i)] += col[j];
        }
        e[i] = 0.0;
    }
    (&g + g.transpose()) * 0.5
}

/// Picks a maximal set of linearly independent constraint rows by pivoted
/// Cholesky of the row Gram matrix. Returns the kept rows (sorted) and
/// whether the dropped rows are consistent with them.
fn independent_rows(s: &Scaled) -> (Vec<usize>, bool) {
    const TOL: f64 = 1e-9;
    let g = row_gram(s);
    let m = s.m;
    // Rows are unit-norm after scaling, so an absolute pivot threshold works.
    let mut l = DMatrix::<f64>::zeros(m, m);
    let mut d: Vec<f64> = (0..m).map(|i| g[(i, i)]).collect();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rank = 0;
    while rank < m {
        let (p, &best) = d[rank..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, v)| (i + rank, v))
            .unwrap();
        if best <= TOL {
            break;
        }
        order.swap(rank, p);
        d.swap(rank, p);
        l.swap_rows(rank, p);
        let piv = best.sqrt();
        let k = rank;
        l[(k, k)] = piv;
        for r in k + 1..m {
            let mut v = g[(order[r], order[k])];
            for c in 0..k {
                v -= l[(r, c)] * l[(k, c)];
            }
            l[(r, k)] = v / piv;
            d[r] -= l[(r, k)] * l[(r, k)];
        }
        rank += 1;
    }
    let mut keep: Vec<usize> = order[..rank].to_vec();
    keep.sort_unstable();
    if rank == m {
        return (keep, true);
    }
    // A dropped row equals Σ c_j (kept row j) with L₁₁ L₁₁ᵀ c = g_{kept, i};
    // its right-hand side must follow the same combination.
    let l11 = l.view((0, 0), (rank, rank)).clone_owned();
    let b_keep = DVector::from_fn(rank, |j, _| s.b[order[j]]);
    let mut consistent = true;
    for &i in &order[rank..] {
        let gi = DVector::from_fn(rank, |j, _| g[(order[j], i)]);
        let c = l11
            .solve_lower_triangular(&gi)
            .and_then(|t| l11.transpose().solve_upper_triangular(&t))
            .unwrap_or_else(|| DVector::zeros(rank));
        if (s.b[i] - c.dot(&b_keep)).abs() > 1e-7 * (1.0 + s.b.amax()) {
            consistent = false;
        }
    }
    (keep, consistent)
}

/// Solves `p` to the requested accuracy or reports why it could not.
///
/// Linearly dependent equality rows are removed first; their multipliers are
/// reported as zero and all residuals are recomputed on the full problem.
pub fn solve(p: &SdpProblem, opts: &SolveOptions) -> Result<SdpSolution, SdpError> {
    p.validate()?;
    for (b, k) in p.blocks.iter().enumerate() {
        if let BlockKind::Psd(n) = k {
            if *n > opts.max_block {
                return Err(SdpError::BlockTooLarge {
                    block: b,
                    dim: *n,
                    cap: opts.max_block,
                });
            }
        }
    }
    let (keep, consistent) = independent_rows(&Scaled::new(p));
    let reduced;
    let core_p = if keep.len() < p.constraints.len() {
        reduced = SdpProblem {
            constraints: keep.iter().map(|&i| p.constraints[i].clone()).collect(),
            ..p.clone()
        };
        &reduced
    } else {
        p
    };
    let (x, w, y_kept, s_blocks, iters, status) = solve_core(core_p, opts);
    let mut y = vec![0.0; p.constraints.len()];
    for (k, &i) in keep.iter().enumerate() {
        y[i] = y_kept[k];
    }
    let mut sol = p.assess(x, w, y, s_blocks, iters);
    if status == SdpStatus::Infeasible || !consistent {
        sol.status = SdpStatus::Infeasible;
    } else if status == SdpStatus::IterationLimit && sol.status != SdpStatus::Solved {
        sol.status = if sol.status == SdpStatus::NearSolved {
            SdpStatus::NearSolved
        } else {
            SdpStatus::IterationLimit
        };
    }
    Ok(sol)
}

type CoreResult = (Vec<BlockMat>, Vec<f64>, Vec<f64>, Vec<BlockMat>, usize, SdpStatus);

fn solve_core(p: &SdpProblem, opts: &SolveOptions) -> CoreResult {
    let s = Scaled::new(p);
    let kkt = Kkt::new(&s);
    let projector = PrimalProjector::new(&s);
    let nu: f64 = s.blocks.iter().map(|k| k.size() as f64).sum();

    // Cold start: scaled identities (SDPT3-style heuristic).
    let bnorm_ratio = |bk: usize| -> (f64, f64) {
        let mut ratio: f64 = 0.0;
        let mut amax: f64 = 0.0;
        let list_norms: Vec<(usize, f64)> = match &s.rows[bk] {
            BlockRows::Psd(_, l) => l
                .iter()
                .map(|(i, es)| (*i, es.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt()))
                .collect(),
            BlockRows::Diag(_, l) => l
                .iter()
                .map(|(i, es)| (*i, es.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()))
                .collect(),
        };
        for (i, an) in list_norms {
            ratio = ratio.max((1.0 + s.b[i].abs()) / (1.0 + an));
            amax = amax.max(an);
        }
        (ratio, amax)
    };
    let mut it = Iterate {
        x: Vec::new(),
        w: DVector::zeros(s.p),
        y: DVector::zeros(s.m),
        s: Vec::new(),
    };
    for (bk, kind) in s.blocks.iter().enumerate() {
        let n = kind.size() as f64;
        let (ratio, amax) = bnorm_ratio(bk);
        let cn = s.c[bk].frobenius_sq().sqrt();
        let xi = 10f64.max(n.sqrt()).max(n * ratio);
        let eta = 10f64.max(n.sqrt()).max(amax.max(cn));
        match *kind {
            BlockKind::Psd(k) => {
                it.x.push(BlockMat::Dense(DMatrix::identity(k, k) * xi));
                it.s.push(BlockMat::Dense(DMatrix::identity(k, k) * eta));
            }
            BlockKind::Diag(k) => {
                it.x.push(BlockMat::Diag(DVector::from_element(k, xi)));
                it.s.push(BlockMat::Diag(DVector::from_element(k, eta)));
            }
        }
    }

    let bn = s.b.norm();
    let cn = (s.c.iter().map(BlockMat::frobenius_sq).sum::<f64>() + s.cf.norm_squared()).sqrt();
    let blowup = 1e10 * (1.0 + bn + cn);
    let mut best: Option<(f64, Iterate, usize)> = None;
    let mut since_best = 0;
    let mut status = SdpStatus::IterationLimit;
    let mut iters = 0;
    let mut tiny_steps = 0;

    for iter in 0..opts.max_iter {
        iters = iter;
        // Residuals in the scaled problem.
        let rp = &s.b - s.apply(&it.x) - &s.f * &it.w;
        let aty = s.adjoint(&it.y);
        let rd = sub_blocks(&sub_blocks(&s.c, &aty), &it.s);
        let rf = &s.cf - s.f.transpose() * &it.y;
        let pobj = dot_blocks(&s.c, &it.x) + s.cf.dot(&it.w);
        let dobj = s.b.dot(&it.y);
        let xs = dot_blocks(&it.x, &it.s);
        let mu = xs / nu;
        let pinf = rp.norm() / (1.0 + bn);
        let dinf = ((rd.iter().map(BlockMat::frobenius_sq).sum::<f64>()).sqrt() + rf.norm()) / (1.0 + cn);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let merit = pinf.max(dinf).max(gap);
        if opts.verbose {
            eprintln!(
                "ipm {iter:3}  p={pobj:+.10e} d={dobj:+.10e}  pinf={pinf:.2e} dinf={dinf:.2e} gap={gap:.2e} mu={mu:.2e} |y|={:.1e} |w|={:.1e}",
                it.y.amax(),
                if s.p > 0 { it.w.amax() } else { 0.0 }
            );
        }
        if best.as_ref().map_or(true, |(m, _, _)| merit < *m) {
            best = Some((
                merit,
                Iterate {
                    x: it.x.clone(),
                    w: it.w.clone(),
                    y: it.y.clone(),
                    s: it.s.clone(),
                },
                iter,
            ));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if merit <= opts.tol {
            status = SdpStatus::Solved;
            break;
        }
        if dobj > blowup && dinf < 1e-6 * dobj.abs() / (1.0 + cn) {
            status = SdpStatus::Infeasible;
            break;
        }
        if -pobj > blowup && pinf < 1e-6 * pobj.abs() / (1.0 + bn) {
            status = SdpStatus::Infeasible;
            break;
        }
        if since_best > 15 || tiny_steps >= 4 {
            status = SdpStatus::Stalled;
            break;
        }

        let Some(scal) = it
            .x
            .iter()
            .zip(&it.s)
            .map(|(x, sb)| nt_scaling(x, sb))
            .collect::<Option<Vec<_>>>()
        else {
            status = SdpStatus::Stalled;
            break;
        };
        let Some(fac) = kkt.factor(schur_root(&s, &scal)) else {
            status = SdpStatus::Stalled;
            break;
        };
        let wrdw = w_sandwich(&scal, &rd);
        let a_wrdw = s.apply(&wrdw);

        let zero_f = DVector::zeros(s.p);
        let direction = |rx: &[BlockMat]| {
            let h = &rp - s.apply(rx) + &a_wrdw;
            let (mut dy, mut dw) = kkt.solve(&fac, &h, &rf);
            let mut ds = sub_blocks(&rd, &s.adjoint(&dy));
            let mut dx = sub_blocks(rx, &w_sandwich(&scal, &ds));
            // Iterative refinement on the primal equations as actually
            // evaluated, `A(ΔX) + F Δw = r_p`; the rounded Schur matrix only
            // supplies corrections.
            let mut last = f64::INFINITY;
            for _ in 0..3 {
                let r = &rp - s.apply(&dx) - &s.f * &dw;
                let rn = r.norm();
                if !(rn < 0.5 * last) || rn <= 1e-15 * (1.0 + rp.norm()) {
                    break;
                }
                last = rn;
                let (cy, cw) = kkt.solve(&fac, &r, &zero_f);
                let cs = s.adjoint(&cy);
                axpy_blocks(&mut ds, -1.0, &cs);
                axpy_blocks(&mut dx, 1.0, &w_sandwich(&scal, &cs));
                dy += cy;
                dw += cw;
            }
            if let Some(pr) = &projector {
                pr.correct(&s, &rp, &mut dx, &mut dw);
            }
            (dx, dw, dy, ds)
        };

        // Predictor.
        let rx = complementarity_rhs(&scal, 0.0, None);
        let (dx_a, _, _, ds_a) = direction(&rx);
        let ap = it.x.iter().zip(&dx_a).map(|(x, d)| max_step(x, d, 1.0)).fold(1.0, f64::min);
        let ad = it.s.iter().zip(&ds_a).map(|(x, d)| max_step(x, d, 1.0)).fold(1.0, f64::min);
        let mut xa = it.x.clone();
        axpy_blocks(&mut xa, ap, &dx_a);
        let mut sa = it.s.clone();
        axpy_blocks(&mut sa, ad, &ds_a);
        let mu_aff = dot_blocks(&xa, &sa) / nu;
        let expo = if mu > 1e-6 { 3f64.max(3.0 * ap.min(ad).powi(2)) } else { 3.0 };
        let sigma = (mu_aff / mu).max(0.0).powf(expo).min(1.0);

        // Corrector.
        let rx = complementarity_rhs(&scal, sigma * mu, Some((&dx_a, &ds_a)));
        let (dx, dw, dy, ds) = direction(&rx);
        let apm = it.x.iter().zip(&dx).map(|(x, d)| max_step(x, d, 1e6)).fold(1e6, f64::min);
        let adm = it.s.iter().zip(&ds).map(|(x, d)| max_step(x, d, 1e6)).fold(1e6, f64::min);
        let gamma = 0.9 + 0.09 * apm.min(adm).min(1.0);
        let ap = (gamma * apm).min(1.0);
        let ad = (gamma * adm).min(1.0);
        if ap.max(ad) < 1e-8 {
            tiny_steps += 1;
        } else {
            tiny_steps = 0;
        }
        axpy_blocks(&mut it.x, ap, &dx);
        it.w += dw * ap;
        it.y += dy * ad;
        axpy_blocks(&mut it.s, ad, &ds);
    }

    let final_it = match status {
        SdpStatus::Solved => it,
        _ => best.map(|(_, b, _)| b).unwrap_or(it),
    };
    let y: Vec<f64> = final_it.y.iter().zip(&s.row_scale).map(|(y, r)| y / r).collect();
    (final_it.x, final_it.w.iter().copied().collect(), y, final_it.s, iters, status)
}

#[cfg(test)]
mod tests {
    use super::super::toy;
    use super::*;

    #[test]
    fn nonnegative_scalar_minimum_is_zero() {
        let p = toy::nonneg_scalar();
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Solved);
        assert!(sol.primal_obj.abs() < 1e-7, "{}", sol.primal_obj);
    }

    #[test]
    fn trace_problem_matches_schur_complement_oracle() {
        // Oracle: X₂₂ ≥ X₁₂²/X₁₁ = 1, so brute force over a grid of X₂₂
        // values, keeping those with a PSD matrix, gives min trace = 2.
        let mut oracle = f64::INFINITY;
        for k in 0..=4000 {
            let x22 = k as f64 * 1e-3;
            let det = 1.0 * x22 - 1.0;
            if det >= -1e-12 {
                oracle = oracle.min(1.0 + x22);
            }
        }
        assert!((oracle - 2.0).abs() < 1e-9);
        let sol = solve(&toy::trace_2x2(), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Solved);
        assert!((sol.primal_obj - oracle).abs() < 1e-7);
        let BlockMat::Dense(x) = &sol.primal[0] else { panic!() };
        for v in x.iter() {
            assert!((v - 1.0).abs() < 1e-6, "{x}");
        }
        // weak duality at termination
        assert!(sol.primal_obj >= sol.dual_obj - 1e-6 * (1.0 + sol.primal_obj.abs()));
    }

    #[test]
    fn lp_block_and_free_variables() {
        use super::super::{Constraint, Entry};
        // min x1 + 3 x2 + w  s.t. x1 + x2 = 1, w − x1 = 0 (x ≥ 0) → 2 at x1 = 1.
        let p = SdpProblem {
            blocks: vec![BlockKind::Diag(2)],
            n_free: 1,
            constraints: vec![
                Constraint {
                    entries: vec![Entry::new(0, 0, 0, 1.0), Entry::new(0, 1, 1, 1.0)],
                    free: vec![],
                    rhs: 1.0,
                },
                Constraint {
                    entries: vec![Entry::new(0, 0, 0, -1.0)],
                    free: vec![(0, 1.0)],
                    rhs: 0.0,
                },
            ],
            objective: vec![Entry::new(0, 0, 0, 1.0), Entry::new(0, 1, 1, 3.0)],
            free_objective: vec![(0, 1.0)],
        };
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Solved);
        assert!((sol.primal_obj - 2.0).abs() < 1e-7);
        assert!((sol.free[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_problem_detected() {
        use super::super::{Constraint, Entry};
        // X₁₁ = −1 with X ⪰ 0.
        let p = SdpProblem {
            blocks: vec![BlockKind::Psd(1)],
            n_free: 0,
            constraints: vec![Constraint {
                entries: vec![Entry::new(0, 0, 0, 1.0)],
                free: vec![],
                rhs: -1.0,
            }],
            objective: vec![Entry::new(0, 0, 0, 1.0)],
            free_objective: vec![],
        };
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_ne!(sol.status, SdpStatus::Solved);
        assert_ne!(sol.status, SdpStatus::NearSolved);
    }

    #[test]
    fn block_cap_enforced() {
        let p = toy::trace_2x2();
        let opts = SolveOptions {
            max_block: 1,
            ..Default::default()
        };
        assert!(matches!(solve(&p, &opts), Err(SdpError::BlockTooLarge { .. })));
    }
}
