//! Block-diagonal semidefinite programs in standard primal form,
//!
//! ```text
//! minimize    ⟨C, X⟩ + c_fᵀ w
//! subject to  ⟨A_i, X⟩ + f_iᵀ w = b_i,   i = 1..m
//!             X ⪰ 0 (block diagonal),   w free
//! ```
//!
//! with the dual
//!
//! ```text
//! maximize    bᵀ y
//! subject to  C − Σ y_i A_i = S ⪰ 0,   Fᵀ y = c_f.
//! ```
//!
//! [`solve`] is a primal-dual interior-point method; [`sdpa`] handles the
//! SDPA sparse problem format and sparse solution files so any problem can
//! be handed to an external solver instead.

mod ipm;
mod linalg;
pub mod sdpa;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use ipm::{solve, SolveOptions};
pub use linalg::{min_eigenvalue, HouseholderQr};

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("problem has no constraints")]
    NoConstraints,
    #[error("constraint {constraint}: {msg}")]
    BadEntry { constraint: usize, msg: String },
    #[error("block {block} has dimension {dim}, above the cap of {cap}; export the problem in SDPA format and use an external solver")]
    BlockTooLarge { block: usize, dim: usize, cap: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("solution file is missing {0}")]
    Missing(&'static str),
}

/// Shape of one diagonal block of `X`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Dense symmetric PSD block of the given order.
    Psd(usize),
    /// Nonnegative diagonal (linear) block; SDPA writes it with a negative size.
    Diag(usize),
}

impl BlockKind {
    pub fn size(&self) -> usize {
        match *self {
            BlockKind::Psd(n) | BlockKind::Diag(n) => n,
        }
    }
}

/// One upper-triangle entry (`i ≤ j`, 0-based) of a symmetric block matrix.
/// An off-diagonal entry stands for both `(i, j)` and `(j, i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub block: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(block: usize, i: usize, j: usize, value: f64) -> Self {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        Entry { block, i, j, value }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Constraint {
    pub entries: Vec<Entry>,
    /// `(free variable index, coefficient)`.
    pub free: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SdpProblem {
    pub blocks: Vec<BlockKind>,
    pub n_free: usize,
    pub constraints: Vec<Constraint>,
    pub objective: Vec<Entry>,
    pub free_objective: Vec<(usize, f64)>,
}

/// Value of one block of `X` or `S`.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockMat {
    Dense(DMatrix<f64>),
    Diag(DVector<f64>),
}

impl BlockMat {
    pub fn zeros(kind: BlockKind) -> Self {
        match kind {
            BlockKind::Psd(n) => BlockMat::Dense(DMatrix::zeros(n, n)),
            BlockKind::Diag(n) => BlockMat::Diag(DVector::zeros(n)),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            BlockMat::Dense(m) => m[(i, j)],
            BlockMat::Diag(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
        }
    }

    fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        match self {
            BlockMat::Dense(m) => {
                m[(i, j)] += v;
                if i != j {
                    m[(j, i)] += v;
                }
            }
            BlockMat::Diag(d) => {
                debug_assert_eq!(i, j);
                d[i] += v;
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        match self {
            BlockMat::Dense(m) => m.norm_squared(),
            BlockMat::Diag(d) => d.norm_squared(),
        }
    }

    /// Smallest eigenvalue (smallest entry for diagonal blocks).
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            BlockMat::Dense(m) => min_eigenvalue(m),
            BlockMat::Diag(d) => d.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn dot(&self, other: &BlockMat) -> f64 {
        match (self, other) {
            (BlockMat::Dense(a), BlockMat::Dense(b)) => a.dot(b),
            (BlockMat::Diag(a), BlockMat::Diag(b)) => a.dot(b),
            _ => panic!("block kind mismatch"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    /// All scaled residuals within 1e-7.
    Solved,
    /// Residuals within 1e-5: usable, but not to full accuracy.
    NearSolved,
    Infeasible,
    Stalled,
    IterationLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Residuals {
    /// `‖A(X) + Fw − b‖ / (1 + ‖b‖)`.
    pub primal_infeas: f64,
    /// `(‖C − Aᵀy − S‖ + ‖Fᵀy − c_f‖) / (1 + ‖C‖ + ‖c_f‖)`.
    pub dual_infeas: f64,
    /// `|p − d| / (1 + |p| + |d|)`.
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal_infeas.max(self.dual_infeas).max(self.gap)
    }
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub primal: Vec<BlockMat>,
    pub free: Vec<f64>,
    pub dual: Vec<f64>,
    pub slack: Vec<BlockMat>,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub residuals: Residuals,
    pub status: SdpStatus,
    pub iterations: usize,
}

pub const SOLVED_TOL: f64 = 1e-7;
pub const NEAR_SOLVED_TOL: f64 = 1e-5;

impl SdpProblem {
    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Checks indices, symmetry convention and block kinds.
    pub fn validate(&self) -> Result<(), SdpError> {
        if self.constraints.is_empty() {
            return Err(SdpError::NoConstraints);
        }
        let check = |k: usize, e: &Entry| -> Result<(), SdpError> {
            let bad = |msg: String| SdpError::BadEntry { constraint: k, msg };
            let kind = self
                .blocks
                .get(e.block)
                .ok_or_else(|| bad(format!("block {} out of range", e.block)))?;
            if e.i > e.j {
                return Err(bad(format!("entry ({}, {}) is below the diagonal", e.i, e.j)));
            }
            if e.j >= kind.size() {
                return Err(bad(format!("entry ({}, {}) outside block {}", e.i, e.j, e.block)));
            }
            if matches!(kind, BlockKind::Diag(_)) && e.i != e.j {
                return Err(bad(format!("off-diagonal entry in diagonal block {}", e.block)));
            }
            if !e.value.is_finite() {
                return Err(bad("non-finite coefficient".into()));
            }
            Ok(())
        };
        for (k, c) in self.constraints.iter().enumerate() {
            for e in &c.entries {
                check(k + 1, e)?;
            }
            for &(v, _) in &c.free {
                if v >= self.n_free {
                    return Err(SdpError::BadEntry {
                        constraint: k + 1,
                        msg: format!("free variable {v} out of range"),
                    });
                }
            }
        }
        for e in &self.objective {
            check(0, e)?;
        }
        Ok(())
    }

    /// `⟨A_i, X⟩` summed over blocks, using the upper-triangle convention.
    fn apply_entries(entries: &[Entry], x: &[BlockMat]) -> f64 {
        entries
            .iter()
            .map(|e| {
                let v = x[e.block].get(e.i, e.j);
                if e.i == e.j {
                    e.value * v
                } else {
                    2.0 * e.value * v
                }
            })
            .sum()
    }

    fn entries_to_blocks(&self, entries: &[Entry], scale: f64, out: &mut [BlockMat]) {
        for e in entries {
            out[e.block].add_sym(e.i, e.j, scale * e.value);
        }
    }

    pub fn objective_value(&self, x: &[BlockMat], w: &[f64]) -> f64 {
        Self::apply_entries(&self.objective, x)
            + self.free_objective.iter().map(|&(k, c)| c * w[k]).sum::<f64>()
    }

    /// Recomputes residuals for `(X, w, y, S)` on this problem.
    pub fn residuals(&self, x: &[BlockMat], w: &[f64], y: &[f64], s: &[BlockMat]) -> Residuals {
        let mut rp = 0.0;
        let mut bn = 0.0;
        for c in &self.constraints {
            let ax = Self::apply_entries(&c.entries, x)
                + c.free.iter().map(|&(k, v)| v * w[k]).sum::<f64>();
            rp += (ax - c.rhs).powi(2);
            bn += c.rhs * c.rhs;
        }
        // C − Aᵀy − S
        let mut rd: Vec<BlockMat> = self.blocks.iter().map(|&k| BlockMat::zeros(k)).collect();
        self.entries_to_blocks(&self.objective, 1.0, &mut rd);
        let cn: f64 = rd.iter().map(BlockMat::frobenius_sq).sum::<f64>().sqrt();
        for (c, &yi) in self.constraints.iter().zip(y) {
            self.entries_to_blocks(&c.entries, -yi, &mut rd);
        }
        let mut dn = 0.0;
        for (r, sb) in rd.iter_mut().zip(s) {
            match (r, sb) {
                (BlockMat::Dense(a), BlockMat::Dense(b)) => {
                    *a -= b;
                    dn += a.norm_squared();
                }
                (BlockMat::Diag(a), BlockMat::Diag(b)) => {
                    *a -= b;
                    dn += a.norm_squared();
                }
                _ => panic!("block kind mismatch"),
            }
        }
        let mut fres = vec![0.0; self.n_free];
        for &(k, c) in &self.free_objective {
            fres[k] -= c;
        }
        let fcn = self.free_objective.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        for (c, &yi) in self.constraints.iter().zip(y) {
            for &(k, v) in &c.free {
                fres[k] += v * yi;
            }
        }
        let fn_: f64 = fres.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pobj = self.objective_value(x, w);
        let dobj: f64 = self.constraints.iter().zip(y).map(|(c, yi)| c.rhs * yi).sum();
        Residuals {
            primal_infeas: rp.sqrt() / (1.0 + bn.sqrt()),
            dual_infeas: (dn.sqrt() + fn_) / (1.0 + cn + fcn),
            gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
        }
    }

    /// Builds a solution record from raw iterates, recomputing objectives,
    /// residuals and the PSD gate. Never trusts an external status claim.
    pub fn assess(
        &self,
        primal: Vec<BlockMat>,
        free: Vec<f64>,
        dual: Vec<f64>,
        slack: Vec<BlockMat>,
        iterations: usize,
    ) -> SdpSolution {
        let residuals = self.residuals(&primal, &free, &dual, &slack);
        let primal_obj = self.objective_value(&primal, &free);
        let dual_obj = self.constraints.iter().zip(&dual).map(|(c, y)| c.rhs * y).sum();
        let psd_ok = primal.iter().chain(&slack).all(|b| {
            let scale = b.frobenius_sq().sqrt().max(1.0);
            b.min_eigenvalue() >= -1e-8 * scale
        });
        let status = if !psd_ok {
            SdpStatus::Stalled
        } else if residuals.max() <= SOLVED_TOL {
            SdpStatus::Solved
        } else if residuals.max() <= NEAR_SOLVED_TOL {
            SdpStatus::NearSolved
        } else {
            SdpStatus::Stalled
        };
        SdpSolution {
            primal,
            free,
            dual,
            slack,
            primal_obj,
            dual_obj,
            residuals,
            status,
            iterations,
        }
    }
}

#[cfg(test)]
pub(crate) mod toy {
    use super::*;

    /// `min X₁₁` over a 1×1 block subject to `X₁₁ − w = 0` with `w` free.
    pub fn nonneg_scalar() -> SdpProblem {
        SdpProblem {
            blocks: vec![BlockKind::Psd(1)],
            n_free: 1,
            constraints: vec![Constraint {
                entries: vec![Entry::new(0, 0, 0, 1.0)],
                free: vec![(0, -1.0)],
                rhs: 0.0,
            }],
            objective: vec![Entry::new(0, 0, 0, 1.0)],
            free_objective: vec![],
        }
    }

    /// `min tr X` over 2×2 `X ⪰ 0` with `X₁₁ = 1`, `X₁₂ = 1`.
    pub fn trace_2x2() -> SdpProblem {
        SdpProblem {
            blocks: vec![BlockKind::Psd(2)],
            n_free: 0,
            constraints: vec![
                Constraint {
                    entries: vec![Entry::new(0, 0, 0, 1.0)],
                    free: vec![],
                    rhs: 1.0,
                },
                Constraint {
                    entries: vec![Entry::new(0, 0, 1, 0.5)],
                    free: vec![],
                    rhs: 1.0,
                },
            ],
            objective: vec![Entry::new(0, 0, 0, 1.0), Entry::new(0, 1, 1, 1.0)],
            free_objective: vec![],
        }
    }
}
