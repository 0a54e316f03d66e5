//! Upper bounds on long-time averages from polynomial auxiliary functions.
//!
//! For a polynomial `V` and a number `U`, if `D = U − Φ − f·∇V` is a sum of
//! squares then `D ≥ 0` everywhere, and averaging along any bounded
//! trajectory gives `Φ̄ ≤ U`. The search over `(U, V, Q)` with
//! `D = z(a)ᵀ Q z(a)`, `Q ⪰ 0`, is a semidefinite program.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::polyalg::{fmt_coeff, monomials_between, monomials_up_to, Monomial, PolyError, Polynomial};
use crate::sdpsolve::{
    self, BlockKind, BlockMat, Constraint, Entry, HouseholderQr, SdpError, SdpProblem, SdpSolution, SdpStatus,
    SolveOptions,
};
use crate::systems::DynamicalSystem;

pub const TOL_PSD: f64 = 1e-7;
pub const TOL_MATCH: f64 = 1e-6;
pub const TOL_NONNEG: f64 = 1e-6;
/// Default cap on the Gram basis size accepted by [`build_relaxation`].
pub const DEFAULT_BASIS_CAP: usize = 2000;

#[derive(Debug, Error)]
pub enum SosError {
    #[error("degree of V must be even and positive, got {0}")]
    OddDegree(u32),
    #[error("degree of V ({deg_v}) is below the degree of the observable ({deg_phi})")]
    DegreeBelowObservable { deg_v: u32, deg_phi: u32 },
    #[error("Gram basis has {size} monomials, above the cap of {cap}; export the SDP in SDPA format and solve it externally")]
    BasisTooLarge { size: usize, cap: usize },
    #[error("observable has dimension {found}, system has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("affine scaling must have one nonzero entry per coordinate")]
    BadScaling,
    #[error("relaxation is inconsistent: monomial {0:?} of the observable cannot be matched")]
    Unmatchable(Vec<u32>),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Affine change of variables `a = center + scale ⊙ x` used to build the
/// program in better-conditioned coordinates. SOS-ness is invariant under it.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaling {
    pub fn identity(n: usize) -> Self {
        AffineScaling {
            center: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Maps the box `[lo, hi]` onto `[−1, 1]ⁿ`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        AffineScaling {
            center: lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect(),
            scale: lo.iter().zip(hi).map(|(l, h)| (0.5 * (h - l)).max(1e-12)).collect(),
        }
    }

    /// `x = (a − center) / scale`.
    pub fn to_scaled(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((a, c), s)| (a - c) / s)
            .collect()
    }

    /// `a = center + scale ⊙ x`.
    pub fn to_original(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((x, c), s)| c + s * x)
            .collect()
    }

    /// Field and observable rewritten in `x`: `ẋ_i = f_i(a(x)) / scale_i`.
    pub fn scaled_problem(&self, system: &DynamicalSystem, phi: &Polynomial) -> (Vec<Polynomial>, Polynomial) {
        let field = system
            .field
            .iter()
            .enumerate()
            .map(|(i, f)| f.compose_affine(&self.center, &self.scale).scale(1.0 / self.scale[i]))
            .collect();
        (field, phi.compose_affine(&self.center, &self.scale))
    }

    pub fn inverse(&self) -> AffineScaling {
        AffineScaling {
            center: self.center.iter().zip(&self.scale).map(|(c, s)| -c / s).collect(),
            scale: self.scale.iter().map(|s| 1.0 / s).collect(),
        }
    }
}

/// The affine set `{w : F w = b}` of a list of sparse rows.
struct AffineSolutions {
    /// Orthonormal basis of the null space of `F`, one column per direction.
    null: DMatrix<f64>,
    /// A particular solution.
    w0: DVector<f64>,
}

impl AffineSolutions {
    fn new(p: usize, rows: &[&(Vec<(usize, f64)>, f64)]) -> Self {
        if rows.is_empty() {
            return AffineSolutions {
                null: DMatrix::identity(p, p),
                w0: DVector::zeros(p),
            };
        }
        let mut ft = DMatrix::zeros(p, rows.len());
        for (r, (coefs, _)) in rows.iter().enumerate() {
            for &(k, c) in coefs {
                ft[(k, r)] += c;
            }
        }
        let qr = HouseholderQr::new(&ft, 1e-12);
        let rank = qr.rank;
        let b_sel = DVector::from_fn(rank, |k, _| rows[qr.perm[k]].1);
        let u = qr
            .r
            .transpose()
            .solve_lower_triangular(&b_sel)
            .unwrap_or_else(|| DVector::zeros(rank));
        AffineSolutions {
            w0: qr.q.columns(0, rank) * u,
            null: qr.q.columns(rank, p - rank).clone_owned(),
        }
    }

    /// Whether `Σ coef·w − rhs` equals `value` for every `w` in the set.
    fn is_constant(&self, row: &(Vec<(usize, f64)>, f64), value: f64) -> bool {
        let (coefs, rhs) = row;
        let norm: f64 = coefs.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        let mut along = DVector::zeros(self.null.ncols());
        let mut at_w0 = -rhs;
        for &(k, c) in coefs {
            along += self.null.row(k).transpose() * c;
            at_w0 += c * self.w0[k];
        }
        along.norm() <= 1e-9 * norm && (at_w0 - value).abs() <= 1e-9 * (1.0 + rhs.abs() + norm)
    }
}

/// Degree of `D = U − Φ − f·∇V`, before any cancellation.
pub fn gap_degree(system: &DynamicalSystem, phi: &Polynomial, deg_v: u32) -> u32 {
    phi.degree().max(deg_v.saturating_sub(1) + system.degree())
}

#[derive(Clone, Debug)]
pub struct RelaxationSpec {
    pub system: DynamicalSystem,
    pub observable: Polynomial,
    pub deg_v: u32,
    /// Monomials of `V` (degrees `1..=deg_v`, constant excluded).
    pub basis_v: Vec<Monomial>,
    /// Gram basis `z`.
    pub basis_sigma: Vec<Monomial>,
    pub scaling: AffineScaling,
    pub basis_cap: usize,
}

impl RelaxationSpec {
    /// Full bases: every monomial of degree `1..=deg_v` in `V`, and every
    /// monomial up to `⌊deg D / 2⌋` in `z`. When `deg D` is odd its top-degree
    /// part cannot be a sum of squares, so those coefficients are forced to
    /// zero by linear constraints on `V` alone.
    pub fn new(system: DynamicalSystem, observable: Polynomial, deg_v: u32) -> Result<Self, SosError> {
        if deg_v == 0 || deg_v % 2 == 1 {
            return Err(SosError::OddDegree(deg_v));
        }
        if observable.dim() != system.dim() {
            return Err(SosError::DimensionMismatch {
                expected: system.dim(),
                found: observable.dim(),
            });
        }
        if deg_v < observable.degree() {
            return Err(SosError::DegreeBelowObservable {
                deg_v,
                deg_phi: observable.degree(),
            });
        }
        let n = system.dim();
        let half = gap_degree(&system, &observable, deg_v) / 2;
        let mut spec = RelaxationSpec {
            basis_v: monomials_between(n, 1, deg_v),
            basis_sigma: monomials_up_to(n, half),
            scaling: AffineScaling::identity(n),
            observable,
            deg_v,
            system,
            basis_cap: DEFAULT_BASIS_CAP,
        };
        spec.prune_gram_basis()?;
        Ok(spec)
    }

    /// Re-derives the full Gram basis for the current scaling and prunes it.
    pub fn with_scaling(mut self, scaling: AffineScaling) -> Result<Self, SosError> {
        let n = self.system.dim();
        if scaling.center.len() != n || scaling.scale.len() != n || scaling.scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(SosError::BadScaling);
        }
        self.scaling = scaling;
        self.basis_sigma = monomials_up_to(n, gap_degree(&self.system, &self.observable, self.deg_v) / 2);
        self.prune_gram_basis()?;
        Ok(self)
    }

    /// Removes Gram monomials `β` whose diagonal entry is forced to zero.
    /// That happens when `2β` can only be formed as `β·β` from kept
    /// monomials and the coefficient of `2β` in `U − Φ − f·∇V` vanishes for
    /// every `V` that satisfies the constraints involving no Gram entry (for
    /// instance the odd top-degree part). Row and column `β` of a PSD `Q`
    /// must then vanish, so dropping `β` leaves the feasible set unchanged
    /// and makes the program strictly feasible. Repeated to a fixed point.
    pub fn prune_gram_basis(&mut self) -> Result<(), SosError> {
        let p = 1 + self.basis_v.len();
        let free = self.free_rows()?;
        loop {
            let nb = self.basis_sigma.len();
            let mut reach: HashMap<Monomial, usize> = HashMap::new();
            for a in 0..nb {
                for b in a..nb {
                    *reach.entry(self.basis_sigma[a].product(&self.basis_sigma[b])).or_insert(0) += 1;
                }
            }
            let pure: Vec<&(Vec<(usize, f64)>, f64)> = free
                .iter()
                .filter(|(m, _)| !reach.contains_key(*m))
                .map(|(_, r)| r)
                .collect();
            let span = AffineSolutions::new(p, &pure);
            let forced: Vec<Monomial> = self
                .basis_sigma
                .iter()
                .filter(|b| {
                    let sq = b.product(b);
                    reach.get(&sq) == Some(&1) && free.get(&sq).map_or(true, |row| span.is_constant(row, 0.0))
                })
                .cloned()
                .collect();
            if forced.is_empty() {
                return Ok(());
            }
            self.basis_sigma.retain(|b| !forced.contains(b));
        }
    }

    /// Free-variable part of every coefficient row: `(Σ coef·w, rhs)` with
    /// `w = (U, v)`, from `⟨A_α, Q⟩ − [α = 0] U + Σ_j v_j (f·∇m_j)_α = −Φ_α`.
    fn free_rows(&self) -> Result<BTreeMap<Monomial, (Vec<(usize, f64)>, f64)>, SosError> {
        let n = self.system.dim();
        let (field, phi) = self.scaled_data();
        let mut rows: BTreeMap<Monomial, (Vec<(usize, f64)>, f64)> = BTreeMap::new();
        rows.entry(Monomial::one(n)).or_default().0.push((0, -1.0));
        for (j, m) in self.basis_v.iter().enumerate() {
            let mut mp = Polynomial::zero(n);
            mp.add_term(m.clone(), 1.0);
            for (alpha, c) in mp.lie_derivative(&field)?.terms() {
                rows.entry(alpha.clone()).or_default().0.push((j + 1, c));
            }
        }
        for (alpha, c) in phi.terms() {
            rows.entry(alpha.clone()).or_default().1 -= c;
        }
        Ok(rows)
    }

    /// Replaces the Gram basis (manual pruning).
    pub fn with_gram_basis(mut self, mut basis: Vec<Monomial>) -> Self {
        basis.sort();
        basis.dedup();
        self.basis_sigma = basis;
        self
    }

    /// The field and observable in scaled coordinates `x`.
    fn scaled_data(&self) -> (Vec<Polynomial>, Polynomial) {
        self.scaling.scaled_problem(&self.system, &self.observable)
    }
}

/// Where each unknown lives in the SDP.
#[derive(Clone, Debug)]
pub struct DecodingMap {
    /// Free variable holding `U`.
    pub bound_var: usize,
    /// `(monomial of V, free variable)`.
    pub v_vars: Vec<(Monomial, usize)>,
    /// PSD block holding `Q`.
    pub gram_block: usize,
    /// Monomial matched by each constraint row.
    pub rows: Vec<Monomial>,
}

/// Builds `min U` s.t. `U − Φ − f·∇V = zᵀQz`, `Q ⪰ 0`.
pub fn build_relaxation(spec: &RelaxationSpec) -> Result<(SdpProblem, DecodingMap), SosError> {
    let nb = spec.basis_sigma.len();
    if nb > spec.basis_cap {
        return Err(SosError::BasisTooLarge {
            size: nb,
            cap: spec.basis_cap,
        });
    }
    #[derive(Default)]
    struct Row {
        gram: Vec<(usize, usize)>,
        free: Vec<(usize, f64)>,
        rhs: f64,
    }
    let mut rows: BTreeMap<Monomial, Row> = BTreeMap::new();
    for a in 0..nb {
        for b in a..nb {
            let m = spec.basis_sigma[a].product(&spec.basis_sigma[b]);
            rows.entry(m).or_default().gram.push((a, b));
        }
    }
    for (alpha, (free, rhs)) in spec.free_rows()? {
        let r = rows.entry(alpha).or_default();
        r.free = free;
        r.rhs = rhs;
    }
    let v_vars: Vec<(Monomial, usize)> = spec.basis_v.iter().cloned().zip(1..).collect();

    let mut constraints = Vec::with_capacity(rows.len());
    let mut row_monos = Vec::with_capacity(rows.len());
    for (alpha, row) in rows {
        if row.gram.is_empty() && row.free.is_empty() {
            if row.rhs != 0.0 {
                return Err(SosError::Unmatchable(alpha.exponents().to_vec()));
            }
            continue;
        }
        constraints.push(Constraint {
            entries: row.gram.iter().map(|&(a, b)| Entry::new(0, a, b, 1.0)).collect(),
            free: row.free,
            rhs: row.rhs,
        });
        row_monos.push(alpha);
    }
    let problem = SdpProblem {
        blocks: vec![BlockKind::Psd(nb)],
        n_free: 1 + spec.basis_v.len(),
        constraints,
        objective: Vec::new(),
        free_objective: vec![(0, 1.0)],
    };
    Ok((
        problem,
        DecodingMap {
            bound_var: 0,
            v_vars,
            gram_block: 0,
            rows: row_monos,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CertStatus {
    Optimal,
    NearOptimal,
    Infeasible,
    NumericalTrouble,
}

impl CertStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CertStatus::Optimal => "Optimal",
            CertStatus::NearOptimal => "NearOptimal",
            CertStatus::Infeasible => "Infeasible",
            CertStatus::NumericalTrouble => "NumericalTrouble",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Optimal" => CertStatus::Optimal,
            "NearOptimal" => CertStatus::NearOptimal,
            "Infeasible" => CertStatus::Infeasible,
            "NumericalTrouble" => CertStatus::NumericalTrouble,
            _ => return None,
        })
    }

    pub fn is_usable(&self) -> bool {
        matches!(self, CertStatus::Optimal | CertStatus::NearOptimal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CertResiduals {
    pub min_gram_eigenvalue: f64,
    /// Largest absolute coefficient of `D − zᵀQz` in scaled coordinates.
    pub max_coeff_mismatch: f64,
}

/// Auxiliary function `V`, bound `U` and the SOS witness for `D`.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub deg_v: u32,
    /// `V` in the scaled coordinates `x`, exactly as solved for. Expanding
    /// it in the original coordinates can cost many digits to cancellation.
    pub v_scaled: Polynomial,
    pub bound: f64,
    /// Gram basis, evaluated at scaled coordinates.
    pub basis: Vec<Monomial>,
    pub gram: DMatrix<f64>,
    pub scaling: AffineScaling,
    pub residuals: CertResiduals,
    pub status: CertStatus,
}

/// Expands `zᵀQz` into a polynomial.
fn gram_polynomial(n: usize, basis: &[Monomial], q: &DMatrix<f64>) -> Polynomial {
    let mut p = Polynomial::zero(n);
    let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
    for a in 0..basis.len() {
        for b in a..basis.len() {
            let w = if a == b { q[(a, a)] } else { q[(a, b)] + q[(b, a)] };
            *acc.entry(basis[a].product(&basis[b])).or_insert(0.0) += w;
        }
    }
    for (m, c) in acc {
        p.add_term(m, c);
    }
    p
}

/// Reads `V`, `U` and `Q` back out of an SDP solution and re-checks them.
pub fn extract_certificate(
    spec: &RelaxationSpec,
    decoding: &DecodingMap,
    solution: &SdpSolution,
) -> Result<Certificate, SosError> {
    let n = spec.system.dim();
    let bound = solution.free[decoding.bound_var];
    let mut v_scaled = Polynomial::zero(n);
    for (m, k) in &decoding.v_vars {
        v_scaled.add_term(m.clone(), solution.free[*k]);
    }
    let gram = match &solution.primal[decoding.gram_block] {
        BlockMat::Dense(q) => (q + q.transpose()) * 0.5,
        BlockMat::Diag(_) => unreachable!("Gram block is dense"),
    };
    let (field, phi) = spec.scaled_data();
    let d_scaled = &(&Polynomial::constant(n, bound) - &phi) - &v_scaled.lie_derivative(&field)?;
    let zqz = gram_polynomial(n, &spec.basis_sigma, &gram);
    let mismatch = (&d_scaled - &zqz).max_abs_coeff();
    let min_eig = sdpsolve::min_eigenvalue(&gram);
    let residuals = CertResiduals {
        min_gram_eigenvalue: min_eig,
        max_coeff_mismatch: mismatch,
    };
    let gates = min_eig >= -TOL_PSD && mismatch <= TOL_MATCH;
    let status = match solution.status {
        SdpStatus::Infeasible => CertStatus::Infeasible,
        _ if !gates => CertStatus::NumericalTrouble,
        SdpStatus::Solved => CertStatus::Optimal,
        SdpStatus::NearSolved => CertStatus::NearOptimal,
        _ => CertStatus::NumericalTrouble,
    };
    Ok(Certificate {
        deg_v: spec.deg_v,
        v_scaled,
        bound,
        basis: spec.basis_sigma.clone(),
        gram,
        scaling: spec.scaling.clone(),
        residuals,
        status,
    })
}

/// Builds, solves with the embedded solver, and extracts.
pub fn solve_bound(spec: &RelaxationSpec, opts: &SolveOptions) -> Result<Certificate, SosError> {
    let (problem, decoding) = build_relaxation(spec)?;
    let sol = sdpsolve::solve(&problem, opts)?;
    log::info!(
        "bound SDP: {} rows, Gram {}×{}, status {:?}, U = {:.10}, residual {:.2e}",
        problem.num_constraints(),
        spec.basis_sigma.len(),
        spec.basis_sigma.len(),
        sol.status,
        sol.free[0],
        sol.residuals.max()
    );
    extract_certificate(spec, &decoding, &sol)
}

impl Certificate {
    /// `V` expanded in the original coordinates.
    pub fn v(&self) -> Polynomial {
        let inv = self.scaling.inverse();
        self.v_scaled.compose_affine(&inv.center, &inv.scale)
    }

    /// `D̃(x) = D(a(x))`, the gap polynomial in the scaled coordinates.
    pub fn gap_scaled(&self, system: &DynamicalSystem, phi: &Polynomial) -> Result<Polynomial, PolyError> {
        let n = system.dim();
        if self.v_scaled.dim() != n || phi.dim() != n {
            return Err(PolyError::DimensionMismatch {
                expected: n,
                found: if phi.dim() != n { phi.dim() } else { self.v_scaled.dim() },
            });
        }
        let (field, phi_s) = self.scaling.scaled_problem(system, phi);
        let lie = self.v_scaled.lie_derivative(&field)?;
        Ok(&(&Polynomial::constant(n, self.bound) - &phi_s) - &lie)
    }

    /// `D = U − Φ − f·∇V` expanded in the original coordinates.
    pub fn gap(&self, system: &DynamicalSystem, phi: &Polynomial) -> Result<Polynomial, PolyError> {
        let inv = self.scaling.inverse();
        Ok(self.gap_scaled(system, phi)?.compose_affine(&inv.center, &inv.scale))
    }

    /// `z(x)ᵀ Q z(x)` at the scaled image `x` of `a`.
    pub fn sos_value(&self, a: &[f64]) -> f64 {
        let x = self.scaling.to_scaled(a);
        let z: Vec<f64> = self.basis.iter().map(|m| m.eval(&x)).collect();
        let mut s = 0.0;
        for i in 0..z.len() {
            for j in 0..z.len() {
                s += z[i] * self.gram[(i, j)] * z[j];
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let n = self.v_scaled.dim();
        let mut s = String::new();
        let _ = writeln!(s, "# sum-of-squares certificate; v and gram are in the scaled coordinates");
        let _ = writeln!(s, "n {n}");
        let _ = writeln!(s, "deg_v {}", self.deg_v);
        let _ = writeln!(s, "bound {:.16e}", self.bound);
        let _ = writeln!(s, "status {}", self.status.as_str());
        let _ = writeln!(s, "min_gram_eigenvalue {:.16e}", self.residuals.min_gram_eigenvalue);
        let _ = writeln!(s, "max_coeff_mismatch {:.16e}", self.residuals.max_coeff_mismatch);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "center {}", join(&self.scaling.center));
        let _ = writeln!(s, "scale {}", join(&self.scaling.scale));
        let _ = writeln!(s, "v {}", self.v_scaled.len());
        for (m, c) in self.v_scaled.terms() {
            let _ = write!(s, "{}", fmt_coeff(c));
            for e in m.exponents() {
                let _ = write!(s, " {e}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "basis {}", self.basis.len());
        for m in &self.basis {
            let e: Vec<String> = m.exponents().iter().map(|e| e.to_string()).collect();
            let _ = writeln!(s, "{}", e.join(" "));
        }
        let _ = writeln!(s, "gram {}", self.gram.nrows());
        for i in 0..self.gram.nrows() {
            let row: Vec<f64> = (0..=i).map(|j| self.gram[(i, j)]).collect();
            let _ = writeln!(s, "{}", join(&row));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Certificate, SosError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut last = 0usize;
        let mut next = |key: &str| -> Result<(usize, Vec<String>), SosError> {
            let (ln, l) = lines.next().ok_or(SosError::Parse {
                line: last + 1,
                msg: format!("missing '{key}'"),
            })?;
            last = ln;
            let mut t = l.split_whitespace();
            if !key.is_empty() && t.next() != Some(key) {
                return Err(SosError::Parse {
                    line: ln,
                    msg: format!("expected '{key}'"),
                });
            }
            Ok((ln, t.map(str::to_string).collect()))
        };
        fn num<T: std::str::FromStr>(ln: usize, s: Option<&String>) -> Result<T, SosError> {
            s.and_then(|s| s.parse().ok()).ok_or(SosError::Parse {
                line: ln,
                msg: "bad or missing number".into(),
            })
        }
        fn nums(ln: usize, t: &[String]) -> Result<Vec<f64>, SosError> {
            t.iter().map(|s| num(ln, Some(s))).collect()
        }
        let (ln, t) = next("n")?;
        let n: usize = num(ln, t.first())?;
        let (ln, t) = next("deg_v")?;
        let deg_v: u32 = num(ln, t.first())?;
        let (ln, t) = next("bound")?;
        let bound: f64 = num(ln, t.first())?;
        let (ln, t) = next("status")?;
        let status = t
            .first()
            .and_then(|s| CertStatus::parse(s))
            .ok_or(SosError::Parse {
                line: ln,
                msg: "unknown status".into(),
            })?;
        let (ln, t) = next("min_gram_eigenvalue")?;
        let min_gram_eigenvalue: f64 = num(ln, t.first())?;
        let (ln, t) = next("max_coeff_mismatch")?;
        let max_coeff_mismatch: f64 = num(ln, t.first())?;
        let (ln, t) = next("center")?;
        let center = nums(ln, &t)?;
        let (ln, t) = next("scale")?;
        let scale = nums(ln, &t)?;
        if center.len() != n || scale.len() != n {
            return Err(SosError::Parse {
                line: ln,
                msg: format!("expected {n} scaling entries"),
            });
        }
        let (ln, t) = next("v")?;
        let nv: usize = num(ln, t.first())?;
        let mut v = Polynomial::zero(n);
        for _ in 0..nv {
            let (ln, t) = next("")?;
            let (c, m) = crate::polyalg::parse_term_line(n, &t.join(" "), ln)?.ok_or(SosError::Parse {
                line: ln,
                msg: "empty term".into(),
            })?;
            v.add_term(m, c);
        }
        let (ln, t) = next("basis")?;
        let nb: usize = num(ln, t.first())?;
        let mut basis = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, t) = next("")?;
            let e: Vec<u32> = t.iter().map(|s| num(ln, Some(s))).collect::<Result<_, _>>()?;
            if e.len() != n {
                return Err(SosError::Parse {
                    line: ln,
                    msg: format!("expected {n} exponents"),
                });
            }
            basis.push(Monomial::new(e));
        }
        let (ln, t) = next("gram")?;
        let ng: usize = num(ln, t.first())?;
        if ng != nb {
            return Err(SosError::Parse {
                line: ln,
                msg: "Gram size differs from basis size".into(),
            });
        }
        let mut gram = DMatrix::zeros(ng, ng);
        for i in 0..ng {
            let (ln, t) = next("")?;
            let row = nums(ln, &t)?;
            if row.len() != i + 1 {
                return Err(SosError::Parse {
                    line: ln,
                    msg: format!("Gram row {} needs {} entries", i + 1, i + 1),
                });
            }
            for (j, x) in row.into_iter().enumerate() {
                gram[(i, j)] = x;
                gram[(j, i)] = x;
            }
        }
        Ok(Certificate {
            deg_v,
            v_scaled: v,
            bound,
            basis,
            gram,
            scaling: AffineScaling { center, scale },
            residuals: CertResiduals {
                min_gram_eigenvalue,
                max_coeff_mismatch,
            },
            status,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    /// `+∞` when no samples were given.
    pub min_value: f64,
    pub argmin: Option<Vec<f64>>,
    pub below_tolerance: usize,
    pub samples: usize,
    pub gram_min_eigenvalue: f64,
    pub gram_max_eigenvalue: f64,
    pub gram_negative_eigenvalues: usize,
}

/// Evaluates `D` at every sample and summarises the Gram spectrum.
pub fn verify_certificate(
    cert: &Certificate,
    system: &DynamicalSystem,
    phi: &Polynomial,
    samples: &[Vec<f64>],
) -> Result<VerifyReport, PolyError> {
    let d = cert.gap_scaled(system, phi)?;
    let mut min_value = f64::INFINITY;
    let mut argmin = None;
    let mut below = 0;
    for x in samples {
        if x.len() != system.dim() {
            return Err(PolyError::DimensionMismatch {
                expected: system.dim(),
                found: x.len(),
            });
        }
        let v = d.eval(&cert.scaling.to_scaled(x))?;
        if v < -TOL_NONNEG {
            below += 1;
        }
        if v < min_value {
            min_value = v;
            argmin = Some(x.clone());
        }
    }
    let (lo, hi, neg) = if cert.gram.nrows() == 0 {
        (0.0, 0.0, 0)
    } else {
        let eig = nalgebra::SymmetricEigen::new(cert.gram.clone()).eigenvalues;
        (
            eig.iter().copied().fold(f64::INFINITY, f64::min),
            eig.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            eig.iter().filter(|e| **e < -TOL_PSD).count(),
        )
    };
    Ok(VerifyReport {
        min_value,
        argmin,
        below_tolerance: below,
        samples: samples.len(),
        gram_min_eigenvalue: lo,
        gram_max_eigenvalue: hi,
        gram_negative_eigenvalues: neg,
    })
}
