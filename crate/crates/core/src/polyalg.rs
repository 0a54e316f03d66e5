//! Sparse multivariate polynomials with `f64` coefficients.
//!
//! Terms are kept in a `BTreeMap` keyed by [`Monomial`], whose ordering is
//! graded lexicographic. Every basis enumeration in the crate goes through
//! that ordering, so Gram matrix indices are reproducible across runs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Exponent vector of a monomial `a₁^e₁ ⋯ a_n^e_n`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(n: usize) -> Self {
        Monomial(vec![0; n])
    }

    /// The monomial `a_i` in `n` variables.
    pub fn var(n: usize, i: usize) -> Self {
        let mut e = vec![0; n];
        e[i] = 1;
        Monomial(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn product(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.dim(), other.dim());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    /// Graded lexicographic: lower total degree first, then `a₁` before `a₂`
    /// (so `1 < a₁ < a₂ < a₁² < a₁a₂ < a₂²`).
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `n` variables with `lo ≤ degree ≤ hi`, graded-lex sorted.
pub fn monomials_between(n: usize, lo: u32, hi: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for d in lo..=hi {
        let mut cur = vec![0u32; n];
        push_degree(n, d, 0, &mut cur, &mut out);
    }
    out.sort();
    out
}

/// All monomials in `n` variables of degree at most `deg`.
pub fn monomials_up_to(n: usize, deg: u32) -> Vec<Monomial> {
    monomials_between(n, 0, deg)
}

fn push_degree(n: usize, remaining: u32, idx: usize, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if n == 0 {
        if remaining == 0 {
            out.push(Monomial(Vec::new()));
        }
        return;
    }
    if idx == n - 1 {
        cur[idx] = remaining;
        out.push(Monomial(cur.clone()));
        cur[idx] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        cur[idx] = e;
        push_degree(n, remaining - e, idx + 1, cur, out);
    }
    cur[idx] = 0;
}

/// Sparse polynomial in a fixed number of variables.
#[derive(Clone, PartialEq, Debug)]
pub struct Polynomial {
    dim: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(dim);
        p.add_term(Monomial::one(dim), c);
        p
    }

    pub fn var(dim: usize, i: usize) -> Self {
        let mut p = Polynomial::zero(dim);
        p.add_term(Monomial::var(dim, i), 1.0);
        p
    }

    /// Builds a polynomial from `(coefficient, exponents)` pairs, summing
    /// repeated monomials.
    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (f64, Vec<u32>)>,
    {
        let mut p = Polynomial::zero(dim);
        for (c, e) in terms {
            if e.len() != dim {
                return Err(PolyError::DimensionMismatch {
                    expected: dim,
                    found: e.len(),
                });
            }
            p.add_term(Monomial(e), c);
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Adds `c·m` in place, dropping the term if it cancels to zero.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        assert_eq!(m.dim(), self.dim, "monomial dimension");
        if c == 0.0 {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = *o.get() + c;
                if s == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    fn check_dim(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.dim != other.dim {
            return Err(PolyError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn checked_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), -c);
        }
        Ok(out)
    }

    pub fn checked_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other)?;
        let mut out = Polynomial::zero(self.dim);
        for (m1, &c1) in &self.terms {
            for (m2, &c2) in &other.terms {
                out.add_term(m1.product(m2), c1 * c2);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        if s == 0.0 {
            return out;
        }
        for (m, &c) in &self.terms {
            out.add_term(m.clone(), s * c);
        }
        out
    }

    /// Drops every term with `|c| ≤ tol`.
    pub fn prune(&self, tol: f64) -> Polynomial {
        Polynomial {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .filter(|(_, c)| c.abs() > tol)
                .map(|(m, &c)| (m.clone(), c))
                .collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, PolyError> {
        if x.len() != self.dim {
            return Err(PolyError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.terms.iter().map(|(m, &c)| c * m.eval(x)).sum())
    }

    /// `∂p/∂a_i`, exact in the exponents.
    pub fn derivative(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for (m, &c) in &self.terms {
            let e = m.0[i];
            if e == 0 {
                continue;
            }
            let mut d = m.0.clone();
            d[i] -= 1;
            out.add_term(Monomial(d), c * e as f64);
        }
        out
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.dim).map(|i| self.derivative(i)).collect()
    }

    /// `Σ_i field_i · ∂self/∂a_i`, fully expanded.
    pub fn lie_derivative(&self, field: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if field.len() != self.dim {
            return Err(PolyError::DimensionMismatch {
                expected: self.dim,
                found: field.len(),
            });
        }
        let mut out = Polynomial::zero(self.dim);
        for (i, fi) in field.iter().enumerate() {
            let di = self.derivative(i);
            if di.is_zero() {
                continue;
            }
            out = out.checked_add(&fi.checked_mul(&di)?)?;
        }
        Ok(out)
    }

    /// `p(center + scale ⊙ x)`, expanded in `x`.
    pub fn compose_affine(&self, center: &[f64], scale: &[f64]) -> Polynomial {
        assert_eq!(center.len(), self.dim);
        assert_eq!(scale.len(), self.dim);
        let subs: Vec<Polynomial> = (0..self.dim)
            .map(|i| {
                let mut s = Polynomial::var(self.dim, i).scale(scale[i]);
                s.add_term(Monomial::one(self.dim), center[i]);
                s
            })
            .collect();
        // Powers of each substituted variable, built lazily.
        let mut powers: Vec<Vec<Polynomial>> = subs
            .iter()
            .map(|_| vec![Polynomial::constant(self.dim, 1.0)])
            .collect();
        let mut out = Polynomial::zero(self.dim);
        for (m, &c) in &self.terms {
            let mut term = Polynomial::constant(self.dim, c);
            for (i, &e) in m.0.iter().enumerate() {
                while powers[i].len() <= e as usize {
                    let next = &powers[i][powers[i].len() - 1] * &subs[i];
                    powers[i].push(next);
                }
                if e > 0 {
                    term = &term * &powers[i][e as usize];
                }
            }
            out = &out + &term;
        }
        out
    }

    /// Largest absolute coefficient.
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn l1_norm(&self) -> f64 {
        self.terms.values().map(|c| c.abs()).sum()
    }

    /// One term per line: `c e₁ … e_n`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (m, &c) in &self.terms {
            s.push_str(&fmt_coeff(c));
            for e in &m.0 {
                s.push_str(&format!(" {e}"));
            }
            s.push('\n');
        }
        s
    }

    /// Parses term lines (`#` starts a comment, blank lines ignored).
    /// `first_line` is the 1-based line number of `text`'s first line, used
    /// in error messages.
    pub fn parse_terms(dim: usize, text: &str, first_line: usize) -> Result<Polynomial, PolyError> {
        let mut p = Polynomial::zero(dim);
        for (k, raw) in text.lines().enumerate() {
            if let Some((c, m)) = parse_term_line(dim, raw, first_line + k)? {
                p.add_term(m, c);
            }
        }
        Ok(p)
    }
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn fmt_coeff(c: f64) -> String {
    let a = c.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{c}")
    } else {
        format!("{c:e}")
    }
}

/// Parses one `c e₁ … e_n` line; `Ok(None)` for blank or comment lines.
pub fn parse_term_line(dim: usize, raw: &str, line: usize) -> Result<Option<(f64, Monomial)>, PolyError> {
    let body = raw.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let mut toks = body.split_whitespace();
    let c: f64 = toks
        .next()
        .unwrap()
        .parse()
        .map_err(|e| PolyError::Parse {
            line,
            msg: format!("bad coefficient: {e}"),
        })?;
    let exps: Vec<u32> = toks
        .map(|t| {
            t.parse::<u32>().map_err(|e| PolyError::Parse {
                line,
                msg: format!("bad exponent {t:?}: {e}"),
            })
        })
        .collect::<Result<_, _>>()?;
    if exps.len() != dim {
        return Err(PolyError::Parse {
            line,
            msg: format!("expected {dim} exponents, found {}", exps.len()),
        });
    }
    Ok(Some((c, Monomial(exps))))
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, &c) in self.terms.iter().rev() {
            if !first {
                write!(f, " {} ", if c < 0.0 { '-' } else { '+' })?;
            } else if c < 0.0 {
                write!(f, "-")?;
            }
            first = false;
            let a = c.abs();
            let mut wrote = false;
            if a != 1.0 || m.is_constant() {
                write!(f, "{a}")?;
                wrote = true;
            }
            for (i, &e) in m.0.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                if wrote {
                    write!(f, "*")?;
                }
                wrote = true;
                if e == 1 {
                    write!(f, "a{}", i + 1)?;
                } else {
                    write!(f, "a{}^{}", i + 1, e)?;
                }
            }
        }
        Ok(())
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.checked_add(rhs).expect("polynomial add")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.checked_sub(rhs).expect("polynomial sub")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.checked_mul(rhs).expect("polynomial mul")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

/// A fixed list of polynomials over the same variables, flattened for fast
/// repeated evaluation. All members share one table of powers per call.
#[derive(Clone, Debug)]
pub struct PolySet {
    dim: usize,
    max_exp: usize,
    // Per polynomial: range into `exps`/`coefs`.
    offsets: Vec<usize>,
    exps: Vec<u32>,
    coefs: Vec<f64>,
}

impl PolySet {
    pub fn new(dim: usize, polys: &[Polynomial]) -> Self {
        let mut offsets = vec![0];
        let mut exps = Vec::new();
        let mut coefs = Vec::new();
        let mut max_exp = 0;
        for p in polys {
            assert_eq!(p.dim(), dim);
            for (m, c) in p.terms() {
                for &e in m.exponents() {
                    max_exp = max_exp.max(e as usize);
                }
                exps.extend_from_slice(m.exponents());
                coefs.push(c);
            }
            offsets.push(coefs.len());
        }
        PolySet {
            dim,
            max_exp,
            offsets,
            exps,
            coefs,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates every member at `x` into `out`, using `pow` as scratch.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64], pow: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.len());
        let stride = self.max_exp + 1;
        pow.clear();
        pow.resize(self.dim * stride, 1.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &mut pow[i * stride..(i + 1) * stride];
            for e in 1..stride {
                row[e] = row[e - 1] * xi;
            }
        }
        let n = self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in self.offsets[k]..self.offsets[k + 1] {
                let e = &self.exps[t * n..(t + 1) * n];
                let mut v = self.coefs[t];
                for i in 0..n {
                    v *= pow[i * stride + e[i] as usize];
                }
                acc += v;
            }
            *o = acc;
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut pow = Vec::new();
        self.eval_into(x, &mut out, &mut pow);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p2(terms: &[(f64, [u32; 2])]) -> Polynomial {
        Polynomial::from_terms(2, terms.iter().map(|(c, e)| (*c, e.to_vec()))).unwrap()
    }

    #[test]
    fn eval_sum_of_squares() {
        let p = p2(&[(1.0, [2, 0]), (1.0, [0, 2])]);
        assert_eq!(p.eval(&[1.0, 2.0]).unwrap(), 5.0);
        assert_eq!(Polynomial::zero(3).eval(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(
            p.eval(&[1.0]),
            Err(PolyError::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn gradient_power_rule() {
        let p = p2(&[(1.0, [2, 0]), (1.0, [0, 2])]);
        let g = p.gradient();
        assert_eq!(g[0], p2(&[(2.0, [1, 0])]));
        assert_eq!(g[1], p2(&[(2.0, [0, 1])]));
        let g = Polynomial::constant(2, 3.5).gradient();
        assert!(g.iter().all(Polynomial::is_zero));
        let g = p2(&[(1.0, [2, 1])]).gradient();
        assert_eq!(g[0], p2(&[(2.0, [1, 1])]));
        assert_eq!(g[1], p2(&[(1.0, [2, 0])]));
    }

    #[test]
    fn arithmetic_identities() {
        let a1 = Polynomial::var(2, 0);
        assert_eq!(&a1 * &a1, p2(&[(1.0, [2, 0])]));
        let p = p2(&[(0.3, [1, 2]), (-1.5, [0, 0])]);
        assert!((&p + &p.scale(-1.0)).is_zero());
        let s = &Polynomial::var(2, 0) + &Polynomial::var(2, 1);
        assert_eq!(&s * &s, p2(&[(1.0, [2, 0]), (2.0, [1, 1]), (1.0, [0, 2])]));
        assert!(a1.checked_mul(&Polynomial::var(3, 0)).is_err());
    }

    #[test]
    fn graded_lex_order() {
        let b = monomials_up_to(2, 2);
        let want = [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]];
        assert_eq!(b.len(), want.len());
        for (m, w) in b.iter().zip(want) {
            assert_eq!(m.exponents(), &w);
        }
        assert_eq!(monomials_up_to(3, 4).len(), 35);
        assert_eq!(monomials_between(3, 1, 2).len(), 9);
    }

    #[test]
    fn text_round_trip_and_errors() {
        let p = p2(&[(0.33, [2, 0]), (-1e-17, [1, 1]), (7.0, [0, 0])]);
        let q = Polynomial::parse_terms(2, &format!("# comment\n{}", p.to_text()), 1).unwrap();
        assert_eq!(p, q);
        let err = Polynomial::parse_terms(2, "1 0 0\n2 1\n", 10).unwrap_err();
        assert!(matches!(err, PolyError::Parse { line: 11, .. }));
    }

    #[test]
    fn affine_composition() {
        let p = p2(&[(1.0, [2, 1]), (-2.0, [0, 1]), (0.5, [0, 0])]);
        let q = p.compose_affine(&[0.5, -1.0], &[2.0, 3.0]);
        for x in [[0.1, 0.2], [-1.0, 0.7], [2.0, -3.0]] {
            let y = [0.5 + 2.0 * x[0], -1.0 + 3.0 * x[1]];
            assert!((q.eval(&x).unwrap() - p.eval(&y).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn polyset_matches_eval() {
        let p = p2(&[(1.0, [3, 1]), (-2.0, [0, 4]), (0.5, [0, 0])]);
        let q = p2(&[(2.0, [1, 0])]);
        let set = PolySet::new(2, &[p.clone(), q.clone(), Polynomial::zero(2)]);
        let x = [0.7, -1.3];
        let v = set.eval(&x);
        assert!((v[0] - p.eval(&x).unwrap()).abs() < 1e-14);
        assert!((v[1] - q.eval(&x).unwrap()).abs() < 1e-14);
        assert_eq!(v[2], 0.0);
    }
}
