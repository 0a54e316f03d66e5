//! The gap polynomial `D = U − Φ − f·∇V` of a certificate and the harvesting
//! of its near-zero set by multistart BFGS.
//!
//! `D` is kept in the scaled coordinates the certificate was solved in and
//! evaluated through the affine map; expanding a high-degree `D` in raw
//! coordinates cancels away most of its significant digits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::polyalg::{PolyError, PolySet, Polynomial};
use crate::sosbound::{AffineScaling, CertStatus, Certificate};
use crate::systems::DynamicalSystem;

/// Radius below which two minimizers are treated as the same point.
pub const DEDUP_RADIUS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GapError {
    #[error("certificate is infeasible; no gap polynomial exists")]
    InfeasibleCertificate,
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("no starting points given")]
    NoStarts,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `D` together with compiled evaluators for its value, gradient and Hessian.
#[derive(Clone, Debug)]
pub struct GapPolynomial {
    scaled: Polynomial,
    scaling: AffineScaling,
    value_grad: PolySet,
    hessian: PolySet,
    pub bound: f64,
}

impl GapPolynomial {
    /// `D` of a certificate. Fails only for infeasible certificates or
    /// mismatched dimensions.
    pub fn from_certificate(cert: &Certificate, system: &DynamicalSystem, phi: &Polynomial) -> Result<Self, GapError> {
        if cert.status == CertStatus::Infeasible {
            return Err(GapError::InfeasibleCertificate);
        }
        let d = cert.gap_scaled(system, phi)?;
        let mut g = Self::with_scaling(d, cert.scaling.clone());
        g.bound = cert.bound;
        Ok(g)
    }

    /// A polynomial used directly as `D`, in the original coordinates.
    pub fn from_polynomial(d: Polynomial) -> Self {
        let n = d.dim();
        Self::with_scaling(d, AffineScaling::identity(n))
    }

    /// `D(a) = scaled(x(a))` with `x = (a − center)/scale`.
    pub fn with_scaling(scaled: Polynomial, scaling: AffineScaling) -> Self {
        let n = scaled.dim();
        let grad = scaled.gradient();
        let mut vg = vec![scaled.clone()];
        vg.extend(grad.iter().cloned());
        let mut hess = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                hess.push(grad[i].derivative(j));
            }
        }
        GapPolynomial {
            value_grad: PolySet::new(n, &vg),
            hessian: PolySet::new(n, &hess),
            scaled,
            scaling,
            bound: f64::NAN,
        }
    }

    pub fn dim(&self) -> usize {
        self.scaled.dim()
    }

    pub fn scaling(&self) -> &AffineScaling {
        &self.scaling
    }

    /// `D` in the scaled coordinates.
    pub fn scaled(&self) -> &Polynomial {
        &self.scaled
    }

    /// `D` expanded in the original coordinates.
    pub fn d(&self) -> Polynomial {
        let inv = self.scaling.inverse();
        self.scaled.compose_affine(&inv.center, &inv.scale)
    }

    /// `∇D` expanded in the original coordinates.
    pub fn gradient(&self) -> Vec<Polynomial> {
        self.d().gradient()
    }

    pub fn value(&self, a: &[f64]) -> f64 {
        self.value_grad(a).0
    }

    pub fn value_grad(&self, a: &[f64]) -> (f64, Vec<f64>) {
        let x = self.scaling.to_scaled(a);
        let mut out = vec![0.0; self.value_grad.len()];
        let mut pow = Vec::new();
        self.value_grad.eval_into(&x, &mut out, &mut pow);
        let g = out[1..].iter().zip(&self.scaling.scale).map(|(g, s)| g / s).collect();
        (out[0], g)
    }

    pub fn value_grad_hess(&self, a: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let n = self.dim();
        let (v, g) = self.value_grad(a);
        let x = self.scaling.to_scaled(a);
        let hv = self.hessian.eval(&x);
        let s = &self.scaling.scale;
        let mut h = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                let e = hv[k] / (s[i] * s[j]);
                h[(i, j)] = e;
                h[(j, i)] = e;
                k += 1;
            }
        }
        (v, g, h)
    }
}

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    /// Stop once an accepted step is shorter than this.
    pub step_tol: f64,
    /// Stop once the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            step_tol: 1e-16,
            grad_tol: 1e-16,
            max_iter: 2000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    /// Objective at every accepted iterate, starting point included.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonFinite;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizer of the cubic through `(a, fa, ga)` and `(b, fb, gb)`, clamped
/// into the safe part of the bracket.
fn cubic_step(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let guard = 0.1 * (hi - lo);
    let bisect = 0.5 * (a + b);
    if disc < 0.0 {
        return bisect;
    }
    let d2 = disc.sqrt().copysign(b - a);
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    if t.is_finite() && t > lo + guard && t < hi - guard {
        t
    } else {
        bisect
    }
}

/// Strong-Wolfe line search (bracketing then zoom). Returns the accepted
/// step with its value and gradient, or `None` if no acceptable step was
/// found.
fn strong_wolfe<F>(f: &F, x: &[f64], p: &[f64], f0: f64, g0: f64) -> Result<Option<(f64, f64, Vec<f64>)>, NonFinite>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    const MAX_EVAL: usize = 60;
    let eval = |alpha: f64| -> Result<(f64, Vec<f64>, f64), NonFinite> {
        let xt: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect();
        let (v, g) = f(&xt);
        if !v.is_finite() || g.iter().any(|c| !c.is_finite()) {
            return Err(NonFinite);
        }
        let d = dot(&g, p);
        Ok((v, g, d))
    };
    let mut a_prev = 0.0;
    let (mut f_prev, mut d_prev) = (f0, g0);
    let mut alpha = 1.0;
    let mut evals = 0;
    let zoom = |mut lo: f64,
                mut f_lo: f64,
                mut d_lo: f64,
                mut hi: f64,
                mut f_hi: f64,
                mut d_hi: f64,
                evals: &mut usize|
     -> Result<Option<(f64, f64, Vec<f64>)>, NonFinite> {
        while *evals < MAX_EVAL {
            let a = cubic_step(lo, f_lo, d_lo, hi, f_hi, d_hi);
            if (a - lo).abs() <= f64::EPSILON * a.abs().max(1e-300) {
                return Ok(None);
            }
            let (fa, ga, da) = eval(a)?;
            *evals += 1;
            if fa > f0 + C1 * a * g0 || fa >= f_lo {
                hi = a;
                f_hi = fa;
                d_hi = da;
            } else {
                if da.abs() <= -C2 * g0 {
                    return Ok(Some((a, fa, ga)));
                }
                if da * (hi - lo) >= 0.0 {
                    hi = lo;
                    f_hi = f_lo;
                    d_hi = d_lo;
                }
                lo = a;
                f_lo = fa;
                d_lo = da;
            }
        }
        Ok(None)
    };
    while evals < MAX_EVAL {
        let (fa, ga, da) = eval(alpha)?;
        evals += 1;
        if fa > f0 + C1 * alpha * g0 || (evals > 1 && fa >= f_prev) {
            return zoom(a_prev, f_prev, d_prev, alpha, fa, da, &mut evals);
        }
        if da.abs() <= -C2 * g0 {
            return Ok(Some((alpha, fa, ga)));
        }
        if da >= 0.0 {
            return zoom(alpha, fa, da, a_prev, f_prev, d_prev, &mut evals);
        }
        a_prev = alpha;
        f_prev = fa;
        d_prev = da;
        alpha *= 2.0;
    }
    Ok(None)
}

/// BFGS with a strong-Wolfe line search on the inverse Hessian.
pub fn bfgs<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult, NonFinite>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|c| !c.is_finite()) {
        return Err(NonFinite);
    }
    let mut history = vec![fx];
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    while iterations < opts.max_iter && inf_norm(&g) > opts.grad_tol {
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut p: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        let mut slope = dot(&g, &p);
        if slope >= 0.0 {
            // Lost descent through rounding: restart from steepest descent.
            h.fill_with_identity();
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let Some((alpha, f_new, g_new)) = strong_wolfe(&f, &x, &p, fx, slope)? else {
            break;
        };
        let s: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        fx = f_new;
        g = g_new;
        history.push(fx);
        iterations += 1;
        let step = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if step <= opts.step_tol {
            break;
        }
        let sy = dot(&s, &y);
        if sy > 0.0 {
            if first {
                h.fill_with_identity();
                h *= sy / dot(&y, &y);
                first = false;
            }
            let rho = 1.0 / sy;
            let sv = nalgebra::DVector::from_column_slice(&s);
            let yv = nalgebra::DVector::from_column_slice(&y);
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
            h += (&sv * sv.transpose()) * (rho * rho * yhy + rho);
        }
    }
    Ok(BfgsResult {
        x,
        value: fx,
        grad: g,
        iterations,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudPoint {
    pub x: Vec<f64>,
    pub d: f64,
    /// Euclidean norm of `∇D` at `x`.
    pub grad_norm: f64,
}

/// Admitted minimizers, sorted ascending by `D` then by gradient norm.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedStart {
    pub index: usize,
    pub start: Vec<f64>,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Multistart {
    pub cloud: PointCloud,
    pub skipped: Vec<SkippedStart>,
}

/// Runs BFGS on `D` from every start and keeps the distinct terminal points
/// with `D ≤ eps`. Results do not depend on how starts are spread over
/// worker threads.
pub fn minimize_multistart(
    g: &GapPolynomial,
    starts: &[Vec<f64>],
    eps: f64,
    opts: &BfgsOptions,
) -> Result<Multistart, GapError> {
    if starts.is_empty() {
        return Err(GapError::NoStarts);
    }
    let outcomes: Vec<Result<BfgsResult, NonFinite>> = starts
        .par_iter()
        .map(|s| bfgs(|x| g.value_grad(x), s, opts))
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (index, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => {
                let (d, grad) = g.value_grad(&r.x);
                if d <= eps {
                    points.push(CloudPoint {
                        grad_norm: grad.iter().map(|v| v * v).sum::<f64>().sqrt(),
                        x: r.x,
                        d,
                    });
                }
            }
            Err(NonFinite) => skipped.push(SkippedStart {
                index,
                start: starts[index].clone(),
                reason: "non-finite D or gradient".into(),
            }),
        }
    }
    points.sort_by(|a, b| a.d.total_cmp(&b.d).then(a.grad_norm.total_cmp(&b.grad_norm)));
    let mut kept: Vec<CloudPoint> = Vec::with_capacity(points.len());
    for p in points {
        let dup = kept.iter().any(|q| {
            q.x.iter().zip(&p.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < DEDUP_RADIUS
        });
        if !dup {
            kept.push(p);
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} of {} starts abandoned", skipped.len(), starts.len());
    }
    Ok(Multistart {
        cloud: PointCloud { points: kept, eps },
        skipped,
    })
}

/// `count` points uniform in the box `[lo, hi]`.
pub fn uniform_starts<R: Rng>(lo: &[f64], hi: &[f64], count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| lo.iter().zip(hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect())
        .collect()
}

impl PointCloud {
    /// Smallest `D`, ties broken by gradient norm.
    pub fn best(&self) -> Option<&CloudPoint> {
        self.points.first()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# eps={}\n", self.eps);
        for p in &self.points {
            for x in &p.x {
                let _ = write!(s, "{x},");
            }
            let _ = writeln!(s, "{},{}", p.d, p.grad_norm);
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self, GapError> {
        let mut eps = None;
        let mut points = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let t = raw.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("eps=") {
                    eps = Some(v.trim().parse::<f64>().map_err(|e| GapError::Parse {
                        line,
                        msg: e.to_string(),
                    })?);
                }
                continue;
            }
            let vals: Vec<f64> = t
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GapError::Parse {
                    line,
                    msg: e.to_string(),
                })?;
            if vals.len() < 3 {
                return Err(GapError::Parse {
                    line,
                    msg: "expected a₁,…,aₙ,D,gradnorm".into(),
                });
            }
            let n = vals.len() - 2;
            points.push(CloudPoint {
                x: vals[..n].to_vec(),
                d: vals[n],
                grad_norm: vals[n + 1],
            });
        }
        let eps = eps.ok_or(GapError::Parse {
            line: 1,
            msg: "missing '# eps=' header".into(),
        })?;
        Ok(PointCloud { points, eps })
    }

    pub fn write(&self, path: &Path) -> Result<(), GapError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GapError> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

/// Skip log lines `index: reason @ start`.
pub fn skip_log(skipped: &[SkippedStart]) -> String {
    let mut s = String::new();
    for k in skipped {
        let start: Vec<String> = k.start.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}: {} @ {}", k.index, k.reason, start.join(","));
    }
    s
}
