//! Periodic orbits as minimizers of the midpoint variational cost
//!
//! `C(â₀, …, â_{N−1}, T) = (N/2T) Σᵢ ‖â_{i+1} − âᵢ − (T/N) h((âᵢ + â_{i+1})/2)‖²`
//!
//! with `â_N = â₀`, minimized jointly over the points and the period by
//! Levenberg–Marquardt.
//!
//! The normal matrix of the points is cyclic block-tridiagonal. Ordering the
//! points as `0, N−1, 1, N−2, …` turns the cyclic coupling into a band of
//! three blocks, so each step costs a banded Cholesky plus a bordering solve
//! for the period.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::flow::{shooting_error, ControlledField, FlowError, IntegrateOptions};
use crate::polyalg::{PolySet, Polynomial};
use crate::recurrence::OrbitGuess;

/// Cost level at which an orbit counts as converged.
pub const DEFAULT_COST_TOL: f64 = 1e-10;
/// Discrete arc length below which a loop has collapsed to a point.
pub const MIN_ARC_LENGTH: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error("period must be positive, got {0}")]
    NonPositivePeriod(f64),
    #[error("orbit has {0} points; at least 2 are needed")]
    TooFewPoints(usize),
    #[error("point {index} has {found} components, field has {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of a Levenberg–Marquardt solve.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicOrbit {
    pub points: Vec<Vec<f64>>,
    pub period: f64,
    pub k: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// `final_cost ≤ cost_tol`.
    pub converged: bool,
    /// The loop collapsed below the minimum arc length.
    pub degenerate: bool,
    /// Why the iteration stopped.
    pub stop: String,
}

impl PeriodicOrbit {
    /// Converged and not collapsed to a point.
    pub fn is_valid(&self) -> bool {
        self.converged && !self.degenerate
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn as_guess(&self) -> OrbitGuess {
        OrbitGuess {
            points: self.points.clone(),
            period: self.period,
            k: self.k,
        }
    }

    pub fn arc_length(&self) -> f64 {
        arc_length(&self.points)
    }

    /// Average of `phi` over the loop, sampled at segment midpoints.
    pub fn average(&self, phi: &Polynomial) -> f64 {
        let set = PolySet::new(phi.dim(), std::slice::from_ref(phi));
        let n = self.points.len();
        let mut acc = 0.0;
        for i in 0..n {
            let m = midpoint(&self.points[i], &self.points[(i + 1) % n]);
            acc += set.eval(&m)[0];
        }
        acc / n as f64
    }

    /// Relative return error of `cf` integrated from the first point for
    /// one period.
    pub fn shooting_error(&self, cf: &ControlledField, opts: &IntegrateOptions) -> Result<f64, OrbitError> {
        Ok(shooting_error(cf, &self.points[0], self.period, opts)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# n={}, N={}, T={:.16e}, k={:.16e}, cost={:.16e}",
            self.dim(),
            self.n_points(),
            self.period,
            self.k,
            self.final_cost
        );
        let _ = writeln!(
            s,
            "# iterations={}, converged={}, degenerate={}, stop={}",
            self.iterations, self.converged, self.degenerate, self.stop
        );
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, OrbitError> {
        let perr = |line: usize, msg: &str| OrbitError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut header = std::collections::HashMap::new();
        let mut points = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let t = raw.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                for kv in rest.split(", ") {
                    if let Some((key, val)) = kv.split_once('=') {
                        header.insert(key.trim().to_string(), (line, val.trim().to_string()));
                    }
                }
                continue;
            }
            let row: Vec<f64> = t
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| perr(line, &e.to_string()))?;
            points.push(row);
        }
        let get = |key: &str| -> Result<(usize, String), OrbitError> {
            header.get(key).cloned().ok_or_else(|| perr(1, &format!("missing header field '{key}'")))
        };
        let num = |key: &str| -> Result<f64, OrbitError> {
            let (line, v) = get(key)?;
            v.parse::<f64>().map_err(|e| perr(line, &e.to_string()))
        };
        let int = |key: &str| -> Result<usize, OrbitError> {
            let (line, v) = get(key)?;
            v.parse::<usize>().map_err(|e| perr(line, &e.to_string()))
        };
        let n = int("n")?;
        let count = int("N")?;
        if points.len() != count {
            return Err(perr(1, &format!("header says N={count}, found {} rows", points.len())));
        }
        if let Some(i) = points.iter().position(|p| p.len() != n) {
            return Err(perr(i + 3, &format!("expected {n} components")));
        }
        let flag = |key: &str| header.get(key).map(|(_, v)| v == "true").unwrap_or(false);
        Ok(PeriodicOrbit {
            points,
            period: num("T")?,
            k: num("k")?,
            final_cost: num("cost")?,
            iterations: header.get("iterations").and_then(|(_, v)| v.parse().ok()).unwrap_or(0),
            converged: flag("converged"),
            degenerate: flag("degenerate"),
            stop: header.get("stop").map(|(_, v)| v.clone()).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), OrbitError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, OrbitError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl OrbitGuess {
    /// The guess as an unconverged orbit record, for the orbit file format.
    pub fn to_orbit(&self) -> PeriodicOrbit {
        PeriodicOrbit {
            points: self.points.clone(),
            period: self.period,
            k: self.k,
            final_cost: f64::NAN,
            iterations: 0,
            converged: false,
            degenerate: false,
            stop: "guess".into(),
        }
    }
}

fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

pub fn arc_length(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = (&points[i], &points[(i + 1) % n]);
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .sum()
}

fn check(points: &[Vec<f64>], period: f64, cf: &ControlledField) -> Result<(), OrbitError> {
    if !(period > 0.0) {
        return Err(OrbitError::NonPositivePeriod(period));
    }
    if points.len() < 2 {
        return Err(OrbitError::TooFewPoints(points.len()));
    }
    for (index, p) in points.iter().enumerate() {
        if p.len() != cf.dim() {
            return Err(OrbitError::DimensionMismatch {
                index,
                expected: cf.dim(),
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Stacked residuals `rᵢ = sqrt(N/2T)·(â_{i+1} − âᵢ − (T/N) h(mᵢ))`.
pub fn residuals(points: &[Vec<f64>], period: f64, cf: &ControlledField) -> Result<Vec<f64>, OrbitError> {
    check(points, period, cf)?;
    let n = points.len();
    let c = (n as f64 / (2.0 * period)).sqrt();
    let h = period / n as f64;
    let mut r = Vec::with_capacity(n * cf.dim());
    for i in 0..n {
        let (a, b) = (&points[i], &points[(i + 1) % n]);
        let v = cf.eval(&midpoint(a, b));
        for d in 0..a.len() {
            r.push(c * (b[d] - a[d] - h * v[d]));
        }
    }
    Ok(r)
}

/// The variational cost `C = ‖r‖²`.
pub fn cost(g: &OrbitGuess, cf: &ControlledField) -> Result<f64, OrbitError> {
    Ok(residuals(&g.points, g.period, cf)?.iter().map(|v| v * v).sum())
}

/// Jacobian of the residuals: segment `i` depends on `âᵢ` (`lower[i]`),
/// `â_{i+1}` (`upper[i]`) and `T` (rows of `t_col`).
#[derive(Clone, Debug)]
pub struct OrbitJacobian {
    pub lower: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
    pub t_col: Vec<f64>,
}

impl OrbitJacobian {
    /// Dense `(N·n) × (N·n + 1)` matrix, period last.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.lower.len();
        let d = self.lower[0].nrows();
        let mut m = DMatrix::zeros(n * d, n * d + 1);
        for i in 0..n {
            let j = (i + 1) % n;
            for r in 0..d {
                for c in 0..d {
                    m[(i * d + r, i * d + c)] += self.lower[i][(r, c)];
                    m[(i * d + r, j * d + c)] += self.upper[i][(r, c)];
                }
                m[(i * d + r, n * d)] = self.t_col[i * d + r];
            }
        }
        m
    }
}

pub fn residuals_and_jacobian(
    points: &[Vec<f64>],
    period: f64,
    cf: &ControlledField,
) -> Result<(Vec<f64>, OrbitJacobian), OrbitError> {
    check(points, period, cf)?;
    let n = points.len();
    let d = cf.dim();
    let c = (n as f64 / (2.0 * period)).sqrt();
    let h = period / n as f64;
    let mut r = Vec::with_capacity(n * d);
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut t_col = Vec::with_capacity(n * d);
    for i in 0..n {
        let (a, b) = (&points[i], &points[(i + 1) % n]);
        let m = midpoint(a, b);
        let v = cf.eval(&m);
        let jh = cf.jacobian(&m);
        for k in 0..d {
            let ri = c * (b[k] - a[k] - h * v[k]);
            r.push(ri);
            // c ∝ T^{-1/2}, so ∂r/∂T = −r/(2T) − (c/N) h(m).
            t_col.push(-ri / (2.0 * period) - c * v[k] / n as f64);
        }
        let half = jh * (0.5 * h * c);
        let eye = DMatrix::<f64>::identity(d, d) * c;
        lower.push(-&eye - &half);
        upper.push(eye - half);
    }
    Ok((r, OrbitJacobian { lower, upper, t_col }))
}

#[derive(Clone, Debug)]
pub struct LmOptions {
    pub cost_tol: f64,
    /// Stop when an accepted step changes the cost by this fraction or less.
    pub ftol: f64,
    /// Stop when the step is this small relative to the unknowns.
    pub xtol: f64,
    pub max_iter: usize,
    pub lambda0: f64,
    /// Consecutive rejected steps before giving up.
    pub max_escalations: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            cost_tol: DEFAULT_COST_TOL,
            ftol: 1e-16,
            xtol: 1e-16,
            max_iter: 500,
            lambda0: 1e-3,
            max_escalations: 20,
        }
    }
}

/// Symmetric positive definite band matrix, lower band stored by row.
struct Band {
    n: usize,
    p: usize,
    // a[i][k] = A[i, i − p + k] for k ∈ 0..=p.
    a: Vec<f64>,
}

impl Band {
    fn new(n: usize, p: usize) -> Self {
        Band {
            n,
            p,
            a: vec![0.0; n * (p + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.p);
        i * (self.p + 1) + self.p + j - i
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.a[k] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.a[self.idx(i, j)]
    }

    /// In-place Cholesky; `false` if not positive definite.
    fn factor(&mut self) -> bool {
        let (n, p) = (self.n, self.p);
        for j in 0..n {
            let lo = j.saturating_sub(p);
            let mut d = self.get(j, j);
            for k in lo..j {
                let l = self.get(j, k);
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            let jj = self.idx(j, j);
            self.a[jj] = d;
            for i in j + 1..(j + p + 1).min(n) {
                let mut s = self.get(i, j);
                for k in i.saturating_sub(p).max(lo)..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                let ij = self.idx(i, j);
                self.a[ij] = s / d;
            }
        }
        true
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, p) = (self.n, self.p);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(p)..i {
                s -= self.get(i, k) * b[k];
            }
            b[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + p + 1).min(n) {
                s -= self.get(k, i) * b[k];
            }
            b[i] = s / self.get(i, i);
        }
    }
}

/// Position of point `i` in the interleaved order `0, N−1, 1, N−2, …`.
fn interleave(i: usize, n: usize) -> usize {
    if 2 * i < n {
        2 * i
    } else {
        2 * (n - 1 - i) + 1
    }
}

/// Solves `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr` for the point and period updates.
fn lm_step(jac: &OrbitJacobian, r: &[f64], lambda: f64) -> Option<(Vec<f64>, f64)> {
    let n = jac.lower.len();
    let d = jac.lower[0].nrows();
    let m = n * d;
    let pos = |i: usize, k: usize| interleave(i, n) * d + k;
    let band = if n > 2 { 3 * d - 1 } else { 2 * d - 1 };
    let mut a = Band::new(m, band);
    let mut g = vec![0.0; m];
    let mut u = vec![0.0; m];
    let mut tt = 0.0;
    let mut gt = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let (lo, up) = (&jac.lower[i], &jac.upper[i]);
        let ri = &r[i * d..(i + 1) * d];
        let ti = &jac.t_col[i * d..(i + 1) * d];
        // Block contributions of segment i to the normal matrix.
        let ll = lo.transpose() * lo;
        let uu = up.transpose() * up;
        let lu = lo.transpose() * up;
        for p in 0..d {
            for q in 0..d {
                if pos(i, p) >= pos(i, q) {
                    a.add(pos(i, p), pos(i, q), ll[(p, q)]);
                }
                if pos(j, p) >= pos(j, q) {
                    a.add(pos(j, p), pos(j, q), uu[(p, q)]);
                }
                if i != j {
                    a.add(pos(i, p), pos(j, q), lu[(p, q)]);
                }
            }
            let (mut gl, mut gu, mut ul, mut uv) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..d {
                gl += lo[(k, p)] * ri[k];
                gu += up[(k, p)] * ri[k];
                ul += lo[(k, p)] * ti[k];
                uv += up[(k, p)] * ti[k];
            }
            g[pos(i, p)] -= gl;
            g[pos(j, p)] -= gu;
            u[pos(i, p)] += ul;
            u[pos(j, p)] += uv;
        }
        for k in 0..d {
            tt += ti[k] * ti[k];
            gt -= ti[k] * ri[k];
        }
    }
    for i in 0..m {
        let dd = a.get(i, i);
        a.add(i, i, lambda * dd.max(1e-12));
    }
    tt += lambda * tt.max(1e-12);
    if !a.factor() {
        return None;
    }
    let mut z1 = g;
    a.solve(&mut z1);
    let mut z2 = u.clone();
    a.solve(&mut z2);
    let s = tt - u.iter().zip(&z2).map(|(x, y)| x * y).sum::<f64>();
    if !(s > 0.0) {
        return None;
    }
    let dt = (gt - u.iter().zip(&z1).map(|(x, y)| x * y).sum::<f64>()) / s;
    let mut dx = vec![0.0; m];
    for i in 0..n {
        for k in 0..d {
            dx[i * d + k] = z1[pos(i, k)] - z2[pos(i, k)] * dt;
        }
    }
    Some((dx, dt))
}

/// Levenberg–Marquardt on the variational cost, points and period jointly.
pub fn converge(g: &OrbitGuess, cf: &ControlledField, opts: &LmOptions) -> Result<PeriodicOrbit, OrbitError> {
    check(&g.points, g.period, cf)?;
    let n = g.points.len();
    let d = cf.dim();
    let mut x = g.points.clone();
    let mut period = g.period;
    let (mut r, mut jac) = residuals_and_jacobian(&x, period, cf)?;
    let mut c: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = opts.lambda0;
    let mut iterations = 0;
    let mut escalations = 0;
    let stop;
    loop {
        if c == 0.0 {
            stop = "zero cost".to_string();
            break;
        }
        if iterations >= opts.max_iter {
            stop = "iteration limit".to_string();
            break;
        }
        if escalations >= opts.max_escalations {
            stop = format!("{escalations} consecutive damping escalations");
            break;
        }
        let trial = lm_step(&jac, &r, lambda).and_then(|(dx, dt)| {
            let t_new = period + dt;
            if !(t_new > 0.0) {
                return None;
            }
            let x_new: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..d).map(|k| x[i][k] + dx[i * d + k]).collect())
                .collect();
            let r_new = residuals(&x_new, t_new, cf).ok()?;
            let c_new: f64 = r_new.iter().map(|v| v * v).sum();
            c_new.is_finite().then_some((dx, dt, x_new, t_new, c_new))
        });
        match trial {
            Some((dx, dt, x_new, t_new, c_new)) if c_new < c => {
                let step = (dx.iter().map(|v| v * v).sum::<f64>() + dt * dt).sqrt();
                let scale = (x.iter().flatten().map(|v| v * v).sum::<f64>() + period * period).sqrt();
                let rel = (c - c_new) / c;
                x = x_new;
                period = t_new;
                c = c_new;
                iterations += 1;
                escalations = 0;
                lambda = (lambda / 3.0).max(1e-15);
                if rel <= opts.ftol {
                    stop = "relative cost change below tolerance".to_string();
                    break;
                }
                if step <= opts.xtol * (scale + opts.xtol) {
                    stop = "step below tolerance".to_string();
                    break;
                }
                let rj = residuals_and_jacobian(&x, period, cf)?;
                r = rj.0;
                jac = rj.1;
            }
            _ => {
                lambda *= 3.0;
                escalations += 1;
            }
        }
    }
    log::debug!("LM stopped after {iterations} iterations: {stop}, cost {c:e}");
    let degenerate = arc_length(&x) < MIN_ARC_LENGTH;
    Ok(PeriodicOrbit {
        points: x,
        period,
        k: cf.k,
        final_cost: c,
        iterations,
        converged: c <= opts.cost_tol,
        degenerate,
        stop,
    })
}

/// Resamples a closed loop to `m` points by trigonometric interpolation.
pub fn resample(points: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; d]; m];
    let tau = std::f64::consts::TAU;
    for k in 0..d {
        // Real DFT coefficients of component k.
        let kmax = n / 2;
        let mut re = vec![0.0; kmax + 1];
        let mut im = vec![0.0; kmax + 1];
        for (f, (rf, imf)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
            for (j, p) in points.iter().enumerate() {
                let th = tau * (f * j) as f64 / n as f64;
                *rf += p[k] * th.cos();
                *imf -= p[k] * th.sin();
            }
        }
        for (j, o) in out.iter_mut().enumerate() {
            let s = j as f64 / m as f64;
            let mut v = re[0] / n as f64;
            for f in 1..=kmax {
                let w = if 2 * f == n { 1.0 } else { 2.0 };
                let th = tau * f as f64 * s;
                v += w * (re[f] * th.cos() - im[f] * th.sin()) / n as f64;
            }
            o[k] = v;
        }
    }
    out
}

/// `DVector` view of the unknowns, points first then the period.
pub fn pack(points: &[Vec<f64>], period: f64) -> DVector<f64> {
    let mut v: Vec<f64> = points.iter().flatten().copied().collect();
    v.push(period);
    DVector::from_vec(v)
}
