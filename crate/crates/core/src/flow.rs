//! Controlled vector fields and adaptive integration.
//!
//! The controlled field is `h_k = f − k ∇D` (gradient control) or
//! `h_k = f − k (I − f fᵀ/‖f‖²) ∇D` (projected control). Integration uses
//! the Dormand–Prince 5(4) pair with its 4th-order continuous extension, so
//! trajectories can be sampled anywhere between accepted steps.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::gapmin::GapPolynomial;
use crate::polyalg::{PolySet, Polynomial};
use crate::systems::DynamicalSystem;

/// Default control amplitude.
pub const DEFAULT_K: f64 = 0.25;
/// Default floor on `‖f‖²` below which projected control falls back to the
/// full gradient.
pub const DEFAULT_ETA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("control mode {0:?} needs a gap polynomial")]
    MissingGap(ControlMode),
    #[error("dimension mismatch: system has {system}, gap polynomial has {gap}")]
    DimensionMismatch { system: usize, gap: usize },
    #[error("negative control amplitude {0}")]
    NegativeK(f64),
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("invalid integration request: {0}")]
    InvalidRequest(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory diverged; averages are undefined")]
    Diverged,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlMode {
    Uncontrolled,
    Gradient,
    Projected,
}

/// `f`, optionally with one of the two control terms built from `∇D`.
#[derive(Clone, Debug)]
pub struct ControlledField {
    system: DynamicalSystem,
    f: PolySet,
    jac: PolySet,
    gap: Option<Arc<GapPolynomial>>,
    pub k: f64,
    pub mode: ControlMode,
    pub eta: f64,
}

impl ControlledField {
    pub fn uncontrolled(system: DynamicalSystem) -> Self {
        let f = system.compiled();
        let jac = PolySet::new(system.dim(), &system.jacobian_polys());
        ControlledField {
            system,
            f,
            jac,
            gap: None,
            k: 0.0,
            mode: ControlMode::Uncontrolled,
            eta: DEFAULT_ETA,
        }
    }

    pub fn controlled(
        system: DynamicalSystem,
        gap: Arc<GapPolynomial>,
        mode: ControlMode,
        k: f64,
    ) -> Result<Self, FlowError> {
        if gap.dim() != system.dim() {
            return Err(FlowError::DimensionMismatch {
                system: system.dim(),
                gap: gap.dim(),
            });
        }
        let mut cf = Self::uncontrolled(system);
        cf.gap = Some(gap);
        cf.mode = mode;
        cf.set_k(k)?;
        Ok(cf)
    }

    /// Builds a field from parts, enforcing that control needs a gap.
    pub fn new(
        system: DynamicalSystem,
        gap: Option<Arc<GapPolynomial>>,
        mode: ControlMode,
        k: f64,
    ) -> Result<Self, FlowError> {
        match (gap, mode) {
            (_, ControlMode::Uncontrolled) => Ok(Self::uncontrolled(system)),
            (None, m) => Err(FlowError::MissingGap(m)),
            (Some(g), m) => Self::controlled(system, g, m, k),
        }
    }

    pub fn set_k(&mut self, k: f64) -> Result<(), FlowError> {
        if !(k >= 0.0) {
            return Err(FlowError::NegativeK(k));
        }
        self.k = k;
        Ok(())
    }

    /// The same field at another control amplitude.
    pub fn with_k(&self, k: f64) -> Result<Self, FlowError> {
        let mut cf = self.clone();
        cf.set_k(k)?;
        Ok(cf)
    }

    /// The same system with the control switched off.
    pub fn without_control(&self) -> Self {
        let mut cf = self.clone();
        cf.mode = ControlMode::Uncontrolled;
        cf.k = 0.0;
        cf
    }

    pub fn system(&self) -> &DynamicalSystem {
        &self.system
    }

    pub fn gap(&self) -> Option<&Arc<GapPolynomial>> {
        self.gap.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    fn active(&self) -> Option<&GapPolynomial> {
        match self.mode {
            ControlMode::Uncontrolled => None,
            _ if self.k == 0.0 => None,
            _ => self.gap.as_deref(),
        }
    }

    /// `f(x)` alone.
    pub fn f(&self, x: &[f64]) -> Vec<f64> {
        self.f.eval(x)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut fx = self.f.eval(x);
        let Some(gap) = self.active() else {
            return fx;
        };
        let (_, g) = gap.value_grad(x);
        let k = self.k;
        match self.mode {
            ControlMode::Projected => {
                let q: f64 = fx.iter().map(|v| v * v).sum();
                if q >= self.eta {
                    let c = fx.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / q;
                    let f0 = fx.clone();
                    for i in 0..fx.len() {
                        fx[i] -= k * (g[i] - f0[i] * c);
                    }
                    return fx;
                }
                for (fi, gi) in fx.iter_mut().zip(&g) {
                    *fi -= k * gi;
                }
            }
            _ => {
                for (fi, gi) in fx.iter_mut().zip(&g) {
                    *fi -= k * gi;
                }
            }
        }
        fx
    }

    fn jac_f(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.jac.eval(x))
    }

    /// Jacobian of the controlled field at `x`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut jf = self.jac_f(x);
        let Some(gap) = self.active() else {
            return jf;
        };
        let k = self.k;
        let (_, g, h) = gap.value_grad_hess(x);
        let fx = self.f.eval(x);
        let q: f64 = fx.iter().map(|v| v * v).sum();
        if self.mode == ControlMode::Gradient || q < self.eta {
            jf -= h * k;
            return jf;
        }
        // P g = g − f s/q with s = f·g, q = f·f:
        // d(Pg) = H − (s/q) J − f (Jᵀg + H f)ᵀ/q + (2s/q²) f (Jᵀf)ᵀ
        let n = self.dim();
        let fv = nalgebra::DVector::from_column_slice(&fx);
        let gv = nalgebra::DVector::from_column_slice(&g);
        let s = fv.dot(&gv);
        let ds = jf.transpose() * &gv + &h * &fv;
        let jtf = jf.transpose() * &fv;
        let mut dpg = h;
        dpg -= &jf * (s / q);
        dpg -= &fv * ds.transpose() / q;
        dpg += &fv * jtf.transpose() * (2.0 * s / (q * q));
        debug_assert_eq!(dpg.nrows(), n);
        jf -= dpg * k;
        jf
    }
}

#[derive(Clone, Debug)]
pub struct IntegrateOptions {
    pub rtol: f64,
    pub atol: f64,
    /// A state norm beyond this stops the integration with `diverged` set.
    pub divergence_cap: f64,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            rtol: 1e-10,
            atol: 1e-10,
            divergence_cap: 1e6,
            h0: None,
            max_steps: 50_000_000,
        }
    }
}

/// Accepted steps with per-step dense-output coefficients.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    // Per step, five coefficient vectors of the continuous extension.
    dense: Vec<[Vec<f64>; 5]>,
    pub diverged: bool,
}

// Dormand–Prince 5(4) tableau.
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

fn combo(y: &[f64], h: f64, coeffs: &[f64], ks: &[Vec<f64>]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in coeffs.iter().zip(ks) {
        if *c != 0.0 {
            for (o, v) in out.iter_mut().zip(k) {
                *o += h * c * v;
            }
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn initial_step<F: Fn(&[f64]) -> Vec<f64>>(rhs: &F, y0: &[f64], f0: &[f64], opts: &IntegrateOptions) -> f64 {
    let sc: Vec<f64> = y0.iter().map(|y| opts.atol + opts.rtol * y.abs()).collect();
    let rms = |v: &[f64]| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let f1 = rhs(&y1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

/// Integrates `dy/dt = rhs(y)` from `t0` to `t1` with Dormand–Prince 5(4).
pub fn integrate_with<F>(rhs: F, y0: &[f64], t0: f64, t1: f64, opts: &IntegrateOptions) -> Result<Trajectory, FlowError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(FlowError::InvalidRequest(format!("time span [{t0}, {t1}]")));
    }
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(FlowError::InvalidRequest("tolerances must be positive".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::InvalidRequest("non-finite initial state".into()));
    }
    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![y0.to_vec()],
        dense: Vec::new(),
        diverged: false,
    };
    if norm(y0) > opts.divergence_cap {
        traj.diverged = true;
        return Ok(traj);
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = rhs(&y);
    let mut h = opts.h0.unwrap_or_else(|| initial_step(&rhs, &y, &k1, opts));
    h = h.min(t1 - t0);
    let mut rejected_last = false;
    let mut steps = 0;
    while t < t1 {
        if steps >= opts.max_steps {
            return Err(FlowError::InvalidRequest(format!("step limit {} reached at t = {t}", opts.max_steps)));
        }
        let last = t + h >= t1 - 1e-14 * t1.abs().max(1.0);
        if last {
            h = t1 - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(FlowError::StepUnderflow { t });
        }
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(7);
        ks.push(k1.clone());
        ks.push(rhs(&combo(&y, h, &A2, &ks)));
        ks.push(rhs(&combo(&y, h, &A3, &ks)));
        ks.push(rhs(&combo(&y, h, &A4, &ks)));
        ks.push(rhs(&combo(&y, h, &A5, &ks)));
        ks.push(rhs(&combo(&y, h, &A6, &ks)));
        let y1 = combo(&y, h, &B, &ks);
        let k7 = rhs(&y1);
        ks.push(k7);
        let finite = y1.iter().chain(&ks[6]).all(|v| v.is_finite());
        let mut err = f64::INFINITY;
        if finite {
            let mut acc = 0.0;
            for i in 0..y.len() {
                let e: f64 = (0..7).map(|j| E[j] * ks[j][i]).sum::<f64>() * h;
                let sk = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
                acc += (e / sk).powi(2);
            }
            err = (acc / y.len() as f64).sqrt();
        }
        if err <= 1.0 {
            let r2: Vec<f64> = y1.iter().zip(&y).map(|(a, b)| a - b).collect();
            let r3: Vec<f64> = (0..y.len()).map(|i| h * ks[0][i] - r2[i]).collect();
            let r4: Vec<f64> = (0..y.len()).map(|i| r2[i] - h * ks[6][i] - r3[i]).collect();
            let r5: Vec<f64> = (0..y.len()).map(|i| h * (0..7).map(|j| D[j] * ks[j][i]).sum::<f64>()).collect();
            t = if last { t1 } else { t + h };
            traj.dense.push([y.clone(), r2, r3, r4, r5]);
            traj.times.push(t);
            traj.states.push(y1.clone());
            steps += 1;
            if norm(&y1) > opts.divergence_cap {
                traj.diverged = true;
                return Ok(traj);
            }
            y = y1;
            k1 = ks.swap_remove(6);
            let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 5.0);
            if rejected_last {
                fac = fac.min(1.0);
            }
            rejected_last = false;
            h *= fac;
        } else {
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.1
            };
            rejected_last = true;
            h *= fac;
        }
    }
    Ok(traj)
}

/// Integrates the controlled field over `[0, duration]`.
pub fn integrate(cf: &ControlledField, a0: &[f64], duration: f64, opts: &IntegrateOptions) -> Result<Trajectory, FlowError> {
    if a0.len() != cf.dim() {
        return Err(FlowError::InvalidRequest(format!(
            "initial state has {} components, system has {}",
            a0.len(),
            cf.dim()
        )));
    }
    integrate_with(|x| cf.eval(x), a0, 0.0, duration, opts)
}

/// Relative return error `‖a(T) − a₀‖/‖a₀‖` after integrating for `period`.
pub fn shooting_error(cf: &ControlledField, a0: &[f64], period: f64, opts: &IntegrateOptions) -> Result<f64, FlowError> {
    let traj = integrate(cf, a0, period, opts)?;
    if traj.diverged {
        return Ok(f64::INFINITY);
    }
    let end = traj.states.last().unwrap();
    let diff: Vec<f64> = end.iter().zip(a0).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / norm(a0).max(f64::MIN_POSITIVE))
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn steps(&self) -> usize {
        self.dense.len()
    }

    fn eval_step(&self, i: usize, t: f64, out: &mut [f64]) {
        let h = self.times[i + 1] - self.times[i];
        let th = (t - self.times[i]) / h;
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.dense[i];
        for j in 0..out.len() {
            out[j] = r1[j] + th * (r2[j] + th1 * (r3[j] + th * (r4[j] + th1 * r5[j])));
        }
    }

    /// Dense-output state at `t`, or `None` outside the covered interval.
    pub fn state_at(&self, t: f64) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.state_into(t, &mut out).then_some(out)
    }

    pub fn state_into(&self, t: f64, out: &mut [f64]) -> bool {
        if self.dense.is_empty() {
            if self.times.first() == Some(&t) {
                out.copy_from_slice(&self.states[0]);
                return true;
            }
            return false;
        }
        if !(t >= self.t_start() && t <= self.t_end()) {
            return false;
        }
        let i = match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => i.min(self.dense.len() - 1),
            Err(i) => i - 1,
        };
        self.eval_step(i, t, out);
        true
    }

    /// The trajectory with every state (and the interpolant) multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Trajectory {
        let mul = |v: &Vec<f64>| v.iter().map(|x| x * c).collect::<Vec<f64>>();
        Trajectory {
            times: self.times.clone(),
            states: self.states.iter().map(mul).collect(),
            dense: self.dense.iter().map(|d| d.each_ref().map(mul)).collect(),
            diverged: self.diverged,
        }
    }

    /// Axis-aligned bounding box of the stored states.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for s in &self.states {
            for i in 0..n {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        (lo, hi)
    }

    /// The part of the trajectory after `t`, re-using the dense output.
    pub fn tail(&self, t: f64) -> Trajectory {
        let i = self.times.partition_point(|&x| x < t).min(self.times.len() - 1);
        Trajectory {
            times: self.times[i..].to_vec(),
            states: self.states[i..].to_vec(),
            dense: self.dense[i.min(self.dense.len())..].to_vec(),
            diverged: self.diverged,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# t");
        for i in 1..=self.dim() {
            let _ = write!(s, ",a{i}");
        }
        s.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            let _ = write!(s, "{t}");
            for v in x {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FlowError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Reads `(t, state)` rows written by [`Trajectory::to_csv`]. The dense
/// interpolant is not stored, so only the samples come back.
pub fn read_trajectory_csv(text: &str) -> Result<Vec<(f64, Vec<f64>)>, FlowError> {
    let mut rows = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FlowError::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
        if vals.len() < 2 {
            return Err(FlowError::Parse {
                line: k + 1,
                msg: "expected t,a1,...".into(),
            });
        }
        rows.push((vals[0], vals[1..].to_vec()));
    }
    Ok(rows)
}

/// Time average of `phi` along the trajectory, by Simpson's rule on each
/// step of the dense interpolant.
pub fn time_average(phi: &Polynomial, traj: &Trajectory) -> Result<f64, FlowError> {
    if traj.diverged {
        return Err(FlowError::Diverged);
    }
    if traj.steps() == 0 {
        return Err(FlowError::EmptyTrajectory);
    }
    let set = PolySet::new(phi.dim(), std::slice::from_ref(phi));
    let mut pow = Vec::new();
    let mut val = [0.0];
    let mut mid = vec![0.0; traj.dim()];
    let mut eval = |x: &[f64]| {
        set.eval_into(x, &mut val, &mut pow);
        val[0]
    };
    let mut acc = 0.0;
    let mut prev = eval(&traj.states[0]);
    for i in 0..traj.steps() {
        let (t0, t1) = (traj.times[i], traj.times[i + 1]);
        traj.eval_step(i, 0.5 * (t0 + t1), &mut mid);
        let fm = eval(&mid);
        let f1 = eval(&traj.states[i + 1]);
        acc += (t1 - t0) / 6.0 * (prev + 4.0 * fm + f1);
        prev = f1;
    }
    Ok(acc / (traj.t_end() - traj.t_start()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin, builtin_observable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn harmonic() -> DynamicalSystem {
        let f1 = Polynomial::from_terms(2, [(-1.0, vec![0, 1])]).unwrap();
        let f2 = Polynomial::from_terms(2, [(1.0, vec![1, 0])]).unwrap();
        DynamicalSystem::new("harmonic", vec![f1, f2]).unwrap()
    }

    fn ring_gap(n: usize) -> Arc<GapPolynomial> {
        let mut r = Polynomial::constant(n, -1.0);
        for i in 0..n {
            let mut e = vec![0; n];
            e[i] = 2;
            r = &r + &Polynomial::from_terms(n, [(1.0, e)]).unwrap();
        }
        Arc::new(GapPolynomial::from_polynomial(&r * &r))
    }

    fn sprott_ring_field(mode: ControlMode, k: f64) -> ControlledField {
        let sys = builtin("sprott", None).unwrap();
        // A cubic D with no special relation to the flow.
        let d = Polynomial::from_terms(
            3,
            [(1.0, vec![2, 0, 0]), (0.5, vec![1, 1, 1]), (-0.3, vec![0, 3, 0]), (0.2, vec![0, 0, 1])],
        )
        .unwrap();
        ControlledField::controlled(sys, Arc::new(GapPolynomial::from_polynomial(d)), mode, k).unwrap()
    }

    #[test]
    fn sprott_nontrivial_equilibrium() {
        let cf = ControlledField::uncontrolled(builtin("sprott", None).unwrap());
        assert!(cf.eval(&[-2.0, -4.0, 4.0]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_k_reduces_to_f() {
        let x = [0.3, -1.2, 2.0];
        for mode in [ControlMode::Gradient, ControlMode::Projected] {
            let cf = sprott_ring_field(mode, 0.0);
            assert_eq!(cf.eval(&x), cf.f(&x));
        }
        assert!(matches!(
            ControlledField::new(harmonic(), None, ControlMode::Projected, 0.1),
            Err(FlowError::MissingGap(_))
        ));
    }

    #[test]
    fn projection_is_orthogonal_to_f() {
        let cf = sprott_ring_field(ControlMode::Projected, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let f = cf.f(&x);
            let u: Vec<f64> = cf.eval(&x).iter().zip(&f).map(|(a, b)| a - b).collect();
            let ip: f64 = u.iter().zip(&f).map(|(a, b)| a * b).sum();
            assert!(ip.abs() <= 1e-10 * norm(&f) * norm(&u), "{ip}");
        }
    }

    #[test]
    fn parallel_gradient_is_annihilated() {
        // D = f-potential: for f = ∇(a₁² + a₂²)/2 = (a₁, a₂), ∇D ∥ f.
        let f1 = Polynomial::var(2, 0);
        let f2 = Polynomial::var(2, 1);
        let sys = DynamicalSystem::new("radial", vec![f1, f2]).unwrap();
        let d = Polynomial::from_terms(2, [(1.0, vec![2, 0]), (1.0, vec![0, 2])]).unwrap();
        let cf = ControlledField::controlled(sys, Arc::new(GapPolynomial::from_polynomial(d)), ControlMode::Projected, 3.0)
            .unwrap();
        let x = [0.6, -0.8];
        let h = cf.eval(&x);
        assert!((h[0] - 0.6).abs() < 1e-15 && (h[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [ControlMode::Uncontrolled, ControlMode::Gradient, ControlMode::Projected] {
            let cf = sprott_ring_field(mode, 0.4);
            for _ in 0..20 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let j = cf.jacobian(&x);
                for c in 0..3 {
                    let step = 1e-6;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += step;
                    xm[c] -= step;
                    let (hp, hm) = (cf.eval(&xp), cf.eval(&xm));
                    for r in 0..3 {
                        let fd = (hp[r] - hm[r]) / (2.0 * step);
                        assert!((fd - j[(r, c)]).abs() <= 1e-5 * (1.0 + fd.abs()), "{mode:?} {fd} vs {}", j[(r, c)]);
                    }
                }
            }
        }
    }

    #[test]
    fn harmonic_period_returns() {
        let cf = ControlledField::uncontrolled(harmonic());
        let tau = std::f64::consts::TAU;
        let traj = integrate(&cf, &[1.0, 0.0], tau, &IntegrateOptions::default()).unwrap();
        let end = traj.states.last().unwrap();
        assert!((end[0] - 1.0).abs() < 1e-8 && end[1].abs() < 1e-8);
        assert_eq!(traj.t_end(), tau);
        let phi = Polynomial::from_terms(2, [(1.0, vec![2, 0]), (1.0, vec![0, 2])]).unwrap();
        assert!((time_average(&phi, &traj).unwrap() - 1.0).abs() < 1e-8);
        // Dense output agrees with the exact solution between steps.
        for s in 0..50 {
            let t = s as f64 * tau / 50.0 + 0.01;
            let y = traj.state_at(t).unwrap();
            assert!((y[0] - t.cos()).abs() < 1e-8 && (y[1] - t.sin()).abs() < 1e-8);
        }
        // And reproduces the step endpoints.
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let y = traj.state_at(*t).unwrap();
            assert!(norm(&[y[0] - s[0], y[1] - s[1]]) <= 1e-12);
        }
    }

    #[test]
    fn integrator_is_fifth_order() {
        let cf = ControlledField::uncontrolled(harmonic());
        let tau = std::f64::consts::TAU;
        let mut pts = Vec::new();
        for e in [5.0, 6.0, 7.0, 8.0, 9.0] {
            let tol = 10f64.powf(-e);
            let opts = IntegrateOptions {
                rtol: tol,
                atol: tol,
                ..Default::default()
            };
            let traj = integrate(&cf, &[1.0, 0.0], 4.0 * tau, &opts).unwrap();
            let end = traj.states.last().unwrap();
            let err = norm(&[end[0] - 1.0, end[1]]);
            pts.push(((traj.steps() as f64).ln(), err.ln()));
        }
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / m, sy / m);
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!(-slope >= 4.5, "observed order {}", -slope);
    }

    #[test]
    fn lorenz96_equilibrium_is_constant() {
        let cf = ControlledField::uncontrolled(builtin("lorenz96", None).unwrap());
        let traj = integrate(&cf, &[8.0; 5], 10.0, &IntegrateOptions::default()).unwrap();
        assert!(traj.states.iter().all(|s| s.iter().all(|v| *v == 8.0)));
        let phi = builtin_observable("l96_perturbation", None).unwrap();
        assert_eq!(time_average(&phi, &traj).unwrap(), 0.0);
    }

    #[test]
    fn sprott_stays_bounded() {
        let cf = ControlledField::uncontrolled(builtin("sprott", None).unwrap());
        let traj = integrate(&cf, &[-1.0, -1.0, 2.0], 1000.0, &IntegrateOptions::default()).unwrap();
        assert!(!traj.diverged);
        let (lo, hi) = traj.bounding_box();
        assert!(lo.iter().chain(&hi).all(|v| v.abs() < 10.0));
    }

    #[test]
    fn blow_up_is_flagged() {
        // a' = a² reaches infinity at t = 1 from a = 1.
        let f = Polynomial::from_terms(1, [(1.0, vec![2])]).unwrap();
        let cf = ControlledField::uncontrolled(DynamicalSystem::new("blowup", vec![f]).unwrap());
        let traj = integrate(&cf, &[1.0], 2.0, &IntegrateOptions::default()).unwrap();
        assert!(traj.diverged);
        assert!(traj.t_end() < 1.0);
        assert!(matches!(time_average(&Polynomial::var(1, 0), &traj), Err(FlowError::Diverged)));
    }

    #[test]
    fn ring_control_vanishes_on_circle() {
        let cf = ControlledField::controlled(harmonic(), ring_gap(2), ControlMode::Projected, 0.5).unwrap();
        let x = [0.6, 0.8];
        let h = cf.eval(&x);
        assert!((h[0] + 0.8).abs() < 1e-14 && (h[1] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn csv_rows_round_trip() {
        let cf = ControlledField::uncontrolled(harmonic());
        let traj = integrate(&cf, &[1.0, 0.0], 1.0, &IntegrateOptions::default()).unwrap();
        let rows = read_trajectory_csv(&traj.to_csv()).unwrap();
        assert_eq!(rows.len(), traj.len());
        for ((t, s), (t2, s2)) in traj.times.iter().zip(&traj.states).zip(&rows) {
            assert_eq!(t, t2);
            assert_eq!(s, s2);
        }
    }
}
