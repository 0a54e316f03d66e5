//! Continuation of a controlled-system orbit down to `k = 0`, and the
//! sampling diagnostics behind the choice of `k`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::flow::{ControlledField, FlowError};
use crate::gapmin::GapPolynomial;
use crate::systems::DynamicalSystem;
use crate::varorbit::{converge, LmOptions, OrbitError, PeriodicOrbit};

/// Smallest `k` step, relative to the scheduled one, before bisection stops.
pub const DEFAULT_MIN_STEP_RATIO: f64 = 1.0 / 256.0;
pub const DEFAULT_HALVINGS: usize = 5;

#[derive(Debug, Error)]
pub enum ContinuationError {
    #[error("schedule must be strictly decreasing, nonnegative and end at 0")]
    BadSchedule,
    #[error("starting orbit is at k = {orbit}, schedule starts at {schedule}")]
    StartMismatch { orbit: f64, schedule: f64 },
    #[error("starting orbit is not a converged, non-degenerate orbit")]
    UnconvergedStart,
    #[error("only {retained} samples fell in the shell; widen gamma or the tube")]
    TooFewSamples { retained: usize },
    #[error("every sample was skipped (‖f‖ or ‖∇D‖ below 1e-10)")]
    AllSkipped,
    #[error("branch manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decreasing `k` values ending at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct KSchedule {
    pub values: Vec<f64>,
    pub adaptive: bool,
    pub min_step_ratio: f64,
}

impl KSchedule {
    pub fn new(values: Vec<f64>, adaptive: bool, min_step_ratio: f64) -> Result<Self, ContinuationError> {
        let ok = values.last() == Some(&0.0)
            && values.iter().all(|k| *k >= 0.0 && k.is_finite())
            && values.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(ContinuationError::BadSchedule);
        }
        Ok(KSchedule {
            values,
            adaptive,
            min_step_ratio,
        })
    }

    /// `k, k/2, …, k/2^halvings, 0`, adaptive.
    pub fn halving(k: f64, halvings: usize) -> Result<Self, ContinuationError> {
        let mut values = Vec::new();
        if k > 0.0 {
            values.extend((0..=halvings).map(|i| k / 2f64.powi(i as i32)));
        }
        values.push(0.0);
        Self::new(values, true, DEFAULT_MIN_STEP_RATIO)
    }
}

/// Orbits along the continuation, in order of decreasing `k`.
#[derive(Clone, Debug)]
pub struct Branch {
    pub orbits: Vec<PeriodicOrbit>,
    /// Set when the branch stopped short of `k = 0`.
    pub failure: Option<String>,
}

impl Branch {
    pub fn reached_zero(&self) -> bool {
        self.failure.is_none() && self.orbits.last().is_some_and(|o| o.k == 0.0)
    }

    pub fn last(&self) -> Option<&PeriodicOrbit> {
        self.orbits.last()
    }
}

/// Re-converges `orbit` at every scheduled `k`, warm-starting each solve from
/// the previous orbit and bisecting failed steps when allowed.
pub fn continue_orbit(
    orbit: &PeriodicOrbit,
    family: &ControlledField,
    sched: &KSchedule,
    lm: &LmOptions,
) -> Result<Branch, ContinuationError> {
    if !orbit.is_valid() {
        return Err(ContinuationError::UnconvergedStart);
    }
    let k_first = sched.values[0];
    if (orbit.k - k_first).abs() > 1e-12 * (1.0 + k_first) {
        return Err(ContinuationError::StartMismatch {
            orbit: orbit.k,
            schedule: k_first,
        });
    }
    let solve = |from: &PeriodicOrbit, k: f64| -> Result<PeriodicOrbit, ContinuationError> {
        let mut g = from.as_guess();
        g.k = k;
        Ok(converge(&g, &family.with_k(k)?, lm)?)
    };
    let start = solve(orbit, k_first)?;
    if !start.is_valid() {
        return Ok(Branch {
            orbits: vec![start],
            failure: Some(format!("re-verification at k = {k_first} failed")),
        });
    }
    let mut orbits = vec![start];
    for &target in &sched.values[1..] {
        let full = orbits.last().unwrap().k - target;
        let mut step = full;
        while orbits.last().unwrap().k > target {
            let cur = orbits.last().unwrap();
            let k = (cur.k - step).max(target);
            let next = solve(cur, k)?;
            if next.is_valid() {
                log::info!("k = {k:.6}: T = {:.8}, cost {:.3e}", next.period, next.final_cost);
                orbits.push(next);
                continue;
            }
            log::info!("k = {k:.6}: step failed ({})", next.stop);
            if !sched.adaptive || step / full * 0.5 < sched.min_step_ratio {
                return Ok(Branch {
                    failure: Some(format!(
                        "no converged orbit at k = {k}; smallest reached k = {}; last stop: {}",
                        cur.k, next.stop
                    )),
                    orbits,
                });
            }
            step *= 0.5;
        }
    }
    Ok(Branch { orbits, failure: None })
}

/// Gaussian perturbations of random orbit points.
pub fn tube_samples<R: Rng>(points: &[Vec<f64>], radius: f64, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, radius).expect("radius must be finite and nonnegative");
    (0..count)
        .map(|_| {
            let p = &points[rng.gen_range(0..points.len())];
            p.iter().map(|v| v + normal.sample(rng)).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Monte-Carlo `k₀ = max |f·∇D| / min ‖∇D‖²` over samples in the shell
/// `γ/2 ≤ D ≤ γ`.
pub fn estimate_k0(
    gap: &GapPolynomial,
    system: &DynamicalSystem,
    samples: &[Vec<f64>],
    gamma: f64,
) -> Result<f64, ContinuationError> {
    let f = system.compiled();
    let mut num: f64 = 0.0;
    let mut den = f64::INFINITY;
    let mut retained = 0;
    for x in samples {
        let (d, g) = gap.value_grad(x);
        if !(d >= 0.5 * gamma && d <= gamma) {
            continue;
        }
        retained += 1;
        num = num.max(dot(&f.eval(x), &g).abs());
        den = den.min(dot(&g, &g));
    }
    if retained < 100 {
        return Err(ContinuationError::TooFewSamples { retained });
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    /// `NaN` when no estimate was requested.
    pub k0_estimate: f64,
    /// Largest `|f·∇D| / (‖f‖‖∇D‖)` over admissible samples.
    pub transversality_max: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Largest angle cosine between `f` and `∇D` over the given samples.
pub fn check_transversality(
    gap: &GapPolynomial,
    system: &DynamicalSystem,
    samples: &[Vec<f64>],
) -> Result<StabilityReport, ContinuationError> {
    let f = system.compiled();
    let mut worst: f64 = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for x in samples {
        let (_, g) = gap.value_grad(x);
        let fx = f.eval(x);
        let (nf, ng) = (dot(&fx, &fx).sqrt(), dot(&g, &g).sqrt());
        if nf < 1e-10 || ng < 1e-10 {
            skipped += 1;
            continue;
        }
        used += 1;
        worst = worst.max((dot(&fx, &g).abs() / (nf * ng)).min(1.0));
    }
    if used == 0 {
        return Err(ContinuationError::AllSkipped);
    }
    Ok(StabilityReport {
        k0_estimate: f64::NAN,
        transversality_max: worst,
        samples: used,
        skipped,
    })
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = |p: &Vec<f64>, q: &Vec<f64>| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let one = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter()
            .map(|p| b.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

pub fn orbit_file_name(k: f64) -> String {
    format!("k_{k:.10e}.orbit")
}

/// Writes one orbit file per `k` plus `branch.csv` ("k,T,cost,converged").
pub fn write_branch(dir: &Path, branch: &Branch) -> Result<(), ContinuationError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("# k,T,cost,converged\n");
    for o in &branch.orbits {
        o.write(&dir.join(orbit_file_name(o.k)))?;
        let _ = writeln!(manifest, "{:.16e},{:.16e},{:.16e},{}", o.k, o.period, o.final_cost, o.is_valid());
    }
    if let Some(f) = &branch.failure {
        let _ = writeln!(manifest, "# failure: {f}");
    }
    std::fs::write(dir.join("branch.csv"), manifest)?;
    Ok(())
}

pub fn read_branch(dir: &Path) -> Result<Branch, ContinuationError> {
    let text = std::fs::read_to_string(dir.join("branch.csv"))?;
    let mut orbits = Vec::new();
    let mut failure = None;
    for (k, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if let Some(f) = t.strip_prefix("# failure: ") {
            failure = Some(f.to_string());
            continue;
        }
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let kv: f64 = t
            .split(',')
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or(ContinuationError::Parse {
                line: k + 1,
                msg: "expected k,T,cost,converged".into(),
            })?;
        let path: PathBuf = dir.join(orbit_file_name(kv));
        orbits.push(PeriodicOrbit::read(&path)?);
    }
    Ok(Branch { orbits, failure })
}
