//! Near-recurrences `R(t, T) = ‖a(t) − a(t−T)‖ / ‖a(t)‖` of a trajectory
//! and the orbit guesses cut from them.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::flow::Trajectory;

/// Recurrence level below which a segment counts as nearly periodic.
pub const DEFAULT_THRESHOLD: f64 = 0.025;
/// Smallest number of points in an orbit guess.
pub const MIN_POINTS: usize = 16;

#[derive(Debug, Error)]
pub enum RecurrenceError {
    #[error("trajectory spans {span}, needs more than T_max = {t_max}")]
    TooShort { span: f64, t_max: f64 },
    #[error("invalid window [{t_min}, {t_max}]")]
    BadWindow { t_min: f64, t_max: f64 },
    #[error("event at t = {t}, T = {period} is not covered by the trajectory")]
    OutOfRange { t: f64, period: f64 },
    #[error("orbit guesses need at least {MIN_POINTS} points, got {0}")]
    TooFewPoints(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecurrenceEvent {
    pub t: f64,
    pub period: f64,
    pub r: f64,
}

#[derive(Clone, Debug)]
pub struct ScanOptions {
    pub t_min: f64,
    pub t_max: f64,
    pub threshold: f64,
    /// Grid stride in `t`; `T_max/500` when `None`.
    pub dt: Option<f64>,
    /// Grid stride in `T`; `T_max/500` when `None`.
    pub d_period: Option<f64>,
    /// Refine grid minima with Nelder–Mead.
    pub polish: bool,
    pub max_events: usize,
}

impl ScanOptions {
    pub fn new(t_min: f64, t_max: f64) -> Self {
        ScanOptions {
            t_min,
            t_max,
            threshold: DEFAULT_THRESHOLD,
            dt: None,
            d_period: None,
            polish: true,
            max_events: 200,
        }
    }
}

/// `N` equispaced samples of a candidate loop.
#[derive(Clone, Debug, PartialEq)]
pub struct OrbitGuess {
    pub points: Vec<Vec<f64>>,
    pub period: f64,
    pub k: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `R(t, T)` from the dense output; `None` outside the trajectory or where
/// `‖a(t)‖ < 1e-12`.
pub fn recurrence_value(traj: &Trajectory, t: f64, period: f64) -> Option<f64> {
    let a = traj.state_at(t)?;
    let b = traj.state_at(t - period)?;
    let na = norm(&a);
    if na < 1e-12 {
        return None;
    }
    Some(dist(&a, &b) / na)
}

/// Nelder–Mead on a function of two variables; returns the best vertex.
fn nelder_mead_2d<F: Fn(f64, f64) -> f64>(f: F, x0: [f64; 2], step: [f64; 2], iters: usize) -> ([f64; 2], f64) {
    let mut s = [x0, [x0[0] + step[0], x0[1]], [x0[0], x0[1] + step[1]]];
    let mut v = s.map(|p| f(p[0], p[1]));
    for _ in 0..iters {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let (b, m, w) = (idx[0], idx[1], idx[2]);
        let c = [(s[b][0] + s[m][0]) / 2.0, (s[b][1] + s[m][1]) / 2.0];
        let at = |t: f64| [c[0] + t * (s[w][0] - c[0]), c[1] + t * (s[w][1] - c[1])];
        let xr = at(-1.0);
        let fr = f(xr[0], xr[1]);
        if fr < v[b] {
            let xe = at(-2.0);
            let fe = f(xe[0], xe[1]);
            if fe < fr {
                s[w] = xe;
                v[w] = fe;
            } else {
                s[w] = xr;
                v[w] = fr;
            }
        } else if fr < v[m] {
            s[w] = xr;
            v[w] = fr;
        } else {
            let xc = if fr < v[w] { at(-0.5) } else { at(0.5) };
            let fc = f(xc[0], xc[1]);
            if fc < v[w].min(fr) {
                s[w] = xc;
                v[w] = fc;
            } else {
                for i in [m, w] {
                    s[i] = [(s[i][0] + s[b][0]) / 2.0, (s[i][1] + s[b][1]) / 2.0];
                    v[i] = f(s[i][0], s[i][1]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    (s[best], v[best])
}

/// Local minima of `R` on a `(t, T)` grid that fall below the threshold,
/// best first, with near-duplicates suppressed.
pub fn scan(traj: &Trajectory, opts: &ScanOptions) -> Result<Vec<RecurrenceEvent>, RecurrenceError> {
    let (t_min, t_max) = (opts.t_min, opts.t_max);
    if !(t_min > 0.0 && t_max > t_min) {
        return Err(RecurrenceError::BadWindow { t_min, t_max });
    }
    let t0 = traj.t_start();
    let span = traj.t_end() - t0;
    if !(span > t_max) {
        return Err(RecurrenceError::TooShort { span, t_max });
    }
    let dt = opts.dt.unwrap_or(t_max / 500.0);
    let dp = opts.d_period.unwrap_or(t_max / 500.0);
    // Uniform samples; both strides index into this table when they agree.
    let h = dt.min(dp);
    let m = (span / h).floor() as usize + 1;
    let samples: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| traj.state_at(t0 + i as f64 * h).unwrap())
        .collect();
    let sample = |t: f64| -> Option<&Vec<f64>> {
        let x = (t - t0) / h;
        let i = x.round();
        ((x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < m).then(|| &samples[i as usize])
    };
    let r_at = |t: f64, p: f64| -> Option<f64> {
        match (sample(t), sample(t - p)) {
            (Some(a), Some(b)) => {
                let na = norm(a);
                (na >= 1e-12).then(|| dist(a, b) / na)
            }
            _ => recurrence_value(traj, t, p),
        }
    };
    let j_lo = (t_min / dp).ceil() as usize;
    let j_hi = (t_max / dp).floor() as usize;
    let np = j_hi + 1 - j_lo;
    let i_lo = ((t_min / dt).ceil()) as usize;
    let i_hi = (span / dt).floor() as usize;
    if i_hi < i_lo || np == 0 {
        return Ok(Vec::new());
    }
    let nt = i_hi + 1 - i_lo;
    let row = |a: usize| -> Vec<f64> {
        let t = t0 + (i_lo + a) as f64 * dt;
        (0..np)
            .map(|b| {
                let p = (j_lo + b) as f64 * dp;
                if t - p < t0 - 1e-12 {
                    f64::NAN
                } else {
                    r_at(t, p).unwrap_or(f64::NAN)
                }
            })
            .collect()
    };
    // Rows are produced in chunks with a one-row halo, so the full grid is
    // never held in memory.
    const CHUNK: usize = 256;
    let mut cands: Vec<RecurrenceEvent> = (0..nt.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(nt);
            let first = lo.saturating_sub(1);
            let last = (hi + 1).min(nt);
            let rows: Vec<Vec<f64>> = (first..last).map(row).collect();
            let mut found = Vec::new();
            for a in lo..hi {
                let cur = &rows[a - first];
                for b in 0..np {
                    let v = cur[b];
                    if !(v <= opts.threshold) {
                        continue;
                    }
                    let mut is_min = true;
                    'nb: for aa in a.saturating_sub(1)..(a + 2).min(nt) {
                        for bb in b.saturating_sub(1)..(b + 2).min(np) {
                            if (aa, bb) != (a, b) && rows[aa - first][bb] < v {
                                is_min = false;
                                break 'nb;
                            }
                        }
                    }
                    if is_min {
                        found.push(RecurrenceEvent {
                            t: t0 + (i_lo + a) as f64 * dt,
                            period: (j_lo + b) as f64 * dp,
                            r: v,
                        });
                    }
                }
            }
            found
        })
        .collect();
    cands.sort_by(|x, y| x.r.total_cmp(&y.r).then(x.t.total_cmp(&y.t)));
    let mut events: Vec<RecurrenceEvent> = Vec::new();
    let near = |x: &RecurrenceEvent, y: &RecurrenceEvent| (x.t - y.t).abs() <= dt && (x.period - y.period).abs() <= dp;
    for c in cands {
        if events.len() >= opts.max_events {
            break;
        }
        if events.iter().any(|e| near(e, &c)) {
            continue;
        }
        events.push(c);
    }
    if opts.polish {
        let t_end = traj.t_end();
        events.par_iter_mut().for_each(|e| {
            let obj = |t: f64, p: f64| {
                if p < t_min || p > t_max || t > t_end || t - p < t0 {
                    return f64::INFINITY;
                }
                recurrence_value(traj, t, p).unwrap_or(f64::INFINITY)
            };
            let (x, v) = nelder_mead_2d(obj, [e.t, e.period], [0.5 * dt, 0.5 * dp], 80);
            if v < e.r {
                *e = RecurrenceEvent {
                    t: x[0],
                    period: x[1],
                    r: v,
                };
            }
        });
        events.sort_by(|x, y| x.r.total_cmp(&y.r).then(x.t.total_cmp(&y.t)));
        let mut kept: Vec<RecurrenceEvent> = Vec::new();
        for e in events {
            if !kept.iter().any(|k| near(k, &e)) {
                kept.push(e);
            }
        }
        events = kept;
    }
    Ok(events)
}

/// Replaces `ev` by the shortest divisor period `T/m ≥ t_min` at which the
/// trajectory recurs about as well, so a loop traversed several times is cut
/// once.
pub fn fundamental_event(traj: &Trajectory, ev: &RecurrenceEvent, t_min: f64) -> RecurrenceEvent {
    let tol = (2.0 * ev.r).max(1e-8);
    let max_m = (ev.period / t_min).floor() as usize;
    for m in (2..=max_m).rev() {
        let p = ev.period / m as f64;
        let obj = |t: f64, q: f64| {
            if t - q < traj.t_start() || t > traj.t_end() || q < t_min {
                return f64::INFINITY;
            }
            recurrence_value(traj, t, q).unwrap_or(f64::INFINITY)
        };
        let (x, v) = nelder_mead_2d(obj, [ev.t, p], [0.01 * p, 0.01 * p], 80);
        if v <= tol && (x[1] - p).abs() < 0.1 * p {
            return RecurrenceEvent {
                t: x[0],
                period: x[1],
                r: v,
            };
        }
    }
    *ev
}

/// Smallest power of two with `T/N ≤ 0.02`, clamped to `[16, 1024]`.
pub fn default_points(period: f64) -> usize {
    let mut n = MIN_POINTS;
    while n < 1024 && period / n as f64 > 0.02 {
        n *= 2;
    }
    n
}

/// Samples `a(t − T + jT/N)`, `j = 0..N−1`, from the dense output.
pub fn extract_segment(traj: &Trajectory, ev: &RecurrenceEvent, n: usize, k: f64) -> Result<OrbitGuess, RecurrenceError> {
    if n < MIN_POINTS {
        return Err(RecurrenceError::TooFewPoints(n));
    }
    let start = ev.t - ev.period;
    if !(ev.period > 0.0) || start < traj.t_start() || ev.t > traj.t_end() {
        return Err(RecurrenceError::OutOfRange {
            t: ev.t,
            period: ev.period,
        });
    }
    let points = (0..n)
        .map(|j| traj.state_at(start + j as f64 * ev.period / n as f64).unwrap())
        .collect();
    Ok(OrbitGuess {
        points,
        period: ev.period,
        k,
    })
}

pub fn events_to_csv(events: &[RecurrenceEvent]) -> String {
    let mut s = String::from("# t,T,R\n");
    for e in events {
        let _ = writeln!(s, "{},{},{}", e.t, e.period, e.r);
    }
    s
}

pub fn parse_events_csv(text: &str) -> Result<Vec<RecurrenceEvent>, RecurrenceError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = t
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| RecurrenceError::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
        if v.len() != 3 {
            return Err(RecurrenceError::Parse {
                line: k + 1,
                msg: "expected t,T,R".into(),
            });
        }
        out.push(RecurrenceEvent {
            t: v[0],
            period: v[1],
            r: v[2],
        });
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[RecurrenceEvent]) -> Result<(), RecurrenceError> {
    std::fs::write(path, events_to_csv(events))?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<RecurrenceEvent>, RecurrenceError> {
    parse_events_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate, ControlledField, IntegrateOptions};
    use crate::polyalg::Polynomial;
    use crate::systems::DynamicalSystem;

    fn rotation(omega: f64, scale: f64) -> Trajectory {
        let f1 = Polynomial::from_terms(2, [(-omega, vec![0, 1])]).unwrap();
        let f2 = Polynomial::from_terms(2, [(omega, vec![1, 0])]).unwrap();
        let cf = ControlledField::uncontrolled(DynamicalSystem::new("rot", vec![f1, f2]).unwrap());
        integrate(&cf, &[scale, 0.0], 40.0, &IntegrateOptions::default()).unwrap()
    }

    #[test]
    fn circle_recurs_at_its_period() {
        let traj = rotation(1.0, 1.0);
        let events = scan(&traj, &ScanOptions::new(1.0, 10.0)).unwrap();
        assert!(!events.is_empty());
        let tau = std::f64::consts::TAU;
        let best = events[0];
        assert!(best.r <= 1e-6, "{best:?}");
        assert!(events.iter().all(|e| e.r <= DEFAULT_THRESHOLD && e.period >= 1.0 && e.period <= 10.0));
        assert!(events.iter().any(|e| (e.period - tau).abs() <= 10.0 / 500.0 && e.r <= 1e-6));
        assert!(events.windows(2).all(|w| w[0].r <= w[1].r));
    }

    #[test]
    fn antipodal_probe() {
        let traj = rotation(1.0, 1.0);
        let r = recurrence_value(&traj, 10.0, std::f64::consts::PI).unwrap();
        assert!((r - 2.0).abs() < 1e-8);
    }

    #[test]
    fn synthetic_period_is_found() {
        // Period 3 rotation: ω = 2π/3.
        let tp = 3.0;
        let traj = rotation(std::f64::consts::TAU / tp, 1.0);
        let opts = ScanOptions::new(2.0, 5.0);
        let events = scan(&traj, &opts).unwrap();
        assert!(events.iter().any(|e| (e.period - tp).abs() <= 5.0 / 500.0 && e.r <= 1e-6));
    }

    #[test]
    fn scaling_leaves_r_unchanged() {
        let a = rotation(1.3, 1.0);
        let b = a.scaled(7.5);
        for s in 0..40 {
            let t = 5.0 + s as f64 * 0.73;
            let p = 0.5 + s as f64 * 0.11;
            let (ra, rb) = (recurrence_value(&a, t, p).unwrap(), recurrence_value(&b, t, p).unwrap());
            assert!((ra - rb).abs() <= 1e-12 * (1.0 + ra), "{ra} {rb}");
        }
    }

    #[test]
    fn segment_extraction() {
        let traj = rotation(1.0, 1.0);
        let ev = RecurrenceEvent {
            t: 20.0,
            period: std::f64::consts::TAU,
            r: 0.0,
        };
        let g = extract_segment(&traj, &ev, 64, 0.25).unwrap();
        assert_eq!(g.points.len(), 64);
        assert!(g.points.iter().all(|p| (norm(p) - 1.0).abs() <= 1e-6));
        assert!(matches!(extract_segment(&traj, &ev, 8, 0.0), Err(RecurrenceError::TooFewPoints(8))));
        let early = RecurrenceEvent { t: 3.0, ..ev };
        assert!(matches!(extract_segment(&traj, &early, 64, 0.0), Err(RecurrenceError::OutOfRange { .. })));
    }

    #[test]
    fn window_and_span_checks() {
        let traj = rotation(1.0, 1.0);
        assert!(matches!(scan(&traj, &ScanOptions::new(1.0, 50.0)), Err(RecurrenceError::TooShort { .. })));
        assert!(matches!(scan(&traj, &ScanOptions::new(3.0, 2.0)), Err(RecurrenceError::BadWindow { .. })));
    }

    #[test]
    fn multiple_periods_reduce_to_the_fundamental_one() {
        let traj = rotation(1.0, 1.0);
        let ev = RecurrenceEvent {
            t: 30.0,
            period: 3.0 * std::f64::consts::TAU,
            r: 0.0,
        };
        let f = fundamental_event(&traj, &ev, 1.0);
        assert!((f.period - std::f64::consts::TAU).abs() < 1e-6, "{f:?}");
        assert!(f.r <= 1e-8);
    }

    #[test]
    fn default_point_rule() {
        assert_eq!(default_points(0.1), 16);
        assert_eq!(default_points(2.3128), 128);
        assert_eq!(default_points(5.0), 256);
        assert_eq!(default_points(100.0), 1024);
    }

    #[test]
    fn events_csv_round_trip() {
        let ev = vec![
            RecurrenceEvent {
                t: 12.5,
                period: 6.283185307179586,
                r: 1e-9,
            },
            RecurrenceEvent {
                t: 30.0,
                period: 0.1,
                r: 0.02,
            },
        ];
        assert_eq!(parse_events_csv(&events_to_csv(&ev)).unwrap(), ev);
    }
}
