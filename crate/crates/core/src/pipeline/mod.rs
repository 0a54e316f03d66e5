//! The four-stage search driven from a configuration file: bound, minimize,
//! hunt and continue. Every stage reads its predecessor's artifacts from the
//! output directory and writes its own, and a manifest records what is done
//! so that reruns skip finished work.

mod config;
mod plot;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{PipelineConfig, SolverMode, CONFIG_KEYS};
pub use plot::PLOT_SCRIPT;

use crate::continuation::{continue_orbit, read_branch, write_branch, Branch, ContinuationError, KSchedule};
use crate::flow::{integrate, ControlMode, ControlledField, FlowError, IntegrateOptions, Trajectory};
use crate::gapmin::{minimize_multistart, skip_log, uniform_starts, BfgsOptions, GapError, GapPolynomial, PointCloud};
use crate::polyalg::Polynomial;
use crate::recurrence::{
    default_points, extract_segment, fundamental_event, read_events, scan, write_events, RecurrenceError, RecurrenceEvent,
    ScanOptions,
};
use crate::sdpsolve::{self, SdpError, SolveOptions};
use crate::sosbound::{build_relaxation, extract_certificate, solve_bound, AffineScaling, Certificate, RelaxationSpec, SosError};
use crate::systems::{observable_to_text, DynamicalSystem, SystemError};
use crate::varorbit::{converge, resample, LmOptions, OrbitError, PeriodicOrbit};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_COPY: &str = "config.txt";
pub const LOCK: &str = ".lock";
pub const FAILURE: &str = "failure.txt";
pub const BOX: &str = "box.txt";
pub const CERTIFICATE: &str = "certificate.txt";
pub const RELAXATION: &str = "relaxation.dat-s";
pub const CLOUD: &str = "cloud.csv";
pub const SKIPPED: &str = "skipped_starts.log";
pub const EVENTS: &str = "events.csv";
pub const CONTROLLED_ORBIT: &str = "controlled.orbit";
pub const CONTROLLED_TRAJECTORY: &str = "controlled_trajectory.csv";
pub const HUNT_LOG: &str = "hunt.txt";
pub const BRANCH_DIR: &str = "branch";
pub const FINAL_ORBIT: &str = "final.orbit";
pub const REFINED_ORBIT: &str = "refined.orbit";
pub const SUMMARY: &str = "summary.txt";
pub const PLOT: &str = "plot.py";

/// Scaling box used for the van der Pol builtin, whose reverse-time flow has
/// no attractor to measure.
pub const VDP_BOX: ([f64; 2], [f64; 2]) = ([-1.0, -1.3], [1.0, 1.3]);

/// Length of the uncontrolled probe run that measures the attractor box.
pub const PROBE_DURATION: f64 = 1000.0;
/// Relative growth of the measured attractor box.
pub const BOX_INFLATION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config key {key:?}: {msg}")]
    Config { key: String, msg: String },
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("output directory {0} is locked by another run; delete the lock file if that run is gone")]
    Locked(String),
    #[error("no manifest in {0}")]
    NoManifest(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("stage {stage} needs the output of stage {need} ({reason}); rerun stage {need}")]
    MissingPredecessor {
        stage: &'static str,
        need: &'static str,
        reason: String,
    },
    #[error("cannot derive a start box: {0}; set `box` in the config")]
    NoBox(String),
    #[error("certificate is unusable (solver status {0})")]
    UnusableCertificate(String),
    #[error("no admissible D-minimizer: every start ended above eps = {eps:e} (best D = {best:e})")]
    EmptyCloud { eps: f64, best: f64 },
    #[error("hunt found no convergent orbit: {0}")]
    NoOrbit(String),
    #[error("continuation stopped at k = {k}: {reason}")]
    Stalled { k: f64, reason: String },
    #[error("bound stage is waiting for an external solution; run import-sdp-solution first")]
    AwaitingSolution,
    #[error("unknown stage {0:?}; stages are bound, minimize, hunt, continue")]
    UnknownStage(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Continuation(#[from] ContinuationError),
}

impl PipelineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Bound,
    Minimize,
    Hunt,
    Continue,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Bound, Stage::Minimize, Stage::Hunt, Stage::Continue];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Bound => "bound",
            Stage::Minimize => "minimize",
            Stage::Hunt => "hunt",
            Stage::Continue => "continue",
        }
    }

    pub fn parse(s: &str) -> Result<Stage, PipelineError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }

    fn index(&self) -> usize {
        *self as usize
    }

    pub fn previous(&self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i])
    }

    /// Files that must exist for the stage to count as done.
    pub fn artifacts(&self) -> &'static [&'static str] {
        match self {
            Stage::Bound => &[BOX, CERTIFICATE],
            Stage::Minimize => &[CLOUD],
            Stage::Hunt => &[EVENTS, CONTROLLED_ORBIT],
            Stage::Continue => &["branch/branch.csv", FINAL_ORBIT, SUMMARY, PLOT],
        }
    }

    /// Config keys that the stage's result depends on, beyond those of the
    /// stages before it.
    fn keys(&self) -> &'static [&'static str] {
        match self {
            Stage::Bound => &["degV", "box", "solver", "max_block", "rng_seed"],
            Stage::Minimize => &["eps", "seeds"],
            Stage::Hunt => &["k_initial", "t_min", "t_max", "N", "span", "skip", "hunt_attempts"],
            Stage::Continue => &["halvings"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Pending,
    Done,
    AwaitingSolution,
    Failed,
}

impl StageStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageStatus::Pending => "pending",
            StageStatus::Done => "done",
            StageStatus::AwaitingSolution => "awaiting-solution",
            StageStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pending" => StageStatus::Pending,
            "done" => StageStatus::Done,
            "awaiting-solution" => StageStatus::AwaitingSolution,
            "failed" => StageStatus::Failed,
            _ => return None,
        })
    }
}

/// Config hash, RNG seed and per-stage status with the fingerprint of the
/// inputs each stage was run with.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub rng_seed: u64,
    pub stages: [(StageStatus, String); 4],
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            config_hash: String::new(),
            rng_seed: 0,
            stages: std::array::from_fn(|_| (StageStatus::Pending, String::new())),
        }
    }
}

impl Manifest {
    pub fn status(&self, s: Stage) -> StageStatus {
        self.stages[s.index()].0
    }

    fn set(&mut self, s: Stage, status: StageStatus, hash: &str) {
        self.stages[s.index()] = (status, hash.to_string());
    }

    /// Marks every stage after `s` pending.
    fn invalidate_after(&mut self, s: Stage) {
        for later in &mut self.stages[s.index() + 1..] {
            *later = (StageStatus::Pending, String::new());
        }
    }

    fn is_done(&self, s: Stage, hash: &str) -> bool {
        let (st, h) = &self.stages[s.index()];
        *st == StageStatus::Done && h == hash
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# pipeline manifest\n");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "rng_seed = {}", self.rng_seed);
        for st in Stage::ALL {
            let (status, hash) = &self.stages[st.index()];
            let _ = writeln!(s, "{} = {} {}", st.name(), status.as_str(), hash);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut m = Manifest::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| PipelineError::Manifest {
                line: k + 1,
                msg: msg.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "config_hash" => m.config_hash = value.to_string(),
                "rng_seed" => m.rng_seed = value.parse().map_err(|_| err("bad seed"))?,
                _ => {
                    let st = Stage::parse(key).map_err(|_| err("unknown stage"))?;
                    let mut parts = value.split_whitespace();
                    let status = parts.next().and_then(StageStatus::parse).ok_or_else(|| err("bad status"))?;
                    m.set(st, status, parts.next().unwrap_or(""));
                }
            }
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(PipelineError::NoManifest(dir.display().to_string()));
        }
        Self::parse(&fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?)
    }

    fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        write_file(&dir.join(MANIFEST), &self.to_text())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.display().to_string())),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What `run` did with one requested stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageAction {
    Ran,
    Skipped,
    Awaiting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub stages: Vec<(Stage, StageAction)>,
}

impl RunOutcome {
    pub fn action(&self, s: Stage) -> Option<StageAction> {
        self.stages.iter().find(|(st, _)| *st == s).map(|(_, a)| *a)
    }
}

/// Numbers written by the continue stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub bound: f64,
    pub n_points: usize,
    pub period: f64,
    pub period_refined: f64,
    pub period_extrapolated: f64,
    pub cost: f64,
    pub average: f64,
    pub average_refined: f64,
    /// Richardson combination of the `N` and `2N` averages.
    pub average_extrapolated: f64,
    pub gap_percent: f64,
    pub shooting_error: f64,
    pub shooting_error_refined: f64,
    /// Orbit mean of `f·∇V` relative to the mean of `|f·∇V|`, extrapolated.
    pub lie_mean_relative: f64,
    pub branch_k: Vec<f64>,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("bound", format!("{:.12}", self.bound));
        kv("n_points", self.n_points.to_string());
        kv("period", format!("{:.12}", self.period));
        kv("period_refined", format!("{:.12}", self.period_refined));
        kv("period_extrapolated", format!("{:.12}", self.period_extrapolated));
        kv("cost", format!("{:.6e}", self.cost));
        kv("average", format!("{:.12}", self.average));
        kv("average_refined", format!("{:.12}", self.average_refined));
        kv("average_extrapolated", format!("{:.12}", self.average_extrapolated));
        kv("gap_percent", format!("{:.6}", self.gap_percent));
        kv("shooting_error", format!("{:.6e}", self.shooting_error));
        kv("shooting_error_refined", format!("{:.6e}", self.shooting_error_refined));
        kv("lie_mean_relative", format!("{:.6e}", self.lie_mean_relative));
        let ks: Vec<String> = self.branch_k.iter().map(|k| format!("{k}")).collect();
        kv("branch_k", ks.join(","));
        s
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut get = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                get.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let f = |k: &str| -> Result<f64, PipelineError> {
            get.get(k).and_then(|v| v.parse().ok()).ok_or(PipelineError::Manifest {
                line: 0,
                msg: format!("summary field {k} missing or malformed"),
            })
        };
        Ok(Summary {
            bound: f("bound")?,
            n_points: f("n_points")? as usize,
            period: f("period")?,
            period_refined: f("period_refined")?,
            period_extrapolated: f("period_extrapolated")?,
            cost: f("cost")?,
            average: f("average")?,
            average_refined: f("average_refined")?,
            average_extrapolated: f("average_extrapolated")?,
            gap_percent: f("gap_percent")?,
            shooting_error: f("shooting_error")?,
            shooting_error_refined: f("shooting_error_refined")?,
            lie_mean_relative: f("lie_mean_relative")?,
            branch_k: get
                .get("branch_k")
                .map(|v| v.split(',').filter_map(|t| t.parse().ok()).collect())
                .unwrap_or_default(),
        })
    }
}

fn write_box(path: &Path, lo: &[f64], hi: &[f64]) -> Result<(), PipelineError> {
    let row = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
    write_file(path, &format!("lo {}\nhi {}\n", row(lo), row(hi)))
}

fn read_box(path: &Path) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let text = read_file(path)?;
    let mut lo = None;
    let mut hi = None;
    for (k, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let tag = parts.next();
        let vals: Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let vals = vals.map_err(|_| PipelineError::Manifest {
            line: k + 1,
            msg: format!("{}: bad number", path.display()),
        })?;
        match tag {
            Some("lo") => lo = Some(vals),
            Some("hi") => hi = Some(vals),
            _ => {}
        }
    }
    match (lo, hi) {
        (Some(l), Some(h)) if l.len() == h.len() => Ok((l, h)),
        _ => Err(PipelineError::Manifest {
            line: 0,
            msg: format!("{}: expected `lo` and `hi` rows of equal length", path.display()),
        }),
    }
}

/// Bounding box of the attractor reached from a perturbed equilibrium,
/// grown by [`BOX_INFLATION`]. The first tenth of the run is discarded.
pub fn attractor_box(system: &DynamicalSystem, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let n = system.dim();
    let origin = system.equilibria.first().cloned().unwrap_or_else(|| vec![0.0; n]);
    let normal = Normal::new(0.0, 0.1).expect("fixed spread");
    let a0: Vec<f64> = origin.iter().map(|x| x + normal.sample(rng)).collect();
    let cf = ControlledField::uncontrolled(system.clone());
    let opts = IntegrateOptions {
        rtol: 1e-8,
        atol: 1e-8,
        ..IntegrateOptions::default()
    };
    let traj = integrate(&cf, &a0, PROBE_DURATION, &opts)?;
    if traj.diverged {
        return Err(PipelineError::NoBox(format!(
            "the probe run from {a0:?} diverged at t = {:.3}",
            traj.t_end()
        )));
    }
    let (lo, hi) = traj.tail(0.1 * PROBE_DURATION).bounding_box();
    let width: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
    if width.iter().any(|w| *w < 1e-6) {
        return Err(PipelineError::NoBox("the probe run settled onto a point".into()));
    }
    let grow = 0.5 * BOX_INFLATION;
    Ok((
        lo.iter().zip(&width).map(|(l, w)| l - grow * w).collect(),
        hi.iter().zip(&width).map(|(h, w)| h + grow * w).collect(),
    ))
}

/// Mean of `D` over `samples` equispaced states of the loop ending at `ev.t`.
fn mean_gap_along(gap: &GapPolynomial, traj: &Trajectory, ev: &RecurrenceEvent, samples: usize) -> f64 {
    let mut sum = 0.0;
    for j in 0..samples {
        let t = ev.t - ev.period + ev.period * j as f64 / samples as f64;
        match traj.state_at(t) {
            Some(x) => sum += gap.value(&x),
            None => return f64::INFINITY,
        }
    }
    sum / samples as f64
}

/// Midpoint-rule orbit average of `p`, and of `|p|`.
fn midpoint_means(points: &[Vec<f64>], p: &Polynomial) -> (f64, f64) {
    let n = points.len();
    let (mut s, mut a) = (0.0, 0.0);
    for i in 0..n {
        let m: Vec<f64> = points[i].iter().zip(&points[(i + 1) % n]).map(|(x, y)| 0.5 * (x + y)).collect();
        let v = p.eval(&m).unwrap_or(f64::NAN);
        s += v;
        a += v.abs();
    }
    (s / n as f64, a / n as f64)
}

/// Loaded problem plus configuration.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub system: DynamicalSystem,
    pub observable: Polynomial,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let system = config.load_system()?;
        let observable = config.load_observable()?;
        if observable.dim() != system.dim() {
            return Err(PipelineError::Config {
                key: "observable".into(),
                msg: format!("has {} variables, the system has {}", observable.dim(), system.dim()),
            });
        }
        if let Some((lo, _)) = &config.start_box {
            if lo.len() != system.dim() {
                return Err(PipelineError::Config {
                    key: "box".into(),
                    msg: format!("has {} coordinates per corner, the system has {}", lo.len(), system.dim()),
                });
            }
        }
        Ok(Pipeline {
            config,
            system,
            observable,
        })
    }

    fn dir(&self) -> &Path {
        &self.config.output_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir().join(name)
    }

    /// Hash of everything the configuration pins down except `output_dir`.
    pub fn config_hash(&self) -> String {
        self.hash_through(Stage::Continue)
    }

    /// Fingerprint of the inputs of `stage` and of all stages before it.
    pub fn hash_through(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        h.update(self.system.to_text());
        h.update(observable_to_text(&self.observable));
        for st in Stage::ALL.into_iter().take(stage.index() + 1) {
            for key in st.keys() {
                let v = self.config.value_of(key).unwrap_or_default();
                h.update(format!("{key}={v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stream `stage` of the run's seeded generator.
    pub fn rng(&self, stage: Stage) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        r.set_stream(stage.index() as u64);
        r
    }

    /// Configured box, the fixed van der Pol box, or the measured attractor box.
    pub fn start_box(&self) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
        if let Some(b) = &self.config.start_box {
            return Ok(b.clone());
        }
        if self.config.system == "vdp" {
            return Ok((VDP_BOX.0.to_vec(), VDP_BOX.1.to_vec()));
        }
        attractor_box(&self.system, &mut self.rng(Stage::Bound))
    }

    pub fn relaxation(&self, lo: &[f64], hi: &[f64]) -> Result<RelaxationSpec, PipelineError> {
        Ok(RelaxationSpec::new(self.system.clone(), self.observable.clone(), self.config.deg_v)?
            .with_scaling(AffineScaling::from_box(lo, hi))?)
    }

    pub fn certificate(&self) -> Result<Certificate, PipelineError> {
        Ok(Certificate::parse(&read_file(&self.path(CERTIFICATE))?)?)
    }

    pub fn gap(&self) -> Result<Arc<GapPolynomial>, PipelineError> {
        Ok(Arc::new(GapPolynomial::from_certificate(&self.certificate()?, &self.system, &self.observable)?))
    }

    fn artifacts_exist(&self, s: Stage) -> bool {
        s.artifacts().iter().all(|a| self.path(a).exists())
    }

    fn stage_bound(&self, external: bool) -> Result<StageAction, PipelineError> {
        let (lo, hi) = self.start_box()?;
        write_box(&self.path(BOX), &lo, &hi)?;
        let spec = self.relaxation(&lo, &hi)?;
        if external {
            let (problem, _) = build_relaxation(&spec)?;
            write_file(&self.path(RELAXATION), &sdpsolve::sdpa::write_problem(&problem)?)?;
            log::info!("exported {} ({} rows)", self.path(RELAXATION).display(), problem.num_constraints());
            return Ok(StageAction::Awaiting);
        }
        let opts = SolveOptions {
            max_block: self.config.max_block,
            ..SolveOptions::default()
        };
        let cert = solve_bound(&spec, &opts)?;
        self.accept_certificate(&cert)?;
        Ok(StageAction::Ran)
    }

    fn accept_certificate(&self, cert: &Certificate) -> Result<(), PipelineError> {
        write_file(&self.path(CERTIFICATE), &cert.to_text())?;
        if !cert.status.is_usable() {
            return Err(PipelineError::UnusableCertificate(cert.status.as_str().into()));
        }
        log::info!("bound U = {:.10} ({})", cert.bound, cert.status.as_str());
        Ok(())
    }

    fn stage_minimize(&self) -> Result<StageAction, PipelineError> {
        let gap = self.gap()?;
        let (lo, hi) = read_box(&self.path(BOX))?;
        let starts = uniform_starts(&lo, &hi, self.config.seeds, &mut self.rng(Stage::Minimize));
        let ms = minimize_multistart(&gap, &starts, self.config.eps, &BfgsOptions::default())?;
        ms.cloud.write(&self.path(CLOUD))?;
        write_file(&self.path(SKIPPED), &skip_log(&ms.skipped))?;
        if ms.cloud.points.is_empty() {
            let best = starts.iter().map(|s| gap.value(s)).fold(f64::INFINITY, f64::min);
            return Err(PipelineError::EmptyCloud {
                eps: self.config.eps,
                best,
            });
        }
        log::info!(
            "{} D-minimizers admitted, best D = {:.3e}",
            ms.cloud.points.len(),
            ms.cloud.points[0].d
        );
        Ok(StageAction::Ran)
    }

    fn stage_hunt(&self) -> Result<StageAction, PipelineError> {
        let cfg = &self.config;
        let gap = self.gap()?;
        let cloud = PointCloud::read(&self.path(CLOUD))?;
        let start = cloud.best().ok_or(PipelineError::MissingPredecessor {
            stage: "hunt",
            need: "minimize",
            reason: "the point cloud is empty".into(),
        })?;
        let cf = ControlledField::controlled(self.system.clone(), gap.clone(), ControlMode::Projected, cfg.k_initial)?;
        let traj = integrate(&cf, &start.x, cfg.span(), &IntegrateOptions::default())?;
        if traj.diverged {
            return Err(PipelineError::NoOrbit(format!(
                "the controlled run diverged at t = {:.3}",
                traj.t_end()
            )));
        }
        let tail = traj.tail(cfg.skip);
        write_sampled(&tail, &self.path(CONTROLLED_TRAJECTORY), 20_000)?;
        let events = scan(&tail, &ScanOptions::new(cfg.t_min, cfg.t_max))?;
        write_events(&self.path(EVENTS), &events)?;
        if events.is_empty() {
            return Err(PipelineError::NoOrbit(format!(
                "no recurrence in [{}, {}] below the threshold",
                cfg.t_min, cfg.t_max
            )));
        }
        // Loops hugging the D-minimizers come first; ranking by R alone
        // favours whatever attractor the controlled flow settles on.
        let mut ranked: Vec<(f64, RecurrenceEvent)> =
            events.iter().map(|e| (mean_gap_along(&gap, &tail, e, 64), *e)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut log_text = String::from("# mean D, t, T, R, fundamental T, N, cost, converged\n");
        let lm = LmOptions::default();
        let mut found = None;
        for (mean_d, ev) in ranked.iter().take(cfg.hunt_attempts) {
            let fe = fundamental_event(&tail, ev, cfg.t_min);
            let n = if cfg.n_points > 0 {
                cfg.n_points
            } else {
                default_points(fe.period)
            };
            let guess = extract_segment(&tail, &fe, n, cfg.k_initial)?;
            let orbit = converge(&guess, &cf, &lm)?;
            let _ = writeln!(
                log_text,
                "{mean_d:.6e}, {}, {}, {:.3e}, {}, {n}, {:.3e}, {}",
                ev.t,
                ev.period,
                ev.r,
                fe.period,
                orbit.final_cost,
                orbit.is_valid()
            );
            if orbit.is_valid() {
                found = Some(orbit);
                break;
            }
        }
        write_file(&self.path(HUNT_LOG), &log_text)?;
        let orbit = found.ok_or_else(|| {
            PipelineError::NoOrbit(format!(
                "none of the {} best-ranked events converged",
                cfg.hunt_attempts.min(ranked.len())
            ))
        })?;
        orbit.write(&self.path(CONTROLLED_ORBIT))?;
        log::info!(
            "controlled orbit: T = {:.6}, N = {}, cost = {:.3e}",
            orbit.period,
            orbit.n_points(),
            orbit.final_cost
        );
        Ok(StageAction::Ran)
    }

    fn stage_continue(&self) -> Result<StageAction, PipelineError> {
        let cfg = &self.config;
        let cert = self.certificate()?;
        let gap = Arc::new(GapPolynomial::from_certificate(&cert, &self.system, &self.observable)?);
        let start = PeriodicOrbit::read(&self.path(CONTROLLED_ORBIT))?;
        let cf = ControlledField::controlled(self.system.clone(), gap, ControlMode::Projected, start.k)?;
        let sched = KSchedule::halving(start.k, cfg.halvings)?;
        let lm = LmOptions::default();
        let branch: Branch = continue_orbit(&start, &cf, &sched, &lm)?;
        let dir = self.path(BRANCH_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        write_branch(&dir, &branch)?;
        write_file(&self.path(PLOT), PLOT_SCRIPT)?;
        if !branch.reached_zero() {
            let k = branch.last().map_or(start.k, |o| o.k);
            return Err(PipelineError::Stalled {
                k,
                reason: branch.failure.clone().unwrap_or_else(|| "no orbit at k = 0".into()),
            });
        }
        let last = branch.last().expect("branch reached zero").clone();
        last.write(&self.path(FINAL_ORBIT))?;

        let unc = cf.without_control();
        let opts = IntegrateOptions::default();
        let mut fine = last.as_guess();
        fine.points = resample(&last.points, 2 * last.n_points());
        let refined = converge(&fine, &unc, &lm)?;
        refined.write(&self.path(REFINED_ORBIT))?;

        let (field, _) = cert.scaling.scaled_problem(&self.system, &self.observable);
        let lie = cert.v_scaled.lie_derivative(&field).map_err(SosError::from)?;
        let to_scaled = |o: &PeriodicOrbit| -> Vec<Vec<f64>> { o.points.iter().map(|p| cert.scaling.to_scaled(p)).collect() };
        let (lm_n, abs_n) = midpoint_means(&to_scaled(&last), &lie);

        let average = last.average(&self.observable);
        let mut summary = Summary {
            bound: cert.bound,
            n_points: last.n_points(),
            period: last.period,
            period_refined: f64::NAN,
            period_extrapolated: last.period,
            cost: last.final_cost,
            average,
            average_refined: f64::NAN,
            average_extrapolated: average,
            gap_percent: f64::NAN,
            shooting_error: last.shooting_error(&unc, &opts)?,
            shooting_error_refined: f64::NAN,
            lie_mean_relative: lm_n / abs_n,
            branch_k: branch.orbits.iter().map(|o| o.k).collect(),
        };
        if refined.is_valid() {
            let (lm_2n, abs_2n) = midpoint_means(&to_scaled(&refined), &lie);
            let avg2 = refined.average(&self.observable);
            summary.period_refined = refined.period;
            summary.period_extrapolated = (4.0 * refined.period - last.period) / 3.0;
            summary.average_refined = avg2;
            summary.average_extrapolated = (4.0 * avg2 - average) / 3.0;
            summary.shooting_error_refined = refined.shooting_error(&unc, &opts)?;
            summary.lie_mean_relative = (4.0 * lm_2n - lm_n) / 3.0 / (0.5 * (abs_n + abs_2n));
            // The midpoint error is even in h; a third level removes the h⁴ term too.
            let mut finer = refined.as_guess();
            finer.points = resample(&refined.points, 2 * refined.n_points());
            match converge(&finer, &unc, &lm) {
                Ok(o) if o.is_valid() => {
                    let (lm_4n, abs_4n) = midpoint_means(&to_scaled(&o), &lie);
                    let r1 = (4.0 * lm_2n - lm_n) / 3.0;
                    let r2 = (4.0 * lm_4n - lm_2n) / 3.0;
                    summary.lie_mean_relative = (16.0 * r2 - r1) / 15.0 / ((abs_n + abs_2n + abs_4n) / 3.0);
                }
                _ => log::warn!("the 4N Lie-mean level did not converge; using two levels"),
            }
        } else {
            log::warn!("the 2N refinement did not converge; averages are not extrapolated");
        }
        summary.gap_percent = 100.0 * (cert.bound - summary.average_extrapolated) / cert.bound.abs();
        write_file(&self.path(SUMMARY), &summary.to_text())?;
        log::info!(
            "k = 0 orbit: T = {:.8}, average = {:.10}, U = {:.10}, gap = {:.5}%",
            summary.period_extrapolated,
            summary.average_extrapolated,
            summary.bound,
            summary.gap_percent
        );
        Ok(StageAction::Ran)
    }

    fn execute(&self, s: Stage) -> Result<StageAction, PipelineError> {
        log::info!("stage {} starting", s.name());
        match s {
            Stage::Bound => self.stage_bound(self.config.solver == SolverMode::External),
            Stage::Minimize => self.stage_minimize(),
            Stage::Hunt => self.stage_hunt(),
            Stage::Continue => self.stage_continue(),
        }
    }
}

/// Writes `traj` at no more than `max_rows` equispaced times.
fn write_sampled(traj: &Trajectory, path: &Path, max_rows: usize) -> Result<(), PipelineError> {
    let rows = traj.len().min(max_rows).max(2);
    let (t0, t1) = (traj.t_start(), traj.t_end());
    let mut s = String::from("# t");
    for i in 1..=traj.dim() {
        let _ = write!(s, ",a{i}");
    }
    s.push('\n');
    for j in 0..rows {
        let t = t0 + (t1 - t0) * j as f64 / (rows - 1) as f64;
        if let Some(x) = traj.state_at(t) {
            let _ = write!(s, "{t}");
            for v in x {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    write_file(path, &s)
}

fn prepare_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn record_failure(dir: &Path, stage: Stage, err: &PipelineError) {
    let mut text = format!("stage: {}\nerror: {err}\n", stage.name());
    let mut src = std::error::Error::source(err);
    while let Some(e) = src {
        let _ = writeln!(text, "caused by: {e}");
        src = e.source();
    }
    let _ = fs::write(dir.join(FAILURE), text);
}

/// Runs the requested stages in order, skipping those already done with the
/// same inputs. A failing stage is marked failed in the manifest and its
/// error written to `failure.txt`.
pub fn run(config: &PipelineConfig, stages: &[Stage]) -> Result<RunOutcome, PipelineError> {
    let p = Pipeline::new(config.clone())?;
    let dir = p.dir().to_path_buf();
    prepare_dir(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let mut manifest = match Manifest::read(&dir) {
        Ok(m) => m,
        Err(PipelineError::NoManifest(_)) => Manifest::default(),
        Err(e) => return Err(e),
    };
    manifest.config_hash = p.config_hash();
    manifest.rng_seed = config.rng_seed;
    write_file(&dir.join(CONFIG_COPY), &config.to_text())?;
    manifest.write(&dir)?;

    let mut wanted: Vec<Stage> = stages.to_vec();
    wanted.sort();
    wanted.dedup();
    let mut outcome = RunOutcome { stages: Vec::new() };
    for s in wanted {
        let hash = p.hash_through(s);
        if manifest.is_done(s, &hash) && p.artifacts_exist(s) {
            log::info!("stage {} already done, skipping", s.name());
            outcome.stages.push((s, StageAction::Skipped));
            continue;
        }
        if s == Stage::Bound
            && manifest.status(s) == StageStatus::AwaitingSolution
            && manifest.stages[s.index()].1 == hash
            && dir.join(RELAXATION).exists()
        {
            outcome.stages.push((s, StageAction::Awaiting));
            break;
        }
        let result = match s.previous() {
            Some(prev) => check_predecessor(&p, &manifest, s, prev),
            None => Ok(()),
        }
        .and_then(|_| p.execute(s));
        match result {
            Ok(action) => {
                let status = if action == StageAction::Awaiting {
                    StageStatus::AwaitingSolution
                } else {
                    StageStatus::Done
                };
                manifest.set(s, status, &hash);
                manifest.invalidate_after(s);
                manifest.write(&dir)?;
                outcome.stages.push((s, action));
                if action == StageAction::Awaiting {
                    break;
                }
            }
            Err(e) => {
                manifest.set(s, StageStatus::Failed, &hash);
                manifest.invalidate_after(s);
                manifest.write(&dir)?;
                record_failure(&dir, s, &e);
                return Err(e);
            }
        }
    }
    let _ = fs::remove_file(dir.join(FAILURE));
    Ok(outcome)
}

fn check_predecessor(p: &Pipeline, m: &Manifest, s: Stage, prev: Stage) -> Result<(), PipelineError> {
    let missing = |reason: String| PipelineError::MissingPredecessor {
        stage: s.name(),
        need: prev.name(),
        reason,
    };
    if prev == Stage::Bound && m.status(prev) == StageStatus::AwaitingSolution {
        return Err(PipelineError::AwaitingSolution);
    }
    if !m.is_done(prev, &p.hash_through(prev)) {
        return Err(missing(match m.status(prev) {
            StageStatus::Done => "it ran with different settings".into(),
            other => format!("it is {}", other.as_str()),
        }));
    }
    if let Some(a) = prev.artifacts().iter().find(|a| !p.path(a).exists()) {
        return Err(missing(format!("{a} is missing")));
    }
    Ok(())
}

/// Writes the SDPA form of the configured relaxation to `dest` and leaves
/// the bound stage waiting for [`import_sdp_solution`].
pub fn export_sdp(config: &PipelineConfig, dest: Option<&Path>) -> Result<PathBuf, PipelineError> {
    let mut cfg = config.clone();
    cfg.solver = SolverMode::External;
    run(&cfg, &[Stage::Bound])?;
    let written = cfg.output_dir.join(RELAXATION);
    if let Some(d) = dest {
        fs::copy(&written, d).map_err(|e| PipelineError::io(d, e))?;
        return Ok(d.to_path_buf());
    }
    Ok(written)
}

/// Reads an external solution of the exported relaxation, rebuilds and
/// re-verifies the certificate, and marks the bound stage done.
pub fn import_sdp_solution(dir: &Path, solution: &Path) -> Result<Certificate, PipelineError> {
    let mut cfg = PipelineConfig::read(&dir.join(CONFIG_COPY))?;
    cfg.output_dir = dir.to_path_buf();
    cfg.solver = SolverMode::External;
    let p = Pipeline::new(cfg)?;
    let _lock = DirLock::acquire(dir)?;
    let mut manifest = Manifest::read(dir)?;
    let (lo, hi) = read_box(&dir.join(BOX))?;
    let spec = p.relaxation(&lo, &hi)?;
    let (problem, decoding) = build_relaxation(&spec)?;
    let sol = sdpsolve::sdpa::read_solution(&problem, &read_file(solution)?)?;
    let cert = extract_certificate(&spec, &decoding, &sol)?;
    let hash = p.hash_through(Stage::Bound);
    if let Err(e) = p.accept_certificate(&cert) {
        manifest.set(Stage::Bound, StageStatus::Failed, &hash);
        manifest.write(dir)?;
        record_failure(dir, Stage::Bound, &e);
        return Err(e);
    }
    manifest.set(Stage::Bound, StageStatus::Done, &hash);
    manifest.invalidate_after(Stage::Bound);
    manifest.write(dir)?;
    Ok(cert)
}

/// Human-readable status of an output directory.
pub fn report(dir: &Path) -> Result<String, PipelineError> {
    let m = Manifest::read(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "output directory: {}", dir.display());
    let _ = writeln!(s, "config hash: {}", m.config_hash);
    let _ = writeln!(s, "rng seed: {}", m.rng_seed);
    for st in Stage::ALL {
        let _ = writeln!(s, "stage {:<9} {}", st.name(), m.status(st).as_str());
    }
    let done = |st: Stage| m.status(st) == StageStatus::Done;
    if done(Stage::Bound) {
        if let Ok(c) = read_file(&dir.join(CERTIFICATE)).and_then(|t| Ok(Certificate::parse(&t)?)) {
            let _ = writeln!(s, "bound: U = {:.10} (degV {}, {})", c.bound, c.deg_v, c.status.as_str());
        }
    }
    if done(Stage::Minimize) {
        if let Ok(cloud) = PointCloud::read(&dir.join(CLOUD)) {
            match cloud.best() {
                Some(b) => {
                    let _ = writeln!(
                        s,
                        "minimizers: {} with D <= {:e}; best D = {:.3e} at {:?}",
                        cloud.points.len(),
                        cloud.eps,
                        b.d,
                        b.x
                    );
                }
                None => {
                    let _ = writeln!(s, "minimizers: none");
                }
            }
        }
    }
    if done(Stage::Hunt) {
        if let Ok(ev) = read_events(&dir.join(EVENTS)) {
            let _ = writeln!(s, "recurrence events: {}", ev.len());
        }
        if let Ok(o) = PeriodicOrbit::read(&dir.join(CONTROLLED_ORBIT)) {
            let _ = writeln!(
                s,
                "controlled orbit: k = {}, T = {:.8}, N = {}, cost = {:.3e}",
                o.k,
                o.period,
                o.n_points(),
                o.final_cost
            );
        }
    }
    if let Ok(b) = read_branch(&dir.join(BRANCH_DIR)) {
        let ks: Vec<String> = b.orbits.iter().map(|o| format!("{}", o.k)).collect();
        let _ = writeln!(s, "branch k values: {}", ks.join(", "));
        if let Some(f) = &b.failure {
            let _ = writeln!(s, "branch stopped: {f}");
        }
    }
    if done(Stage::Continue) {
        if let Ok(sum) = read_file(&dir.join(SUMMARY)).and_then(|t| Summary::parse(&t)) {
            let _ = writeln!(
                s,
                "final orbit: T = {:.8}, N = {}, cost = {:.3e}",
                sum.period_extrapolated, sum.n_points, sum.cost
            );
            let _ = writeln!(
                s,
                "average = {:.10} (N: {:.10}, 2N: {:.10}); U = {:.10}; gap = {:.5}%",
                sum.average_extrapolated, sum.average, sum.average_refined, sum.bound, sum.gap_percent
            );
            let _ = writeln!(
                s,
                "shooting error: {:.3e} (N), {:.3e} (2N)",
                sum.shooting_error, sum.shooting_error_refined
            );
        }
    }
    if let Ok(f) = read_file(&dir.join(FAILURE)) {
        let _ = write!(s, "last failure:\n{f}");
    }
    Ok(s)
}
