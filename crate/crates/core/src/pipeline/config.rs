//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::PipelineError;
use crate::continuation::DEFAULT_HALVINGS;
use crate::flow::DEFAULT_K;
use crate::polyalg::Polynomial;
use crate::systems::{builtin, builtin_observable, load_observable, load_system, DynamicalSystem, BUILTIN_OBSERVABLES, BUILTIN_SYSTEMS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMode {
    Embedded,
    /// Export SDPA and wait for an imported solution.
    External,
}

impl SolverMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverMode::Embedded => "embedded",
            SolverMode::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Builtin name or path to a system file.
    pub system: String,
    /// Lorenz-96 forcing; ignored by the other builtins.
    pub forcing: Option<f64>,
    /// Builtin name or path to an observable file.
    pub observable: String,
    pub deg_v: u32,
    pub eps: f64,
    pub k_initial: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Orbit discretisation points; 0 picks one from the period.
    pub n_points: usize,
    pub solver: SolverMode,
    /// Number of multistart points.
    pub seeds: usize,
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    /// Scaling and start box `(lo, hi)`; derived when absent.
    pub start_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Length of the controlled integration; `30·t_max` when absent.
    pub span: Option<f64>,
    /// Transient discarded before scanning for recurrences.
    pub skip: f64,
    pub halvings: usize,
    /// Events tried, best first, before the hunt gives up.
    pub hunt_attempts: usize,
    /// Largest PSD block the embedded solver accepts.
    pub max_block: usize,
}

pub const CONFIG_KEYS: &[&str] = &[
    "system",
    "forcing",
    "observable",
    "degV",
    "eps",
    "k_initial",
    "t_min",
    "t_max",
    "N",
    "solver",
    "seeds",
    "rng_seed",
    "output_dir",
    "box",
    "span",
    "skip",
    "halvings",
    "hunt_attempts",
    "max_block",
];

fn bad(key: &str, msg: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn new(system: &str, observable: &str, deg_v: u32, t_min: f64, t_max: f64, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            system: system.to_string(),
            forcing: None,
            observable: observable.to_string(),
            deg_v,
            eps: 1e-4,
            k_initial: DEFAULT_K,
            t_min,
            t_max,
            n_points: 0,
            solver: SolverMode::Embedded,
            seeds: 1000,
            rng_seed: 0,
            output_dir: output_dir.into(),
            start_box: None,
            span: None,
            skip: 0.0,
            halvings: DEFAULT_HALVINGS,
            hunt_attempts: 10,
            max_block: 400,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        match key {
            "system" => self.system = v.to_string(),
            "forcing" => self.forcing = Some(num(key, v)?),
            "observable" => self.observable = v.to_string(),
            "degV" | "deg_v" => self.deg_v = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "k_initial" | "k" => self.k_initial = num(key, v)?,
            "t_min" => self.t_min = num(key, v)?,
            "t_max" => self.t_max = num(key, v)?,
            "N" => self.n_points = num(key, v)?,
            "solver" => {
                self.solver = match v {
                    "embedded" => SolverMode::Embedded,
                    "external" => SolverMode::External,
                    _ => return Err(bad(key, "expected embedded or external")),
                }
            }
            "seeds" => self.seeds = num(key, v)?,
            "rng_seed" => self.rng_seed = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "box" => {
                let xs: Vec<f64> = v.split(',').map(|t| num(key, t.trim())).collect::<Result<_, _>>()?;
                if xs.len() % 2 != 0 || xs.is_empty() {
                    return Err(bad(key, "expected lo_1,…,lo_n,hi_1,…,hi_n"));
                }
                let n = xs.len() / 2;
                self.start_box = Some((xs[..n].to_vec(), xs[n..].to_vec()));
            }
            "span" => self.span = Some(num(key, v)?),
            "skip" => self.skip = num(key, v)?,
            "halvings" => self.halvings = num(key, v)?,
            "hunt_attempts" => self.hunt_attempts = num(key, v)?,
            "max_block" => self.max_block = num(key, v)?,
            _ => return Err(bad(key, format!("unknown key; known keys: {}", CONFIG_KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Required keys are
    /// `system`, `observable`, `degV`, `t_min`, `t_max` and `output_dir`.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::new("", "", 0, 0.0, 0.0, "");
        let mut seen = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(PipelineError::ConfigLine {
                line: k + 1,
                msg: "expected key = value".into(),
            })?;
            let key = key.trim();
            cfg.set(key, value).map_err(|e| PipelineError::ConfigLine {
                line: k + 1,
                msg: e.to_string(),
            })?;
            seen.push(key.to_string());
        }
        for req in ["system", "observable", "t_min", "t_max", "output_dir"] {
            if !seen.iter().any(|s| s == req) {
                return Err(bad(req, "missing required key"));
            }
        }
        if !seen.iter().any(|s| s == "degV" || s == "deg_v") {
            return Err(bad("degV", "missing required key"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.system.is_empty() {
            return Err(bad("system", "empty"));
        }
        if self.observable.is_empty() {
            return Err(bad("observable", "empty"));
        }
        if self.deg_v == 0 || self.deg_v % 2 == 1 {
            return Err(bad("degV", "must be a positive even integer"));
        }
        if !(self.eps > 0.0) {
            return Err(bad("eps", "must be positive"));
        }
        if !(self.k_initial >= 0.0 && self.k_initial.is_finite()) {
            return Err(bad("k_initial", "must be finite and nonnegative"));
        }
        if !(self.t_min > 0.0 && self.t_max > self.t_min && self.t_max.is_finite()) {
            return Err(bad("t_max", "need 0 < t_min < t_max"));
        }
        if self.n_points != 0 && self.n_points < crate::recurrence::MIN_POINTS {
            return Err(bad("N", format!("must be 0 or at least {}", crate::recurrence::MIN_POINTS)));
        }
        if self.seeds == 0 {
            return Err(bad("seeds", "must be positive"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(bad("output_dir", "empty"));
        }
        if let Some((lo, hi)) = &self.start_box {
            if lo.iter().zip(hi).any(|(l, h)| !(h > l)) {
                return Err(bad("box", "every hi must exceed its lo"));
            }
        }
        if let Some(s) = self.span {
            if !(s > self.t_max) {
                return Err(bad("span", "must exceed t_max"));
            }
        }
        if !(self.skip >= 0.0) {
            return Err(bad("skip", "must be nonnegative"));
        }
        if self.hunt_attempts == 0 {
            return Err(bad("hunt_attempts", "must be positive"));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.span.unwrap_or(30.0 * self.t_max)
    }

    /// Canonical text with every field, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            if let Some(v) = self.value_of(key) {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    /// Canonical value text, `None` for unset optional fields.
    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "system" => self.system.clone(),
            "forcing" => format!("{}", self.forcing?),
            "observable" => self.observable.clone(),
            "degV" => self.deg_v.to_string(),
            "eps" => format!("{:e}", self.eps),
            "k_initial" => format!("{}", self.k_initial),
            "t_min" => format!("{}", self.t_min),
            "t_max" => format!("{}", self.t_max),
            "N" => self.n_points.to_string(),
            "solver" => self.solver.as_str().to_string(),
            "seeds" => self.seeds.to_string(),
            "rng_seed" => self.rng_seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "box" => {
                let (lo, hi) = self.start_box.as_ref()?;
                format!("{},{}", join(lo), join(hi))
            }
            "span" => format!("{}", self.span?),
            "skip" => format!("{}", self.skip),
            "halvings" => self.halvings.to_string(),
            "hunt_attempts" => self.hunt_attempts.to_string(),
            "max_block" => self.max_block.to_string(),
            _ => return None,
        })
    }

    pub fn load_system(&self) -> Result<DynamicalSystem, PipelineError> {
        if BUILTIN_SYSTEMS.contains(&self.system.as_str()) {
            Ok(builtin(&self.system, self.forcing)?)
        } else if Path::new(&self.system).exists() {
            Ok(load_system(Path::new(&self.system))?)
        } else {
            Err(bad(
                "system",
                format!("{:?} is neither a builtin ({}) nor an existing file", self.system, BUILTIN_SYSTEMS.join(", ")),
            ))
        }
    }

    pub fn load_observable(&self) -> Result<Polynomial, PipelineError> {
        if BUILTIN_OBSERVABLES.contains(&self.observable.as_str()) {
            Ok(builtin_observable(&self.observable, self.forcing)?)
        } else if Path::new(&self.observable).exists() {
            Ok(load_observable(Path::new(&self.observable))?)
        } else {
            Err(bad(
                "observable",
                format!(
                    "{:?} is neither a builtin ({}) nor an existing file",
                    self.observable,
                    BUILTIN_OBSERVABLES.join(", ")
                ),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# van der Pol
system = vdp
observable = vdp_energy
degV = 16
eps = 1e-4   # admission threshold
t_min = 1
t_max = 10
output_dir = /tmp/run
box = -1,-1.3,1,1.3
";

    #[test]
    fn parse_and_round_trip() {
        let c = PipelineConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.deg_v, 16);
        assert_eq!(c.eps, 1e-4);
        assert_eq!(c.k_initial, DEFAULT_K);
        assert_eq!(c.start_box, Some((vec![-1.0, -1.3], vec![1.0, 1.3])));
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn missing_and_invalid_keys() {
        let no_deg = SAMPLE.replace("degV = 16\n", "");
        assert!(matches!(PipelineConfig::parse(&no_deg), Err(PipelineError::Config { key, .. }) if key == "degV"));
        let odd = SAMPLE.replace("degV = 16", "degV = 7");
        assert!(PipelineConfig::parse(&odd).is_err());
        let unknown = format!("{SAMPLE}colour = blue\n");
        assert!(matches!(PipelineConfig::parse(&unknown), Err(PipelineError::ConfigLine { line: 10, .. })));
        let neg_k = format!("{SAMPLE}k_initial = -1\n");
        assert!(PipelineConfig::parse(&neg_k).is_err());
    }
}
