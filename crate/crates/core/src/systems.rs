//! Benchmark polynomial systems and observables, plus the plain-text system
//! file format.
//!
//! ```text
//! # comments anywhere
//! name=sprott
//! n=3
//! f1:
//! 1 0 1 0
//! 1 0 0 1
//! f2:
//! ...
//! equilibrium: 0 0 0
//! ```
//!
//! Each `f<i>:` block holds polynomial term lines (`c e₁ … e_n`).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::polyalg::{parse_term_line, PolyError, PolySet, Polynomial};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("unknown {kind} {name:?}; choices: {choices}")]
    Unknown {
        kind: &'static str,
        name: String,
        choices: String,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub const BUILTIN_SYSTEMS: &[&str] = &["vdp", "vdp_printed", "sprott", "lorenz96"];
pub const BUILTIN_OBSERVABLES: &[&str] = &[
    "vdp_energy",
    "sprott_phi1",
    "sprott_phi2",
    "sprott_phi3",
    "sprott_phi4",
    "l96_perturbation",
];

/// Default Lorenz-96 forcing.
pub const L96_FORCING: f64 = 8.0;

/// An autonomous polynomial ODE `da/dt = f(a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicalSystem {
    pub name: String,
    pub field: Vec<Polynomial>,
    pub equilibria: Vec<Vec<f64>>,
}

impl DynamicalSystem {
    pub fn new(name: impl Into<String>, field: Vec<Polynomial>) -> Result<Self, SystemError> {
        let n = field.len();
        for f in &field {
            if f.dim() != n {
                return Err(PolyError::DimensionMismatch {
                    expected: n,
                    found: f.dim(),
                }
                .into());
            }
        }
        Ok(DynamicalSystem {
            name: name.into(),
            field,
            equilibria: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.field.len()
    }

    /// Largest total degree among the components of `f`.
    pub fn degree(&self) -> u32 {
        self.field.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, PolyError> {
        self.field.iter().map(|f| f.eval(x)).collect()
    }

    pub fn compiled(&self) -> PolySet {
        PolySet::new(self.dim(), &self.field)
    }

    /// Jacobian entries `∂f_i/∂a_j`, row-major.
    pub fn jacobian_polys(&self) -> Vec<Polynomial> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * n);
        for f in &self.field {
            for j in 0..n {
                out.push(f.derivative(j));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("name={}\nn={}\n", self.name, self.dim());
        for (i, f) in self.field.iter().enumerate() {
            s.push_str(&format!("f{}:\n", i + 1));
            s.push_str(&f.to_text());
        }
        for eq in &self.equilibria {
            let v: Vec<String> = eq.iter().map(|x| format!("{x}")).collect();
            s.push_str(&format!("equilibrium: {}\n", v.join(" ")));
        }
        s
    }

    /// Parses the system file format. Claimed equilibria with
    /// `‖f(eq)‖∞ > 1e-10` are dropped with a warning.
    pub fn parse(text: &str) -> Result<Self, SystemError> {
        let mut name = String::from("custom");
        let mut dim: Option<usize> = None;
        let mut blocks: Vec<Option<Polynomial>> = Vec::new();
        let mut current: Option<usize> = None;
        let mut equilibria = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| SystemError::Parse { line, msg };
            if let Some(v) = body.strip_prefix("name=") {
                name = v.trim().to_string();
            } else if let Some(v) = body.strip_prefix("n=") {
                let n: usize = v.trim().parse().map_err(|e| err(format!("bad dimension: {e}")))?;
                if n == 0 {
                    return Err(err("dimension must be positive".into()));
                }
                dim = Some(n);
                blocks = vec![None; n];
            } else if let Some(v) = body.strip_prefix("equilibrium:") {
                let n = dim.ok_or_else(|| err("equilibrium before n=".into()))?;
                let pt: Vec<f64> = v
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(format!("bad equilibrium: {e}")))?;
                if pt.len() != n {
                    return Err(err(format!("equilibrium has {} coordinates, expected {n}", pt.len())));
                }
                equilibria.push(pt);
                current = None;
            } else if body.starts_with('f') && body.ends_with(':') {
                let n = dim.ok_or_else(|| err("component block before n=".into()))?;
                let idx: usize = body[1..body.len() - 1]
                    .trim()
                    .parse()
                    .map_err(|e| err(format!("bad component header: {e}")))?;
                if idx == 0 || idx > n {
                    return Err(err(format!("component index {idx} outside 1..={n}")));
                }
                if blocks[idx - 1].is_some() {
                    return Err(err(format!("component f{idx} defined twice")));
                }
                blocks[idx - 1] = Some(Polynomial::zero(n));
                current = Some(idx - 1);
            } else {
                let n = dim.ok_or_else(|| err("term line before n=".into()))?;
                let c = current.ok_or_else(|| err("term line outside an f<i>: block".into()))?;
                let term = parse_term_line(n, raw, line).map_err(|e| match e {
                    PolyError::Parse { line, msg } => SystemError::Parse { line, msg },
                    other => other.into(),
                })?;
                if let Some((coef, m)) = term {
                    blocks[c].as_mut().unwrap().add_term(m, coef);
                }
            }
        }
        let _ = dim.ok_or(SystemError::Parse {
            line: 0,
            msg: "missing n=<dim> header".into(),
        })?;
        let field: Vec<Polynomial> = blocks
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                b.ok_or(SystemError::Parse {
                    line: 0,
                    msg: format!("missing block f{}:", i + 1),
                })
            })
            .collect::<Result<_, _>>()?;
        let mut sys = DynamicalSystem::new(name, field)?;
        for eq in equilibria {
            let r = sys.eval(&eq)?;
            let res = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if res <= 1e-10 {
                sys.equilibria.push(eq);
            } else {
                log::warn!("dropping claimed equilibrium {eq:?}: |f| = {res:e}");
            }
        }
        Ok(sys)
    }
}

pub fn load_system(path: &Path) -> Result<DynamicalSystem, SystemError> {
    let text = fs::read_to_string(path).map_err(|source| SystemError::Io {
        path: path.display().to_string(),
        source,
    })?;
    DynamicalSystem::parse(&text)
}

/// Observable files: an `n=<dim>` header followed by term lines.
pub fn parse_observable(text: &str) -> Result<Polynomial, SystemError> {
    let mut dim = None;
    let mut first = 0;
    for (k, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if let Some(v) = body.strip_prefix("n=") {
            dim = Some(v.trim().parse::<usize>().map_err(|e| SystemError::Parse {
                line: k + 1,
                msg: format!("bad dimension: {e}"),
            })?);
            first = k + 1;
            break;
        } else if !body.is_empty() {
            return Err(SystemError::Parse {
                line: k + 1,
                msg: "expected n=<dim> header".into(),
            });
        }
    }
    let n = dim.ok_or(SystemError::Parse {
        line: 0,
        msg: "missing n=<dim> header".into(),
    })?;
    let rest: Vec<&str> = text.lines().skip(first).collect();
    Polynomial::parse_terms(n, &rest.join("\n"), first + 1).map_err(|e| match e {
        PolyError::Parse { line, msg } => SystemError::Parse { line, msg },
        other => other.into(),
    })
}

pub fn observable_to_text(p: &Polynomial) -> String {
    format!("n={}\n{}", p.dim(), p.to_text())
}

pub fn load_observable(path: &Path) -> Result<Polynomial, SystemError> {
    let text = fs::read_to_string(path).map_err(|source| SystemError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_observable(&text)
}

fn poly(dim: usize, terms: &[(f64, &[u32])]) -> Polynomial {
    Polynomial::from_terms(dim, terms.iter().map(|(c, e)| (*c, e.to_vec()))).expect("builtin term")
}

/// Built-in systems. `forcing` only affects `lorenz96` (default 8).
pub fn builtin(name: &str, forcing: Option<f64>) -> Result<DynamicalSystem, SystemError> {
    let mut sys = match name {
        // Reverse-time van der Pol, rescaled by a = (x, y)/3 with mu = 4/3.
        "vdp" => DynamicalSystem::new(
            "vdp",
            vec![
                poly(2, &[(-3.0, &[0, 1])]),
                poly(2, &[(3.0, &[1, 0]), (-4.0, &[0, 1]), (36.0, &[2, 1])]),
            ],
        )?,
        // Without the restoring term every point of a₂ = 0 is an equilibrium.
        "vdp_printed" => DynamicalSystem::new(
            "vdp_printed",
            vec![
                poly(2, &[(-3.0, &[0, 1])]),
                poly(2, &[(-4.0, &[0, 1]), (36.0, &[2, 1])]),
            ],
        )?,
        "sprott" => DynamicalSystem::new(
            "sprott",
            vec![
                poly(3, &[(1.0, &[0, 1, 0]), (1.0, &[0, 0, 1])]),
                poly(3, &[(-1.0, &[1, 0, 0]), (0.5, &[0, 1, 0])]),
                poly(3, &[(1.0, &[2, 0, 0]), (-1.0, &[0, 0, 1])]),
            ],
        )?,
        "lorenz96" => lorenz96(5, forcing.unwrap_or(L96_FORCING))?,
        _ => {
            return Err(SystemError::Unknown {
                kind: "system",
                name: name.into(),
                choices: BUILTIN_SYSTEMS.join(", "),
            })
        }
    };
    sys.equilibria = match name {
        "vdp" | "vdp_printed" => vec![vec![0.0, 0.0]],
        "sprott" => vec![vec![0.0, 0.0, 0.0], vec![-2.0, -4.0, 4.0]],
        _ => vec![vec![forcing.unwrap_or(L96_FORCING); 5]],
    };
    Ok(sys)
}

/// `da_i/dt = (a_{i+1} − a_{i−2}) a_{i−1} − a_i + F` with cyclic indices.
pub fn lorenz96(n: usize, forcing: f64) -> Result<DynamicalSystem, SystemError> {
    let idx = |i: isize| -> usize { i.rem_euclid(n as isize) as usize };
    let field = (0..n as isize)
        .map(|i| {
            let mut p = Polynomial::zero(n);
            let mut e = vec![0u32; n];
            e[idx(i + 1)] += 1;
            e[idx(i - 1)] += 1;
            p.add_term(crate::polyalg::Monomial::new(e), 1.0);
            let mut e = vec![0u32; n];
            e[idx(i - 2)] += 1;
            e[idx(i - 1)] += 1;
            p.add_term(crate::polyalg::Monomial::new(e), -1.0);
            p.add_term(crate::polyalg::Monomial::var(n, i as usize), -1.0);
            p.add_term(crate::polyalg::Monomial::one(n), forcing);
            p
        })
        .collect();
    DynamicalSystem::new("lorenz96", field)
}

/// Built-in observables. `forcing` only affects `l96_perturbation`.
pub fn builtin_observable(name: &str, forcing: Option<f64>) -> Result<Polynomial, SystemError> {
    let quad3 = |c: [f64; 6]| {
        poly(
            3,
            &[
                (c[0], &[2, 0, 0]),
                (c[1], &[1, 1, 0]),
                (c[2], &[1, 0, 1]),
                (c[3], &[0, 2, 0]),
                (c[4], &[0, 1, 1]),
                (c[5], &[0, 0, 2]),
            ],
        )
    };
    Ok(match name {
        "vdp_energy" => poly(2, &[(1.0, &[2, 0]), (1.0, &[0, 2])]),
        "sprott_phi1" => quad3([0.33, 0.27, 1.28, 0.88, 0.49, 0.05]),
        "sprott_phi2" => quad3([0.71, 0.59, 0.84, 0.42, 0.83, 0.31]),
        "sprott_phi3" => quad3([0.75, 0.68, 1.04, 0.5, 1.52, 0.38]),
        "sprott_phi4" => quad3([0.98, 0.3, 1.42, 0.6, 1.21, 0.02]),
        "l96_perturbation" => {
            let f = forcing.unwrap_or(L96_FORCING);
            // (a₁ − F)² + (a₄ − F)²
            poly(
                5,
                &[
                    (1.0, &[2, 0, 0, 0, 0]),
                    (-2.0 * f, &[1, 0, 0, 0, 0]),
                    (1.0, &[0, 0, 0, 2, 0]),
                    (-2.0 * f, &[0, 0, 0, 1, 0]),
                    (2.0 * f * f, &[0, 0, 0, 0, 0]),
                ],
            )
        }
        _ => {
            return Err(SystemError::Unknown {
                kind: "observable",
                name: name.into(),
                choices: BUILTIN_OBSERVABLES.join(", "),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sprott_equilibria() {
        let s = builtin("sprott", None).unwrap();
        assert_eq!(s.eval(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(s.eval(&[-2.0, -4.0, 4.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(s.equilibria.len(), 2);
    }

    #[test]
    fn builtin_equilibria_are_exact() {
        for name in BUILTIN_SYSTEMS {
            let s = builtin(name, None).unwrap();
            for eq in &s.equilibria {
                let r = s.eval(eq).unwrap();
                assert!(r.iter().all(|v| v.abs() <= 1e-12), "{name} {eq:?}");
            }
        }
    }

    #[test]
    fn lorenz96_equilibrium_and_shift() {
        let s = builtin("lorenz96", Some(8.0)).unwrap();
        assert_eq!(s.eval(&[8.0; 5]).unwrap(), vec![0.0; 5]);
        let x = [0.3, -1.2, 2.5, 0.7, -0.4];
        let fx = s.eval(&x).unwrap();
        // f(shift x) = shift f(x) with (shift x)_i = x_{i+1}
        let sx: Vec<f64> = (0..5).map(|i| x[(i + 1) % 5]).collect();
        let fsx = s.eval(&sx).unwrap();
        for i in 0..5 {
            assert!((fsx[i] - fx[(i + 1) % 5]).abs() < 1e-12);
        }
    }

    #[test]
    fn vdp_axis_point_is_not_an_equilibrium() {
        let s = builtin("vdp", None).unwrap();
        let f = s.eval(&[0.1, 0.0]).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.3).abs() < 1e-15);
        assert_eq!(s.equilibria, vec![vec![0.0, 0.0]]);
        // The printed variant vanishes there but still lists only the origin.
        let p = builtin("vdp_printed", None).unwrap();
        assert_eq!(p.eval(&[0.1, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(p.equilibria, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn observables() {
        let p1 = builtin_observable("sprott_phi1", None).unwrap();
        assert!((p1.eval(&[1.0, 0.0, 0.0]).unwrap() - 0.33).abs() < 1e-15);
        assert!((p1.eval(&[1.0, 1.0, 1.0]).unwrap() - 3.30).abs() < 1e-12);
        let l = builtin_observable("l96_perturbation", Some(8.0)).unwrap();
        assert_eq!(l.eval(&[8.0; 5]).unwrap(), 0.0);
        let v = builtin_observable("vdp_energy", None).unwrap();
        assert_eq!(v.eval(&[3.0, 4.0]).unwrap(), 25.0);
        assert!(matches!(
            builtin_observable("nope", None),
            Err(SystemError::Unknown { .. })
        ));
        assert!(builtin("nope", None).unwrap_err().to_string().contains("sprott"));
    }

    #[test]
    fn system_file_round_trip() {
        for name in BUILTIN_SYSTEMS {
            let s = builtin(name, None).unwrap();
            let back = DynamicalSystem::parse(&s.to_text()).unwrap();
            assert_eq!(s, back);
        }
        let o = builtin_observable("sprott_phi3", None).unwrap();
        assert_eq!(parse_observable(&observable_to_text(&o)).unwrap(), o);
    }

    #[test]
    fn system_file_errors() {
        let bad = "n=2\nf1:\n1 0 1\nf2:\n1 1\n";
        match DynamicalSystem::parse(bad) {
            Err(SystemError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        // A false equilibrium is dropped, not fatal.
        let txt = "n=1\nf1:\n-1 1\n1 0\nequilibrium: 1\nequilibrium: 2\n";
        let s = DynamicalSystem::parse(txt).unwrap();
        assert_eq!(s.equilibria, vec![vec![1.0]]);
        assert!(DynamicalSystem::parse("n=2\nf1:\n1 0 0\n").is_err());
    }
}
