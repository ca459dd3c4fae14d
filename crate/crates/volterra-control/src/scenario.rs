//! Plain-text scenario files.
//!
//! A scenario is a sectioned key-value document:
//!
//! ```text
//! version = 1
//!
//! [meta]
//! name = finite-lq
//! description = scalar LQ with binary control
//!
//! [grid]
//! horizon = 1.0
//! steps = 4
//!
//! [driver]
//! kind = tree
//!
//! [problem]
//! family = lq
//! x0 = -0.3
//! a1 = const:0.0
//! b1 = const:0.0
//! a2 = const:0.0
//! b2 = const:0.45
//! q = const:0.6
//! s = const:0.8
//! r = const:0.5
//! g = 0.9
//!
//! [control]
//! kind = finite
//! points = 0.0; 1.0
//!
//! [checker]
//! tolerance = 1e-8
//! mode = full
//! u_grid = 0.0; 1.0
//! ubar = optimal
//! tau_index = 1
//! spike_u = 1.0
//! widths = 2,1
//! ```
//!
//! Coefficient families are a closed, named set so scenarios stay
//! auditable: kernels `const:c`, `conv:c` (`c (t-s)`), `expdecay:c,l`
//! (`c exp(-l (t-s))`); weights `const:c`, `linear:a,b` (`a + b s`);
//! densities `const:c`, `plateau:c,r0`; cost terms `quadratic:c`, `zero`.
//! Unknown sections or keys are rejected with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::driver::{NoiseDriver, DEFAULT_REGRESSION_DEGREE, DEFAULT_TREE_DEPTH_CAP};
use crate::epidemic::{epidemic_scenario, CostTerm, EpidemicParams};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linear::LinearSpec;
use crate::problem::{ControlSet, ProblemSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum KernelDesc {
    Const(f64),
    /// `c * (t - s)`.
    Conv(f64),
    /// `c * exp(-l * (t - s))`.
    ExpDecay(f64, f64),
}

impl KernelDesc {
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        match *self {
            KernelDesc::Const(c) => c,
            KernelDesc::Conv(c) => c * (t - s),
            KernelDesc::ExpDecay(c, l) => c * (-l * (t - s)).exp(),
        }
    }

    fn to_fn(&self) -> crate::linear::MatKernelFn {
        let desc = self.clone();
        Arc::new(move |t, s, out| out[0] = desc.eval(t, s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightDesc {
    Const(f64),
    /// `a + b * s`.
    Linear(f64, f64),
}

impl WeightDesc {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            WeightDesc::Const(c) => c,
            WeightDesc::Linear(a, b) => a + b * s,
        }
    }

    fn to_fn(&self) -> crate::linear::MatWeightFn {
        let desc = self.clone();
        Arc::new(move |s, out| out[0] = desc.eval(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityDesc {
    Const(f64),
    /// `c` on `[0, r0]`, zero afterwards.
    Plateau(f64, f64),
    /// `c * exp(-l * r)`.
    ExpDecay(f64, f64),
}

impl DensityDesc {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            DensityDesc::Const(c) => c,
            DensityDesc::Plateau(c, r0) => {
                if r <= r0 {
                    c
                } else {
                    0.0
                }
            }
            DensityDesc::ExpDecay(c, l) => c * (-l * r).exp(),
        }
    }

    fn to_fn(&self) -> Arc<dyn Fn(f64) -> f64 + Send + Sync> {
        let desc = self.clone();
        Arc::new(move |r| desc.eval(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostDesc {
    Zero,
    /// `c/2 * v^2`.
    Quadratic(f64),
}

impl CostDesc {
    fn to_term(&self) -> CostTerm {
        match *self {
            CostDesc::Zero => CostTerm::zero(),
            CostDesc::Quadratic(c) => CostTerm::quadratic(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriverDesc {
    Tree { cap: usize },
    MonteCarlo { paths: usize, seed: u64, degree: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemDesc {
    Lq {
        x0: f64,
        a1: KernelDesc,
        b1: KernelDesc,
        a2: KernelDesc,
        b2: KernelDesc,
        q: WeightDesc,
        s: WeightDesc,
        r: WeightDesc,
        g: f64,
    },
    Epidemic {
        x0: f64,
        m1: DensityDesc,
        m2: DensityDesc,
        a: DensityDesc,
        g1: CostDesc,
        g2: CostDesc,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceControl {
    Const(Vec<f64>),
    /// Solve the problem first (exhaustively for finite control sets, by
    /// normal equations otherwise).
    Optimal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModeDesc {
    Full,
    Diagonal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckerDesc {
    pub tolerance: f64,
    pub mode: ModeDesc,
    pub u_grid: Vec<Vec<f64>>,
    pub ubar: ReferenceControl,
    pub tau_index: usize,
    pub spike_u: Vec<f64>,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub version: u32,
    pub name: String,
    pub description: String,
    pub horizon: f64,
    pub steps: usize,
    pub driver: DriverDesc,
    pub problem: ProblemDesc,
    pub control_set: ControlSet,
    pub checker: CheckerDesc,
}

struct RawSection {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawSection {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn require(&mut self, key: &str, section: &str) -> Result<(usize, String)> {
        self.take(key).ok_or_else(|| Error::Parse {
            line: 0,
            key: key.to_string(),
            reason: format!("missing required key in [{section}]"),
        })
    }

    fn reject_unknown(&self, section: &str) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.iter().next() {
            return Err(Error::Parse {
                line: *line,
                key: key.clone(),
                reason: format!("unknown key in [{section}]"),
            });
        }
        Ok(())
    }
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Parse {
        line,
        key: key.to_string(),
        reason: format!("expected a number, got `{value}`"),
    })
}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::Parse {
        line,
        key: key.to_string(),
        reason: format!("expected a nonnegative integer, got `{value}`"),
    })
}

fn parse_args(line: usize, key: &str, args: &str, want: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = args.split(',').map(str::trim).collect();
    if parts.len() != want {
        return Err(Error::Parse {
            line,
            key: key.to_string(),
            reason: format!("expected {want} comma-separated parameters, got `{args}`"),
        });
    }
    parts
        .iter()
        .map(|p| parse_f64(line, key, p))
        .collect::<Result<Vec<f64>>>()
}

fn parse_kernel(line: usize, key: &str, value: &str) -> Result<KernelDesc> {
    let (head, args) = value.split_once(':').unwrap_or((value, ""));
    match head {
        "const" => Ok(KernelDesc::Const(parse_args(line, key, args, 1)?[0])),
        "conv" => Ok(KernelDesc::Conv(parse_args(line, key, args, 1)?[0])),
        "expdecay" => {
            let a = parse_args(line, key, args, 2)?;
            Ok(KernelDesc::ExpDecay(a[0], a[1]))
        }
        _ => Err(Error::Parse {
            line,
            key: key.to_string(),
            reason: format!("unknown kernel family `{head}` (const, conv, expdecay)"),
        }),
    }
}

fn parse_weight(line: usize, key: &str, value: &str) -> Result<WeightDesc> {
    let (head, args) = value.split_once(':').unwrap_or((value, ""));
    match head {
        "const" => Ok(WeightDesc::Const(parse_args(line, key, args, 1)?[0])),
        "linear" => {
            let a = parse_args(line, key, args, 2)?;
            Ok(WeightDesc::Linear(a[0], a[1]))
        }
        _ => Err(Error::Parse {
            line,
            key: key.to_string(),
            reason: format!("unknown weight family `{head}` (const, linear)"),
        }),
    }
}

fn parse_density(line: usize, key: &str, value: &str) -> Result<DensityDesc> {
    let (head, args) = value.split_once(':').unwrap_or((value, ""));
    match head {
        "const" => Ok(DensityDesc::Const(parse_args(line, key, args, 1)?[0])),
        "plateau" => {
            let a = parse_args(line, key, args, 2)?;
            Ok(DensityDesc::Plateau(a[0], a[1]))
        }
        "expdecay" => {
            let a = parse_args(line, key, args, 2)?;
            Ok(DensityDesc::ExpDecay(a[0], a[1]))
        }
        _ => Err(Error::Parse {
            line,
            key: key.to_string(),
            reason: format!("unknown density family `{head}` (const, plateau, expdecay)"),
        }),
    }
}

fn parse_cost(line: usize, key: &str, value: &str) -> Result<CostDesc> {
    let (head, args) = value.split_once(':').unwrap_or((value, ""));
    match head {
        "zero" => Ok(CostDesc::Zero),
        "quadratic" => Ok(CostDesc::Quadratic(parse_args(line, key, args, 1)?[0])),
        _ => Err(Error::Parse {
            line,
            key: key.to_string(),
            reason: format!("unknown cost family `{head}` (zero, quadratic)"),
        }),
    }
}

fn parse_points(line: usize, key: &str, value: &str) -> Result<Vec<Vec<f64>>> {
    value
        .split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.split(',')
                .map(|c| parse_f64(line, key, c.trim()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// Parses a scenario document, rejecting unknown sections and keys.
///
/// ```
/// use volterra_control::scenario::{parse_scenario, serialize_scenario};
///
/// let text = "
/// version = 1
/// [meta]
/// name = demo
/// [grid]
/// horizon = 1.0
/// steps = 4
/// [driver]
/// kind = tree
/// [problem]
/// family = epidemic
/// x0 = 1.0
/// m1 = const:1.0
/// m2 = expdecay:32,32
/// a = const:1.0
/// g1 = quadratic:1.0
/// g2 = quadratic:0.5
/// [control]
/// kind = finite
/// points = 0; 1
/// [checker]
/// u_grid = 0; 1
/// ";
/// let scenario = parse_scenario(text).unwrap();
/// assert_eq!(scenario.steps, 4);
/// // The canonical serialisation round-trips to the same data.
/// let again = parse_scenario(&serialize_scenario(&scenario)).unwrap();
/// assert_eq!(scenario, again);
/// ```
pub fn parse_scenario(text: &str) -> Result<ScenarioFile> {
    let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
    let mut version: Option<(usize, u32)> = None;
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                line,
                key: content.to_string(),
                reason: "malformed section header".into(),
            })?;
            let known = ["meta", "grid", "driver", "problem", "control", "checker"];
            if !known.contains(&name) {
                return Err(Error::Parse {
                    line,
                    key: name.to_string(),
                    reason: "unknown section".into(),
                });
            }
            current = Some(name.to_string());
            sections.entry(name.to_string()).or_insert(RawSection {
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            key: content.to_string(),
            reason: "expected `key = value`".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        match &current {
            None => {
                if key == "version" {
                    let v = value.parse().map_err(|_| Error::Parse {
                        line,
                        key,
                        reason: format!("bad version `{value}`"),
                    })?;
                    version = Some((line, v));
                } else {
                    return Err(Error::Parse {
                        line,
                        key,
                        reason: "only `version` may appear before the first section".into(),
                    });
                }
            }
            Some(section) => {
                sections
                    .get_mut(section)
                    .unwrap()
                    .entries
                    .insert(key, (line, value));
            }
        }
    }
    let (_, version) = version.ok_or_else(|| Error::Parse {
        line: 1,
        key: "version".into(),
        reason: "missing mandatory `version = 1` header".into(),
    })?;
    if version != 1 {
        return Err(Error::Parse {
            line: 1,
            key: "version".into(),
            reason: format!("unsupported version {version}"),
        });
    }

    // Misspelled keys are reported by name before any required-key check.
    let allowed: &[(&str, &[&str])] = &[
        ("meta", &["name", "description"]),
        ("grid", &["horizon", "steps"]),
        ("driver", &["kind", "tree_cap", "paths", "seed", "degree"]),
        (
            "problem",
            &[
                "family", "x0", "a1", "b1", "a2", "b2", "q", "s", "r", "g", "m1", "m2", "a",
                "g1", "g2",
            ],
        ),
        ("control", &["kind", "points", "lower", "upper", "dim"]),
        (
            "checker",
            &[
                "tolerance",
                "mode",
                "u_grid",
                "ubar",
                "tau_index",
                "spike_u",
                "widths",
            ],
        ),
    ];
    for (section, keys) in allowed {
        if let Some(raw) = sections.get(*section) {
            for (key, (line, _)) in &raw.entries {
                if !keys.contains(&key.as_str()) {
                    return Err(Error::Parse {
                        line: *line,
                        key: key.clone(),
                        reason: format!("unknown key in [{section}]"),
                    });
                }
            }
        }
    }

    let mut get = |name: &str| -> Result<RawSection> {
        sections.remove(name).ok_or_else(|| Error::Parse {
            line: 0,
            key: name.to_string(),
            reason: "missing section".into(),
        })
    };

    let mut meta = get("meta")?;
    let name = meta.take("name").map(|(_, v)| v).unwrap_or_default();
    let description = meta.take("description").map(|(_, v)| v).unwrap_or_default();
    meta.reject_unknown("meta")?;

    let mut grid = get("grid")?;
    let (l, v) = grid.require("horizon", "grid")?;
    let horizon = parse_f64(l, "horizon", &v)?;
    let (l, v) = grid.require("steps", "grid")?;
    let steps = parse_usize(l, "steps", &v)?;
    grid.reject_unknown("grid")?;

    let mut driver = get("driver")?;
    let (l, kind) = driver.require("kind", "driver")?;
    let driver_desc = match kind.as_str() {
        "tree" => {
            let cap = match driver.take("tree_cap") {
                Some((l, v)) => parse_usize(l, "tree_cap", &v)?,
                None => DEFAULT_TREE_DEPTH_CAP,
            };
            DriverDesc::Tree { cap }
        }
        "mc" => {
            let (l, v) = driver.require("paths", "driver")?;
            let paths = parse_usize(l, "paths", &v)?;
            let seed = match driver.take("seed") {
                Some((l, v)) => parse_usize(l, "seed", &v)? as u64,
                None => 0,
            };
            let degree = match driver.take("degree") {
                Some((l, v)) => parse_usize(l, "degree", &v)?,
                None => DEFAULT_REGRESSION_DEGREE,
            };
            DriverDesc::MonteCarlo {
                paths,
                seed,
                degree,
            }
        }
        other => {
            return Err(Error::Parse {
                line: l,
                key: "kind".into(),
                reason: format!("unknown driver kind `{other}` (tree, mc)"),
            })
        }
    };
    driver.reject_unknown("driver")?;

    let mut problem = get("problem")?;
    let (l, family) = problem.require("family", "problem")?;
    let problem_desc = match family.as_str() {
        "lq" | "linear" => {
            let (l, v) = problem.require("x0", "problem")?;
            let x0 = parse_f64(l, "x0", &v)?;
            let mut kernel = |key: &str| -> Result<KernelDesc> {
                let (l, v) = problem.require(key, "problem")?;
                parse_kernel(l, key, &v)
            };
            let a1 = kernel("a1")?;
            let b1 = kernel("b1")?;
            let a2 = kernel("a2")?;
            let b2 = kernel("b2")?;
            let mut weight = |key: &str| -> Result<WeightDesc> {
                let (l, v) = problem.require(key, "problem")?;
                parse_weight(l, key, &v)
            };
            let q = weight("q")?;
            let s = weight("s")?;
            let r = weight("r")?;
            let (l, v) = problem.require("g", "problem")?;
            let g = parse_f64(l, "g", &v)?;
            ProblemDesc::Lq {
                x0,
                a1,
                b1,
                a2,
                b2,
                q,
                s,
                r,
                g,
            }
        }
        "epidemic" => {
            let (l, v) = problem.require("x0", "problem")?;
            let x0 = parse_f64(l, "x0", &v)?;
            let mut density = |key: &str| -> Result<DensityDesc> {
                let (l, v) = problem.require(key, "problem")?;
                parse_density(l, key, &v)
            };
            let m1 = density("m1")?;
            let m2 = density("m2")?;
            let a = density("a")?;
            let mut cost = |key: &str| -> Result<CostDesc> {
                let (l, v) = problem.require(key, "problem")?;
                parse_cost(l, key, &v)
            };
            let g1 = cost("g1")?;
            let g2 = cost("g2")?;
            ProblemDesc::Epidemic {
                x0,
                m1,
                m2,
                a,
                g1,
                g2,
            }
        }
        other => {
            return Err(Error::Parse {
                line: l,
                key: "family".into(),
                reason: format!("unknown coefficient family `{other}` (lq, epidemic)"),
            })
        }
    };
    problem.reject_unknown("problem")?;

    let mut control = get("control")?;
    let (l, kind) = control.require("kind", "control")?;
    let control_set = match kind.as_str() {
        "finite" => {
            let (l, v) = control.require("points", "control")?;
            let points = parse_points(l, "points", &v)?;
            if points.is_empty() {
                return Err(Error::Parse {
                    line: l,
                    key: "points".into(),
                    reason: "finite control set needs at least one point".into(),
                });
            }
            ControlSet::Finite { points }
        }
        "box" => {
            let (l1, v) = control.require("lower", "control")?;
            let lower = parse_points(l1, "lower", &v)?.pop().unwrap_or_default();
            let (l2, v) = control.require("upper", "control")?;
            let upper = parse_points(l2, "upper", &v)?.pop().unwrap_or_default();
            if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(a, b)| a > b) {
                return Err(Error::Parse {
                    line: l2,
                    key: "upper".into(),
                    reason: "box bounds must satisfy lower <= upper componentwise".into(),
                });
            }
            ControlSet::Box { lower, upper }
        }
        "all" => {
            let dim = match control.take("dim") {
                Some((l, v)) => parse_usize(l, "dim", &v)?,
                None => 1,
            };
            ControlSet::All { dim }
        }
        other => {
            return Err(Error::Parse {
                line: l,
                key: "kind".into(),
                reason: format!("unknown control kind `{other}` (finite, box, all)"),
            })
        }
    };
    control.reject_unknown("control")?;

    let mut checker = get("checker")?;
    let tolerance = match checker.take("tolerance") {
        Some((l, v)) => parse_f64(l, "tolerance", &v)?,
        None => 1e-8,
    };
    let mode = match checker.take("mode") {
        None => ModeDesc::Full,
        Some((l, v)) => match v.split_once(':') {
            None if v == "full" => ModeDesc::Full,
            Some(("diagonal", k)) => ModeDesc::Diagonal(parse_usize(l, "mode", k.trim())?),
            _ => {
                return Err(Error::Parse {
                    line: l,
                    key: "mode".into(),
                    reason: format!("unknown mode `{v}` (full, diagonal:K)"),
                })
            }
        },
    };
    let u_grid = match checker.take("u_grid") {
        Some((l, v)) => parse_points(l, "u_grid", &v)?,
        None => control_set.sample_grid(3),
    };
    let ubar = match checker.take("ubar") {
        None => ReferenceControl::Optimal,
        Some((l, v)) => {
            if v == "optimal" {
                ReferenceControl::Optimal
            } else if let Some(args) = v.strip_prefix("const:") {
                ReferenceControl::Const(
                    args.split(',')
                        .map(|c| parse_f64(l, "ubar", c.trim()))
                        .collect::<Result<Vec<f64>>>()?,
                )
            } else {
                return Err(Error::Parse {
                    line: l,
                    key: "ubar".into(),
                    reason: format!("unknown reference control `{v}` (optimal, const:v)"),
                });
            }
        }
    };
    let tau_index = match checker.take("tau_index") {
        Some((l, v)) => parse_usize(l, "tau_index", &v)?,
        None => 0,
    };
    let spike_u = match checker.take("spike_u") {
        Some((l, v)) => parse_points(l, "spike_u", &v)?.pop().unwrap_or_default(),
        None => u_grid.last().cloned().unwrap_or_default(),
    };
    let widths = match checker.take("widths") {
        Some((l, v)) => v
            .split(',')
            .map(|p| parse_usize(l, "widths", p.trim()))
            .collect::<Result<Vec<usize>>>()?,
        None => vec![2, 1],
    };
    checker.reject_unknown("checker")?;

    for (name, section) in &sections {
        section.reject_unknown(name)?;
    }

    Ok(ScenarioFile {
        version,
        name,
        description,
        horizon,
        steps,
        driver: driver_desc,
        problem: problem_desc,
        control_set,
        checker: CheckerDesc {
            tolerance,
            mode,
            u_grid,
            ubar,
            tau_index,
            spike_u,
            widths,
        },
    })
}

fn fmt_kernel(k: &KernelDesc) -> String {
    match k {
        KernelDesc::Const(c) => format!("const:{c}"),
        KernelDesc::Conv(c) => format!("conv:{c}"),
        KernelDesc::ExpDecay(c, l) => format!("expdecay:{c},{l}"),
    }
}

fn fmt_weight(w: &WeightDesc) -> String {
    match w {
        WeightDesc::Const(c) => format!("const:{c}"),
        WeightDesc::Linear(a, b) => format!("linear:{a},{b}"),
    }
}

fn fmt_density(d: &DensityDesc) -> String {
    match d {
        DensityDesc::Const(c) => format!("const:{c}"),
        DensityDesc::Plateau(c, r0) => format!("plateau:{c},{r0}"),
        DensityDesc::ExpDecay(c, l) => format!("expdecay:{c},{l}"),
    }
}

fn fmt_cost(c: &CostDesc) -> String {
    match c {
        CostDesc::Zero => "zero".into(),
        CostDesc::Quadratic(v) => format!("quadratic:{v}"),
    }
}

fn fmt_points(points: &[Vec<f64>]) -> String {
    points
        .iter()
        .map(|p| {
            p.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Canonical serialisation; `parse_scenario(serialize_scenario(s)) == s`.
pub fn serialize_scenario(s: &ScenarioFile) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version = {}", s.version);
    let _ = writeln!(out, "\n[meta]");
    let _ = writeln!(out, "name = {}", s.name);
    let _ = writeln!(out, "description = {}", s.description);
    let _ = writeln!(out, "\n[grid]");
    let _ = writeln!(out, "horizon = {}", s.horizon);
    let _ = writeln!(out, "steps = {}", s.steps);
    let _ = writeln!(out, "\n[driver]");
    match &s.driver {
        DriverDesc::Tree { cap } => {
            let _ = writeln!(out, "kind = tree");
            let _ = writeln!(out, "tree_cap = {cap}");
        }
        DriverDesc::MonteCarlo {
            paths,
            seed,
            degree,
        } => {
            let _ = writeln!(out, "kind = mc");
            let _ = writeln!(out, "paths = {paths}");
            let _ = writeln!(out, "seed = {seed}");
            let _ = writeln!(out, "degree = {degree}");
        }
    }
    let _ = writeln!(out, "\n[problem]");
    match &s.problem {
        ProblemDesc::Lq {
            x0,
            a1,
            b1,
            a2,
            b2,
            q,
            s: sw,
            r,
            g,
        } => {
            let _ = writeln!(out, "family = lq");
            let _ = writeln!(out, "x0 = {x0}");
            let _ = writeln!(out, "a1 = {}", fmt_kernel(a1));
            let _ = writeln!(out, "b1 = {}", fmt_kernel(b1));
            let _ = writeln!(out, "a2 = {}", fmt_kernel(a2));
            let _ = writeln!(out, "b2 = {}", fmt_kernel(b2));
            let _ = writeln!(out, "q = {}", fmt_weight(q));
            let _ = writeln!(out, "s = {}", fmt_weight(sw));
            let _ = writeln!(out, "r = {}", fmt_weight(r));
            let _ = writeln!(out, "g = {g}");
        }
        ProblemDesc::Epidemic {
            x0,
            m1,
            m2,
            a,
            g1,
            g2,
        } => {
            let _ = writeln!(out, "family = epidemic");
            let _ = writeln!(out, "x0 = {x0}");
            let _ = writeln!(out, "m1 = {}", fmt_density(m1));
            let _ = writeln!(out, "m2 = {}", fmt_density(m2));
            let _ = writeln!(out, "a = {}", fmt_density(a));
            let _ = writeln!(out, "g1 = {}", fmt_cost(g1));
            let _ = writeln!(out, "g2 = {}", fmt_cost(g2));
        }
    }
    let _ = writeln!(out, "\n[control]");
    match &s.control_set {
        ControlSet::Finite { points } => {
            let _ = writeln!(out, "kind = finite");
            let _ = writeln!(out, "points = {}", fmt_points(points));
        }
        ControlSet::Box { lower, upper } => {
            let _ = writeln!(out, "kind = box");
            let _ = writeln!(out, "lower = {}", fmt_points(&[lower.clone()]));
            let _ = writeln!(out, "upper = {}", fmt_points(&[upper.clone()]));
        }
        ControlSet::All { dim } => {
            let _ = writeln!(out, "kind = all");
            let _ = writeln!(out, "dim = {dim}");
        }
    }
    let _ = writeln!(out, "\n[checker]");
    let _ = writeln!(out, "tolerance = {}", s.checker.tolerance);
    match s.checker.mode {
        ModeDesc::Full => {
            let _ = writeln!(out, "mode = full");
        }
        ModeDesc::Diagonal(k) => {
            let _ = writeln!(out, "mode = diagonal:{k}");
        }
    }
    let _ = writeln!(out, "u_grid = {}", fmt_points(&s.checker.u_grid));
    match &s.checker.ubar {
        ReferenceControl::Optimal => {
            let _ = writeln!(out, "ubar = optimal");
        }
        ReferenceControl::Const(v) => {
            let _ = writeln!(
                out,
                "ubar = const:{}",
                v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            );
        }
    }
    let _ = writeln!(out, "tau_index = {}", s.checker.tau_index);
    let _ = writeln!(
        out,
        "spike_u = {}",
        s.checker
            .spike_u
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    let _ = writeln!(
        out,
        "widths = {}",
        s.checker
            .widths
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    out
}

impl ScenarioFile {
    pub fn build_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn build_driver(&self, grid: TimeGrid) -> Result<NoiseDriver> {
        match &self.driver {
            DriverDesc::Tree { cap } => NoiseDriver::tree_with_cap(grid, *cap),
            DriverDesc::MonteCarlo {
                paths,
                seed,
                degree,
            } => NoiseDriver::monte_carlo(grid, *paths, *seed, *degree),
        }
    }

    /// Builds the runnable problem; the linear data is returned alongside
    /// when the family is linear-quadratic.
    pub fn build_problem(&self, grid: &TimeGrid) -> Result<(ProblemSpec, Option<LinearSpec>)> {
        match &self.problem {
            ProblemDesc::Lq {
                x0,
                a1,
                b1,
                a2,
                b2,
                q,
                s,
                r,
                g,
            } => {
                let x0 = *x0;
                let lin = LinearSpec {
                    state_dim: 1,
                    control_dim: 1,
                    phi: Arc::new(move |_, out| out[0] = x0),
                    a1: a1.to_fn(),
                    b1: b1.to_fn(),
                    a2: a2.to_fn(),
                    b2: b2.to_fn(),
                    q: q.to_fn(),
                    s: s.to_fn(),
                    r: r.to_fn(),
                    g: vec![*g],
                    control_set: self.control_set.clone(),
                };
                lin.validate(grid.horizon())?;
                Ok((lin.to_problem_spec(), Some(lin)))
            }
            ProblemDesc::Epidemic {
                x0,
                m1,
                m2,
                a,
                g1,
                g2,
            } => {
                let params = EpidemicParams {
                    x0: *x0,
                    m1: m1.to_fn(),
                    m2: m2.to_fn(),
                    a: a.to_fn(),
                    g1: g1.to_term(),
                    g2: g2.to_term(),
                    control_set: self.control_set.clone(),
                };
                Ok((epidemic_scenario(&params, grid)?, None))
            }
        }
    }

    /// FNV-1a hash of the canonical serialisation.
    pub fn content_hash(&self) -> String {
        let text = serialize_scenario(self);
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }
}
