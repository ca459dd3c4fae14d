//! Declarative description of a control problem.
//!
//! Coefficients are supplied as evaluator callbacks together with hand-coded
//! first and second state derivatives; [`validate_assumptions`] cross-checks
//! the derivatives against finite differences and samples the growth and
//! boundedness clauses the theory requires.  Validation can only falsify,
//! never prove.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::grid::TimeGrid;
use crate::process::AdaptedProcess;

/// Two-time coefficient value: `(t, s, x, u, out)` writes an `R^n` vector.
pub type CoefFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// State Jacobian, row-major `n x n`: `out[i*n + j] = d f_i / d x_j`.
pub type CoefJacFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// State Hessians, `n` stacked `n x n` blocks: block `c` is the Hessian of
/// component `f_c`.
pub type CoefHessFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Control Jacobian, row-major `n x m`.
pub type CoefCtrlJacFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A two-time coefficient (drift or diffusion) with its derivatives.
#[derive(Clone)]
pub struct Coefficient {
    pub value: CoefFn,
    pub dx: CoefJacFn,
    pub dxx: CoefHessFn,
    /// Optional control derivative, needed only by the convex-case checks.
    pub du: Option<CoefCtrlJacFn>,
}

impl Coefficient {
    /// The zero coefficient.
    pub fn zero() -> Self {
        Coefficient {
            value: Arc::new(|_, _, _, _, out| out.fill(0.0)),
            dx: Arc::new(|_, _, _, _, out| out.fill(0.0)),
            dxx: Arc::new(|_, _, _, _, out| out.fill(0.0)),
            du: Some(Arc::new(|_, _, _, _, out| out.fill(0.0))),
        }
    }
}

pub type TerminalValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type TerminalGradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type RunningValueFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type RunningGradFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Terminal cost `h(x)` with gradient and Hessian.
#[derive(Clone)]
pub struct TerminalCost {
    pub value: TerminalValueFn,
    pub grad: TerminalGradFn,
    pub hess: TerminalGradFn,
}

impl TerminalCost {
    pub fn zero() -> Self {
        TerminalCost {
            value: Arc::new(|_| 0.0),
            grad: Arc::new(|_, out| out.fill(0.0)),
            hess: Arc::new(|_, out| out.fill(0.0)),
        }
    }
}

/// Running cost `l(s, x, u)` with state derivatives and an optional control
/// gradient.
#[derive(Clone)]
pub struct RunningCost {
    pub value: RunningValueFn,
    pub grad_x: RunningGradFn,
    pub hess_x: RunningGradFn,
    pub grad_u: Option<RunningGradFn>,
}

impl RunningCost {
    pub fn zero() -> Self {
        RunningCost {
            value: Arc::new(|_, _, _| 0.0),
            grad_x: Arc::new(|_, _, _, out| out.fill(0.0)),
            hess_x: Arc::new(|_, _, _, out| out.fill(0.0)),
            grad_u: Some(Arc::new(|_, _, _, out| out.fill(0.0))),
        }
    }
}

/// Initial term `phi(t)`: deterministic function or an adapted process.
#[derive(Clone)]
pub enum InitialTerm {
    Deterministic(Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>),
    Process(AdaptedProcess),
}

impl InitialTerm {
    pub fn constant(x0: Vec<f64>) -> Self {
        InitialTerm::Deterministic(Arc::new(move |_, out| out.copy_from_slice(&x0)))
    }

    pub fn write(&self, t: f64, t_index: usize, scenario: usize, out: &mut [f64]) {
        match self {
            InitialTerm::Deterministic(f) => f(t, out),
            InitialTerm::Process(p) => out.copy_from_slice(p.at(t_index, scenario)),
        }
    }
}

/// Admissible control region.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    /// Finite list of points in `R^m`.
    Finite { points: Vec<Vec<f64>> },
    /// Coordinate box `[lower, upper]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// All of `R^m`.
    All { dim: usize },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Finite { points } => points.first().map_or(0, |p| p.len()),
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::All { dim } => *dim,
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ControlSet::Finite { points } => points.len() <= 1,
            ControlSet::Box { .. } | ControlSet::All { .. } => true,
        }
    }

    /// A finite sample of the region, used by checker sweeps.
    pub fn sample_grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        match self {
            ControlSet::Finite { points } => points.clone(),
            ControlSet::Box { lower, upper } => {
                let m = lower.len();
                let k = per_axis.max(2);
                let mut grid = vec![Vec::new()];
                for d in 0..m {
                    let mut next = Vec::new();
                    for stem in &grid {
                        for i in 0..k {
                            let frac = i as f64 / (k - 1) as f64;
                            let mut p = stem.clone();
                            p.push(lower[d] + frac * (upper[d] - lower[d]));
                            next.push(p);
                        }
                    }
                    grid = next;
                }
                grid
            }
            ControlSet::All { dim } => {
                let k = per_axis.max(2);
                let mut grid = vec![Vec::new()];
                for _ in 0..*dim {
                    let mut next = Vec::new();
                    for stem in &grid {
                        for i in 0..k {
                            let frac = i as f64 / (k - 1) as f64;
                            let mut p = stem.clone();
                            p.push(-2.0 + 4.0 * frac);
                            next.push(p);
                        }
                    }
                    grid = next;
                }
                grid
            }
        }
    }

    fn sample_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            ControlSet::Finite { points } => points[rng.gen_range(0..points.len())].clone(),
            ControlSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&a, &b)| rng.gen_range(a..=b))
                .collect(),
            ControlSet::All { dim } => (0..*dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        }
    }
}

/// A controlled SVIE problem: initial term, drift, diffusion, costs and the
/// admissible control region, all as evaluable callbacks.
#[derive(Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub phi: InitialTerm,
    pub drift: Coefficient,
    pub diffusion: Coefficient,
    pub terminal_cost: TerminalCost,
    pub running_cost: RunningCost,
    pub control_set: ControlSet,
}

/// Outcome of one validation clause.
#[derive(Debug, Clone)]
pub struct ClauseReport {
    pub name: String,
    pub passed: bool,
    /// Clause-specific headline number (worst discrepancy, estimated bound).
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub clauses: Vec<ClauseReport>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn clause(&self, name: &str) -> Option<&ClauseReport> {
        self.clauses.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub sample_budget: usize,
    pub seed: u64,
    /// Radius of the base sampling box for the state variable.
    pub x_radius: f64,
    /// Relative tolerance for derivative-vs-finite-difference consistency.
    pub derivative_tol: f64,
    /// Scale factor between the base box and the growth-probe box.
    pub growth_stretch: f64,
    /// Flag growth clauses when the stretched-box estimate exceeds the base
    /// estimate by this factor.
    pub growth_margin: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            sample_budget: 200,
            seed: 0,
            x_radius: 1.0,
            derivative_tol: 1e-5,
            growth_stretch: 8.0,
            growth_margin: 2.5,
        }
    }
}

struct Sampler {
    rng: ChaCha20Rng,
    horizon: f64,
    n: usize,
}

impl Sampler {
    fn point(&mut self, radius: f64, u_set: &ControlSet) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let t = self.rng.gen_range(0.0..=self.horizon);
        let s = self.rng.gen_range(0.0..=self.horizon);
        let x = (0..self.n)
            .map(|_| self.rng.gen_range(-radius..=radius))
            .collect();
        let u = u_set.sample_point(&mut self.rng);
        (t, s, x, u)
    }
}

/// Samples the standing assumptions on a problem: derivative consistency,
/// growth/boundedness of the coefficients and costs, and continuity of the
/// kernels in their first time argument.
pub fn validate_assumptions(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    config: &ValidationConfig,
) -> ValidationReport {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let mut clauses = Vec::new();
    let mut sampler = Sampler {
        rng: ChaCha20Rng::seed_from_u64(config.seed),
        horizon: grid.horizon(),
        n,
    };

    for (label, coef) in [("drift", &spec.drift), ("diffusion", &spec.diffusion)] {
        clauses.push(check_jacobian(label, coef, n, m, spec, config, &mut sampler));
        clauses.push(check_hessian(label, coef, n, m, spec, config, &mut sampler));
        clauses.push(check_growth(label, coef, n, spec, config, &mut sampler));
        clauses.push(check_derivative_bound(
            label, coef, n, spec, config, &mut sampler,
        ));
        clauses.push(check_time_continuity(
            label, coef, n, spec, config, &mut sampler,
        ));
    }
    clauses.push(check_cost_clauses(spec, n, m, config, &mut sampler));

    ValidationReport { clauses }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_jacobian(
    label: &str,
    coef: &Coefficient,
    n: usize,
    _m: usize,
    spec: &ProblemSpec,
    config: &ValidationConfig,
    sampler: &mut Sampler,
) -> ClauseReport {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut passed = true;
    let step = 1e-5;
    for _ in 0..config.sample_budget {
        let (t, s, x, u) = sampler.point(config.x_radius, &spec.control_set);
        let mut jac = vec![0.0; n * n];
        (coef.dx)(t, s, &x, &u, &mut jac);
        if !finite(&jac) {
            passed = false;
            detail = format!("{label}_x non-finite at (t={t:.4}, s={s:.4})");
            break;
        }
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let mut fp = vec![0.0; n];
            let mut fm = vec![0.0; n];
            (coef.value)(t, s, &xp, &u, &mut fp);
            (coef.value)(t, s, &xm, &u, &mut fm);
            for i in 0..n {
                let fd = (fp[i] - fm[i]) / (2.0 * step);
                let scale = jac[i * n + j].abs().max(fd.abs()).max(1.0);
                let rel = (jac[i * n + j] - fd).abs() / scale;
                if rel > worst {
                    worst = rel;
                }
                if rel > config.derivative_tol && passed {
                    passed = false;
                    detail = format!(
                        "{label}_x[{i},{j}] = {} vs finite difference {} at (t={t:.4}, s={s:.4})",
                        jac[i * n + j],
                        fd
                    );
                }
            }
        }
    }
    ClauseReport {
        name: format!("{label}-jacobian-consistency"),
        passed,
        worst,
        detail,
    }
}

fn check_hessian(
    label: &str,
    coef: &Coefficient,
    n: usize,
    _m: usize,
    spec: &ProblemSpec,
    config: &ValidationConfig,
    sampler: &mut Sampler,
) -> ClauseReport {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut passed = true;
    let step = 1e-4;
    // Second derivatives are checked against finite differences of the
    // hand-coded Jacobian, which keeps the noise floor manageable.
    for _ in 0..config.sample_budget / 2 {
        let (t, s, x, u) = sampler.point(config.x_radius, &spec.control_set);
        let mut hess = vec![0.0; n * n * n];
        (coef.dxx)(t, s, &x, &u, &mut hess);
        if !finite(&hess) {
            passed = false;
            detail = format!("{label}_xx non-finite at (t={t:.4}, s={s:.4})");
            break;
        }
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += step;
            xm[k] -= step;
            let mut jp = vec![0.0; n * n];
            let mut jm = vec![0.0; n * n];
            (coef.dx)(t, s, &xp, &u, &mut jp);
            (coef.dx)(t, s, &xm, &u, &mut jm);
            for c in 0..n {
                for j in 0..n {
                    let fd = (jp[c * n + j] - jm[c * n + j]) / (2.0 * step);
                    let hv = hess[c * n * n + j * n + k];
                    let scale = hv.abs().max(fd.abs()).max(1.0);
                    let rel = (hv - fd).abs() / scale;
                    if rel > worst {
                        worst = rel;
                    }
                    if rel > config.derivative_tol * 10.0 && passed {
                        passed = false;
                        detail = format!(
                            "{label}_xx[{c};{j},{k}] = {hv} vs finite difference {fd} at (t={t:.4}, s={s:.4})"
                        );
                    }
                }
            }
        }
    }
    ClauseReport {
        name: format!("{label}-hessian-consistency"),
        passed,
        worst,
        detail,
    }
}

/// Linear-growth probe: the ratio `|f| / (1 + |x| + |u|)` estimated on the
/// base box must not blow up on a stretched box.
fn check_growth(
    label: &str,
    coef: &Coefficient,
    n: usize,
    spec: &ProblemSpec,
    config: &ValidationConfig,
    sampler: &mut Sampler,
) -> ClauseReport {
    let ratio = |sampler: &mut Sampler, radius: f64| -> f64 {
        let mut worst = 0.0f64;
        for _ in 0..config.sample_budget {
            let (t, s, x, u) = sampler.point(radius, &spec.control_set);
            let mut f = vec![0.0; n];
            (coef.value)(t, s, &x, &u, &mut f);
            if !finite(&f) {
                return f64::INFINITY;
            }
            let norm_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_u: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_f: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(norm_f / (1.0 + norm_x + norm_u));
        }
        worst
    };
    let base = ratio(sampler, config.x_radius);
    let stretched = ratio(sampler, config.x_radius * config.growth_stretch);
    let passed = stretched.is_finite() && stretched <= config.growth_margin * base.max(1e-12);
    ClauseReport {
        name: format!("{label}-linear-growth"),
        passed,
        worst: stretched,
        detail: format!("growth ratio {base:.4e} on base box, {stretched:.4e} stretched"),
    }
}

/// Bounded-derivative probe, same stretch test applied to `|f_x|` and
/// `|f_xx|`.
fn check_derivative_bound(
    label: &str,
    coef: &Coefficient,
    n: usize,
    spec: &ProblemSpec,
    config: &ValidationConfig,
    sampler: &mut Sampler,
) -> ClauseReport {
    let bound = |sampler: &mut Sampler, radius: f64| -> f64 {
        let mut worst = 0.0f64;
        for _ in 0..config.sample_budget {
            let (t, s, x, u) = sampler.point(radius, &spec.control_set);
            let mut jac = vec![0.0; n * n];
            let mut hess = vec![0.0; n * n * n];
            (coef.dx)(t, s, &x, &u, &mut jac);
            (coef.dxx)(t, s, &x, &u, &mut hess);
            if !finite(&jac) || !finite(&hess) {
                return f64::INFINITY;
            }
            let a = jac.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let b = hess.iter().map(|v| v.abs()).fold(0.0, f64::max);
            worst = worst.max(a.max(b));
        }
        worst
    };
    let base = bound(sampler, config.x_radius);
    let stretched = bound(sampler, config.x_radius * config.growth_stretch);
    let passed = stretched.is_finite() && stretched <= config.growth_margin * base.max(1e-12);
    ClauseReport {
        name: format!("{label}-bounded-derivatives"),
        passed,
        worst: stretched,
        detail: format!("derivative bound {base:.4e} on base box, {stretched:.4e} stretched"),
    }
}

/// Continuity of `t -> f(t, s, x, u)`: only gross jumps are flagged; a
/// genuine modulus of continuity cannot be certified from samples.
fn check_time_continuity(
    label: &str,
    coef: &Coefficient,
    n: usize,
    spec: &ProblemSpec,
    config: &ValidationConfig,
    sampler: &mut Sampler,
) -> ClauseReport {
    let mut worst = 0.0f64;
    for _ in 0..config.sample_budget {
        let (t, s, x, u) = sampler.point(config.x_radius, &spec.control_set);
        let dt = 1e-7 * sampler.horizon;
        let t2 = (t + dt).min(sampler.horizon);
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        (coef.value)(t, s, &x, &u, &mut f1);
        (coef.value)(t2, s, &x, &u, &mut f2);
        let norm_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_u: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / (1.0 + norm_x + norm_u));
    }
    let passed = worst <= 1e-3;
    ClauseReport {
        name: format!("{label}-time-continuity"),
        passed,
        worst,
        detail: format!("max displacement {worst:.4e} for dt = 1e-7 * T"),
    }
}

fn check_cost_clauses(
    spec: &ProblemSpec,
    n: usize,
    _m: usize,
    config: &ValidationConfig,
    sampler: &mut Sampler,
) -> ClauseReport {
    let mut worst = 0.0f64;
    let mut passed = true;
    let mut detail = String::new();
    let step = 1e-5;
    for _ in 0..config.sample_budget {
        let (t, _s, x, u) = sampler.point(config.x_radius, &spec.control_set);
        let mut hx = vec![0.0; n];
        let mut hxx = vec![0.0; n * n];
        (spec.terminal_cost.grad)(&x, &mut hx);
        (spec.terminal_cost.hess)(&x, &mut hxx);
        let mut lx = vec![0.0; n];
        let mut lxx = vec![0.0; n * n];
        (spec.running_cost.grad_x)(t, &x, &u, &mut lx);
        (spec.running_cost.hess_x)(t, &x, &u, &mut lxx);
        if !finite(&hx) || !finite(&hxx) || !finite(&lx) || !finite(&lxx) {
            passed = false;
            detail = "cost derivative non-finite".into();
            break;
        }
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let fd_h = ((spec.terminal_cost.value)(&xp) - (spec.terminal_cost.value)(&xm))
                / (2.0 * step);
            let fd_l = ((spec.running_cost.value)(t, &xp, &u)
                - (spec.running_cost.value)(t, &xm, &u))
                / (2.0 * step);
            let rel_h = (hx[j] - fd_h).abs() / hx[j].abs().max(fd_h.abs()).max(1.0);
            let rel_l = (lx[j] - fd_l).abs() / lx[j].abs().max(fd_l.abs()).max(1.0);
            worst = worst.max(rel_h.max(rel_l));
            if (rel_h > config.derivative_tol || rel_l > config.derivative_tol) && passed {
                passed = false;
                detail = format!("cost gradient mismatch at component {j} (t={t:.4})");
            }
        }
    }
    ClauseReport {
        name: "cost-derivative-consistency".into(),
        passed,
        worst,
        detail,
    }
}
