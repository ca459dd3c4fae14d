//! Maximum-principle checker.
//!
//! For a candidate optimal pair the necessary condition states that
//!
//! ```text
//! S(t, u) = dH(t, u) + F(t, direction(u)) / 2  >=  0     for all u in U,
//! S(t, u_bar(t)) = 0,
//! ```
//!
//! per time and scenario, where `dH` is the Hamiltonian increment and `F`
//! the second-order quadratic functional of the spike direction.  The
//! checker quantifies over all grid times and tree scenarios (or a sampled
//! subset) with an explicit tolerance: it is a falsification harness for
//! the discretised problem, not a proof.

use serde::Serialize;

use crate::adjoint::{
    delta_hamiltonian_at, hamiltonian_ctrl_grad_at, solve_first_order_adjoint, AdjointOptions,
    FirstOrderAdjoint,
};
use crate::driver::NoiseDriver;
use crate::error::{Error, Result};
use crate::la;
use crate::problem::ProblemSpec;
use crate::process::AdaptedProcess;
use crate::second_order::{
    build_weights, f_quadratic, linearized_kernels, spike_direction, MatrixAtTau,
    QuadraticWeights, SpikeDirection,
};
use crate::solver::solve_svie;

/// How many scenarios the checker visits per time level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckMode {
    /// Every scenario at every level.
    Full,
    /// At most this many scenarios per level (evenly strided).
    Diagonal { max_scenarios: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct MpConfig {
    pub tolerance: f64,
    pub mode: CheckMode,
    /// Control points scanned at every (time, scenario).
    pub u_grid: Vec<Vec<f64>>,
}

impl MpConfig {
    pub fn new(u_grid: Vec<Vec<f64>>) -> Self {
        MpConfig {
            tolerance: 1e-8,
            mode: CheckMode::Full,
            u_grid,
        }
    }
}

/// The maximum condition at one time/scenario cell.
#[derive(Debug, Clone, Serialize)]
pub struct MpCell {
    pub t_index: usize,
    pub scenario: usize,
    /// Minimum of `S` over the scanned control points.
    pub min_value: f64,
    pub argmin: Vec<f64>,
    /// `S` at the reference control (zero by construction up to roundoff).
    pub value_at_reference: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MpReport {
    pub tolerance: f64,
    pub mode: CheckMode,
    pub cells: Vec<MpCell>,
    /// Most negative `S` seen anywhere (0 when none is negative).
    pub worst_violation: f64,
    pub worst_cell: Option<(usize, usize)>,
    /// Largest `|S(t, u_bar(t))|`.
    pub reference_deviation: f64,
    pub passed: bool,
}

impl MpReport {
    pub fn violation_at(&self, t_index: usize, scenario: usize) -> bool {
        self.cells
            .iter()
            .any(|c| c.t_index == t_index && c.scenario == scenario && c.violation)
    }
}

/// `S(t, u)` per scenario at `t`: Hamiltonian increment plus half the
/// quadratic functional of the spike direction.
#[allow(clippy::too_many_arguments)]
pub fn script_s(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    weights: &QuadraticWeights,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    u: &[f64],
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let direction = spike_direction(spec, xbar, ubar, t_index, u, driver);
    let kernels = linearized_kernels(spec, xbar, ubar, driver);
    let quad = f_quadratic(weights, &kernels, &direction, driver)?;
    let count = driver.scenarios_at(t_index);
    let mut out = vec![0.0; count];
    for v in 0..count {
        out[v] = delta_hamiltonian_at(spec, adj, xbar, ubar, t_index, v, u, driver)
            + 0.5 * quad[v];
    }
    Ok(out)
}

/// `S0(t, u)`: the refined condition through the matrix process, valid when
/// the spike direction does not depend on its first time argument.
#[allow(clippy::too_many_arguments)]
pub fn script_s0(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    b3: &MatrixAtTau,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    u: &[f64],
    driver: &NoiseDriver,
    constancy_tol: f64,
) -> Result<Vec<f64>> {
    let direction = spike_direction(spec, xbar, ubar, t_index, u, driver);
    let variation = direction.time_variation();
    if variation > constancy_tol {
        return Err(Error::invalid(format!(
            "spike direction varies by {variation:.3e} in its first time argument; \
             use the general quadratic-functional condition instead"
        )));
    }
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let count = driver.scenarios_at(t_index);
    let mut out = vec![0.0; count];
    for v in 0..count {
        let d = direction.at(steps, v);
        out[v] = delta_hamiltonian_at(spec, adj, xbar, ubar, t_index, v, u, driver)
            + 0.5 * la::quad_form(n, d, b3.at(v), d);
    }
    Ok(out)
}

/// Convex-region first-order condition `<H_u(t, u_bar(t)), u - u_bar(t)>`
/// per scenario; negative values are violations.
#[allow(clippy::too_many_arguments)]
pub fn convex_condition(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    u: &[f64],
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    if !spec.control_set.is_convex() {
        return Err(Error::invalid(
            "the gradient condition requires a convex control region",
        ));
    }
    let m = spec.control_dim;
    let count = driver.scenarios_at(t_index);
    let mut out = vec![0.0; count];
    for v in 0..count {
        let grad = hamiltonian_ctrl_grad_at(spec, adj, xbar, ubar, t_index, v, driver);
        let ub = ubar.at(t_index, v);
        let mut val = 0.0;
        for d in 0..m {
            val += grad[d] * (u[d] - ub[d]);
        }
        out[v] = val;
    }
    Ok(out)
}

/// Everything the checker precomputes for a candidate pair.
pub struct MpContext {
    pub xbar: AdaptedProcess,
    pub adjoint: FirstOrderAdjoint,
    pub weights: QuadraticWeights,
}

/// Solves the state and adjoint objects for a candidate control.
pub fn prepare_context(
    spec: &ProblemSpec,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> Result<MpContext> {
    let xbar = solve_svie(spec, ubar, driver)?;
    let adjoint = solve_first_order_adjoint(
        spec,
        &xbar,
        ubar,
        driver,
        &AdjointOptions::for_driver(driver),
    )?;
    let weights = build_weights(spec, &adjoint, &xbar, ubar, driver);
    Ok(MpContext {
        xbar,
        adjoint,
        weights,
    })
}

fn scenarios_to_visit(mode: CheckMode, count: usize) -> Vec<usize> {
    match mode {
        CheckMode::Full => (0..count).collect(),
        CheckMode::Diagonal { max_scenarios } => {
            let k = max_scenarios.max(1).min(count);
            let stride = count.div_ceil(k);
            (0..count).step_by(stride).collect()
        }
    }
}

/// Runs the maximum-condition scan over every grid time, the configured
/// scenarios and the control grid.
///
/// ```
/// use std::sync::Arc;
/// use volterra_control::mp::{check_mp, MpConfig};
/// use volterra_control::problem::{
///     Coefficient, ControlSet, InitialTerm, ProblemSpec, RunningCost, TerminalCost,
/// };
/// use volterra_control::solver::constant_control;
/// use volterra_control::{NoiseDriver, TimeGrid};
///
/// // Control-free dynamics with a strictly convex control cost: the zero
/// // control is pointwise optimal and the condition holds everywhere.
/// let spec = ProblemSpec {
///     state_dim: 1,
///     control_dim: 1,
///     phi: InitialTerm::constant(vec![0.0]),
///     drift: Coefficient::zero(),
///     diffusion: Coefficient {
///         value: Arc::new(|_, _, _, _, out| out[0] = 0.5),
///         dx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
///         dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
///         du: None,
///     },
///     terminal_cost: TerminalCost::zero(),
///     running_cost: RunningCost {
///         value: Arc::new(|_, _, u| u[0] * u[0]),
///         grad_x: Arc::new(|_, _, _, out| out[0] = 0.0),
///         hess_x: Arc::new(|_, _, _, out| out[0] = 0.0),
///         grad_u: Some(Arc::new(|_, _, u, out| out[0] = 2.0 * u[0])),
///     },
///     control_set: ControlSet::Finite { points: vec![vec![0.0], vec![1.0]] },
/// };
/// let driver = NoiseDriver::tree(TimeGrid::new(1.0, 3).unwrap()).unwrap();
/// let ubar = constant_control(&driver, &[0.0]);
/// let report = check_mp(&spec, &ubar, &MpConfig::new(vec![vec![0.0], vec![1.0]]), &driver)
///     .unwrap();
/// assert!(report.passed);
/// ```
pub fn check_mp(
    spec: &ProblemSpec,
    ubar: &AdaptedProcess,
    config: &MpConfig,
    driver: &NoiseDriver,
) -> Result<MpReport> {
    let ctx = prepare_context(spec, ubar, driver)?;
    check_mp_with_context(spec, ubar, &ctx, config, driver)
}

/// As [`check_mp`] with a precomputed context.
pub fn check_mp_with_context(
    spec: &ProblemSpec,
    ubar: &AdaptedProcess,
    ctx: &MpContext,
    config: &MpConfig,
    driver: &NoiseDriver,
) -> Result<MpReport> {
    let steps = driver.grid().steps();
    let mut cells = Vec::new();
    let mut worst_violation = 0.0f64;
    let mut worst_cell = None;
    let mut reference_deviation = 0.0f64;
    for t_index in 0..steps {
        let count = driver.scenarios_at(t_index);
        let visit = scenarios_to_visit(config.mode, count);
        // One vectorised sweep per control point covers all scenarios.
        let mut per_u = Vec::with_capacity(config.u_grid.len());
        for u in &config.u_grid {
            per_u.push(script_s(
                spec,
                &ctx.adjoint,
                &ctx.weights,
                &ctx.xbar,
                ubar,
                t_index,
                u,
                driver,
            )?);
        }
        let reference = script_s_at_reference(
            spec,
            &ctx.adjoint,
            &ctx.weights,
            &ctx.xbar,
            ubar,
            t_index,
            driver,
        )?;
        for &v in &visit {
            let mut min_value = f64::INFINITY;
            let mut argmin = Vec::new();
            for (k, u) in config.u_grid.iter().enumerate() {
                if per_u[k][v] < min_value {
                    min_value = per_u[k][v];
                    argmin = u.clone();
                }
            }
            let value_at_reference = reference[v];
            reference_deviation = reference_deviation.max(value_at_reference.abs());
            let violation =
                min_value < -config.tolerance || value_at_reference.abs() > config.tolerance;
            if min_value < worst_violation {
                worst_violation = min_value;
                worst_cell = Some((t_index, v));
            }
            cells.push(MpCell {
                t_index,
                scenario: v,
                min_value,
                argmin,
                value_at_reference,
                violation,
            });
        }
    }
    let passed = cells.iter().all(|c| !c.violation);
    Ok(MpReport {
        tolerance: config.tolerance,
        mode: config.mode,
        cells,
        worst_violation: worst_violation.min(0.0),
        worst_cell,
        reference_deviation,
        passed,
    })
}

/// `S` evaluated at the (scenario-dependent) reference control itself.
fn script_s_at_reference(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    weights: &QuadraticWeights,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let count = driver.scenarios_at(t_index);
    // The spike direction at the reference control itself is identically
    // zero (the two diffusion evaluations coincide scenario by scenario).
    let direction = SpikeDirection {
        tau_index: t_index,
        dim: n,
        values: vec![vec![0.0; count * n]; steps - t_index + 1],
    };
    let kernels = linearized_kernels(spec, xbar, ubar, driver);
    let quad = f_quadratic(weights, &kernels, &direction, driver)?;
    let mut out = vec![0.0; count];
    for v in 0..count {
        out[v] = delta_hamiltonian_at(
            spec,
            adj,
            xbar,
            ubar,
            t_index,
            v,
            ubar.at(t_index, v),
            driver,
        ) + 0.5 * quad[v];
    }
    Ok(out)
}

/// Streams the full `(t, scenario, u, S)` table through a callback, for
/// heatmap-style dumps.
pub fn mp_value_table(
    spec: &ProblemSpec,
    ubar: &AdaptedProcess,
    ctx: &MpContext,
    config: &MpConfig,
    driver: &NoiseDriver,
    mut sink: impl FnMut(usize, usize, &[f64], f64),
) -> Result<()> {
    let steps = driver.grid().steps();
    for t_index in 0..steps {
        let count = driver.scenarios_at(t_index);
        let visit = scenarios_to_visit(config.mode, count);
        for u in &config.u_grid {
            let vals = script_s(
                spec,
                &ctx.adjoint,
                &ctx.weights,
                &ctx.xbar,
                ubar,
                t_index,
                u,
                driver,
            )?;
            for &v in &visit {
                sink(t_index, v, u, vals[v]);
            }
        }
    }
    Ok(())
}
