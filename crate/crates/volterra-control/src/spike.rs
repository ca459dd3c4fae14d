//! Spike (needle) variations and the variational equations.
//!
//! A spike replaces the reference control on `[tau, tau + eps)` by a fixed
//! point of the control region.  The first variational process `X1` carries
//! the diffusion displacement of the spike, the second `X2` the drift
//! displacement and the quadratic feedback of `X1`:
//!
//! ```text
//! X1(t) = ∫ b_x(t,s) X1 ds + ∫ [sigma_x(t,s) X1 + dsigma(t,s)] dW
//! X2(t) = phi2(t) + ∫ b_x(t,s) X2 ds + ∫ sigma_x(t,s) X2 dW
//! phi2(t) = ∫ [b_xx(t,s) X1^2 / 2 + db(t,s)] ds
//!         + ∫ [sigma_xx(t,s) X1^2 / 2 + dsigma_x(t,s) X1] dW
//! ```
//!
//! where `df(t,s) = f(t,s,X(s),u_eps(s)) - f(t,s,X(s),u_bar(s))` vanishes
//! off the spike and `f_xx X1^2` is the vector of Hessian contractions
//! `X1' f^c_xx X1`.  The asymptotic experiments compare the normalised
//! quadratic aggregates of `X1` with the spike-frozen profiles `Y1`, `Y2`
//! and with the limiting quadratic functional.

use serde::Serialize;

use crate::adjoint::{delta_hamiltonian_at, FirstOrderAdjoint};
use crate::driver::NoiseDriver;
use crate::error::{Error, Result};
use crate::la;
use crate::problem::ProblemSpec;
use crate::process::AdaptedProcess;
use crate::second_order::{spike_direction, QuadraticWeights};
use crate::solver::{eval_cost, solve_linear_svie, solve_svie, LinearSvieInput};

/// A spike: interval start, width in grid steps, and the control point.
#[derive(Debug, Clone)]
pub struct SpikeExperiment {
    pub tau_index: usize,
    pub width_steps: usize,
    pub value: Vec<f64>,
}

impl SpikeExperiment {
    pub fn epsilon(&self, driver: &NoiseDriver) -> f64 {
        self.width_steps as f64 * driver.grid().dt()
    }

    fn end_index(&self) -> usize {
        self.tau_index + self.width_steps
    }

    fn covers(&self, index: usize) -> bool {
        index >= self.tau_index && index < self.end_index()
    }
}

/// The spiked control `u_eps = u` on `[tau, tau + eps)`, `u_bar` elsewhere.
///
/// ```
/// use volterra_control::solver::constant_control;
/// use volterra_control::spike::{spike_control, SpikeExperiment};
/// use volterra_control::{NoiseDriver, TimeGrid};
///
/// let driver = NoiseDriver::tree(TimeGrid::new(1.0, 4).unwrap()).unwrap();
/// let ubar = constant_control(&driver, &[0.2]);
/// let exp = SpikeExperiment { tau_index: 1, width_steps: 1, value: vec![0.9] };
/// let u = spike_control(&ubar, &exp, &driver).unwrap();
/// assert_eq!(u.at(0, 0)[0], 0.2);
/// assert_eq!(u.at(1, 0)[0], 0.9); // only the spiked step differs
/// assert_eq!(u.at(2, 0)[0], 0.2);
/// ```
pub fn spike_control(
    ubar: &AdaptedProcess,
    experiment: &SpikeExperiment,
    driver: &NoiseDriver,
) -> Result<AdaptedProcess> {
    let steps = driver.grid().steps();
    if experiment.width_steps == 0 {
        return Err(Error::invalid("spike width must be a positive number of grid steps"));
    }
    if experiment.end_index() > steps {
        return Err(Error::invalid(format!(
            "spike [{}, {}) leaves the grid with {} steps",
            experiment.tau_index,
            experiment.end_index(),
            steps
        )));
    }
    let mut u = ubar.clone();
    for i in experiment.tau_index..experiment.end_index() {
        for v in 0..driver.scenarios_at(i) {
            u.at_mut(i, v).copy_from_slice(&experiment.value);
        }
    }
    Ok(u)
}

/// Solutions of the two variational equations together with the spiked
/// control that generated them.
pub struct VariationalSolution {
    pub x1: AdaptedProcess,
    pub x2: AdaptedProcess,
    pub spiked_control: AdaptedProcess,
}

/// Solves the first and second variational equations for a spike.
pub fn solve_variational(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    experiment: &SpikeExperiment,
    driver: &NoiseDriver,
) -> Result<VariationalSolution> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let grid = *driver.grid();
    let u_eps = spike_control(ubar, experiment, driver)?;

    let a_kernel = |i: usize, j: usize, v: usize, out: &mut [f64]| {
        (spec.drift.dx)(grid.time(i), grid.time(j), xbar.at(j, v), ubar.at(j, v), out)
    };
    let b_kernel = |i: usize, j: usize, v: usize, out: &mut [f64]| {
        (spec.diffusion.dx)(grid.time(i), grid.time(j), xbar.at(j, v), ubar.at(j, v), out)
    };
    // dsigma(t_i, t_j): nonzero only on spiked columns.
    let dsigma = |i: usize, j: usize, v: usize, out: &mut [f64]| {
        if experiment.covers(j) {
            let mut base = vec![0.0; n];
            (spec.diffusion.value)(
                grid.time(i),
                grid.time(j),
                xbar.at(j, v),
                u_eps.at(j, v),
                out,
            );
            (spec.diffusion.value)(
                grid.time(i),
                grid.time(j),
                xbar.at(j, v),
                ubar.at(j, v),
                &mut base,
            );
            for d in 0..n {
                out[d] -= base[d];
            }
        } else {
            out.fill(0.0);
        }
    };
    let zero_forcing = |_: usize, _: usize, out: &mut [f64]| out.fill(0.0);
    let x1 = solve_linear_svie(
        &LinearSvieInput {
            dim: n,
            start_index: 0,
            a: &a_kernel,
            b: &b_kernel,
            forcing: &zero_forcing,
            stochastic_forcing: Some(&dsigma),
            terminal_shift: None,
        },
        driver,
    )?
    .process;

    // phi2 per (level, scenario).
    let mut phi2 = AdaptedProcess::zeros(grid, n, &driver.level_sizes(steps));
    {
        let mut hess = vec![0.0; n * n * n];
        let mut jac_e = vec![0.0; n * n];
        let mut jac_b = vec![0.0; n * n];
        let mut val_e = vec![0.0; n];
        let mut val_b = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for i in 0..=steps {
            let t = grid.time(i);
            for v in 0..driver.scenarios_at(i) {
                let mut acc = vec![0.0; n];
                for j in 0..i {
                    let anc = driver.ancestor(i, v, j);
                    let s = grid.time(j);
                    let xj = xbar.at(j, anc);
                    let x1j = x1.at(j, anc);
                    let dw = driver.increment_on_path(i, v, j);
                    // Drift: b_xx X1^2 / 2 + db.
                    (spec.drift.dxx)(t, s, xj, ubar.at(j, anc), &mut hess);
                    for c in 0..n {
                        acc[c] += 0.5
                            * la::quad_form(n, x1j, &hess[c * n * n..(c + 1) * n * n], x1j)
                            * dt;
                    }
                    if experiment.covers(j) {
                        (spec.drift.value)(t, s, xj, u_eps.at(j, anc), &mut val_e);
                        (spec.drift.value)(t, s, xj, ubar.at(j, anc), &mut val_b);
                        for c in 0..n {
                            acc[c] += (val_e[c] - val_b[c]) * dt;
                        }
                    }
                    // Diffusion: sigma_xx X1^2 / 2 + dsigma_x X1.
                    (spec.diffusion.dxx)(t, s, xj, ubar.at(j, anc), &mut hess);
                    for c in 0..n {
                        acc[c] += 0.5
                            * la::quad_form(n, x1j, &hess[c * n * n..(c + 1) * n * n], x1j)
                            * dw;
                    }
                    if experiment.covers(j) {
                        (spec.diffusion.dx)(t, s, xj, u_eps.at(j, anc), &mut jac_e);
                        (spec.diffusion.dx)(t, s, xj, ubar.at(j, anc), &mut jac_b);
                        for k in 0..n * n {
                            jac_e[k] -= jac_b[k];
                        }
                        la::mat_vec(n, n, &jac_e, x1j, &mut tmp);
                        for c in 0..n {
                            acc[c] += tmp[c] * dw;
                        }
                    }
                }
                phi2.at_mut(i, v).copy_from_slice(&acc);
            }
        }
    }
    let phi2_forcing = |i: usize, v: usize, out: &mut [f64]| {
        out.copy_from_slice(phi2.at(i, v));
    };
    let x2 = solve_linear_svie(
        &LinearSvieInput {
            dim: n,
            start_index: 0,
            a: &a_kernel,
            b: &b_kernel,
            forcing: &phi2_forcing,
            stochastic_forcing: None,
            terminal_shift: None,
        },
        driver,
    )?
    .process;

    Ok(VariationalSolution {
        x1,
        x2,
        spiked_control: u_eps,
    })
}

fn sup_mean_square(p: &AdaptedProcess, driver: &NoiseDriver) -> f64 {
    let steps = driver.grid().steps();
    let mut sup = 0.0f64;
    for i in 0..=steps {
        let w = driver.scenario_weight(i);
        let mut e = 0.0;
        for v in 0..driver.scenarios_at(i) {
            e += p.at(i, v).iter().map(|a| a * a).sum::<f64>();
        }
        sup = sup.max(e * w);
    }
    sup
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

/// Growth-order report for the first variational process and the expansion
/// residual along a list of spike widths.
#[derive(Debug, Clone, Serialize)]
pub struct OrderEstimateReport {
    pub widths: Vec<usize>,
    pub epsilons: Vec<f64>,
    /// `sup_t E |X1(t)|^2` per width.
    pub x1_sup_sq: Vec<f64>,
    /// Log-log slope of the above in epsilon (first-order displacement
    /// scales like eps, so the expected slope is 1).
    pub x1_slope: f64,
    pub x1_fit_r2: f64,
    /// `sup_t E |X_eps - X - X1 - X2|^2` per width, when requested.
    pub residual_sup_sq: Option<Vec<f64>>,
    /// Expected to exceed 2 (the residual is of higher order).
    pub residual_slope: Option<f64>,
    /// Set when every sampled quantity is exactly zero (spike at the
    /// reference control), in which case the slopes are meaningless.
    pub exact_zero: bool,
}

/// Runs the spike-order experiment for decreasing widths.
pub fn check_order_estimates(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    tau_index: usize,
    u: &[f64],
    widths: &[usize],
    with_residual: bool,
    driver: &NoiseDriver,
) -> Result<OrderEstimateReport> {
    let mut eps = Vec::new();
    let mut x1_sup = Vec::new();
    let mut res_sup = Vec::new();
    for &w in widths {
        let experiment = SpikeExperiment {
            tau_index,
            width_steps: w,
            value: u.to_vec(),
        };
        let var = solve_variational(spec, xbar, ubar, &experiment, driver)?;
        eps.push(experiment.epsilon(driver));
        x1_sup.push(sup_mean_square(&var.x1, driver));
        if with_residual {
            let x_eps = solve_svie(spec, &var.spiked_control, driver)?;
            let steps = driver.grid().steps();
            let mut residual =
                AdaptedProcess::zeros(*driver.grid(), spec.state_dim, &driver.level_sizes(steps));
            for i in 0..=steps {
                for v in 0..driver.scenarios_at(i) {
                    let out = residual.at_mut(i, v);
                    for d in 0..spec.state_dim {
                        out[d] = x_eps.at(i, v)[d]
                            - xbar.at(i, v)[d]
                            - var.x1.at(i, v)[d]
                            - var.x2.at(i, v)[d];
                    }
                }
            }
            res_sup.push(sup_mean_square(&residual, driver));
        }
    }
    let exact_zero = x1_sup.iter().all(|v| *v == 0.0);
    let (x1_slope, x1_fit_r2) = if exact_zero {
        (f64::NAN, f64::NAN)
    } else {
        loglog_slope(&eps, &x1_sup)
    };
    let residual_slope = if with_residual && !exact_zero && res_sup.iter().all(|v| *v > 0.0) {
        Some(loglog_slope(&eps, &res_sup).0)
    } else {
        None
    };
    Ok(OrderEstimateReport {
        widths: widths.to_vec(),
        epsilons: eps,
        x1_sup_sq: x1_sup,
        x1_slope,
        x1_fit_r2,
        residual_sup_sq: if with_residual { Some(res_sup) } else { None },
        residual_slope,
        exact_zero,
    })
}

/// The named terms of the variational inequality and of its reduced
/// Hamiltonian form, plus the direct cost difference.
#[derive(Debug, Clone, Serialize)]
pub struct VariationalTerms {
    /// `E ∫ l_x' (X1 + X2) ds`
    pub linear_running: f64,
    /// `E [h_x' (X1(T) + X2(T))]`
    pub linear_terminal: f64,
    /// `E ∫ dl ds`
    pub delta_cost: f64,
    /// `E ∫ X1' l_xx X1 ds / 2`
    pub quadratic_running: f64,
    /// `E [X1' h_xx X1](T) / 2`
    pub quadratic_terminal: f64,
    /// Sum of the five terms above (the first-order expansion of the cost
    /// increment).
    pub expansion_total: f64,
    /// `(1/eps) E ∫ dH(t) dt` over the spike.
    pub delta_h_integral: f64,
    /// `(1/2 eps) E { ∫ tr[H_xx X1 X1'] dt + tr[h_xx X1(T) X1(T)'] }`
    pub quadratic_h_term: f64,
    /// `delta_h_integral + quadratic_h_term` (the reduced form whose limit
    /// inferior must be nonnegative at an optimum).
    pub reduced_total: f64,
    /// `J(u_eps) - J(u_bar)` computed directly.
    pub cost_difference: f64,
}

/// Evaluates every term of the variational inequality for one spike.
#[allow(clippy::too_many_arguments)]
pub fn variational_inequality_terms(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    weights: &QuadraticWeights,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    experiment: &SpikeExperiment,
    driver: &NoiseDriver,
) -> Result<VariationalTerms> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let eps = experiment.epsilon(driver);
    let var = solve_variational(spec, xbar, ubar, experiment, driver)?;

    let mut linear_running = 0.0;
    let mut delta_cost = 0.0;
    let mut quadratic_running = 0.0;
    let mut delta_h_integral = 0.0;
    let mut quadratic_h = 0.0;
    let mut grad = vec![0.0; n];
    let mut hxx = vec![0.0; n * n];
    for i in 0..steps {
        let t = driver.grid().time(i);
        let w = driver.scenario_weight(i);
        let mut lev_lin = 0.0;
        let mut lev_dl = 0.0;
        let mut lev_quad = 0.0;
        let mut lev_dh = 0.0;
        let mut lev_qh = 0.0;
        for v in 0..driver.scenarios_at(i) {
            let x = xbar.at(i, v);
            let ub = ubar.at(i, v);
            (spec.running_cost.grad_x)(t, x, ub, &mut grad);
            let sum: Vec<f64> = (0..n)
                .map(|d| var.x1.at(i, v)[d] + var.x2.at(i, v)[d])
                .collect();
            lev_lin += la::dot(&grad, &sum);
            if experiment.covers(i) {
                lev_dl += (spec.running_cost.value)(t, x, var.spiked_control.at(i, v))
                    - (spec.running_cost.value)(t, x, ub);
                lev_dh += delta_hamiltonian_at(
                    spec,
                    adj,
                    xbar,
                    ubar,
                    i,
                    v,
                    var.spiked_control.at(i, v),
                    driver,
                );
            }
            (spec.running_cost.hess_x)(t, x, ub, &mut hxx);
            lev_quad += 0.5 * la::quad_form(n, var.x1.at(i, v), &hxx, var.x1.at(i, v));
            lev_qh += la::quad_form(
                n,
                var.x1.at(i, v),
                weights.running.at(i, v),
                var.x1.at(i, v),
            );
        }
        linear_running += lev_lin * w * dt;
        delta_cost += lev_dl * w * dt;
        quadratic_running += lev_quad * w * dt;
        delta_h_integral += lev_dh * w * dt;
        quadratic_h += lev_qh * w * dt;
    }
    let leaves = driver.scenarios_at(steps);
    let wl = driver.scenario_weight(steps);
    let mut linear_terminal = 0.0;
    let mut quadratic_terminal = 0.0;
    for v in 0..leaves {
        let x = xbar.at(steps, v);
        (spec.terminal_cost.grad)(x, &mut grad);
        let sum: Vec<f64> = (0..n)
            .map(|d| var.x1.at(steps, v)[d] + var.x2.at(steps, v)[d])
            .collect();
        linear_terminal += la::dot(&grad, &sum) * wl;
        (spec.terminal_cost.hess)(x, &mut hxx);
        quadratic_terminal +=
            0.5 * la::quad_form(n, var.x1.at(steps, v), &hxx, var.x1.at(steps, v)) * wl;
        quadratic_h += la::quad_form(
            n,
            var.x1.at(steps, v),
            &weights.terminal[v * n * n..(v + 1) * n * n],
            var.x1.at(steps, v),
        ) * wl;
    }

    let x_eps = solve_svie(spec, &var.spiked_control, driver)?;
    let cost_difference = eval_cost(spec, &x_eps, &var.spiked_control, driver)
        - eval_cost(spec, xbar, ubar, driver);

    Ok(VariationalTerms {
        linear_running,
        linear_terminal,
        delta_cost,
        quadratic_running,
        quadratic_terminal,
        expansion_total: linear_running
            + linear_terminal
            + delta_cost
            + quadratic_running
            + quadratic_terminal,
        delta_h_integral: delta_h_integral / eps,
        quadratic_h_term: quadratic_h / (2.0 * eps),
        reduced_total: delta_h_integral / eps + quadratic_h / (2.0 * eps),
        cost_difference,
    })
}

/// One row of the asymptotic convergence table.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticRow {
    pub width: usize,
    pub epsilon: f64,
    /// Normalised quadratic aggregate of `X1` over `[tau + eps, T]`.
    pub h_x1: f64,
    /// Aggregate of the spike-frozen profile `Y1`.
    pub h_y1: f64,
    /// The limiting quadratic functional (displacement frozen at `tau`,
    /// integrated from `tau`).
    pub limit: f64,
    pub gap_x1_y1: f64,
    pub gap_y1_limit: f64,
}

/// Compares the normalised spike aggregates against the limiting quadratic
/// functional along a list of widths (typically dyadic).
#[allow(clippy::too_many_arguments)]
pub fn asymptotic_experiment(
    spec: &ProblemSpec,
    weights: &QuadraticWeights,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    tau_index: usize,
    u: &[f64],
    widths: &[usize],
    driver: &NoiseDriver,
) -> Result<Vec<AsymptoticRow>> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let grid = *driver.grid();
    let direction = spike_direction(spec, xbar, ubar, tau_index, u, driver);

    let a_kernel = |i: usize, j: usize, v: usize, out: &mut [f64]| {
        (spec.drift.dx)(grid.time(i), grid.time(j), xbar.at(j, v), ubar.at(j, v), out)
    };
    let b_kernel = |i: usize, j: usize, v: usize, out: &mut [f64]| {
        (spec.diffusion.dx)(grid.time(i), grid.time(j), xbar.at(j, v), ubar.at(j, v), out)
    };

    // The limit: displacement frozen at tau, aggregated from tau, plain
    // expectation of the conditional quadratic functional.
    let limit = {
        let forcing = |i: usize, v: usize, out: &mut [f64]| {
            out.copy_from_slice(direction.at(i, driver.ancestor(i, v, tau_index)));
        };
        let sol = solve_linear_svie(
            &LinearSvieInput {
                dim: n,
                start_index: tau_index,
                a: &a_kernel,
                b: &b_kernel,
                forcing: &forcing,
                stochastic_forcing: None,
                terminal_shift: None,
            },
            driver,
        )?
        .process;
        quadratic_aggregate(&sol, weights, tau_index, steps, dt, driver)
    };

    let mut rows = Vec::new();
    for &w in widths {
        let experiment = SpikeExperiment {
            tau_index,
            width_steps: w,
            value: u.to_vec(),
        };
        if experiment.end_index() > steps {
            return Err(Error::invalid(format!(
                "width {w} overruns the grid from tau = {tau_index}"
            )));
        }
        let eps = experiment.epsilon(driver);
        let start = experiment.end_index();
        let var = solve_variational(spec, xbar, ubar, &experiment, driver)?;
        let h_x1 = quadratic_aggregate(&var.x1, weights, start, steps, dt, driver) / eps;

        // Y2: displacement frozen at tau, propagated from tau + eps.
        let forcing = |i: usize, v: usize, out: &mut [f64]| {
            out.copy_from_slice(direction.at(i, driver.ancestor(i, v, tau_index)));
        };
        let y2 = solve_linear_svie(
            &LinearSvieInput {
                dim: n,
                start_index: start,
                a: &a_kernel,
                b: &b_kernel,
                forcing: &forcing,
                stochastic_forcing: None,
                terminal_shift: None,
            },
            driver,
        )?
        .process;
        // Y1 = eps^{-1/2} (W(tau+eps) - W(tau)) Y2; aggregate per leaf.
        let leaves = driver.scenarios_at(steps);
        let wl = driver.scenario_weight(steps);
        let mut h_y1 = 0.0;
        for leaf in 0..leaves {
            let mut dw = 0.0;
            for j in experiment.tau_index..start {
                dw += driver.increment_on_path(steps, leaf, j);
            }
            let scale = dw * dw / eps;
            let mut acc = 0.0;
            for j in start..steps {
                let anc = driver.ancestor(steps, leaf, j);
                acc +=
                    la::quad_form(n, y2.at(j, anc), weights.running.at(j, anc), y2.at(j, anc))
                        * dt;
            }
            acc += la::quad_form(
                n,
                y2.at(steps, leaf),
                &weights.terminal[leaf * n * n..(leaf + 1) * n * n],
                y2.at(steps, leaf),
            );
            h_y1 += scale * acc * wl;
        }

        rows.push(AsymptoticRow {
            width: w,
            epsilon: eps,
            h_x1,
            h_y1,
            limit,
            gap_x1_y1: (h_x1 - h_y1).abs(),
            gap_y1_limit: (h_y1 - limit).abs(),
        });
    }
    Ok(rows)
}

/// Plain expectation of `∫_{from}^{T} X' Q X ds + X(T)' G X(T)`.
fn quadratic_aggregate(
    x: &AdaptedProcess,
    weights: &QuadraticWeights,
    from: usize,
    steps: usize,
    dt: f64,
    driver: &NoiseDriver,
) -> f64 {
    let n = weights.dim;
    let leaves = driver.scenarios_at(steps);
    let wl = driver.scenario_weight(steps);
    let mut total = 0.0;
    for leaf in 0..leaves {
        let mut acc = 0.0;
        for j in from..steps {
            let anc = driver.ancestor(steps, leaf, j);
            acc += la::quad_form(n, x.at(j, anc), weights.running.at(j, anc), x.at(j, anc)) * dt;
        }
        acc += la::quad_form(
            n,
            x.at(steps, leaf),
            &weights.terminal[leaf * n * n..(leaf + 1) * n * n],
            x.at(steps, leaf),
        );
        total += acc * wl;
    }
    total
}

/// First-order pairing between the diffusion-displacement derivative and
/// `X1`, which must vanish faster than the spike width: the quantity
/// `E ∫ [dsigma_x(T,s)' pi(s) + sum_{t>s} dsigma_x(t,s)' Z(t,s) dt]' X1(s) ds`
/// divided by `eps`, for a spike of the given width.
pub fn cross_pairing_estimate(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    experiment: &SpikeExperiment,
    driver: &NoiseDriver,
) -> Result<f64> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let grid = *driver.grid();
    let var = solve_variational(spec, xbar, ubar, experiment, driver)?;
    let mut jac_e = vec![0.0; n * n];
    let mut jac_b = vec![0.0; n * n];
    let mut acc_vec = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut total = 0.0;
    for s_idx in experiment.tau_index..experiment.end_index() {
        let s = grid.time(s_idx);
        let w = driver.scenario_weight(s_idx);
        let mut lev = 0.0;
        for v in 0..driver.scenarios_at(s_idx) {
            let x = xbar.at(s_idx, v);
            acc_vec.fill(0.0);
            // dsigma_x(T, s)' pi(s)
            (spec.diffusion.dx)(
                grid.horizon(),
                s,
                x,
                var.spiked_control.at(s_idx, v),
                &mut jac_e,
            );
            (spec.diffusion.dx)(grid.horizon(), s, x, ubar.at(s_idx, v), &mut jac_b);
            for k in 0..n * n {
                jac_e[k] -= jac_b[k];
            }
            la::mat_tvec(n, n, &jac_e, adj.pi.at(s_idx, v), &mut tmp);
            for d in 0..n {
                acc_vec[d] += tmp[d];
            }
            // sum_{t > s} dsigma_x(t, s)' Z(t, s) dt
            for t_idx in (s_idx + 1)..steps {
                let t = grid.time(t_idx);
                (spec.diffusion.dx)(t, s, x, var.spiked_control.at(s_idx, v), &mut jac_e);
                (spec.diffusion.dx)(t, s, x, ubar.at(s_idx, v), &mut jac_b);
                for k in 0..n * n {
                    jac_e[k] -= jac_b[k];
                }
                la::mat_tvec(n, n, &jac_e, adj.z.at(t_idx, s_idx, v), &mut tmp);
                for d in 0..n {
                    acc_vec[d] += tmp[d] * dt;
                }
            }
            lev += la::dot(&acc_vec, var.x1.at(s_idx, v));
        }
        total += lev * w * dt;
    }
    Ok(total / experiment.epsilon(driver))
}
