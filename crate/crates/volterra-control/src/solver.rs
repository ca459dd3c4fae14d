//! Forward Euler scheme for controlled and linear SVIEs.
//!
//! Both solvers use left-point evaluation in the `ds` and `dW` sums, which
//! keeps every computed value adapted.  Because the kernels depend on the
//! outer time, the whole history is re-evaluated at every step (the memory
//! effect): the scheme is
//!
//! ```text
//! X(t_i) = phi(t_i) + sum_{j<i} b(t_i, t_j, X(t_j), u(t_j)) dt
//!                   + sum_{j<i} sigma(t_i, t_j, X(t_j), u(t_j)) dW_j
//! ```
//!
//! per scenario, at O(N^2) cost per path.

use crate::driver::NoiseDriver;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::process::AdaptedProcess;

/// Evaluates a two-time `n x n` kernel at `(t_index, s_index, scenario)`
/// where `scenario` lives at level `s_index`.
pub type KernelEval<'a> = &'a (dyn Fn(usize, usize, usize, &mut [f64]) + 'a);
/// Evaluates an adapted forcing at `(t_index, scenario at t_index)`.
pub type ForcingEval<'a> = &'a (dyn Fn(usize, usize, &mut [f64]) + 'a);
/// Evaluates a vector value per scenario at a fixed level.
pub type ScenarioEval<'a> = &'a (dyn Fn(usize, &mut [f64]) + 'a);

/// Data of a linear SVIE with general forcing,
/// `X(t) = psi(t) + ∫_tau^t A(t,s) X(s) ds + ∫_tau^t [B(t,s) X(s) + g(t,s)] dW(s)`.
pub struct LinearSvieInput<'a> {
    pub dim: usize,
    /// Start index `tau`; the solution vanishes on earlier levels.
    pub start_index: usize,
    pub a: KernelEval<'a>,
    pub b: KernelEval<'a>,
    pub forcing: ForcingEval<'a>,
    /// Extra integrand added inside the `dW` sum (an `n`-vector `g(t_i, t_j)`
    /// measurable at `t_j`).
    pub stochastic_forcing: Option<KernelEval<'a>>,
    /// Separate terminal forcing `alpha_1` (per scenario at `start_index`).
    /// When present, the terminal object uses `alpha_1` in place of
    /// `psi(T)`; it is reported separately from the path values because the
    /// path forcing need not be meaningful at the terminal time.
    pub terminal_shift: Option<ScenarioEval<'a>>,
}

/// Solution of a linear SVIE plus the optional separate terminal object.
pub struct LinearSvieSolution {
    pub process: AdaptedProcess,
    /// Terminal values per scenario at the last level when a terminal shift
    /// was supplied.
    pub terminal: Option<Vec<f64>>,
}

fn check_finite(buf: &[f64], i: usize, j: usize, what: &str) -> Result<()> {
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            t_index: i,
            s_index: j,
            message: format!("{what} evaluated to a non-finite value"),
        });
    }
    Ok(())
}

/// Solves the controlled SVIE of a [`ProblemSpec`] under the adapted control
/// `u`.
///
/// ```
/// use std::sync::Arc;
/// use volterra_control::problem::{
///     Coefficient, ControlSet, InitialTerm, ProblemSpec, RunningCost, TerminalCost,
/// };
/// use volterra_control::solver::{constant_control, solve_svie};
/// use volterra_control::{NoiseDriver, TimeGrid};
///
/// // X(t) = 1 - ∫_0^t (t - s) X(s) ds: a convolution kernel remembers the
/// // whole trajectory, so the state oscillates instead of decaying.
/// let spec = ProblemSpec {
///     state_dim: 1,
///     control_dim: 1,
///     phi: InitialTerm::constant(vec![1.0]),
///     drift: Coefficient {
///         value: Arc::new(|t, s, x, _, out| out[0] = -(t - s) * x[0]),
///         dx: Arc::new(|t, s, _, _, out| out[0] = -(t - s)),
///         dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
///         du: None,
///     },
///     diffusion: Coefficient::zero(),
///     terminal_cost: TerminalCost::zero(),
///     running_cost: RunningCost::zero(),
///     control_set: ControlSet::All { dim: 1 },
/// };
/// let grid = TimeGrid::new(1.0, 32).unwrap();
/// let driver = NoiseDriver::monte_carlo(grid, 1, 0, 0).unwrap();
/// let u = constant_control(&driver, &[0.0]);
/// let x = solve_svie(&spec, &u, &driver).unwrap();
/// // The exact solution is cos(t); at T = 1 the scheme lands nearby.
/// assert!((x.at(32, 0)[0] - 1.0f64.cos()).abs() < 0.02);
/// ```
pub fn solve_svie(
    spec: &ProblemSpec,
    u: &AdaptedProcess,
    driver: &NoiseDriver,
) -> Result<AdaptedProcess> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let mut x = AdaptedProcess::zeros(*driver.grid(), n, &driver.level_sizes(steps));
    let mut coef = vec![0.0; n];
    for i in 0..=steps {
        let t = driver.grid().time(i);
        for v in 0..driver.scenarios_at(i) {
            let mut acc = vec![0.0; n];
            spec.phi.write(t, i, v, &mut acc);
            for j in 0..i {
                let anc = driver.ancestor(i, v, j);
                let dw = driver.increment_on_path(i, v, j);
                let s = driver.grid().time(j);
                let xj = x.at(j, anc);
                let uj = u.at(j, anc);
                (spec.drift.value)(t, s, xj, uj, &mut coef);
                check_finite(&coef, i, j, "drift")?;
                for d in 0..n {
                    acc[d] += coef[d] * dt;
                }
                (spec.diffusion.value)(t, s, xj, uj, &mut coef);
                check_finite(&coef, i, j, "diffusion")?;
                for d in 0..n {
                    acc[d] += coef[d] * dw;
                }
            }
            x.at_mut(i, v).copy_from_slice(&acc);
        }
    }
    Ok(x)
}

/// Solves a linear SVIE with general forcing (the workhorse of the
/// variational and adjoint computations).
pub fn solve_linear_svie(
    input: &LinearSvieInput<'_>,
    driver: &NoiseDriver,
) -> Result<LinearSvieSolution> {
    let n = input.dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let tau = input.start_index;
    if tau > steps {
        return Err(Error::invalid(format!(
            "start index {tau} beyond grid with {steps} steps"
        )));
    }
    let mut x = AdaptedProcess::zeros(*driver.grid(), n, &driver.level_sizes(steps));
    let mut mat = vec![0.0; n * n];
    let mut gbuf = vec![0.0; n];
    for i in tau..=steps {
        for v in 0..driver.scenarios_at(i) {
            let mut acc = vec![0.0; n];
            (input.forcing)(i, v, &mut acc);
            check_finite(&acc, i, i, "forcing")?;
            for j in tau..i {
                let anc = driver.ancestor(i, v, j);
                let dw = driver.increment_on_path(i, v, j);
                let xj = x.at(j, anc);
                (input.a)(i, j, anc, &mut mat);
                check_finite(&mat, i, j, "A kernel")?;
                for r in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += mat[r * n + c] * xj[c];
                    }
                    acc[r] += s * dt;
                }
                (input.b)(i, j, anc, &mut mat);
                check_finite(&mat, i, j, "B kernel")?;
                for r in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += mat[r * n + c] * xj[c];
                    }
                    acc[r] += s * dw;
                }
                if let Some(g) = input.stochastic_forcing {
                    g(i, j, anc, &mut gbuf);
                    check_finite(&gbuf, i, j, "stochastic forcing")?;
                    for r in 0..n {
                        acc[r] += gbuf[r] * dw;
                    }
                }
            }
            x.at_mut(i, v).copy_from_slice(&acc);
        }
    }
    let terminal = match input.terminal_shift {
        None => None,
        Some(alpha) => {
            let leaves = driver.scenarios_at(steps);
            let mut term = vec![0.0; leaves * n];
            let mut psi = vec![0.0; n];
            let mut a1 = vec![0.0; n];
            for v in 0..leaves {
                (input.forcing)(steps, v, &mut psi);
                alpha(driver.ancestor(steps, v, tau), &mut a1);
                let xt = x.at(steps, v);
                for d in 0..n {
                    term[v * n + d] = xt[d] - psi[d] + a1[d];
                }
            }
            Some(term)
        }
    };
    Ok(LinearSvieSolution {
        process: x,
        terminal,
    })
}

/// Discretised cost `J(u) = E[ h(X(T)) + sum_i l(t_i, X_i, u_i) dt ]`.
pub fn eval_cost(
    spec: &ProblemSpec,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
    driver: &NoiseDriver,
) -> f64 {
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let mut total = 0.0;
    for i in 0..steps {
        let t = driver.grid().time(i);
        let count = driver.scenarios_at(i);
        let w = driver.scenario_weight(i);
        let mut level = 0.0;
        for v in 0..count {
            level += (spec.running_cost.value)(t, x.at(i, v), u.at(i, v));
        }
        total += level * w * dt;
    }
    let leaves = driver.scenarios_at(steps);
    let w = driver.scenario_weight(steps);
    let mut terminal = 0.0;
    for v in 0..leaves {
        terminal += (spec.terminal_cost.value)(x.at(steps, v));
    }
    total + terminal * w
}

/// A constant control process on the driver's grid.
pub fn constant_control(driver: &NoiseDriver, value: &[f64]) -> AdaptedProcess {
    let steps = driver.grid().steps();
    let mut u = AdaptedProcess::zeros(*driver.grid(), value.len(), &driver.level_sizes(steps));
    for i in 0..=steps {
        for v in 0..driver.scenarios_at(i) {
            u.at_mut(i, v).copy_from_slice(value);
        }
    }
    u
}

/// Empirical two-sided check of the second-moment stability estimates.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// `sup_t E |X(t)|^2` for the base problem.
    pub sup_second_moment: f64,
    /// Discretised right-hand bracket of the a-priori bound.
    pub apriori_bracket: f64,
    /// Ratio of the two (empirical stability constant for the bound).
    pub apriori_ratio: f64,
    /// `sup_t E |X_1(t) - X_2(t)|^2` between the two problems.
    pub sup_difference: f64,
    /// Discretised right-hand bracket of the continuity estimate.
    pub continuity_bracket: f64,
    pub continuity_ratio: f64,
}

/// Solves both problems under the same control and evaluates the two sides
/// of the discretised second-moment estimates (`p = 2`).  The reported
/// ratios are monotonic evidence for stability, not a proof.
pub fn stability_check(
    spec: &ProblemSpec,
    perturbed: &ProblemSpec,
    u: &AdaptedProcess,
    driver: &NoiseDriver,
) -> Result<StabilityReport> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let x1 = solve_svie(spec, u, driver)?;
    let x2 = solve_svie(perturbed, u, driver)?;

    let sup_e = |p: &AdaptedProcess| -> f64 {
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
    };
    let sup_second_moment = sup_e(&x1);

    // A-priori bracket: sup E|phi|^2 + sup_i E sum_j |b(t_i,t_j,0,u_j)|^2 dt
    // + the same sum for sigma.
    let zero = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut sup_phi = 0.0f64;
    let mut sup_b = 0.0f64;
    let mut sup_s = 0.0f64;
    for i in 0..=steps {
        let t = driver.grid().time(i);
        let w = driver.scenario_weight(i);
        let mut e_phi = 0.0;
        let mut e_b = 0.0;
        let mut e_s = 0.0;
        for v in 0..driver.scenarios_at(i) {
            spec.phi.write(t, i, v, &mut buf);
            e_phi += buf.iter().map(|a| a * a).sum::<f64>();
            let mut acc_b = 0.0;
            let mut acc_s = 0.0;
            for j in 0..i {
                let anc = driver.ancestor(i, v, j);
                let s = driver.grid().time(j);
                (spec.drift.value)(t, s, &zero, u.at(j, anc), &mut buf);
                acc_b += buf.iter().map(|a| a * a).sum::<f64>() * dt;
                (spec.diffusion.value)(t, s, &zero, u.at(j, anc), &mut buf);
                acc_s += buf.iter().map(|a| a * a).sum::<f64>() * dt;
            }
            e_b += acc_b;
            e_s += acc_s;
        }
        sup_phi = sup_phi.max(e_phi * w);
        sup_b = sup_b.max(e_b * w);
        sup_s = sup_s.max(e_s * w);
    }
    let apriori_bracket = sup_phi + sup_b + sup_s;

    // Continuity bracket between the two coefficient sets, evaluated along
    // the second solution.
    let mut sup_diff = 0.0f64;
    let mut sup_dphi = 0.0f64;
    let mut sup_db = 0.0f64;
    let mut sup_ds = 0.0f64;
    let mut buf2 = vec![0.0; n];
    for i in 0..=steps {
        let t = driver.grid().time(i);
        let w = driver.scenario_weight(i);
        let mut e_diff = 0.0;
        let mut e_dphi = 0.0;
        let mut e_db = 0.0;
        let mut e_ds = 0.0;
        for v in 0..driver.scenarios_at(i) {
            let d2: f64 = x1
                .at(i, v)
                .iter()
                .zip(x2.at(i, v))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            e_diff += d2;
            spec.phi.write(t, i, v, &mut buf);
            perturbed.phi.write(t, i, v, &mut buf2);
            e_dphi += buf
                .iter()
                .zip(&buf2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            let mut acc_b = 0.0;
            let mut acc_s = 0.0;
            for j in 0..i {
                let anc = driver.ancestor(i, v, j);
                let s = driver.grid().time(j);
                let xj = x2.at(j, anc);
                let uj = u.at(j, anc);
                (spec.drift.value)(t, s, xj, uj, &mut buf);
                (perturbed.drift.value)(t, s, xj, uj, &mut buf2);
                let db: f64 = buf
                    .iter()
                    .zip(&buf2)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                acc_b += db * dt;
                (spec.diffusion.value)(t, s, xj, uj, &mut buf);
                (perturbed.diffusion.value)(t, s, xj, uj, &mut buf2);
                let ds: f64 = buf
                    .iter()
                    .zip(&buf2)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                acc_s += ds * dt;
            }
            e_db += acc_b * acc_b;
            e_ds += acc_s;
        }
        sup_diff = sup_diff.max(e_diff * w);
        sup_dphi = sup_dphi.max(e_dphi * w);
        sup_db = sup_db.max(e_db * w);
        sup_ds = sup_ds.max(e_ds * w);
    }
    let continuity_bracket = sup_dphi + sup_db + sup_ds;

    let ratio = |lhs: f64, rhs: f64| if lhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok(StabilityReport {
        sup_second_moment,
        apriori_bracket,
        apriori_ratio: ratio(sup_second_moment, apriori_bracket),
        sup_difference: sup_diff,
        continuity_bracket,
        continuity_ratio: ratio(sup_diff, continuity_bracket),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::problem::{Coefficient, ControlSet, InitialTerm, RunningCost, TerminalCost};
    use std::sync::Arc;

    fn spec_with(drift: Coefficient, diffusion: Coefficient, phi: InitialTerm) -> ProblemSpec {
        ProblemSpec {
            state_dim: 1,
            control_dim: 1,
            phi,
            drift,
            diffusion,
            terminal_cost: TerminalCost::zero(),
            running_cost: RunningCost::zero(),
            control_set: ControlSet::All { dim: 1 },
        }
    }

    fn tree(n: usize) -> NoiseDriver {
        NoiseDriver::tree(TimeGrid::new(1.0, n).unwrap()).unwrap()
    }

    #[test]
    fn zero_coefficients_reproduce_phi() {
        let driver = tree(4);
        let phi = InitialTerm::Deterministic(Arc::new(|t, out| out[0] = 1.0 + t * t));
        let spec = spec_with(Coefficient::zero(), Coefficient::zero(), phi);
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        for i in 0..=4usize {
            let t = driver.grid().time(i);
            for v in 0..driver.scenarios_at(i) {
                assert_eq!(x.at(i, v)[0], 1.0 + t * t);
            }
        }
    }

    #[test]
    fn unit_drift_integrates_time() {
        let driver = tree(4);
        let drift = Coefficient {
            value: Arc::new(|_, _, _, _, out| out[0] = 1.0),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        let spec = spec_with(drift, Coefficient::zero(), InitialTerm::constant(vec![0.0]));
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        for i in 0..=4usize {
            let t = driver.grid().time(i);
            assert!((x.at(i, 0)[0] - t).abs() < 1e-15);
        }
    }

    /// Independent fine-grid quadrature oracle for the deterministic
    /// convolution-kernel equation X(t) = x0 - ∫ (t-s) X(s) ds.
    fn convolution_oracle(x0: f64, t_end: f64, steps: usize) -> f64 {
        let dt = t_end / steps as f64;
        let mut x = vec![x0; steps + 1];
        for i in 1..=steps {
            let t = i as f64 * dt;
            let mut acc = x0;
            for j in 0..i {
                let s = j as f64 * dt;
                acc -= (t - s) * x[j] * dt;
            }
            x[i] = acc;
        }
        x[steps]
    }

    fn convolution_spec() -> ProblemSpec {
        let drift = Coefficient {
            value: Arc::new(|t, s, x, _, out| out[0] = -(t - s) * x[0]),
            dx: Arc::new(|t, s, _, _, out| out[0] = -(t - s)),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        spec_with(drift, Coefficient::zero(), InitialTerm::constant(vec![1.0]))
    }

    #[test]
    fn convolution_kernel_matches_fine_grid_oracle() {
        // Deterministic problem: a single Monte Carlo path suffices.
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let driver = NoiseDriver::monte_carlo(grid, 1, 1, 0).unwrap();
        let spec = convolution_spec();
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        let got = x.at(64, 0)[0];
        let oracle = convolution_oracle(1.0, 1.0, 640);
        let rel = (got - oracle).abs() / oracle.abs();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn convolution_kernel_error_is_first_order() {
        let spec = convolution_spec();
        let reference = convolution_oracle(1.0, 1.0, 6400);
        let mut errors = Vec::new();
        for steps in [32usize, 64] {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let driver = NoiseDriver::monte_carlo(grid, 1, 1, 0).unwrap();
            let u = constant_control(&driver, &[0.0]);
            let x = solve_svie(&spec, &u, &driver).unwrap();
            errors.push((x.at(steps, 0)[0] - reference).abs());
        }
        let ratio = errors[0] / errors[1];
        assert!(
            (1.6..=2.4).contains(&ratio),
            "halving ratio {ratio}, errors {errors:?}"
        );
    }

    #[test]
    fn linear_svie_identity_forcing() {
        let driver = tree(3);
        let zero_kernel = |_: usize, _: usize, _: usize, out: &mut [f64]| out.fill(0.0);
        let forcing = |i: usize, _: usize, out: &mut [f64]| out[0] = i as f64;
        let input = LinearSvieInput {
            dim: 1,
            start_index: 0,
            a: &zero_kernel,
            b: &zero_kernel,
            forcing: &forcing,
            stochastic_forcing: None,
            terminal_shift: None,
        };
        let sol = solve_linear_svie(&input, &driver).unwrap();
        for i in 0..=3usize {
            for v in 0..driver.scenarios_at(i) {
                assert_eq!(sol.process.at(i, v)[0], i as f64);
            }
        }
    }

    #[test]
    fn linear_svie_single_step_hand_enumeration() {
        // psi = 1, A = 0, B = 1, N = 1: X(T) = 1 ± sqrt(dt).
        let driver = tree(1);
        let s = driver.grid().dt().sqrt();
        let zero_kernel = |_: usize, _: usize, _: usize, out: &mut [f64]| out.fill(0.0);
        let one_kernel = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 1.0;
        let forcing = |_: usize, _: usize, out: &mut [f64]| out[0] = 1.0;
        let input = LinearSvieInput {
            dim: 1,
            start_index: 0,
            a: &zero_kernel,
            b: &one_kernel,
            forcing: &forcing,
            stochastic_forcing: None,
            terminal_shift: None,
        };
        let sol = solve_linear_svie(&input, &driver).unwrap();
        assert!((sol.process.at(1, 0)[0] - (1.0 - s)).abs() < 1e-15);
        assert!((sol.process.at(1, 1)[0] - (1.0 + s)).abs() < 1e-15);
    }

    #[test]
    fn terminal_shift_replaces_forcing() {
        let driver = tree(2);
        let zero_kernel = |_: usize, _: usize, _: usize, out: &mut [f64]| out.fill(0.0);
        let forcing = |_: usize, _: usize, out: &mut [f64]| out[0] = 0.0;
        let alpha = |_: usize, out: &mut [f64]| out[0] = 7.5;
        let input = LinearSvieInput {
            dim: 1,
            start_index: 0,
            a: &zero_kernel,
            b: &zero_kernel,
            forcing: &forcing,
            stochastic_forcing: None,
            terminal_shift: Some(&alpha),
        };
        let sol = solve_linear_svie(&input, &driver).unwrap();
        for v in 0..4usize {
            assert_eq!(sol.process.at(2, v)[0], 0.0);
        }
        assert_eq!(sol.terminal.unwrap(), vec![7.5; 4]);
    }

    #[test]
    fn linear_svie_is_linear_in_forcing() {
        let driver = tree(4);
        let a_kernel = |i: usize, j: usize, _: usize, out: &mut [f64]| {
            out[0] = -0.4 * (i as f64 - j as f64) * 0.25
        };
        let b_kernel = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 0.3;
        let f1 = |i: usize, _: usize, out: &mut [f64]| out[0] = (i as f64).sin();
        let f2 = |i: usize, v: usize, out: &mut [f64]| out[0] = (i + v) as f64 * 0.1;
        let fsum = |i: usize, v: usize, out: &mut [f64]| {
            let mut a = [0.0];
            let mut b = [0.0];
            f1(i, v, &mut a);
            f2(i, v, &mut b);
            out[0] = 2.0 * a[0] + b[0];
        };
        let solve = |forcing: &dyn Fn(usize, usize, &mut [f64])| {
            let input = LinearSvieInput {
                dim: 1,
                start_index: 0,
                a: &a_kernel,
                b: &b_kernel,
                forcing,
                stochastic_forcing: None,
                terminal_shift: None,
            };
            solve_linear_svie(&input, &driver).unwrap().process
        };
        let s1 = solve(&f1);
        let s2 = solve(&f2);
        let ssum = solve(&fsum);
        for i in 0..=4usize {
            for v in 0..driver.scenarios_at(i) {
                let expect = 2.0 * s1.at(i, v)[0] + s2.at(i, v)[0];
                assert!((ssum.at(i, v)[0] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svie_degenerates_to_euler_sde() {
        // Time-independent coefficients: the Volterra scheme must coincide
        // with the standard one-step Euler recursion, implemented
        // independently below.
        let driver = tree(6);
        let drift = Coefficient {
            value: Arc::new(|_, s, x, u, out| out[0] = -0.6 * x[0] + 0.2 * u[0] + 0.1 * s),
            dx: Arc::new(|_, _, _, _, out| out[0] = -0.6),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        let diffusion = Coefficient {
            value: Arc::new(|_, _, x, u, out| out[0] = 0.3 * x[0] + 0.5 * u[0]),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.3),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        let spec = spec_with(drift, diffusion, InitialTerm::constant(vec![1.0]));
        let u = constant_control(&driver, &[0.7]);
        let x = solve_svie(&spec, &u, &driver).unwrap();

        let dt = driver.grid().dt();
        let steps = driver.grid().steps();
        for leaf in 0..driver.scenarios_at(steps) {
            let mut y = 1.0;
            for j in 0..steps {
                let s = driver.grid().time(j);
                let dw = driver.increment_on_path(steps, leaf, j);
                let b = -0.6 * y + 0.2 * 0.7 + 0.1 * s;
                let sig = 0.3 * y + 0.5 * 0.7;
                y += b * dt + sig * dw;
            }
            assert!((x.at(steps, leaf)[0] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_of_constant_state() {
        let driver = tree(3);
        let mut spec = spec_with(
            Coefficient::zero(),
            Coefficient::zero(),
            InitialTerm::constant(vec![2.5]),
        );
        spec.terminal_cost = TerminalCost {
            value: Arc::new(|x| x[0]),
            grad: Arc::new(|_, out| out[0] = 1.0),
            hess: Arc::new(|_, out| out[0] = 0.0),
        };
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        assert!((eval_cost(&spec, &x, &u, &driver) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn lq_cost_matches_leaf_enumeration() {
        // N = 2 tree, x-free dynamics driven by sigma = 1, quadratic costs;
        // the four-leaf expansion is done by hand below.
        let driver = tree(2);
        let diffusion = Coefficient {
            value: Arc::new(|_, _, _, _, out| out[0] = 1.0),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        let mut spec = spec_with(
            Coefficient::zero(),
            diffusion,
            InitialTerm::constant(vec![0.0]),
        );
        spec.terminal_cost = TerminalCost {
            value: Arc::new(|x| 0.5 * x[0] * x[0]),
            grad: Arc::new(|x, out| out[0] = x[0]),
            hess: Arc::new(|_, out| out[0] = 1.0),
        };
        spec.running_cost = RunningCost {
            value: Arc::new(|_, x, _| 0.5 * x[0] * x[0]),
            grad_x: Arc::new(|_, x, _, out| out[0] = x[0]),
            hess_x: Arc::new(|_, _, _, out| out[0] = 1.0),
            grad_u: None,
        };
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        let dt = driver.grid().dt();
        // X(t0) = 0, X(t1) = ±sqrt(dt), X(T) = dW0 + dW1 over 4 leaves.
        let mut expect = 0.0;
        expect += 0.5 * 0.0 * dt; // level 0 running cost
        expect += 0.5 * dt * dt; // level 1: E X^2 = dt
        expect += 0.5 * 2.0 * dt; // terminal: E X^2 = 2 dt
        let got = eval_cost(&spec, &x, &u, &driver);
        assert!((got - expect).abs() < 1e-14, "got {got}, expect {expect}");
    }

    #[test]
    fn stability_identical_specs_zero_difference() {
        let driver = tree(4);
        let spec = convolution_spec();
        let u = constant_control(&driver, &[0.0]);
        let report = stability_check(&spec, &spec, &u, &driver).unwrap();
        assert_eq!(report.sup_difference, 0.0);
        assert_eq!(report.continuity_ratio, 0.0);
    }

    #[test]
    fn stability_constant_shift_stable_under_halving() {
        let driver = tree(4);
        let spec = convolution_spec();
        let u = constant_control(&driver, &[0.0]);
        let shifted = |c: f64| {
            let mut s = convolution_spec();
            s.phi = InitialTerm::constant(vec![1.0 + c]);
            s
        };
        let r1 = stability_check(&spec, &shifted(0.2), &u, &driver).unwrap();
        let r2 = stability_check(&spec, &shifted(0.1), &u, &driver).unwrap();
        assert!(r1.continuity_ratio.is_finite() && r1.continuity_ratio > 0.0);
        // Constant K-hat stays of the same order when the shift halves.
        let ratio = r1.continuity_ratio / r2.continuity_ratio;
        assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn homogeneous_scaling_is_exact() {
        // Linear homogeneous dynamics: scaling phi by lambda scales
        // sup E|X|^2 by lambda^2 exactly.
        let driver = tree(4);
        let drift = Coefficient {
            value: Arc::new(|t, s, x, _, out| out[0] = -0.5 * (t - s) * x[0]),
            dx: Arc::new(|t, s, _, _, out| out[0] = -0.5 * (t - s)),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        let diffusion = Coefficient {
            value: Arc::new(|_, _, x, _, out| out[0] = 0.4 * x[0]),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.4),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        };
        let base = spec_with(
            drift.clone(),
            diffusion.clone(),
            InitialTerm::constant(vec![1.0]),
        );
        let scaled = spec_with(drift, diffusion, InitialTerm::constant(vec![3.0]));
        let u = constant_control(&driver, &[0.0]);
        let rb = stability_check(&base, &base, &u, &driver).unwrap();
        let rs = stability_check(&scaled, &scaled, &u, &driver).unwrap();
        assert!((rs.sup_second_moment - 9.0 * rb.sup_second_moment).abs() < 1e-12);
    }
}
