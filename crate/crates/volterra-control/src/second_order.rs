//! Second-order adjoint machinery.
//!
//! The quadratic functional that replaces the classical second-order
//! adjoint equation is
//!
//! ```text
//! F(tau) = E_tau[ ∫_tau^T X(s)' Q(s) X(s) ds + X(T)' G X(T) ],
//! X(t)  = dsigma(t, tau) + ∫_tau^t b_x(t,s) X(s) ds + ∫_tau^t sigma_x(t,s) X(s) dW(s),
//! ```
//!
//! with weights `Q = H_xx` along the reference pair and `G = h_xx(X(T))`,
//! and `dsigma` the diffusion displacement of a spike value.  The
//! operator-valued representations of this functional are never
//! materialised; everything the maximum conditions need is recovered from
//! evaluated quadratic and bilinear forms:
//!
//! * [`f1_bilinear`] — the general bilinear form with paired forcing
//!   `(alpha_1, alpha_2(.))` and a separate terminal object;
//! * [`f2_bilinear`] / [`b3_matrix`] — the constant-initial-value form and
//!   the matrix process assembled from its unit-vector evaluations, which
//!   is the usable second-order adjoint when the displacement does not
//!   depend on its first time argument;
//! * [`solve_second_order_bsde`] / [`j_bilinear_sde`] — the classical
//!   second-order adjoint of the time-independent (SDE) case, used as a
//!   machine-precision cross-check of the degeneration.

use crate::adjoint::{hessian_at, FirstOrderAdjoint};
use crate::driver::{DriverKind, NoiseDriver};
use crate::error::{Error, Result};
use crate::la;
use crate::problem::ProblemSpec;
use crate::process::AdaptedProcess;
use crate::solver::{solve_linear_svie, LinearSvieInput};

/// Diffusion displacement of a spike value `u` at time `tau`:
/// `dsigma(t_i, tau) = sigma(t_i, tau, X(tau), u) - sigma(t_i, tau, X(tau), u_bar(tau))`
/// for all `i >= tau`, per scenario at level `tau`.
#[derive(Debug, Clone)]
pub struct SpikeDirection {
    pub tau_index: usize,
    pub dim: usize,
    /// `values[i - tau_index]` is a flat buffer over scenarios at `tau`.
    pub values: Vec<Vec<f64>>,
}

impl SpikeDirection {
    pub fn at(&self, t_index: usize, scenario_at_tau: usize) -> &[f64] {
        let d = self.dim;
        &self.values[t_index - self.tau_index][scenario_at_tau * d..(scenario_at_tau + 1) * d]
    }

    /// Max displacement between `dsigma(t_i, tau)` and the terminal slice;
    /// zero exactly when the direction is constant in its first argument.
    pub fn time_variation(&self) -> f64 {
        let last = self.values.last().expect("nonempty");
        self.values
            .iter()
            .flat_map(|row| row.iter().zip(last).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, lambda: f64) -> SpikeDirection {
        SpikeDirection {
            tau_index: self.tau_index,
            dim: self.dim,
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|v| v * lambda).collect())
                .collect(),
        }
    }
}

/// Builds the spike direction for the control point `u`.
pub fn spike_direction(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    tau_index: usize,
    u: &[f64],
    driver: &NoiseDriver,
) -> SpikeDirection {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let count = driver.scenarios_at(tau_index);
    let s = driver.grid().time(tau_index);
    let mut values = Vec::with_capacity(steps - tau_index + 1);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in tau_index..=steps {
        let t = driver.grid().time(i);
        let mut row = vec![0.0; count * n];
        for v in 0..count {
            let x = xbar.at(tau_index, v);
            (spec.diffusion.value)(t, s, x, u, &mut a);
            (spec.diffusion.value)(t, s, x, ubar.at(tau_index, v), &mut b);
            for d in 0..n {
                row[v * n + d] = a[d] - b[d];
            }
        }
        values.push(row);
    }
    SpikeDirection {
        tau_index,
        dim: n,
        values,
    }
}

/// Weights of the quadratic functional: the running weight is the
/// Hamiltonian Hessian along the reference pair, the terminal weight the
/// terminal-cost Hessian per leaf.
#[derive(Clone)]
pub struct QuadraticWeights {
    pub dim: usize,
    /// `n x n` per scenario, levels `0..N-1` meaningful.
    pub running: AdaptedProcess,
    /// `n x n` per leaf.
    pub terminal: Vec<f64>,
}

impl QuadraticWeights {
    /// Deterministic weights replicated over scenarios.
    pub fn constant(driver: &NoiseDriver, q: &[f64], g: &[f64], dim: usize) -> Self {
        let steps = driver.grid().steps();
        let mut running =
            AdaptedProcess::zeros(*driver.grid(), dim * dim, &driver.level_sizes(steps));
        for i in 0..steps {
            for v in 0..driver.scenarios_at(i) {
                running.at_mut(i, v).copy_from_slice(q);
            }
        }
        let leaves = driver.scenarios_at(steps);
        let mut terminal = vec![0.0; leaves * dim * dim];
        for v in 0..leaves {
            terminal[v * dim * dim..(v + 1) * dim * dim].copy_from_slice(g);
        }
        QuadraticWeights {
            dim,
            running,
            terminal,
        }
    }

    /// Conditional size `M(tau) = sqrt(E_tau ∫ |Q|^2 ds) + sqrt(E_tau |G|^2)`
    /// per scenario at `tau` (Frobenius norms); the second-order forms are
    /// bounded by a constant multiple of it.
    pub fn conditional_size(&self, driver: &NoiseDriver, tau_index: usize) -> Vec<f64> {
        let steps = driver.grid().steps();
        let dt = driver.grid().dt();
        let nn = self.dim * self.dim;
        let leaves = driver.scenarios_at(steps);
        let mut qsq = vec![0.0; leaves];
        let mut gsq = vec![0.0; leaves];
        for leaf in 0..leaves {
            let mut acc = 0.0;
            for j in tau_index..steps {
                let anc = driver.ancestor(steps, leaf, j);
                let q = self.running.at(j, anc);
                acc += q.iter().map(|v| v * v).sum::<f64>() * dt;
            }
            qsq[leaf] = acc;
            gsq[leaf] = self.terminal[leaf * nn..(leaf + 1) * nn]
                .iter()
                .map(|v| v * v)
                .sum();
        }
        let eq = driver.cond_expect(&qsq, 1, steps, tau_index).values;
        let eg = driver.cond_expect(&gsq, 1, steps, tau_index).values;
        eq.iter().zip(&eg).map(|(a, b)| a.sqrt() + b.sqrt()).collect()
    }
}

/// Builds the quadratic weights of the maximum conditions from a solved
/// first-order adjoint.
pub fn build_weights(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> QuadraticWeights {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let mut running = AdaptedProcess::zeros(*driver.grid(), n * n, &driver.level_sizes(steps));
    for i in 0..steps {
        for v in 0..driver.scenarios_at(i) {
            hessian_at(spec, adj, xbar, ubar, i, v, driver, running.at_mut(i, v));
        }
    }
    let leaves = driver.scenarios_at(steps);
    let mut terminal = vec![0.0; leaves * n * n];
    for v in 0..leaves {
        (spec.terminal_cost.hess)(xbar.at(steps, v), &mut terminal[v * n * n..(v + 1) * n * n]);
    }
    QuadraticWeights {
        dim: n,
        running,
        terminal,
    }
}

/// Weights built from the cost Hessians alone, valid whenever the
/// coefficient Hessians vanish (dynamics linear in the state); avoids the
/// adjoint solve that the general construction needs.
pub fn cost_hessian_weights(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> QuadraticWeights {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let mut running = AdaptedProcess::zeros(*driver.grid(), n * n, &driver.level_sizes(steps));
    for i in 0..steps {
        let t = driver.grid().time(i);
        for v in 0..driver.scenarios_at(i) {
            (spec.running_cost.hess_x)(t, xbar.at(i, v), ubar.at(i, v), running.at_mut(i, v));
        }
    }
    let leaves = driver.scenarios_at(steps);
    let mut terminal = vec![0.0; leaves * n * n];
    for v in 0..leaves {
        (spec.terminal_cost.hess)(xbar.at(steps, v), &mut terminal[v * n * n..(v + 1) * n * n]);
    }
    QuadraticWeights {
        dim: n,
        running,
        terminal,
    }
}

/// True when the coefficient Hessians vanish at sampled points along the
/// reference pair (so [`cost_hessian_weights`] is exact).
pub fn has_linear_state_dynamics(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> bool {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let mut hess = vec![0.0; n * n * n];
    for j in (0..steps).step_by(1 + steps / 8) {
        let s = driver.grid().time(j);
        for &i in &[j + 1, steps] {
            let t = driver.grid().time(i.min(steps));
            for v in 0..driver.scenarios_at(j).min(2) {
                (spec.drift.dxx)(t, s, xbar.at(j, v), ubar.at(j, v), &mut hess);
                if hess.iter().any(|h| h.abs() > 1e-13) {
                    return false;
                }
                (spec.diffusion.dxx)(t, s, xbar.at(j, v), ubar.at(j, v), &mut hess);
                if hess.iter().any(|h| h.abs() > 1e-13) {
                    return false;
                }
            }
        }
    }
    true
}

/// Two-time kernels of a linear SVIE, boxed per call site.
pub struct CoefKernels<'a> {
    pub a: Box<dyn Fn(usize, usize, usize, &mut [f64]) + 'a>,
    pub b: Box<dyn Fn(usize, usize, usize, &mut [f64]) + 'a>,
}

/// Linearisation kernels `b_x(t_i, t_j)`, `sigma_x(t_i, t_j)` along a
/// reference pair.
pub fn linearized_kernels<'a>(
    spec: &'a ProblemSpec,
    xbar: &'a AdaptedProcess,
    ubar: &'a AdaptedProcess,
    driver: &'a NoiseDriver,
) -> CoefKernels<'a> {
    let grid = *driver.grid();
    CoefKernels {
        a: Box::new(move |i, j, v, out| {
            (spec.drift.dx)(grid.time(i), grid.time(j), xbar.at(j, v), ubar.at(j, v), out)
        }),
        b: Box::new(move |i, j, v, out| {
            (spec.diffusion.dx)(grid.time(i), grid.time(j), xbar.at(j, v), ubar.at(j, v), out)
        }),
    }
}

/// Zero kernels (for state-independent dynamics).
pub fn zero_kernels<'a>(dim: usize) -> CoefKernels<'a> {
    let _ = dim;
    CoefKernels {
        a: Box::new(|_, _, _, out| out.fill(0.0)),
        b: Box::new(|_, _, _, out| out.fill(0.0)),
    }
}

/// Kernels built from one-time (SDE-case) coefficient evaluators: the
/// first time index is ignored.
pub fn sde_kernels<'a>(
    beta: &'a (dyn Fn(usize, usize, &mut [f64]) + 'a),
    sigma: &'a (dyn Fn(usize, usize, &mut [f64]) + 'a),
) -> CoefKernels<'a> {
    CoefKernels {
        a: Box::new(move |_i, j, v, out| beta(j, v, out)),
        b: Box::new(move |_i, j, v, out| sigma(j, v, out)),
    }
}

/// Conditional quadratic aggregate
/// `E_tau[ sum_{j>=tau} xa(t_j)' Q(t_j) xb(t_j) dt + term_a' G term_b ]`
/// per scenario at `tau`.
fn conditional_quadratic(
    driver: &NoiseDriver,
    weights: &QuadraticWeights,
    tau_index: usize,
    xa: &AdaptedProcess,
    term_a: &[f64],
    xb: &AdaptedProcess,
    term_b: &[f64],
) -> Vec<f64> {
    let n = weights.dim;
    let nn = n * n;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let leaves = driver.scenarios_at(steps);
    let mut agg = vec![0.0; leaves];
    for leaf in 0..leaves {
        let mut acc = 0.0;
        for j in tau_index..steps {
            let anc = driver.ancestor(steps, leaf, j);
            acc += la::quad_form(n, xa.at(j, anc), weights.running.at(j, anc), xb.at(j, anc))
                * dt;
        }
        acc += la::quad_form(
            n,
            &term_a[leaf * n..(leaf + 1) * n],
            &weights.terminal[leaf * nn..(leaf + 1) * nn],
            &term_b[leaf * n..(leaf + 1) * n],
        );
        agg[leaf] = acc;
    }
    driver.cond_expect(&agg, 1, steps, tau_index).values
}

/// The quadratic functional of a spike direction, per scenario at `tau`.
///
/// Solves the displacement dynamics forced by `dsigma(., tau)` with the
/// supplied linearisation kernels and returns the conditional quadratic
/// aggregate against the weights.
pub fn f_quadratic(
    weights: &QuadraticWeights,
    kernels: &CoefKernels<'_>,
    direction: &SpikeDirection,
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let n = weights.dim;
    let tau = direction.tau_index;
    let forcing = |i: usize, v: usize, out: &mut [f64]| {
        out.copy_from_slice(direction.at(i, driver.ancestor(i, v, tau)));
    };
    let input = LinearSvieInput {
        dim: n,
        start_index: tau,
        a: &kernels.a,
        b: &kernels.b,
        forcing: &forcing,
        stochastic_forcing: None,
        terminal_shift: None,
    };
    let sol = solve_linear_svie(&input, driver)?;
    let steps = driver.grid().steps();
    let term = sol.process.level(steps).to_vec();
    Ok(conditional_quadratic(
        driver,
        weights,
        tau,
        &sol.process,
        &term,
        &sol.process,
        &term,
    ))
}

/// Paired forcing `(alpha_1, alpha_2(.))` of the general bilinear form:
/// `alpha_2` drives the path, `alpha_1` replaces the forcing in the
/// separate terminal object.  Both may depend on the scenario at `tau`.
pub struct PairedForcing<'a> {
    /// `alpha_1` per scenario at `tau`.
    pub terminal: &'a (dyn Fn(usize, &mut [f64]) + 'a),
    /// `alpha_2(t_i)` per scenario at `tau`.
    pub path: &'a (dyn Fn(usize, usize, &mut [f64]) + 'a),
}

fn solve_paired(
    dim: usize,
    tau: usize,
    kernels: &CoefKernels<'_>,
    alpha: &PairedForcing<'_>,
    driver: &NoiseDriver,
) -> Result<(AdaptedProcess, Vec<f64>)> {
    let forcing = |i: usize, v: usize, out: &mut [f64]| {
        (alpha.path)(i, driver.ancestor(i, v, tau), out)
    };
    let terminal = |v: usize, out: &mut [f64]| (alpha.terminal)(v, out);
    let input = LinearSvieInput {
        dim,
        start_index: tau,
        a: &kernels.a,
        b: &kernels.b,
        forcing: &forcing,
        stochastic_forcing: None,
        terminal_shift: Some(&terminal),
    };
    let sol = solve_linear_svie(&input, driver)?;
    let term = sol.terminal.expect("terminal shift requested");
    Ok((sol.process, term))
}

/// General bilinear form with paired forcings, per scenario at `tau`:
/// `f1(alpha, beta) = E_tau[ ∫ X^alpha' Q X^beta ds + T^alpha' G T^beta ]`
/// where `T` are the separate terminal objects.
pub fn f1_bilinear(
    weights: &QuadraticWeights,
    kernels: &CoefKernels<'_>,
    tau_index: usize,
    alpha: &PairedForcing<'_>,
    beta: &PairedForcing<'_>,
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let n = weights.dim;
    let (xa, ta) = solve_paired(n, tau_index, kernels, alpha, driver)?;
    let (xb, tb) = solve_paired(n, tau_index, kernels, beta, driver)?;
    Ok(conditional_quadratic(
        driver, weights, tau_index, &xa, &ta, &xb, &tb,
    ))
}

/// Constant-initial-value bilinear form, per scenario at `tau`:
/// the forcing is a fixed vector (possibly scenario-dependent at `tau`)
/// and the terminal pairing uses the path value at `T` itself.
pub fn f2_bilinear(
    weights: &QuadraticWeights,
    kernels: &CoefKernels<'_>,
    tau_index: usize,
    a1: &dyn Fn(usize, &mut [f64]),
    a2: &dyn Fn(usize, &mut [f64]),
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let n = weights.dim;
    let steps = driver.grid().steps();
    let solve = |a: &dyn Fn(usize, &mut [f64])| -> Result<AdaptedProcess> {
        let forcing = |i: usize, v: usize, out: &mut [f64]| {
            a(driver.ancestor(i, v, tau_index), out)
        };
        let input = LinearSvieInput {
            dim: n,
            start_index: tau_index,
            a: &kernels.a,
            b: &kernels.b,
            forcing: &forcing,
            stochastic_forcing: None,
            terminal_shift: None,
        };
        Ok(solve_linear_svie(&input, driver)?.process)
    };
    let xa = solve(a1)?;
    let xb = solve(a2)?;
    let ta = xa.level(steps).to_vec();
    let tb = xb.level(steps).to_vec();
    Ok(conditional_quadratic(
        driver, weights, tau_index, &xa, &ta, &xb, &tb,
    ))
}

/// The matrix process at `tau` assembled from unit-vector evaluations of
/// the constant-initial-value form, together with its conditional bound.
#[derive(Debug, Clone)]
pub struct MatrixAtTau {
    pub tau_index: usize,
    pub dim: usize,
    /// Row-major `n x n` per scenario at `tau`.
    pub values: Vec<f64>,
    /// `M(tau)` per scenario (the conditional weight size).
    pub bound: Vec<f64>,
}

impl MatrixAtTau {
    pub fn at(&self, scenario: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        &self.values[scenario * nn..(scenario + 1) * nn]
    }

    /// Largest ratio `|B(tau)| / M(tau)` over scenarios.
    pub fn bound_ratio(&self) -> f64 {
        let nn = self.dim * self.dim;
        let mut worst = 0.0f64;
        for v in 0..self.bound.len() {
            let norm = la::frobenius(&self.values[v * nn..(v + 1) * nn]);
            if self.bound[v] > 0.0 {
                worst = worst.max(norm / self.bound[v]);
            }
        }
        worst
    }
}

/// Entry `(i, j)` is `f2(e_i, e_j)` at `tau`; the `n` forward basis solves
/// are shared across entries.
pub fn b3_matrix(
    weights: &QuadraticWeights,
    kernels: &CoefKernels<'_>,
    tau_index: usize,
    driver: &NoiseDriver,
) -> Result<MatrixAtTau> {
    let n = weights.dim;
    let steps = driver.grid().steps();
    let mut basis = Vec::with_capacity(n);
    for c in 0..n {
        let forcing = move |_i: usize, _v: usize, out: &mut [f64]| {
            out.fill(0.0);
            out[c] = 1.0;
        };
        let input = LinearSvieInput {
            dim: n,
            start_index: tau_index,
            a: &kernels.a,
            b: &kernels.b,
            forcing: &forcing,
            stochastic_forcing: None,
            terminal_shift: None,
        };
        basis.push(solve_linear_svie(&input, driver)?.process);
    }
    let count = driver.scenarios_at(tau_index);
    let mut values = vec![0.0; count * n * n];
    for i in 0..n {
        let ti = basis[i].level(steps).to_vec();
        for j in 0..n {
            let tj = basis[j].level(steps).to_vec();
            let e = conditional_quadratic(
                driver, weights, tau_index, &basis[i], &ti, &basis[j], &tj,
            );
            for v in 0..count {
                values[v * n * n + i * n + j] = e[v];
            }
        }
    }
    let bound = weights.conditional_size(driver, tau_index);
    Ok(MatrixAtTau {
        tau_index,
        dim: n,
        values,
        bound,
    })
}

/// Classical second-order adjoint pair `(P, Lambda)` for time-independent
/// coefficients, by exact backward induction on the tree.
///
/// The recursion conditions the full one-step quadratic transition,
/// `P(t_i) = E_i[ Phi' P(t_{i+1}) Phi ] + Q(t_i) dt` with
/// `Phi = I + beta dt + sigma dW`, whose expansion to first order in `dt`
/// is the usual backward drift
/// `beta'P + P beta + sigma'Lambda + Lambda sigma + sigma'P sigma + Q`;
/// keeping the full transition makes the pair agree with the quadratic
/// aggregates of [`f2_bilinear`] to machine precision on the tree.
/// `Lambda` is the martingale-difference coefficient of `P`.
///
/// ```
/// use volterra_control::second_order::{solve_second_order_bsde, QuadraticWeights};
/// use volterra_control::{NoiseDriver, TimeGrid};
///
/// let driver = NoiseDriver::tree(TimeGrid::new(1.0, 5).unwrap()).unwrap();
/// // No linearisation, constant weights: P(t) = G + Q (T - t).
/// let weights = QuadraticWeights::constant(&driver, &[0.7], &[1.2], 1);
/// let zero = |_: usize, _: usize, out: &mut [f64]| out[0] = 0.0;
/// let (p, _) = solve_second_order_bsde(&zero, &zero, &weights, &driver).unwrap();
/// let t = driver.grid().time(2);
/// assert!((p.at(2, 0)[0] - (1.2 + 0.7 * (1.0 - t))).abs() < 1e-13);
/// ```
pub fn solve_second_order_bsde(
    beta: &dyn Fn(usize, usize, &mut [f64]),
    sigma: &dyn Fn(usize, usize, &mut [f64]),
    weights: &QuadraticWeights,
    driver: &NoiseDriver,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    if driver.kind() != DriverKind::Tree {
        return Err(Error::invalid(
            "second-order backward induction requires the tree backend",
        ));
    }
    let n = weights.dim;
    let nn = n * n;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let sq = dt.sqrt();
    let sizes = driver.level_sizes(steps);
    let mut p = AdaptedProcess::zeros(*driver.grid(), nn, &sizes);
    let mut lambda = AdaptedProcess::zeros(*driver.grid(), nn, &sizes);
    p.set_level(steps, weights.terminal.clone());
    let mut b = vec![0.0; nn];
    let mut s = vec![0.0; nn];
    let mut phi = vec![0.0; nn];
    let mut tmp = vec![0.0; nn];
    for i in (0..steps).rev() {
        for v in 0..driver.scenarios_at(i) {
            beta(i, v, &mut b);
            sigma(i, v, &mut s);
            let mut acc = vec![0.0; nn];
            for (child, sign) in [(2 * v, -1.0), (2 * v + 1, 1.0)] {
                // Phi = I + beta dt + sigma * sign * sqrt(dt)
                for r in 0..n {
                    for c in 0..n {
                        phi[r * n + c] = b[r * n + c] * dt + s[r * n + c] * sign * sq;
                    }
                    phi[r * n + r] += 1.0;
                }
                let pc = p.at(i + 1, child);
                // tmp = P_child * Phi; acc += Phi' * tmp / 2
                for r in 0..n {
                    for c in 0..n {
                        let mut x = 0.0;
                        for k in 0..n {
                            x += pc[r * n + k] * phi[k * n + c];
                        }
                        tmp[r * n + c] = x;
                    }
                }
                for r in 0..n {
                    for c in 0..n {
                        let mut x = 0.0;
                        for k in 0..n {
                            x += phi[k * n + r] * tmp[k * n + c];
                        }
                        acc[r * n + c] += 0.5 * x;
                    }
                }
            }
            let q = weights.running.at(i, v);
            for k in 0..nn {
                acc[k] += q[k] * dt;
            }
            p.at_mut(i, v).copy_from_slice(&acc);
            let up = p.at(i + 1, 2 * v + 1).to_vec();
            let dn = p.at(i + 1, 2 * v).to_vec();
            let lam = lambda.at_mut(i, v);
            for k in 0..nn {
                lam[k] = (up[k] - dn[k]) / (2.0 * sq);
            }
        }
    }
    Ok((p, lambda))
}

/// SDE-case bilinear form per scenario at `tau`: both arguments propagate
/// through the same time-independent linear dynamics and the conditional
/// quadratic aggregate is returned.  Coincides with `xi_1' P(tau) xi_2` on
/// the tree.
pub fn j_bilinear_sde(
    beta: &dyn Fn(usize, usize, &mut [f64]),
    sigma: &dyn Fn(usize, usize, &mut [f64]),
    weights: &QuadraticWeights,
    tau_index: usize,
    xi1: &dyn Fn(usize, &mut [f64]),
    xi2: &dyn Fn(usize, &mut [f64]),
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let kernels = sde_kernels(beta, sigma);
    f2_bilinear(weights, &kernels, tau_index, xi1, xi2, driver)
}

/// Closed-form quadratic term for state-independent dynamics:
/// `dsigma(T,t)' E_t[G] dsigma(T,t) + sum_{j>=t} dsigma(t_j,t)' E_t[Q(t_j)] dsigma(t_j,t) dt`.
///
/// Fails unless the state derivatives of both coefficients vanish along
/// the reference pair.
pub fn b_state_independent(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    weights: &QuadraticWeights,
    direction: &SpikeDirection,
    driver: &NoiseDriver,
) -> Result<Vec<f64>> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let tau = direction.tau_index;
    // Precondition: x-free coefficients along the path.
    let mut jac = vec![0.0; n * n];
    for j in 0..steps {
        let s = driver.grid().time(j);
        for &i in &[j + 1, steps] {
            let t = driver.grid().time(i);
            for v in 0..driver.scenarios_at(j).min(4) {
                (spec.drift.dx)(t, s, xbar.at(j, v), ubar.at(j, v), &mut jac);
                let bnorm = la::frobenius(&jac);
                (spec.diffusion.dx)(t, s, xbar.at(j, v), ubar.at(j, v), &mut jac);
                if bnorm > 1e-12 || la::frobenius(&jac) > 1e-12 {
                    return Err(Error::invalid(
                        "state-independent closed form requires x-free drift and diffusion",
                    ));
                }
            }
        }
    }
    let nn = n * n;
    let count = driver.scenarios_at(tau);
    // E_tau of the running weights and the terminal weight.
    let e_g = driver.cond_expect(&weights.terminal, nn, steps, tau).values;
    let mut out = vec![0.0; count];
    for j in tau..steps {
        let e_q = driver
            .cond_expect(weights.running.level(j), nn, j.max(tau), tau)
            .values;
        for v in 0..count {
            let d = direction.at(j, v);
            out[v] += la::quad_form(n, d, &e_q[v * nn..(v + 1) * nn], d) * dt;
        }
    }
    for v in 0..count {
        let d = direction.at(steps, v);
        out[v] += la::quad_form(n, d, &e_g[v * nn..(v + 1) * nn], d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::problem::{Coefficient, ControlSet, InitialTerm, RunningCost, TerminalCost};
    use crate::solver::constant_control;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn tree(n: usize) -> NoiseDriver {
        NoiseDriver::tree(TimeGrid::new(1.0, n).unwrap()).unwrap()
    }

    fn scalar_weights(driver: &NoiseDriver, q: f64, g: f64) -> QuadraticWeights {
        QuadraticWeights::constant(driver, &[q], &[g], 1)
    }

    fn plain_spec(diffusion: Coefficient) -> ProblemSpec {
        ProblemSpec {
            state_dim: 1,
            control_dim: 1,
            phi: InitialTerm::constant(vec![0.5]),
            drift: Coefficient::zero(),
            diffusion,
            terminal_cost: TerminalCost::zero(),
            running_cost: RunningCost::zero(),
            control_set: ControlSet::All { dim: 1 },
        }
    }

    #[test]
    fn direction_vanishes_at_reference_control() {
        let driver = tree(3);
        let spec = plain_spec(Coefficient {
            value: Arc::new(|_, _, _, u, out| out[0] = 0.4 * u[0]),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        });
        let u = constant_control(&driver, &[0.7]);
        let x = constant_control(&driver, &[0.5]);
        let dir = spike_direction(&spec, &x, &u, 1, &[0.7], &driver);
        for row in &dir.values {
            assert!(row.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn split_diffusion_gives_time_constant_direction() {
        // sigma = sigma_1(t,s,x) + sigma_2(s,x,u): the displacement drops
        // the t-dependent part.
        let driver = tree(3);
        let spec = plain_spec(Coefficient {
            value: Arc::new(|t, s, x, u, out| {
                out[0] = 0.3 * (1.0 + t - s) * x[0] + 0.4 * u[0] + 0.1 * s
            }),
            dx: Arc::new(|t, s, _, _, out| out[0] = 0.3 * (1.0 + t - s)),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        });
        let u = constant_control(&driver, &[0.2]);
        let x = constant_control(&driver, &[0.5]);
        let dir = spike_direction(&spec, &x, &u, 1, &[0.9], &driver);
        assert!(dir.time_variation() < 1e-15);
        assert!((dir.at(2, 0)[0] - 0.4 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn epidemic_direction_is_scaled_recovery_cdf() {
        // For the epidemic model the displacement is
        // -F2(t - tau) (u - ubar(tau)) with F2 the grid-rule CDF.
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let driver = NoiseDriver::tree(grid).unwrap();
        let params = crate::epidemic::EpidemicParams {
            x0: 1.0,
            m1: Arc::new(|_| 1.0),
            m2: Arc::new(|_| 0.8),
            a: Arc::new(|_| 1.0),
            g1: crate::epidemic::CostTerm::quadratic(1.0),
            g2: crate::epidemic::CostTerm::quadratic(0.5),
            control_set: ControlSet::Box {
                lower: vec![0.0],
                upper: vec![1.0],
            },
        };
        let spec = crate::epidemic::epidemic_scenario(&params, &grid).unwrap();
        let ubar = constant_control(&driver, &[0.3]);
        let xbar = constant_control(&driver, &[1.0]);
        let tau = 1usize;
        let dir = spike_direction(&spec, &xbar, &ubar, tau, &[1.0], &driver);
        for i in tau..=4 {
            // Constant density 0.8: F2(r) = 0.8 r on grid multiples.
            let f2 = 0.8 * (grid.time(i) - grid.time(tau));
            let expect = -f2 * (1.0 - 0.3);
            for v in 0..driver.scenarios_at(tau) {
                assert!((dir.at(i, v)[0] - expect).abs() < 1e-14, "i={i}");
            }
        }
    }

    #[test]
    fn quadratic_functional_trivial_values() {
        let driver = tree(3);
        let weights = scalar_weights(&driver, 0.0, 1.0);
        let kernels = zero_kernels(1);
        // Constant direction v: F = v^2 (G = 1, no propagation).
        let dir = SpikeDirection {
            tau_index: 1,
            dim: 1,
            values: vec![vec![0.7; 2], vec![0.7; 2], vec![0.7; 2]],
        };
        let f = f_quadratic(&weights, &kernels, &dir, &driver).unwrap();
        for v in f {
            assert!((v - 0.49).abs() < 1e-14);
        }
        let zero = SpikeDirection {
            tau_index: 1,
            dim: 1,
            values: vec![vec![0.0; 2]; 3],
        };
        let f0 = f_quadratic(&weights, &kernels, &zero, &driver).unwrap();
        assert!(f0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_functional_hand_enumeration() {
        // N=2, tau=0, b_x=0, sigma_x=1, dsigma=1, G=1, Q=0: the displaced
        // path is X(t0)=1, X(t1)=1±s, X(T)=1+dW0+X(t1) dW1 with s=sqrt(dt).
        let driver = tree(2);
        let s = driver.grid().dt().sqrt();
        let weights = scalar_weights(&driver, 0.0, 1.0);
        let one = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 1.0;
        let zero = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 0.0;
        let kernels = CoefKernels {
            a: Box::new(zero),
            b: Box::new(one),
        };
        let dir = SpikeDirection {
            tau_index: 0,
            dim: 1,
            values: vec![vec![1.0], vec![1.0], vec![1.0]],
        };
        let f = f_quadratic(&weights, &kernels, &dir, &driver).unwrap();
        let leaves = [
            (1.0 - s) * (1.0 - s), // down, down
            1.0 - s * s,           // down, up
            1.0 - s * s,           // up, down
            (1.0 + s) * (1.0 + s), // up, up
        ];
        let expect: f64 = leaves.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!((f[0] - expect).abs() < 1e-14, "{} vs {expect}", f[0]);
    }

    #[test]
    fn quadratic_scaling_is_exact() {
        let driver = tree(4);
        let weights = scalar_weights(&driver, 0.8, 1.3);
        let a = |i: usize, j: usize, _: usize, out: &mut [f64]| {
            out[0] = -0.3 * (i - j) as f64 * 0.25
        };
        let b = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 0.45;
        let kernels = CoefKernels {
            a: Box::new(a),
            b: Box::new(b),
        };
        let dir = SpikeDirection {
            tau_index: 1,
            dim: 1,
            values: (1..=4)
                .map(|i| (0..2).map(|v| 0.2 * i as f64 + 0.1 * v as f64).collect())
                .collect(),
        };
        let f1v = f_quadratic(&weights, &kernels, &dir, &driver).unwrap();
        let fsc = f_quadratic(&weights, &kernels, &dir.scaled(3.0), &driver).unwrap();
        for (a, b) in f1v.iter().zip(&fsc) {
            assert!((b - 9.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn f2_trivial_inner_product() {
        let driver = tree(3);
        let weights = scalar_weights(&driver, 0.0, 1.0);
        let kernels = zero_kernels(1);
        let a1 = |_: usize, out: &mut [f64]| out[0] = 0.6;
        let a2 = |_: usize, out: &mut [f64]| out[0] = -1.1;
        let f = f2_bilinear(&weights, &kernels, 1, &a1, &a2, &driver).unwrap();
        for v in f {
            assert!((v - (0.6 * -1.1)).abs() < 1e-14);
        }
        let zero = |_: usize, out: &mut [f64]| out[0] = 0.0;
        let f0 = f2_bilinear(&weights, &kernels, 1, &a1, &zero, &driver).unwrap();
        assert!(f0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn f2_polarization_identity() {
        let driver = tree(4);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q: f64 = rng.gen_range(0.0..1.5);
            let g: f64 = rng.gen_range(0.0..1.5);
            let ak: f64 = rng.gen_range(-0.8..0.8);
            let bk: f64 = rng.gen_range(-0.8..0.8);
            let weights = scalar_weights(&driver, q, g);
            let a = move |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = ak;
            let b = move |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = bk;
            let kernels = CoefKernels {
                a: Box::new(a),
                b: Box::new(b),
            };
            let x1: f64 = rng.gen_range(-1.0..1.0);
            let x2: f64 = rng.gen_range(-1.0..1.0);
            let tau = rng.gen_range(0..4);
            let v1 = move |_: usize, out: &mut [f64]| out[0] = x1;
            let v2 = move |_: usize, out: &mut [f64]| out[0] = x2;
            let vp = move |_: usize, out: &mut [f64]| out[0] = x1 + x2;
            let vm = move |_: usize, out: &mut [f64]| out[0] = x1 - x2;
            let f12 = f2_bilinear(&weights, &kernels, tau, &v1, &v2, &driver).unwrap();
            let fp = f2_bilinear(&weights, &kernels, tau, &vp, &vp, &driver).unwrap();
            let fm = f2_bilinear(&weights, &kernels, tau, &vm, &vm, &driver).unwrap();
            for i in 0..f12.len() {
                let pol = 0.25 * (fp[i] - fm[i]);
                assert!((f12[i] - pol).abs() < 1e-12, "{} vs {pol}", f12[i]);
            }
        }
    }

    #[test]
    fn f1_symmetry_and_unit_case() {
        let driver = tree(3);
        let weights = scalar_weights(&driver, 0.0, 1.0);
        let kernels = zero_kernels(1);
        // alpha = (e1, 0): terminal object is e1, path solution zero.
        let e1 = |_: usize, out: &mut [f64]| out[0] = 1.0;
        let zero_path = |_: usize, _: usize, out: &mut [f64]| out[0] = 0.0;
        let alpha = PairedForcing {
            terminal: &e1,
            path: &zero_path,
        };
        let f = f1_bilinear(&weights, &kernels, 1, &alpha, &alpha, &driver).unwrap();
        for v in f {
            assert!((v - 1.0).abs() < 1e-14);
        }

        // Symmetry on random paired forcings with symmetric weights.
        let driver = tree(4);
        let weights = scalar_weights(&driver, 0.7, 0.9);
        let a = |i: usize, j: usize, _: usize, out: &mut [f64]| {
            out[0] = 0.2 - 0.1 * (i - j) as f64 * 0.25
        };
        let b = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 0.35;
        let kernels = CoefKernels {
            a: Box::new(a),
            b: Box::new(b),
        };
        let t1 = |v: usize, out: &mut [f64]| out[0] = 0.3 + 0.1 * v as f64;
        let p1 = |i: usize, v: usize, out: &mut [f64]| out[0] = 0.1 * i as f64 - 0.05 * v as f64;
        let t2 = |v: usize, out: &mut [f64]| out[0] = -0.2 + 0.07 * v as f64;
        let p2 = |i: usize, _: usize, out: &mut [f64]| out[0] = (i as f64 * 0.7).cos() * 0.2;
        let alpha = PairedForcing {
            terminal: &t1,
            path: &p1,
        };
        let beta = PairedForcing {
            terminal: &t2,
            path: &p2,
        };
        let fab = f1_bilinear(&weights, &kernels, 1, &alpha, &beta, &driver).unwrap();
        let fba = f1_bilinear(&weights, &kernels, 1, &beta, &alpha, &driver).unwrap();
        for (x, y) in fab.iter().zip(&fba) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_hand_enumeration_with_diffusion_kernel() {
        // n=1, N=2, A=0, B=1, alpha = beta = (0, constant 1), Q=0, G=1:
        // X(t0)=1, X(t1)=1+dW0, terminal object = 0 + ∫ B X dW.
        let driver = tree(2);
        let s = driver.grid().dt().sqrt();
        let weights = scalar_weights(&driver, 0.0, 1.0);
        let one = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 1.0;
        let zero = |_: usize, _: usize, _: usize, out: &mut [f64]| out[0] = 0.0;
        let kernels = CoefKernels {
            a: Box::new(zero),
            b: Box::new(one),
        };
        let term = |_: usize, out: &mut [f64]| out[0] = 0.0;
        let path = |_: usize, _: usize, out: &mut [f64]| out[0] = 1.0;
        let alpha = PairedForcing {
            terminal: &term,
            path: &path,
        };
        let f = f1_bilinear(&weights, &kernels, 0, &alpha, &alpha, &driver).unwrap();
        // Terminal object per leaf: X(t0) dW0 + X(t1) dW1 with X(t1)=1±s.
        let hand: f64 = [
            (-s) + (1.0 - s) * (-s),
            (-s) + (1.0 - s) * s,
            s + (1.0 + s) * (-s),
            s + (1.0 + s) * s,
        ]
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
            / 4.0;
        assert!((f[0] - hand).abs() < 1e-14, "{} vs {hand}", f[0]);
    }

    #[test]
    fn b3_identity_case_and_symmetry() {
        let driver = tree(3);
        let weights = QuadraticWeights::constant(
            &driver,
            &[0.0, 0.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0, 1.0],
            2,
        );
        let kernels = zero_kernels(2);
        let b3 = b3_matrix(&weights, &kernels, 1, &driver).unwrap();
        for v in 0..driver.scenarios_at(1) {
            let m = b3.at(v);
            assert!((m[0] - 1.0).abs() < 1e-14);
            assert!((m[3] - 1.0).abs() < 1e-14);
            assert!(m[1].abs() < 1e-14 && m[2].abs() < 1e-14);
        }

        // Symmetric weights give a symmetric matrix with nonzero kernels.
        let weights = QuadraticWeights::constant(
            &driver,
            &[0.6, 0.1, 0.1, 0.9],
            &[1.0, 0.2, 0.2, 0.8],
            2,
        );
        let a = |_: usize, _: usize, _: usize, out: &mut [f64]| {
            out.copy_from_slice(&[-0.2, 0.1, 0.0, -0.3])
        };
        let bk = |_: usize, _: usize, _: usize, out: &mut [f64]| {
            out.copy_from_slice(&[0.25, 0.0, 0.1, 0.2])
        };
        let kernels = CoefKernels {
            a: Box::new(a),
            b: Box::new(bk),
        };
        let b3 = b3_matrix(&weights, &kernels, 0, &driver).unwrap();
        let m = b3.at(0);
        assert!((m[1] - m[2]).abs() < 1e-12);
        assert!(b3.bound_ratio().is_finite());
    }

    #[test]
    fn second_order_backward_closed_forms() {
        let driver = tree(5);
        let dt = driver.grid().dt();
        // b_x = sigma_x = 0, deterministic Q, G: P(t) = G + Q (T - t).
        let weights = scalar_weights(&driver, 0.7, 1.2);
        let zero = |_: usize, _: usize, out: &mut [f64]| out[0] = 0.0;
        let (p, lambda) = solve_second_order_bsde(&zero, &zero, &weights, &driver).unwrap();
        for i in 0..=5usize {
            let t = driver.grid().time(i);
            for v in 0..driver.scenarios_at(i) {
                assert!((p.at(i, v)[0] - (1.2 + 0.7 * (1.0 - t))).abs() < 1e-13);
            }
        }
        for i in 0..5usize {
            for v in 0..driver.scenarios_at(i) {
                assert_eq!(lambda.at(i, v)[0], 0.0);
            }
        }

        // Zero weights: P = 0.
        let weights0 = scalar_weights(&driver, 0.0, 0.0);
        let (p0, _) = solve_second_order_bsde(&zero, &zero, &weights0, &driver).unwrap();
        assert!(p0.level(0).iter().all(|v| *v == 0.0));

        // Scalar drift a, no diffusion, Q = 0: P(t) = G * prod (1 + a dt)^2.
        let a = 0.4;
        let beta = move |_: usize, _: usize, out: &mut [f64]| out[0] = a;
        let weights_g = scalar_weights(&driver, 0.0, 2.0);
        let (pg, _) = solve_second_order_bsde(&beta, &zero, &weights_g, &driver).unwrap();
        for i in 0..=5usize {
            let expect = 2.0 * (1.0 + a * dt).powi(2 * (5 - i) as i32);
            assert!((pg.at(i, 0)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn j_bilinear_matches_second_order_pair() {
        // Random one-time coefficients and random per-node arguments: the
        // bilinear aggregate must equal xi_1' P(tau) xi_2 exactly.
        let driver = tree(4);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let betas: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let sigmas: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let beta = {
            let betas = betas.clone();
            move |i: usize, _: usize, out: &mut [f64]| out[0] = betas[i]
        };
        let sigma = {
            let sigmas = sigmas.clone();
            move |i: usize, _: usize, out: &mut [f64]| out[0] = sigmas[i]
        };
        let weights = scalar_weights(&driver, 0.9, 1.4);
        let (p, _) = solve_second_order_bsde(&beta, &sigma, &weights, &driver).unwrap();
        for tau in 0..4usize {
            let count = driver.scenarios_at(tau);
            let x1: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xi1 = |v: usize, out: &mut [f64]| out[0] = x1[v];
            let xi2 = |v: usize, out: &mut [f64]| out[0] = x2[v];
            let j = j_bilinear_sde(&beta, &sigma, &weights, tau, &xi1, &xi2, &driver).unwrap();
            for v in 0..count {
                let expect = x1[v] * p.at(tau, v)[0] * x2[v];
                assert!(
                    (j[v] - expect).abs() < 1e-12,
                    "tau={tau} v={v}: {} vs {expect}",
                    j[v]
                );
            }
            // xi_2 = 0 gives zero.
            let zero = |_: usize, out: &mut [f64]| out[0] = 0.0;
            let j0 = j_bilinear_sde(&beta, &sigma, &weights, tau, &xi1, &zero, &driver).unwrap();
            assert!(j0.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn state_independent_closed_form_matches_quadratic_functional() {
        // x-free sigma with genuine t-dependence in the displacement.
        let driver = tree(4);
        let spec = plain_spec(Coefficient {
            value: Arc::new(|t, s, _, u, out| out[0] = (0.3 + 0.2 * (t - s)) * u[0]),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        });
        let ubar = constant_control(&driver, &[0.4]);
        let xbar = constant_control(&driver, &[0.0]);
        let weights = scalar_weights(&driver, 0.8, 1.1);
        for tau in 0..4usize {
            let dir = spike_direction(&spec, &xbar, &ubar, tau, &[1.0], &driver);
            let closed =
                b_state_independent(&spec, &xbar, &ubar, &weights, &dir, &driver).unwrap();
            let kernels = zero_kernels(1);
            let full = f_quadratic(&weights, &kernels, &dir, &driver).unwrap();
            for (a, b) in closed.iter().zip(&full) {
                assert!((a - b).abs() < 1e-13, "tau={tau}: {a} vs {b}");
            }
        }
        // Zero direction gives zero.
        let dir0 = spike_direction(&spec, &xbar, &ubar, 1, &[0.4], &driver);
        let z = b_state_independent(&spec, &xbar, &ubar, &weights, &dir0, &driver).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn state_independent_rejects_state_dependence() {
        let driver = tree(3);
        let spec = plain_spec(Coefficient {
            value: Arc::new(|_, _, x, u, out| out[0] = 0.2 * x[0] + 0.4 * u[0]),
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.2),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: None,
        });
        let ubar = constant_control(&driver, &[0.4]);
        let xbar = constant_control(&driver, &[0.0]);
        let weights = scalar_weights(&driver, 1.0, 1.0);
        let dir = spike_direction(&spec, &xbar, &ubar, 1, &[1.0], &driver);
        assert!(matches!(
            b_state_independent(&spec, &xbar, &ubar, &weights, &dir, &driver),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn representation_matches_matrix_for_constant_directions() {
        // When the displacement is constant in its first argument, the
        // quadratic functional factors through the matrix process.
        let driver = tree(4);
        let weights = scalar_weights(&driver, 0.6, 1.2);
        let a = |i: usize, j: usize, _: usize, out: &mut [f64]| {
            out[0] = -0.25 + 0.05 * (i - j) as f64
        };
        let b = |_: usize, j: usize, _: usize, out: &mut [f64]| out[0] = 0.3 + 0.02 * j as f64;
        let kernels = CoefKernels {
            a: Box::new(a),
            b: Box::new(b),
        };
        for tau in 0..4usize {
            let count = driver.scenarios_at(tau);
            let vals: Vec<f64> = (0..count).map(|v| 0.5 + 0.1 * v as f64).collect();
            let dir = SpikeDirection {
                tau_index: tau,
                dim: 1,
                values: (tau..=4).map(|_| vals.clone()).collect(),
            };
            let f = f_quadratic(&weights, &kernels, &dir, &driver).unwrap();
            let b3 = b3_matrix(&weights, &kernels, tau, &driver).unwrap();
            for v in 0..count {
                let expect = vals[v] * b3.at(v)[0] * vals[v];
                assert!((f[v] - expect).abs() < 1e-12, "tau={tau} v={v}");
            }
        }
    }

    #[test]
    fn f1_bound_by_conditional_weight_size() {
        let driver = tree(4);
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let mut ratios: Vec<f64> = Vec::new();
        for _ in 0..15 {
            let weights = scalar_weights(
                &driver,
                rng.gen_range(0.1..1.2),
                rng.gen_range(0.1..1.2),
            );
            let ak: f64 = rng.gen_range(-0.5..0.5);
            let bk: f64 = rng.gen_range(-0.5..0.5);
            let kernels = CoefKernels {
                a: Box::new(move |_, _, _, out: &mut [f64]| out[0] = ak),
                b: Box::new(move |_, _, _, out: &mut [f64]| out[0] = bk),
            };
            let tau = rng.gen_range(0..4);
            let t1: f64 = rng.gen_range(-1.0..1.0);
            let p1: f64 = rng.gen_range(-1.0..1.0);
            let t2: f64 = rng.gen_range(-1.0..1.0);
            let p2: f64 = rng.gen_range(-1.0..1.0);
            let alpha = PairedForcing {
                terminal: &move |_: usize, out: &mut [f64]| out[0] = t1,
                path: &move |_: usize, _: usize, out: &mut [f64]| out[0] = p1,
            };
            let beta = PairedForcing {
                terminal: &move |_: usize, out: &mut [f64]| out[0] = t2,
                path: &move |_: usize, _: usize, out: &mut [f64]| out[0] = p2,
            };
            let f = f1_bilinear(&weights, &kernels, tau, &alpha, &beta, &driver).unwrap();
            let m = weights.conditional_size(&driver, tau);
            let na = (t1 * t1 + p1 * p1).sqrt().max(1e-9);
            let nb = (t2 * t2 + p2 * p2).sqrt().max(1e-9);
            for (fv, mv) in f.iter().zip(&m) {
                ratios.push(fv.abs() / (mv * na * nb));
            }
        }
        let worst = ratios.iter().cloned().fold(0.0, f64::max);
        // The empirical constant stays modest across all draws.
        assert!(worst < 10.0, "worst ratio {worst}");
    }
}
