//! First-order adjoint objects.
//!
//! The adjoint pair `(Y, Z)` solves the linear backward SVIE
//!
//! ```text
//! Y(t) = l_x(t)' + b_x(T,t)' h_x(T) + sigma_x(T,t)' pi(t)
//!        + ∫_t^T [ b_x(s,t)' Y(s) + sigma_x(s,t)' Z(s,t) ] ds
//!        - ∫_t^T Z(t,s) dW(s),
//! ```
//!
//! as an M-solution: on `[0, t)` the kernel `Z(t, ·)` is fixed by the
//! martingale representation `Y(t) = E_s Y(t) + ∫_s^t Z(t,r) dW(r)`.
//!
//! `pi` is the integrand of the martingale representation of the terminal
//! cost gradient, `h_x(X(T)) = E[h_x(X(T))] + ∫_0^T pi(s) dW(s)`.  The
//! backward equation references `pi` without defining it; this convention
//! (standard for linear BSVIEs of this form) is adopted throughout and can
//! be replaced by passing a custom integrand to [`solve_with_pi`].
//!
//! Discrete conventions: time sums `∫_t^T` use the interior grid points
//! `j = i+1 .. N-1`; the boundary contribution at `T` is carried by the
//! explicit `b_x(T,t)' h_x(T)` and `sigma_x(T,t)' pi(t)` terms, and the
//! kernel coefficient `Z(t_i, t_j)` multiplies the increment `dW_j`.

use crate::driver::NoiseDriver;
use crate::error::{Error, Result};
use crate::la;
use crate::problem::ProblemSpec;
use crate::process::{AdaptedProcess, TwoTimeProcess};

/// Options for the Picard iteration of the backward equation.
#[derive(Debug, Clone, Copy)]
pub struct AdjointOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl AdjointOptions {
    /// Backend-appropriate defaults: machine-precision fixed point on the
    /// tree, regression-noise tolerance on Monte Carlo.
    pub fn for_driver(driver: &NoiseDriver) -> Self {
        match driver.kind() {
            crate::driver::DriverKind::Tree => AdjointOptions {
                tol: 1e-10,
                max_iter: 200,
            },
            crate::driver::DriverKind::MonteCarlo => AdjointOptions {
                tol: 1e-6,
                max_iter: 200,
            },
        }
    }
}

/// The solved first-order adjoint triple together with conditional caches
/// used by the Hamiltonian evaluations.
pub struct FirstOrderAdjoint {
    /// `Y(t_i)` for `i = 0..N-1` (level `N` is unused).
    pub y: AdaptedProcess,
    /// `Z(t_i, t_j)`, row `i = 0..N-1`, column `j = 0..N-1`; the column
    /// slice is adapted (stored at level `j`).
    pub z: TwoTimeProcess,
    /// Martingale-representation integrand of `h_x(X(T))`, `j = 0..N-1`.
    pub pi: AdaptedProcess,
    /// Terminal cost gradient per leaf.
    pub terminal_grad: Vec<f64>,
    /// Cache `E_t[h_x(X(T))]` at every (level, scenario).
    pub cond_terminal_grad: AdaptedProcess,
    /// Cache row `j`: `E_t[Y(t_j)]` at levels `t <= j`.
    pub cond_y: TwoTimeProcess,
    pub iterations: usize,
    /// Final sup-norm change of the Picard iteration.
    pub residual: f64,
}

/// Martingale-representation integrand of the terminal cost gradient.
///
/// Returns `(pi, h_x(X(T)) per leaf)`; on the tree the extraction is exact.
pub fn compute_pi_bar(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> (AdaptedProcess, Vec<f64>) {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let leaves = driver.scenarios_at(steps);
    let mut hx = vec![0.0; leaves * n];
    for v in 0..leaves {
        (spec.terminal_cost.grad)(xbar.at(steps, v), &mut hx[v * n..(v + 1) * n]);
    }
    let mut pi = AdaptedProcess::zeros(*driver.grid(), n, &driver.level_sizes(steps));
    for j in 0..steps {
        let d = driver.mdiff_from(&hx, n, steps, j);
        pi.set_level(j, d);
    }
    (pi, hx)
}

struct KernelCache {
    /// Per scenario at the base level: `f_x(t_j, t_i)` for all `j` in
    /// `i+1..=N`, evaluated at `(X(t_i), u(t_i))`.  Row-major `n x n`.
    bx: Vec<Vec<f64>>,
    sx: Vec<Vec<f64>>,
}

/// Evaluates the linearisation kernels `b_x(t_j, t_i)`, `sigma_x(t_j, t_i)`
/// for a fixed base level `i`, all scenarios, and all `j > i` plus `j = N`.
fn linearization_at(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
    i: usize,
) -> KernelCache {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let count = driver.scenarios_at(i);
    let s = driver.grid().time(i);
    let mut bx = vec![vec![0.0; (steps + 1) * n * n]; count];
    let mut sx = vec![vec![0.0; (steps + 1) * n * n]; count];
    for v in 0..count {
        let x = xbar.at(i, v);
        let u = ubar.at(i, v);
        for j in (i + 1)..=steps {
            let t = driver.grid().time(j);
            (spec.drift.dx)(t, s, x, u, &mut bx[v][j * n * n..(j + 1) * n * n]);
            (spec.diffusion.dx)(t, s, x, u, &mut sx[v][j * n * n..(j + 1) * n * n]);
        }
    }
    KernelCache { bx, sx }
}

/// Solves the first-order adjoint equation by Picard iteration with the
/// default terminal-gradient integrand.
pub fn solve_first_order_adjoint(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
    opts: &AdjointOptions,
) -> Result<FirstOrderAdjoint> {
    let (pi, hx) = compute_pi_bar(spec, xbar, driver);
    solve_with_pi(spec, xbar, ubar, driver, opts, pi, hx)
}

/// As [`solve_first_order_adjoint`] but with a caller-supplied integrand
/// `pi` (and matching terminal gradient per leaf).
pub fn solve_with_pi(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
    opts: &AdjointOptions,
    pi: AdaptedProcess,
    hx: Vec<f64>,
) -> Result<FirstOrderAdjoint> {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let leaves = driver.scenarios_at(steps);
    let sizes = driver.level_sizes(steps);

    let mut y = AdaptedProcess::zeros(*driver.grid(), n, &sizes);
    let mut z = TwoTimeProcess::zeros(*driver.grid(), n, steps, &sizes);

    // l_x(t_i)' per scenario at level i (fixed data).
    let mut lx = AdaptedProcess::zeros(*driver.grid(), n, &sizes);
    for i in 0..steps {
        let t = driver.grid().time(i);
        for v in 0..driver.scenarios_at(i) {
            (spec.running_cost.grad_x)(t, xbar.at(i, v), ubar.at(i, v), lx.at_mut(i, v));
        }
    }

    let kernels: Vec<KernelCache> = (0..steps)
        .map(|i| linearization_at(spec, xbar, ubar, driver, i))
        .collect();

    let mut residuals = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut y_next = AdaptedProcess::zeros(*driver.grid(), n, &sizes);
        let mut z_next = TwoTimeProcess::zeros(*driver.grid(), n, steps, &sizes);
        for i in 0..steps {
            let cache = &kernels[i];
            // Terminal-measurable aggregate R(t_i) per leaf.
            let mut r = vec![0.0; leaves * n];
            let mut tmp = vec![0.0; n];
            for leaf in 0..leaves {
                let anc_i = driver.ancestor(steps, leaf, i);
                let out = &mut r[leaf * n..(leaf + 1) * n];
                out.copy_from_slice(lx.at(i, anc_i));
                // b_x(T, t_i)' h_x(T)
                la::mat_tvec(
                    n,
                    n,
                    &cache.bx[anc_i][steps * n * n..(steps + 1) * n * n],
                    &hx[leaf * n..(leaf + 1) * n],
                    &mut tmp,
                );
                for d in 0..n {
                    out[d] += tmp[d];
                }
                // sigma_x(T, t_i)' pi(t_i)
                la::mat_tvec(
                    n,
                    n,
                    &cache.sx[anc_i][steps * n * n..(steps + 1) * n * n],
                    pi.at(i, anc_i),
                    &mut tmp,
                );
                for d in 0..n {
                    out[d] += tmp[d];
                }
                for j in (i + 1)..steps {
                    let anc_j = driver.ancestor(steps, leaf, j);
                    la::mat_tvec(
                        n,
                        n,
                        &cache.bx[anc_i][j * n * n..(j + 1) * n * n],
                        y.at(j, anc_j),
                        &mut tmp,
                    );
                    for d in 0..n {
                        out[d] += tmp[d] * dt;
                    }
                    la::mat_tvec(
                        n,
                        n,
                        &cache.sx[anc_i][j * n * n..(j + 1) * n * n],
                        z.at(j, i, anc_i),
                        &mut tmp,
                    );
                    for d in 0..n {
                        out[d] += tmp[d] * dt;
                    }
                }
            }
            // Y(t_i) = E_i[R], Z(t_i, t_j) for j >= i from the aggregate,
            // and for j < i from the martingale extension of Y(t_i).
            let yi = driver.cond_expect(&r, n, steps, i).values;
            for j in i..steps {
                z_next.row_mut(i).set_level(j, driver.mdiff_from(&r, n, steps, j));
            }
            for j in 0..i {
                z_next
                    .row_mut(i)
                    .set_level(j, driver.mdiff_from(&yi, n, i, j));
            }
            y_next.set_level(i, yi);
        }
        let change = y.sup_distance(&y_next).max(z.sup_distance(&z_next));
        residuals.push(change);
        y = y_next;
        z = z_next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::IterationFailure {
            iterations,
            residuals,
        });
    }

    // Conditional caches for the Hamiltonian evaluations.
    let mut cond_terminal_grad = AdaptedProcess::zeros(*driver.grid(), n, &sizes);
    for i in 0..=steps {
        cond_terminal_grad.set_level(i, driver.cond_expect(&hx, n, steps, i).values);
    }
    let mut cond_y = TwoTimeProcess::zeros(*driver.grid(), n, steps, &sizes);
    for j in 0..steps {
        for i in 0..=j {
            let e = driver.cond_expect(y.level(j), n, j, i).values;
            cond_y.row_mut(j).set_level(i, e);
        }
    }

    Ok(FirstOrderAdjoint {
        y,
        z,
        pi,
        terminal_grad: hx,
        cond_terminal_grad,
        cond_y,
        iterations,
        residual: *residuals.last().unwrap_or(&0.0),
    })
}

/// Hamiltonian at one scenario:
///
/// ```text
/// H(t, x, u) = l(t,x,u) + E_t[b(T,t,x,u)' h_x(T)] + sigma(T,t,x,u)' pi(t)
///              + sum_{j>i} b(t_j,t,x,u)' E_t[Y(t_j)] dt
///              + sum_{j>i} sigma(t_j,t,x,u)' Z(t_j,t) dt.
/// ```
///
/// The kernel sum over `Z(t_j, t)` is measurable at `t` by the M-solution
/// structure, so conditioning it would be a no-op; it is left bare exactly
/// as in the backward equation.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_at(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    t_index: usize,
    scenario: usize,
    x: &[f64],
    u: &[f64],
    driver: &NoiseDriver,
) -> f64 {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let t = driver.grid().time(t_index);
    let mut coef = vec![0.0; n];
    let mut total = (spec.running_cost.value)(t, x, u);
    let horizon = driver.grid().horizon();
    (spec.drift.value)(horizon, t, x, u, &mut coef);
    total += la::dot(&coef, adj.cond_terminal_grad.at(t_index, scenario));
    (spec.diffusion.value)(horizon, t, x, u, &mut coef);
    total += la::dot(&coef, adj.pi.at(t_index, scenario));
    for j in (t_index + 1)..steps {
        let tj = driver.grid().time(j);
        (spec.drift.value)(tj, t, x, u, &mut coef);
        total += la::dot(&coef, adj.cond_y.at(j, t_index, scenario)) * dt;
        (spec.diffusion.value)(tj, t, x, u, &mut coef);
        total += la::dot(&coef, adj.z.at(j, t_index, scenario)) * dt;
    }
    total
}

/// `H(t, X(t), u) - H(t, X(t), u_bar(t))` at one scenario.
#[allow(clippy::too_many_arguments)]
pub fn delta_hamiltonian_at(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    scenario: usize,
    u: &[f64],
    driver: &NoiseDriver,
) -> f64 {
    let x = xbar.at(t_index, scenario);
    hamiltonian_at(spec, adj, t_index, scenario, x, u, driver)
        - hamiltonian_at(
            spec,
            adj,
            t_index,
            scenario,
            x,
            ubar.at(t_index, scenario),
            driver,
        )
}

/// Hessian of the Hamiltonian in the state variable along the reference
/// pair: second cost derivative plus the adjoint-weighted coefficient
/// Hessians.  Writes a row-major `n x n` matrix.
#[allow(clippy::too_many_arguments)]
pub fn hessian_at(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    scenario: usize,
    driver: &NoiseDriver,
    out: &mut [f64],
) {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let t = driver.grid().time(t_index);
    let horizon = driver.grid().horizon();
    let x = xbar.at(t_index, scenario);
    let u = ubar.at(t_index, scenario);
    (spec.running_cost.hess_x)(t, x, u, out);

    let mut hess = vec![0.0; n * n * n];
    let contract = |hess: &[f64], weight: &[f64], scale: f64, out: &mut [f64]| {
        for c in 0..n {
            let w = weight[c] * scale;
            let block = &hess[c * n * n..(c + 1) * n * n];
            for k in 0..n * n {
                out[k] += w * block[k];
            }
        }
    };
    (spec.drift.dxx)(horizon, t, x, u, &mut hess);
    contract(&hess, adj.cond_terminal_grad.at(t_index, scenario), 1.0, out);
    (spec.diffusion.dxx)(horizon, t, x, u, &mut hess);
    contract(&hess, adj.pi.at(t_index, scenario), 1.0, out);
    for j in (t_index + 1)..steps {
        let tj = driver.grid().time(j);
        (spec.drift.dxx)(tj, t, x, u, &mut hess);
        contract(&hess, adj.cond_y.at(j, t_index, scenario), dt, out);
        (spec.diffusion.dxx)(tj, t, x, u, &mut hess);
        contract(&hess, adj.z.at(j, t_index, scenario), dt, out);
    }
}

/// Control gradient of the Hamiltonian at the reference state, using the
/// hand-coded control derivatives when available and central finite
/// differences otherwise.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_ctrl_grad_at(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    t_index: usize,
    scenario: usize,
    driver: &NoiseDriver,
) -> Vec<f64> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let t = driver.grid().time(t_index);
    let horizon = driver.grid().horizon();
    let x = xbar.at(t_index, scenario);
    let u = ubar.at(t_index, scenario);

    let analytic = spec.running_cost.grad_u.is_some()
        && spec.drift.du.is_some()
        && spec.diffusion.du.is_some();
    if analytic {
        let mut out = vec![0.0; m];
        (spec.running_cost.grad_u.as_ref().unwrap())(t, x, u, &mut out);
        let mut jac = vec![0.0; n * m];
        let mut tmp = vec![0.0; m];
        let mut add = |jac: &[f64], weight: &[f64], scale: f64, out: &mut [f64]| {
            la::mat_tvec(n, m, jac, weight, &mut tmp);
            for d in 0..m {
                out[d] += tmp[d] * scale;
            }
        };
        (spec.drift.du.as_ref().unwrap())(horizon, t, x, u, &mut jac);
        add(&jac, adj.cond_terminal_grad.at(t_index, scenario), 1.0, &mut out);
        (spec.diffusion.du.as_ref().unwrap())(horizon, t, x, u, &mut jac);
        add(&jac, adj.pi.at(t_index, scenario), 1.0, &mut out);
        for j in (t_index + 1)..steps {
            let tj = driver.grid().time(j);
            (spec.drift.du.as_ref().unwrap())(tj, t, x, u, &mut jac);
            add(&jac, adj.cond_y.at(j, t_index, scenario), dt, &mut out);
            (spec.diffusion.du.as_ref().unwrap())(tj, t, x, u, &mut jac);
            add(&jac, adj.z.at(j, t_index, scenario), dt, &mut out);
        }
        out
    } else {
        let step = 1e-6;
        let mut out = vec![0.0; m];
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        for d in 0..m {
            up[d] += step;
            dn[d] -= step;
            let hp = hamiltonian_at(spec, adj, t_index, scenario, x, &up, driver);
            let hm = hamiltonian_at(spec, adj, t_index, scenario, x, &dn, driver);
            out[d] = (hp - hm) / (2.0 * step);
            up[d] = u[d];
            dn[d] = u[d];
        }
        out
    }
}

/// Residual of the discretised backward equation at every (time, leaf)
/// pair: substituting the solved `(Y, Z, pi)` back into the equation must
/// telescope to zero.
pub fn bsvie_residual(
    spec: &ProblemSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> f64 {
    let n = spec.state_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let leaves = driver.scenarios_at(steps);
    let mut worst = 0.0f64;
    let mut tmp = vec![0.0; n];
    for i in 0..steps {
        let cache = linearization_at(spec, xbar, ubar, driver, i);
        let t = driver.grid().time(i);
        for leaf in 0..leaves {
            let anc_i = driver.ancestor(steps, leaf, i);
            let mut r = vec![0.0; n];
            (spec.running_cost.grad_x)(t, xbar.at(i, anc_i), ubar.at(i, anc_i), &mut r);
            la::mat_tvec(
                n,
                n,
                &cache.bx[anc_i][steps * n * n..(steps + 1) * n * n],
                &adj.terminal_grad[leaf * n..(leaf + 1) * n],
                &mut tmp,
            );
            for d in 0..n {
                r[d] += tmp[d];
            }
            la::mat_tvec(
                n,
                n,
                &cache.sx[anc_i][steps * n * n..(steps + 1) * n * n],
                adj.pi.at(i, anc_i),
                &mut tmp,
            );
            for d in 0..n {
                r[d] += tmp[d];
            }
            for j in (i + 1)..steps {
                let anc_j = driver.ancestor(steps, leaf, j);
                la::mat_tvec(
                    n,
                    n,
                    &cache.bx[anc_i][j * n * n..(j + 1) * n * n],
                    adj.y.at(j, anc_j),
                    &mut tmp,
                );
                for d in 0..n {
                    r[d] += tmp[d] * dt;
                }
                la::mat_tvec(
                    n,
                    n,
                    &cache.sx[anc_i][j * n * n..(j + 1) * n * n],
                    adj.z.at(j, i, anc_i),
                    &mut tmp,
                );
                for d in 0..n {
                    r[d] += tmp[d] * dt;
                }
            }
            // Subtract the dW sum and the adapted value.
            for j in i..steps {
                let anc_j = driver.ancestor(steps, leaf, j);
                let dw = driver.increment_on_path(steps, leaf, j);
                for d in 0..n {
                    r[d] -= adj.z.at(i, j, anc_j)[d] * dw;
                }
            }
            for d in 0..n {
                r[d] -= adj.y.at(i, anc_i)[d];
            }
            worst = worst.max(r.iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    worst
}
