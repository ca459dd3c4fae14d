//! Linear-quadratic solvers and the explicit optimality conditions.
//!
//! On the tree backend an adapted control is a finite vector of per-node
//! values, so the LQ problem is an exact finite-dimensional program:
//!
//! * [`solve_exhaustive`] enumerates every adapted control with values in a
//!   finite set and is the ground truth for the maximum-principle tests;
//! * [`solve_normal_equations`] treats the unconstrained case: the cost is
//!   a convex quadratic in the stacked control values, assembled exactly
//!   via sensitivity solves of the linear dynamics and minimised by a
//!   dense solve.
//!
//! The explicit first- and second-order conditions of the two classical
//! special cases (state-free dynamics; diffusion kernel independent of its
//! first argument) are evaluated per scenario by [`case1_conditions`] and
//! [`case2_conditions`].

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::adjoint::FirstOrderAdjoint;
use crate::driver::{DriverKind, NoiseDriver};
use crate::error::{Error, Result};
use crate::la;
use crate::linear::LinearSpec;
use crate::problem::{ControlSet, ProblemSpec};
use crate::process::AdaptedProcess;
use crate::second_order::{b3_matrix, MatrixAtTau, QuadraticWeights};
use crate::solver::{eval_cost, solve_linear_svie, solve_svie, LinearSvieInput};

/// Default cap on the number of enumerated adapted controls.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LqMethod {
    Exhaustive,
    NormalEquations,
}

#[derive(Clone, Serialize)]
pub struct LqSolution {
    pub method: LqMethod,
    pub cost: f64,
    #[serde(skip)]
    pub control: AdaptedProcess,
    /// Norm of the assembled gradient at the solution (normal equations).
    pub gradient_norm: Option<f64>,
    /// Smallest eigenvalue of the assembled Hessian (normal equations).
    pub hessian_min_eigenvalue: Option<f64>,
    /// Number of enumerated controls (exhaustive).
    pub assignments_scanned: Option<u64>,
}

/// Decision nodes `(level, scenario)` in enumeration order.
fn decision_nodes(driver: &NoiseDriver) -> Vec<(usize, usize)> {
    let steps = driver.grid().steps();
    let mut nodes = Vec::new();
    for i in 0..steps {
        for v in 0..driver.scenarios_at(i) {
            nodes.push((i, v));
        }
    }
    nodes
}

/// Brute-force optimum over all adapted controls with values in `points`.
/// Ties break towards the lexicographically smallest assignment.
///
/// ```
/// use volterra_control::linear::LinearSpec;
/// use volterra_control::lq::{solve_lq, LqMethod};
/// use volterra_control::problem::ControlSet;
/// use volterra_control::{NoiseDriver, TimeGrid};
///
/// let lin = LinearSpec::scalar_constant(
///     -0.3, 0.0, 0.0, 0.0, 0.45, 0.6, 0.8, 0.5, 0.9,
///     ControlSet::Finite { points: vec![vec![0.0], vec![1.0]] },
/// );
/// let driver = NoiseDriver::tree(TimeGrid::new(1.0, 3).unwrap()).unwrap();
/// let best = solve_lq(&lin, &driver, LqMethod::Exhaustive, 1 << 20).unwrap();
/// assert_eq!(best.assignments_scanned, Some(128)); // 2^(1+2+4) policies
///
/// // Relaxing the control set to all of R can only lower the cost.
/// let mut relaxed = lin.clone();
/// relaxed.control_set = ControlSet::All { dim: 1 };
/// let lower = solve_lq(&relaxed, &driver, LqMethod::NormalEquations, 0).unwrap();
/// assert!(lower.cost <= best.cost + 1e-12);
/// ```
pub fn solve_exhaustive(
    spec: &ProblemSpec,
    points: &[Vec<f64>],
    driver: &NoiseDriver,
    cap: u64,
) -> Result<LqSolution> {
    if driver.kind() != DriverKind::Tree {
        return Err(Error::invalid(
            "exhaustive enumeration requires the tree backend",
        ));
    }
    if points.is_empty() {
        return Err(Error::invalid("empty control point set"));
    }
    let nodes = decision_nodes(driver);
    let count = points.len() as u64;
    let total = count
        .checked_pow(nodes.len() as u32)
        .filter(|&t| t <= cap)
        .ok_or_else(|| {
            Error::resource(format!(
                "{}^{} adapted controls exceed the enumeration cap {cap}",
                points.len(),
                nodes.len()
            ))
        })?;
    let m = spec.control_dim;
    let steps = driver.grid().steps();
    let mut u = AdaptedProcess::zeros(*driver.grid(), m, &driver.level_sizes(steps));
    let mut best_cost = f64::INFINITY;
    let mut best: Option<AdaptedProcess> = None;
    let mut digits = vec![0usize; nodes.len()];
    for assignment in 0..total {
        let mut k = assignment;
        for d in digits.iter_mut() {
            *d = (k % count) as usize;
            k /= count;
        }
        for (slot, &(i, v)) in nodes.iter().enumerate() {
            u.at_mut(i, v).copy_from_slice(&points[digits[slot]]);
        }
        let x = solve_svie(spec, &u, driver)?;
        let cost = eval_cost(spec, &x, &u, driver);
        if cost < best_cost {
            best_cost = cost;
            best = Some(u.clone());
        }
    }
    Ok(LqSolution {
        method: LqMethod::Exhaustive,
        cost: best_cost,
        control: best.expect("at least one assignment"),
        gradient_norm: None,
        hessian_min_eigenvalue: None,
        assignments_scanned: Some(total),
    })
}

/// Exact quadratic assembly and dense solve of the unconstrained LQ
/// problem over per-node control values.
pub fn solve_normal_equations(
    linear: &LinearSpec,
    driver: &NoiseDriver,
) -> Result<LqSolution> {
    if driver.kind() != DriverKind::Tree {
        return Err(Error::invalid(
            "normal-equations parameterisation requires the tree backend",
        ));
    }
    let n = linear.state_dim;
    let m = linear.control_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let grid = *driver.grid();
    let nodes = decision_nodes(driver);
    let dim = nodes.len() * m;

    // Zero-control trajectory.
    let spec = linear.to_problem_spec();
    let zero_u = crate::solver::constant_control(driver, &vec![0.0; m]);
    let x0 = solve_svie(&spec, &zero_u, driver)?;

    // Sensitivity of the state to a unit control at one decision node.
    let a1 = &linear.a1;
    let b1 = &linear.b1;
    let a2 = &linear.a2;
    let b2 = &linear.b2;
    let a_kernel = |i: usize, j: usize, _v: usize, out: &mut [f64]| {
        a1(grid.time(i), grid.time(j), out)
    };
    let b_kernel = |i: usize, j: usize, _v: usize, out: &mut [f64]| {
        a2(grid.time(i), grid.time(j), out)
    };
    let mut sensitivities: Vec<AdaptedProcess> = Vec::with_capacity(dim);
    for &(j, w) in &nodes {
        for c in 0..m {
            let forcing = |i: usize, v: usize, out: &mut [f64]| {
                out.fill(0.0);
                if i > j && driver.ancestor(i, v, j) == w {
                    let mut kb = vec![0.0; n * m];
                    b1(grid.time(i), grid.time(j), &mut kb);
                    for r in 0..n {
                        out[r] = kb[r * m + c] * dt;
                    }
                }
            };
            let g = |i: usize, jj: usize, v: usize, out: &mut [f64]| {
                out.fill(0.0);
                if jj == j && v == w {
                    let mut kb = vec![0.0; n * m];
                    b2(grid.time(i), grid.time(j), &mut kb);
                    for r in 0..n {
                        out[r] = kb[r * m + c];
                    }
                }
            };
            let input = LinearSvieInput {
                dim: n,
                start_index: j,
                a: &a_kernel,
                b: &b_kernel,
                forcing: &forcing,
                stochastic_forcing: Some(&g),
                terminal_shift: None,
            };
            sensitivities.push(solve_linear_svie(&input, driver)?.process);
        }
    }

    // Quadratic pairing of two state processes through (Q, G).
    let pair_states = |xa: &AdaptedProcess, xb: &AdaptedProcess| -> f64 {
        let mut total = 0.0;
        let mut q = vec![0.0; n * n];
        for i in 0..steps {
            (linear.q)(grid.time(i), &mut q);
            let w = driver.scenario_weight(i);
            let mut lev = 0.0;
            for v in 0..driver.scenarios_at(i) {
                lev += la::quad_form(n, xa.at(i, v), &q, xb.at(i, v));
            }
            total += lev * w * dt;
        }
        let wl = driver.scenario_weight(steps);
        for v in 0..driver.scenarios_at(steps) {
            total += la::quad_form(n, xa.at(steps, v), &linear.g, xb.at(steps, v)) * wl;
        }
        total
    };
    // S-pairing of the unit control at node p with a state process.
    let pair_control_state = |p: usize, x: &AdaptedProcess| -> f64 {
        let (j, w) = nodes[p / m];
        let c = p % m;
        let mut s = vec![0.0; m * n];
        (linear.s)(grid.time(j), &mut s);
        let weight = driver.scenario_weight(j);
        let mut val = 0.0;
        for d in 0..n {
            val += s[c * n + d] * x.at(j, w)[d];
        }
        val * weight * dt
    };

    let mut hessian = DMatrix::zeros(dim, dim);
    let mut grad = DVector::zeros(dim);
    let mut r = vec![0.0; m * m];
    for p in 0..dim {
        grad[p] = pair_states(&sensitivities[p], &x0) + pair_control_state(p, &x0);
        for q in p..dim {
            let mut h = pair_states(&sensitivities[p], &sensitivities[q])
                + pair_control_state(p, &sensitivities[q])
                + pair_control_state(q, &sensitivities[p]);
            let (jp, wp) = nodes[p / m];
            let (jq, wq) = nodes[q / m];
            if jp == jq && wp == wq {
                (linear.r)(grid.time(jp), &mut r);
                h += r[(p % m) * m + (q % m)] * driver.scenario_weight(jp) * dt;
            }
            hessian[(p, q)] = h;
            hessian[(q, p)] = h;
        }
    }

    let eig = hessian.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 {
        return Err(Error::invalid(format!(
            "assembled control Hessian is indefinite (min eigenvalue {min_eig:.3e}); \
             no solution claimed"
        )));
    }
    let theta = hessian
        .clone()
        .lu()
        .solve(&(-&grad))
        .ok_or_else(|| Error::invalid("singular normal equations"))?;
    let residual = (&hessian * &theta + &grad).norm();

    let mut control = AdaptedProcess::zeros(grid, m, &driver.level_sizes(steps));
    for (slot, &(i, v)) in nodes.iter().enumerate() {
        for c in 0..m {
            control.at_mut(i, v)[c] = theta[slot * m + c];
        }
    }
    let x = solve_svie(&spec, &control, driver)?;
    let cost = eval_cost(&spec, &x, &control, driver);
    Ok(LqSolution {
        method: LqMethod::NormalEquations,
        cost,
        control,
        gradient_norm: Some(residual),
        hessian_min_eigenvalue: Some(min_eig),
        assignments_scanned: None,
    })
}

/// Dispatches on the requested method.
pub fn solve_lq(
    linear: &LinearSpec,
    driver: &NoiseDriver,
    method: LqMethod,
    cap: u64,
) -> Result<LqSolution> {
    match method {
        LqMethod::Exhaustive => {
            let points = match &linear.control_set {
                ControlSet::Finite { points } => points.clone(),
                other => {
                    return Err(Error::invalid(format!(
                        "exhaustive enumeration needs a finite control set, got {other:?}"
                    )))
                }
            };
            let spec = linear.to_problem_spec();
            solve_exhaustive(&spec, &points, driver, cap)
        }
        LqMethod::NormalEquations => solve_normal_equations(linear, driver),
    }
}

/// The first-order quantity of the LQ maximum condition, per scenario:
///
/// ```text
/// S1(t) = S(t) X(t) + B1(T,t)' E_t[G X(T)] + E_t ∫ B1(s,t)' Y(s) ds
///         + B2(T,t)' pi(t) + ∫ B2(s,t)' Z(s,t) ds
/// ```
///
/// At an interior optimum `S1(t) + R(t) u_bar(t) = 0`.
pub fn script_s1(
    linear: &LinearSpec,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    t_index: usize,
    driver: &NoiseDriver,
) -> Vec<f64> {
    let n = linear.state_dim;
    let m = linear.control_dim;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let grid = *driver.grid();
    let t = grid.time(t_index);
    let count = driver.scenarios_at(t_index);
    let mut out = vec![0.0; count * m];
    let mut smat = vec![0.0; m * n];
    (linear.s)(t, &mut smat);
    let mut kb = vec![0.0; n * m];
    let mut tmp = vec![0.0; m];
    for v in 0..count {
        let o = &mut out[v * m..(v + 1) * m];
        la::mat_vec(m, n, &smat, xbar.at(t_index, v), o);
        // B1(T,t)' E_t[G X(T)]: the conditional terminal-gradient cache is
        // exactly E_t[G X(T)] for the quadratic terminal cost.
        (linear.b1)(grid.horizon(), t, &mut kb);
        la::mat_tvec(n, m, &kb, adj.cond_terminal_grad.at(t_index, v), &mut tmp);
        for d in 0..m {
            o[d] += tmp[d];
        }
        (linear.b2)(grid.horizon(), t, &mut kb);
        la::mat_tvec(n, m, &kb, adj.pi.at(t_index, v), &mut tmp);
        for d in 0..m {
            o[d] += tmp[d];
        }
        for j in (t_index + 1)..steps {
            let tj = grid.time(j);
            (linear.b1)(tj, t, &mut kb);
            la::mat_tvec(n, m, &kb, adj.cond_y.at(j, t_index, v), &mut tmp);
            for d in 0..m {
                o[d] += tmp[d] * dt;
            }
            (linear.b2)(tj, t, &mut kb);
            la::mat_tvec(n, m, &kb, adj.z.at(j, t_index, v), &mut tmp);
            for d in 0..m {
                o[d] += tmp[d] * dt;
            }
        }
    }
    out
}

/// The second-order aggregate of the state-free case, per scenario:
/// `SB(t) = B2(T,t)' E_t[G] B2(T,t) + E_t sum_{s>=t} B2(s,t)' Q(s) B2(s,t) ds`.
pub fn script_sb(
    linear: &LinearSpec,
    weights: &QuadraticWeights,
    t_index: usize,
    driver: &NoiseDriver,
) -> Vec<f64> {
    let n = linear.state_dim;
    let m = linear.control_dim;
    let nn = n * n;
    let steps = driver.grid().steps();
    let dt = driver.grid().dt();
    let grid = *driver.grid();
    let t = grid.time(t_index);
    let count = driver.scenarios_at(t_index);
    let mut out = vec![0.0; count * m * m];
    let mut kb = vec![0.0; n * m];
    let e_g = driver
        .cond_expect(&weights.terminal, nn, steps, t_index)
        .values;
    let sandwich = |kb: &[f64], w: &[f64], out: &mut [f64], scale: f64| {
        // out += scale * B' W B with B an n x m kernel.
        for c1 in 0..m {
            for c2 in 0..m {
                let mut acc = 0.0;
                for r1 in 0..n {
                    for r2 in 0..n {
                        acc += kb[r1 * m + c1] * w[r1 * n + r2] * kb[r2 * m + c2];
                    }
                }
                out[c1 * m + c2] += scale * acc;
            }
        }
    };
    for v in 0..count {
        let o = &mut out[v * m * m..(v + 1) * m * m];
        (linear.b2)(grid.horizon(), t, &mut kb);
        sandwich(&kb, &e_g[v * nn..(v + 1) * nn], o, 1.0);
    }
    for j in t_index..steps {
        let e_q = driver
            .cond_expect(weights.running.level(j), nn, j.max(t_index), t_index)
            .values;
        let tj = grid.time(j);
        for v in 0..count {
            let o = &mut out[v * m * m..(v + 1) * m * m];
            (linear.b2)(tj, t, &mut kb);
            sandwich(&kb, &e_q[v * nn..(v + 1) * nn], o, dt);
        }
    }
    out
}

/// Min eigenvalue of a symmetric `m x m` slice.
fn min_eigenvalue(m: usize, mat: &[f64]) -> f64 {
    let dm = DMatrix::from_fn(m, m, |r, c| 0.5 * (mat[r * m + c] + mat[c * m + r]));
    dm.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Per-(time, scenario) row of a case report.
#[derive(Debug, Clone, Serialize)]
pub struct CaseCell {
    pub t_index: usize,
    pub scenario: usize,
    /// `|S1(t) + R(t) u_bar(t)|`.
    pub stationarity_residual: f64,
    /// Smallest eigenvalue of the second-order matrix (`R + SB` for the
    /// state-free case, `R + B2' SP B2` for the kernel-free case).
    pub min_eigenvalue: f64,
    /// Kernel-free case only: the variant normalised through the matrix
    /// process (`R + B2' B3 B2`), reported side by side.
    pub min_eigenvalue_b3_variant: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub cells: Vec<CaseCell>,
    pub max_stationarity_residual: f64,
    pub min_eigenvalue: f64,
    pub min_eigenvalue_b3_variant: Option<f64>,
}

fn check_kernel_zero(
    kernel: &crate::linear::MatKernelFn,
    rows: usize,
    cols: usize,
    grid: &crate::grid::TimeGrid,
    what: &str,
) -> Result<()> {
    let mut buf = vec![0.0; rows * cols];
    for i in 0..=grid.steps() {
        for j in 0..=grid.steps() {
            kernel(grid.time(i), grid.time(j), &mut buf);
            if buf.iter().any(|v| v.abs() > 1e-14) {
                return Err(Error::invalid(format!(
                    "{what} must vanish for this case (found nonzero at t={}, s={})",
                    grid.time(i),
                    grid.time(j)
                )));
            }
        }
    }
    Ok(())
}

/// Optimality conditions of the state-free case (`A1 = A2 = 0`):
/// stationarity `S1 + R u_bar = 0` and positivity of `R + SB`.
pub fn case1_conditions(
    linear: &LinearSpec,
    solution: &LqSolution,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    weights: &QuadraticWeights,
    driver: &NoiseDriver,
) -> Result<CaseReport> {
    check_kernel_zero(
        &linear.a1,
        linear.state_dim,
        linear.state_dim,
        driver.grid(),
        "drift state kernel A1",
    )?;
    check_kernel_zero(
        &linear.a2,
        linear.state_dim,
        linear.state_dim,
        driver.grid(),
        "diffusion state kernel A2",
    )?;
    let m = linear.control_dim;
    let steps = driver.grid().steps();
    let mut cells = Vec::new();
    let mut max_res = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut rmat = vec![0.0; m * m];
    for t_index in 0..steps {
        let s1 = script_s1(linear, adj, xbar, t_index, driver);
        let sb = script_sb(linear, weights, t_index, driver);
        (linear.r)(driver.grid().time(t_index), &mut rmat);
        for v in 0..driver.scenarios_at(t_index) {
            let ub = solution.control.at(t_index, v);
            let mut ru = vec![0.0; m];
            la::mat_vec(m, m, &rmat, ub, &mut ru);
            let res = (0..m)
                .map(|d| (s1[v * m + d] + ru[d]).abs())
                .fold(0.0, f64::max);
            let mut total = sb[v * m * m..(v + 1) * m * m].to_vec();
            for k in 0..m * m {
                total[k] += rmat[k];
            }
            let eig = min_eigenvalue(m, &total);
            max_res = max_res.max(res);
            min_eig = min_eig.min(eig);
            cells.push(CaseCell {
                t_index,
                scenario: v,
                stationarity_residual: res,
                min_eigenvalue: eig,
                min_eigenvalue_b3_variant: None,
            });
        }
    }
    Ok(CaseReport {
        cells,
        max_stationarity_residual: max_res,
        min_eigenvalue: min_eig,
        min_eigenvalue_b3_variant: None,
    })
}

/// Optimality conditions of the case where the diffusion control kernel
/// does not depend on its first time argument (`B2(t, s) = B2(s)`).
///
/// The second-order matrix is assembled from `n` basis solves of the
/// homogeneous state dynamics; the display with the built-in 1/2 factors
/// and the variant normalised through the matrix process (which matches
/// the general condition and the state-free case exactly) are both
/// reported.
pub fn case2_conditions(
    linear: &LinearSpec,
    solution: &LqSolution,
    adj: &FirstOrderAdjoint,
    xbar: &AdaptedProcess,
    weights: &QuadraticWeights,
    driver: &NoiseDriver,
) -> Result<CaseReport> {
    let n = linear.state_dim;
    let m = linear.control_dim;
    let grid = *driver.grid();
    // B2 must be independent of its first argument.
    {
        let mut b_first = vec![0.0; n * m];
        let mut b_other = vec![0.0; n * m];
        for j in 0..=grid.steps() {
            (linear.b2)(grid.time(0), grid.time(j), &mut b_first);
            for i in 1..=grid.steps() {
                (linear.b2)(grid.time(i), grid.time(j), &mut b_other);
                let diff = b_first
                    .iter()
                    .zip(&b_other)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if diff > 1e-12 {
                    return Err(Error::invalid(
                        "this case requires B2(t, s) independent of the first argument",
                    ));
                }
            }
        }
    }
    let a1 = &linear.a1;
    let a2 = &linear.a2;
    let a_kernel = |i: usize, j: usize, _v: usize, out: &mut [f64]| {
        a1(grid.time(i), grid.time(j), out)
    };
    let b_kernel = |i: usize, j: usize, _v: usize, out: &mut [f64]| {
        a2(grid.time(i), grid.time(j), out)
    };
    let steps = grid.steps();
    let dt = grid.dt();
    let mut cells = Vec::new();
    let mut max_res = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut min_eig_b3 = f64::INFINITY;
    let mut rmat = vec![0.0; m * m];
    let mut kb = vec![0.0; n * m];
    for t_index in 0..steps {
        let kernels = crate::second_order::CoefKernels {
            a: Box::new(&a_kernel),
            b: Box::new(&b_kernel),
        };
        let b3: MatrixAtTau = b3_matrix(weights, &kernels, t_index, driver)?;
        let s1 = script_s1(linear, adj, xbar, t_index, driver);
        (linear.r)(grid.time(t_index), &mut rmat);
        (linear.b2)(grid.time(t_index) + dt, grid.time(t_index), &mut kb);
        for v in 0..driver.scenarios_at(t_index) {
            let ub = solution.control.at(t_index, v);
            let mut ru = vec![0.0; m];
            la::mat_vec(m, m, &rmat, ub, &mut ru);
            let res = (0..m)
                .map(|d| (s1[v * m + d] + ru[d]).abs())
                .fold(0.0, f64::max);
            // R + B2' SP B2 with SP = B3 / 2 (the display's built-in 1/2),
            // and the variant R + B2' B3 B2.
            let mut paper = rmat.clone();
            let mut variant = rmat.clone();
            for c1 in 0..m {
                for c2 in 0..m {
                    let mut acc = 0.0;
                    for r1 in 0..n {
                        for r2 in 0..n {
                            acc += kb[r1 * m + c1] * b3.at(v)[r1 * n + r2] * kb[r2 * m + c2];
                        }
                    }
                    paper[c1 * m + c2] += 0.5 * acc;
                    variant[c1 * m + c2] += acc;
                }
            }
            let eig_paper = min_eigenvalue(m, &paper);
            let eig_variant = min_eigenvalue(m, &variant);
            max_res = max_res.max(res);
            min_eig = min_eig.min(eig_paper);
            min_eig_b3 = min_eig_b3.min(eig_variant);
            cells.push(CaseCell {
                t_index,
                scenario: v,
                stationarity_residual: res,
                min_eigenvalue: eig_paper,
                min_eigenvalue_b3_variant: Some(eig_variant),
            });
        }
    }
    Ok(CaseReport {
        cells,
        max_stationarity_residual: max_res,
        min_eigenvalue: min_eig,
        min_eigenvalue_b3_variant: Some(min_eig_b3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{solve_first_order_adjoint, AdjointOptions};
    use crate::grid::TimeGrid;
    use crate::second_order::build_weights;
    use crate::solver::constant_control;
    use std::sync::Arc;

    fn tree(n: usize) -> NoiseDriver {
        NoiseDriver::tree(TimeGrid::new(1.0, n).unwrap()).unwrap()
    }

    #[test]
    fn pure_control_cost_has_zero_optimum() {
        // Q = G = S = 0, R = I: the optimum is u = 0 with J* = 0.
        let lin = LinearSpec::scalar_constant(
            1.0,
            0.0,
            0.3,
            0.0,
            0.5,
            0.0,
            0.0,
            1.0,
            0.0,
            ControlSet::All { dim: 1 },
        );
        let driver = tree(3);
        let sol = solve_lq(&lin, &driver, LqMethod::NormalEquations, 0).unwrap();
        assert!(sol.cost.abs() < 1e-18);
        for i in 0..3usize {
            for v in 0..driver.scenarios_at(i) {
                assert!(sol.control.at(i, v)[0].abs() < 1e-10);
            }
        }
        assert!(sol.gradient_norm.unwrap() < 1e-12);
        assert!(sol.hessian_min_eigenvalue.unwrap() > 0.0);
    }

    #[test]
    fn control_free_dynamics_with_zero_cross_term() {
        // B1 = B2 = 0 and S = 0: the control only enters through R, so the
        // optimum is zero regardless of the state weights.
        let lin = LinearSpec::scalar_constant(
            2.0,
            -0.4,
            0.0,
            0.2,
            0.0,
            0.8,
            0.0,
            0.7,
            0.9,
            ControlSet::All { dim: 1 },
        );
        let driver = tree(3);
        let sol = solve_lq(&lin, &driver, LqMethod::NormalEquations, 0).unwrap();
        for i in 0..3usize {
            for v in 0..driver.scenarios_at(i) {
                assert!(sol.control.at(i, v)[0].abs() < 1e-10);
            }
        }
    }

    fn finite_lq() -> LinearSpec {
        LinearSpec::scalar_constant(
            -0.3,
            0.0,
            0.0,
            0.0,
            0.45,
            0.6,
            0.8,
            0.5,
            0.9,
            ControlSet::Finite {
                points: vec![vec![0.0], vec![1.0]],
            },
        )
    }

    #[test]
    fn exhaustive_and_relaxation_are_consistent() {
        // The continuum optimum over U = R lower-bounds every enumerated
        // {0,1}-valued control.
        let driver = tree(3);
        let lin = finite_lq();
        let exhaustive = solve_lq(&lin, &driver, LqMethod::Exhaustive, 1 << 20).unwrap();
        assert_eq!(exhaustive.assignments_scanned, Some(128));
        let mut relaxed_spec = finite_lq();
        relaxed_spec.control_set = ControlSet::All { dim: 1 };
        let relaxed = solve_lq(&relaxed_spec, &driver, LqMethod::NormalEquations, 0).unwrap();
        assert!(
            relaxed.cost <= exhaustive.cost + 1e-12,
            "{} vs {}",
            relaxed.cost,
            exhaustive.cost
        );
    }

    #[test]
    fn normal_equations_gradient_matches_finite_differences() {
        let driver = tree(3);
        let mut lin = finite_lq();
        lin.control_set = ControlSet::All { dim: 1 };
        let sol = solve_lq(&lin, &driver, LqMethod::NormalEquations, 0).unwrap();
        let spec = lin.to_problem_spec();
        // Finite-difference gradient of the discretised cost at the
        // solution, node by node.
        let step = 1e-6;
        for i in 0..3usize {
            for v in 0..driver.scenarios_at(i) {
                let mut up = sol.control.clone();
                up.at_mut(i, v)[0] += step;
                let mut dn = sol.control.clone();
                dn.at_mut(i, v)[0] -= step;
                let xu = solve_svie(&spec, &up, &driver).unwrap();
                let xd = solve_svie(&spec, &dn, &driver).unwrap();
                let fd = (eval_cost(&spec, &xu, &up, &driver)
                    - eval_cost(&spec, &xd, &dn, &driver))
                    / (2.0 * step);
                assert!(fd.abs() < 1e-7, "node ({i},{v}): fd {fd}");
            }
        }
    }

    #[test]
    fn stationarity_of_case1_at_the_relaxed_optimum() {
        let driver = tree(4);
        let mut lin = finite_lq();
        lin.control_set = ControlSet::All { dim: 1 };
        let sol = solve_lq(&lin, &driver, LqMethod::NormalEquations, 0).unwrap();
        let spec = lin.to_problem_spec();
        let xbar = solve_svie(&spec, &sol.control, &driver).unwrap();
        let adj = solve_first_order_adjoint(
            &spec,
            &xbar,
            &sol.control,
            &driver,
            &AdjointOptions::for_driver(&driver),
        )
        .unwrap();
        let weights = build_weights(&spec, &adj, &xbar, &sol.control, &driver);
        let report = case1_conditions(&lin, &sol, &adj, &xbar, &weights, &driver).unwrap();
        assert!(
            report.max_stationarity_residual < 1e-8,
            "residual {}",
            report.max_stationarity_residual
        );
        // R > 0 and Q, G >= 0: the second-order matrix stays at least R.
        assert!(report.min_eigenvalue >= 0.5 - 1e-12);
    }

    #[test]
    fn case1_closed_form_when_kernels_are_time_free() {
        // Deterministic constant weights with B2(s, t) = b2: the aggregate
        // is b2^2 (G + Q (T - t)) at every grid time.
        let driver = tree(4);
        let lin = finite_lq();
        let weights = QuadraticWeights::constant(&driver, &[0.6], &[0.9], 1);
        for t in 0..4usize {
            let sb = script_sb(&lin, &weights, t, &driver);
            let expect = 0.45 * 0.45 * (0.9 + 0.6 * (1.0 - driver.grid().time(t)));
            for v in 0..driver.scenarios_at(t) {
                assert!(
                    (sb[v] - expect).abs() < 1e-12,
                    "t={t}: {} vs {expect}",
                    sb[v]
                );
            }
        }
    }

    #[test]
    fn case1_rejects_state_kernels() {
        let driver = tree(3);
        let lin = LinearSpec::scalar_constant(
            1.0,
            -0.2,
            0.1,
            0.0,
            0.3,
            0.5,
            0.0,
            1.0,
            0.5,
            ControlSet::All { dim: 1 },
        );
        let sol = solve_lq(&lin, &driver, LqMethod::NormalEquations, 0).unwrap();
        let spec = lin.to_problem_spec();
        let xbar = solve_svie(&spec, &sol.control, &driver).unwrap();
        let adj = solve_first_order_adjoint(
            &spec,
            &xbar,
            &sol.control,
            &driver,
            &AdjointOptions::for_driver(&driver),
        )
        .unwrap();
        let weights = build_weights(&spec, &adj, &xbar, &sol.control, &driver);
        assert!(matches!(
            case1_conditions(&lin, &sol, &adj, &xbar, &weights, &driver),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn case2_halves_match_closed_form_without_state_kernels() {
        // A1 = A2 = 0 and deterministic weights: the display's matrix is
        // (G + Q (T - t)) / 2 and the variant matches the closed form.
        let driver = tree(4);
        let mut lin = finite_lq();
        lin.control_set = ControlSet::All { dim: 1 };
        let sol = solve_lq(&lin, &driver, LqMethod::NormalEquations, 0).unwrap();
        let spec = lin.to_problem_spec();
        let xbar = solve_svie(&spec, &sol.control, &driver).unwrap();
        let adj = solve_first_order_adjoint(
            &spec,
            &xbar,
            &sol.control,
            &driver,
            &AdjointOptions::for_driver(&driver),
        )
        .unwrap();
        let weights = QuadraticWeights::constant(&driver, &[0.6], &[0.9], 1);
        let report = case2_conditions(&lin, &sol, &adj, &xbar, &weights, &driver).unwrap();
        for cell in &report.cells {
            let t = driver.grid().time(cell.t_index);
            let p2 = 0.9 + 0.6 * (1.0 - t);
            let expect_paper = 0.5 + 0.45 * 0.45 * 0.5 * p2;
            let expect_variant = 0.5 + 0.45 * 0.45 * p2;
            assert!((cell.min_eigenvalue - expect_paper).abs() < 1e-10);
            assert!(
                (cell.min_eigenvalue_b3_variant.unwrap() - expect_variant).abs() < 1e-10
            );
        }
    }

    #[test]
    fn indefinite_control_hessian_is_reported() {
        // Negative control weight with no other curvature: the assembled
        // Hessian is negative definite and no solution is claimed.
        let lin = LinearSpec::scalar_constant(
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            -1.0,
            0.0,
            ControlSet::All { dim: 1 },
        );
        let driver = tree(3);
        match solve_lq(&lin, &driver, LqMethod::NormalEquations, 0) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("indefinite")),
            other => panic!("expected indefiniteness report, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let driver = tree(5);
        let lin = finite_lq();
        assert!(matches!(
            solve_lq(&lin, &driver, LqMethod::Exhaustive, 100),
            Err(Error::ResourceLimit(_))
        ));
    }
}
