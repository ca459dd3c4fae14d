//! Brownian drivers and the conditional-expectation engine.
//!
//! Two backends discretise the one-dimensional Wiener process:
//!
//! * **Tree** — a non-recombining binary tree of depth `N` whose increments
//!   take the values `±sqrt(dt)` with probability 1/2 each.  Conditional
//!   expectations are exact sub-tree averages under the tree measure, so
//!   every adjoint identity can be tested to machine precision.
//! * **Monte Carlo** — a seeded ensemble of Gaussian increment paths.
//!   Conditional expectations are least-squares projections onto polynomial
//!   functions of the observed increments (default degree 2).
//!
//! Node convention on the tree: the scenario index at level `i` is an
//! integer `v` in `[0, 2^i)`; its children at level `i + 1` are `2v` (down
//! move) and `2v + 1` (up move).  Bit `i - 1 - j` of `v` is the sign of the
//! increment taken at step `j`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::process::AdaptedProcess;

/// Hard cap on tree depth; `2^N` leaves are materialised.
pub const DEFAULT_TREE_DEPTH_CAP: usize = 16;

/// Default polynomial degree for Monte Carlo conditional expectations.
pub const DEFAULT_REGRESSION_DEGREE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Tree,
    MonteCarlo,
}

#[derive(Debug, Clone)]
enum BackendData {
    Tree,
    MonteCarlo {
        paths: usize,
        seed: u64,
        degree: usize,
        /// Row-major `[path * steps + step]` Gaussian increments.
        increments: Vec<f64>,
    },
}

/// A discretised Brownian driver bound to a time grid.
#[derive(Debug, Clone)]
pub struct NoiseDriver {
    grid: TimeGrid,
    backend: BackendData,
}

/// Result of a conditional expectation; `degraded` is set when a Monte Carlo
/// regression had to fall back to a lower polynomial degree.
#[derive(Debug, Clone)]
pub struct CondExpectation {
    pub values: Vec<f64>,
    pub degraded: bool,
}

impl NoiseDriver {
    /// Exact binary-tree driver.  Fails when the grid depth exceeds `cap`.
    ///
    /// Under the tree measure the increments are `±sqrt(dt)` with equal
    /// weight, so squared sums evaluate exactly:
    ///
    /// ```
    /// use volterra_control::{NoiseDriver, TimeGrid};
    ///
    /// let grid = TimeGrid::new(1.0, 4).unwrap();
    /// let driver = NoiseDriver::tree(grid).unwrap();
    /// // E |W(T)|^2 under the tree measure is exactly T.
    /// let squares: Vec<f64> = (0..driver.scenarios_at(4))
    ///     .map(|leaf| {
    ///         let w: f64 = (0..4).map(|j| driver.increment_on_path(4, leaf, j)).sum();
    ///         w * w
    ///     })
    ///     .collect();
    /// let mean = driver.expect(&squares, 1, 4)[0];
    /// assert!((mean - 1.0).abs() < 1e-12);
    /// ```
    pub fn tree_with_cap(grid: TimeGrid, cap: usize) -> Result<Self> {
        if grid.steps() > cap {
            return Err(Error::resource(format!(
                "tree depth {} exceeds cap {} (2^N leaf storage)",
                grid.steps(),
                cap
            )));
        }
        Ok(NoiseDriver {
            grid,
            backend: BackendData::Tree,
        })
    }

    pub fn tree(grid: TimeGrid) -> Result<Self> {
        Self::tree_with_cap(grid, DEFAULT_TREE_DEPTH_CAP)
    }

    /// Seeded Monte Carlo driver with `paths` trajectories.
    ///
    /// Increment `(path, step)` is reproducible from `(seed, path, step)`
    /// alone: each path draws from its own counter-mode stream, so enlarging
    /// the ensemble never perturbs existing paths.
    pub fn monte_carlo(grid: TimeGrid, paths: usize, seed: u64, degree: usize) -> Result<Self> {
        if paths == 0 {
            return Err(Error::invalid("monte carlo driver needs at least one path"));
        }
        let steps = grid.steps();
        let normal = Normal::new(0.0, grid.dt().sqrt()).expect("positive std");
        let mut increments = vec![0.0; paths * steps];
        for p in 0..paths {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for j in 0..steps {
                increments[p * steps + j] = normal.sample(&mut rng);
            }
        }
        Ok(NoiseDriver {
            grid,
            backend: BackendData::MonteCarlo {
                paths,
                seed,
                degree,
                increments,
            },
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn kind(&self) -> DriverKind {
        match self.backend {
            BackendData::Tree => DriverKind::Tree,
            BackendData::MonteCarlo { .. } => DriverKind::MonteCarlo,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self.backend {
            BackendData::Tree => None,
            BackendData::MonteCarlo { seed, .. } => Some(seed),
        }
    }

    /// Number of distinguishable scenarios at a time level.
    pub fn scenarios_at(&self, level: usize) -> usize {
        match self.backend {
            BackendData::Tree => 1usize << level,
            BackendData::MonteCarlo { paths, .. } => paths,
        }
    }

    /// Scenario counts for levels `0..=max_level`, for allocating processes.
    pub fn level_sizes(&self, max_level: usize) -> Vec<usize> {
        (0..=max_level).map(|i| self.scenarios_at(i)).collect()
    }

    /// Probability weight of one scenario at a level.
    pub fn scenario_weight(&self, level: usize) -> f64 {
        1.0 / self.scenarios_at(level) as f64
    }

    /// The ancestor of `scenario` (at `level`) at an earlier level.
    pub fn ancestor(&self, level: usize, scenario: usize, at_level: usize) -> usize {
        debug_assert!(at_level <= level);
        match self.backend {
            BackendData::Tree => scenario >> (level - at_level),
            BackendData::MonteCarlo { .. } => scenario,
        }
    }

    /// Increment `dW_j` observed along the history of `scenario` at `level`
    /// (`step < level`).
    pub fn increment_on_path(&self, level: usize, scenario: usize, step: usize) -> f64 {
        debug_assert!(step < level);
        match &self.backend {
            BackendData::Tree => {
                let s = self.grid.dt().sqrt();
                if (scenario >> (level - 1 - step)) & 1 == 1 {
                    s
                } else {
                    -s
                }
            }
            BackendData::MonteCarlo { increments, .. } => {
                increments[scenario * self.grid.steps() + step]
            }
        }
    }

    /// Unconditional expectation of a level buffer (`scenarios * dim`).
    pub fn expect(&self, values: &[f64], dim: usize, level: usize) -> Vec<f64> {
        let count = self.scenarios_at(level);
        debug_assert_eq!(values.len(), count * dim);
        let mut out = vec![0.0; dim];
        for s in 0..count {
            for d in 0..dim {
                out[d] += values[s * dim + d];
            }
        }
        let w = 1.0 / count as f64;
        for v in &mut out {
            *v *= w;
        }
        out
    }

    /// Conditional expectation `E_{t_target}` of a buffer living at
    /// `from_level`, returned at `target_level`.
    ///
    /// Tree: exact sub-tree averages.  Monte Carlo: least-squares projection
    /// onto polynomials of the first `target_level` increments up to the
    /// configured degree, degrading the degree on rank-deficient designs.
    pub fn cond_expect(
        &self,
        values: &[f64],
        dim: usize,
        from_level: usize,
        target_level: usize,
    ) -> CondExpectation {
        assert!(target_level <= from_level);
        match &self.backend {
            BackendData::Tree => {
                let mut buf = values.to_vec();
                let mut level = from_level;
                while level > target_level {
                    let parents = 1usize << (level - 1);
                    let mut next = vec![0.0; parents * dim];
                    for v in 0..parents {
                        for d in 0..dim {
                            next[v * dim + d] = 0.5
                                * (buf[(2 * v) * dim + d] + buf[(2 * v + 1) * dim + d]);
                        }
                    }
                    buf = next;
                    level -= 1;
                }
                CondExpectation {
                    values: buf,
                    degraded: false,
                }
            }
            BackendData::MonteCarlo { degree, .. } => {
                if target_level == 0 {
                    // No observed increments: plain mean, replicated per path.
                    let mean = self.expect(values, dim, from_level);
                    let paths = self.scenarios_at(0);
                    let mut out = vec![0.0; paths * dim];
                    for p in 0..paths {
                        out[p * dim..(p + 1) * dim].copy_from_slice(&mean);
                    }
                    return CondExpectation {
                        values: out,
                        degraded: false,
                    };
                }
                self.regress(values, dim, target_level, *degree, None)
            }
        }
    }

    /// Coefficient of `dW_step` in the martingale difference of a buffer
    /// measurable at `step + 1`, returned at level `step`.
    ///
    /// Tree: `(V_up - V_down) / (2 sqrt(dt))` per parent node, exact.
    /// Monte Carlo: regression of the buffer on `basis x {1, dW_step}`; the
    /// returned value is the `dW_step` coefficient function per path.
    pub fn mdiff(&self, values: &[f64], dim: usize, step: usize) -> Vec<f64> {
        match &self.backend {
            BackendData::Tree => {
                let parents = 1usize << step;
                debug_assert_eq!(values.len(), 2 * parents * dim);
                let denom = 2.0 * self.grid.dt().sqrt();
                let mut out = vec![0.0; parents * dim];
                for v in 0..parents {
                    for d in 0..dim {
                        out[v * dim + d] = (values[(2 * v + 1) * dim + d]
                            - values[(2 * v) * dim + d])
                            / denom;
                    }
                }
                out
            }
            BackendData::MonteCarlo { degree, .. } => {
                self.regress(values, dim, step, *degree, Some(step)).values
            }
        }
    }

    /// Martingale-difference coefficient at `step` of a buffer measurable at
    /// `from_level > step`.  On the tree this first conditions down to
    /// `step + 1` (exact); on Monte Carlo the regression projects directly.
    pub fn mdiff_from(
        &self,
        values: &[f64],
        dim: usize,
        from_level: usize,
        step: usize,
    ) -> Vec<f64> {
        debug_assert!(from_level > step);
        match &self.backend {
            BackendData::Tree => {
                let at_child = self.cond_expect(values, dim, from_level, step + 1).values;
                self.mdiff(&at_child, dim, step)
            }
            BackendData::MonteCarlo { .. } => self.mdiff(values, dim, step),
        }
    }

    /// Least-squares projection of `values` onto polynomials of increments
    /// `0..observed`, optionally multiplied by `dW_{mdiff_step}`.  When
    /// `mdiff_step` is set, the returned buffer is the coefficient of that
    /// increment; otherwise it is the fitted conditional mean.
    fn regress(
        &self,
        values: &[f64],
        dim: usize,
        observed: usize,
        degree: usize,
        mdiff_step: Option<usize>,
    ) -> CondExpectation {
        let paths = self.scenarios_at(0);
        let mut degraded = false;
        let mut deg = degree;
        loop {
            let exponents = monomial_exponents(observed, deg);
            let base_cols = exponents.len();
            let cols = match mdiff_step {
                None => base_cols,
                Some(_) => 2 * base_cols,
            };
            let mut design = DMatrix::zeros(paths, cols);
            for p in 0..paths {
                for (k, expo) in exponents.iter().enumerate() {
                    let mut phi = 1.0;
                    for (j, &e) in expo.iter().enumerate() {
                        if e > 0 {
                            let w = self.increment_on_path(observed, p, j);
                            phi *= w.powi(e as i32);
                        }
                    }
                    design[(p, k)] = phi;
                    if let Some(step) = mdiff_step {
                        let dw = self.increment_on_path(step + 1, p, step);
                        design[(p, base_cols + k)] = phi * dw;
                    }
                }
            }
            let svd = design.clone().svd(true, true);
            let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
            let tol = smax * 1e-10 * paths.max(cols) as f64;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            if rank < cols && deg > 0 {
                deg -= 1;
                degraded = true;
                continue;
            }
            let mut out = vec![0.0; paths * dim];
            for d in 0..dim {
                let rhs = DVector::from_fn(paths, |p, _| values[p * dim + d]);
                let coef = svd.solve(&rhs, tol.max(f64::EPSILON * smax)).expect("svd solve");
                for p in 0..paths {
                    let mut fitted = 0.0;
                    let range = match mdiff_step {
                        None => 0..base_cols,
                        Some(_) => base_cols..cols,
                    };
                    for k in range {
                        let basis_col = match mdiff_step {
                            None => design[(p, k)],
                            // Coefficient function of dW: strip the dW factor.
                            Some(_) => design[(p, k - base_cols)],
                        };
                        fitted += coef[k] * basis_col;
                    }
                    out[p * dim + d] = fitted;
                }
            }
            return CondExpectation {
                values: out,
                degraded,
            };
        }
    }

    /// Lifts a level buffer to an `AdaptedProcess` slice (convenience).
    pub fn slice_process(&self, level: usize, dim: usize, values: Vec<f64>) -> AdaptedProcess {
        let mut sizes = vec![0usize; level + 1];
        for (i, s) in sizes.iter_mut().enumerate() {
            *s = if i == level { self.scenarios_at(level) } else { 0 };
        }
        let mut p = AdaptedProcess::zeros(self.grid, dim, &sizes);
        p.set_level(level, values);
        p
    }
}

/// Exponent multi-indices for monomials in `vars` variables with total
/// degree at most `degree`, ordered by total degree then lexicographically.
fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    let mut frontier = vec![vec![0u32; vars]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for expo in &frontier {
            let start = expo
                .iter()
                .rposition(|&e| e > 0)
                .unwrap_or(0);
            for j in start..vars {
                let mut e = expo.clone();
                e[j] += 1;
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Even absolute moment of Brownian motion: `E|W(t)|^{2k} = (2k-1)!! t^k`.
pub fn brownian_moment(k: u32, t: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("moment order k must be at least 1"));
    }
    if !(t >= 0.0) {
        return Err(Error::invalid("time must be nonnegative"));
    }
    let mut value = 1.0f64;
    for i in 1..=k {
        value *= (2 * i - 1) as f64;
    }
    value *= t.powi(k as i32);
    if !value.is_finite() {
        return Err(Error::invalid(format!(
            "moment of order 2k={} at t={} overflows f64",
            2 * k,
            t
        )));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(n: usize) -> NoiseDriver {
        NoiseDriver::tree(TimeGrid::new(1.0, n).unwrap()).unwrap()
    }

    #[test]
    fn tree_leaf_weights() {
        let d = tree(2);
        assert_eq!(d.scenarios_at(2), 4);
        assert_eq!(d.scenario_weight(2), 0.25);
    }

    #[test]
    fn depth_cap_enforced() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        assert!(matches!(
            NoiseDriver::tree(grid),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let a = NoiseDriver::monte_carlo(grid, 1000, 7, 2).unwrap();
        let b = NoiseDriver::monte_carlo(grid, 1000, 7, 2).unwrap();
        for p in 0..1000 {
            for j in 0..3 {
                assert_eq!(
                    a.increment_on_path(3, p, j),
                    b.increment_on_path(3, p, j)
                );
            }
        }
    }

    #[test]
    fn monte_carlo_paths_independent_of_ensemble_size() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let small = NoiseDriver::monte_carlo(grid, 10, 42, 2).unwrap();
        let large = NoiseDriver::monte_carlo(grid, 500, 42, 2).unwrap();
        for p in 0..10 {
            for j in 0..3 {
                assert_eq!(
                    small.increment_on_path(3, p, j),
                    large.increment_on_path(3, p, j)
                );
            }
        }
    }

    #[test]
    fn cond_expect_of_constant_is_constant() {
        let d = tree(3);
        let values = vec![5.5; 8];
        for t in 0..=3 {
            let c = d.cond_expect(&values, 1, 3, t);
            assert!(c.values.iter().all(|&v| v == 5.5));
        }
    }

    #[test]
    fn cond_expect_kills_future_increment() {
        // N=1, value = dW0 / sqrt(dt) in {-1, +1}; E_0 = 0.
        let d = tree(1);
        let s = d.grid().dt().sqrt();
        let values = vec![-s / s, s / s];
        let c = d.cond_expect(&values, 1, 1, 0);
        assert_eq!(c.values, vec![0.0]);
    }

    #[test]
    fn cond_expect_two_step_square() {
        // N=2, value = (dW0 + dW1)^2, E_{t_1} = dW0^2 + dt per node.
        let d = tree(2);
        let dt = d.grid().dt();
        let mut leaf = vec![0.0; 4];
        for v in 0..4usize {
            let w0 = d.increment_on_path(2, v, 0);
            let w1 = d.increment_on_path(2, v, 1);
            leaf[v] = (w0 + w1) * (w0 + w1);
        }
        let c = d.cond_expect(&leaf, 1, 2, 1);
        for v in 0..2usize {
            let w0 = d.increment_on_path(1, v, 0);
            assert!((c.values[v] - (w0 * w0 + dt)).abs() < 1e-14);
        }
    }

    #[test]
    fn tower_property_exact_on_tree() {
        let d = tree(5);
        // Deterministic but irregular leaf values.
        let leaves: Vec<f64> = (0..32).map(|v| ((v * 2654435761u64 as usize) % 97) as f64).collect();
        for t in 0..5usize {
            for s in 0..=t {
                let inner = d.cond_expect(&leaves, 1, 5, t).values;
                let nested = d.cond_expect(&inner, 1, t, s).values;
                let direct = d.cond_expect(&leaves, 1, 5, s).values;
                for (a, b) in nested.iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn law_of_total_expectation_on_tree() {
        let d = tree(4);
        let leaves: Vec<f64> = (0..16).map(|v| (v as f64).sin()).collect();
        let plain = d.expect(&leaves, 1, 4)[0];
        for t in 0..=4usize {
            let cond = d.cond_expect(&leaves, 1, 4, t).values;
            let avg = d.expect(&cond, 1, t)[0];
            assert!((avg - plain).abs() < 1e-13);
        }
    }

    #[test]
    fn mdiff_recovers_linear_coefficient() {
        // V = 3 dW0 + const: coefficient at step 0 is 3.
        let d = tree(1);
        let s = d.grid().dt().sqrt();
        let values = vec![2.0 - 3.0 * s, 2.0 + 3.0 * s];
        let z = d.mdiff(&values, 1, 0);
        assert!((z[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn brownian_moments() {
        assert_eq!(brownian_moment(1, 1.0).unwrap(), 1.0);
        assert_eq!(brownian_moment(2, 1.0).unwrap(), 3.0);
        assert_eq!(brownian_moment(3, 2.0).unwrap(), 120.0);
        assert!(brownian_moment(0, 1.0).is_err());
        assert!(brownian_moment(1, -1.0).is_err());
    }

    #[test]
    fn monte_carlo_fourth_moment_matches_formula() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let d = NoiseDriver::monte_carlo(grid, 20000, 9, 2).unwrap();
        let m = d.scenarios_at(0);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for p in 0..m {
            let w: f64 = (0..4).map(|j| d.increment_on_path(4, p, j)).sum();
            let w4 = w.powi(4);
            sum += w4;
            sumsq += w4 * w4;
        }
        let mean = sum / m as f64;
        let var = (sumsq / m as f64 - mean * mean).max(0.0);
        let se = (var / m as f64).sqrt();
        let target = brownian_moment(2, 1.0).unwrap();
        assert!(
            (mean - target).abs() <= 5.0 * se,
            "mean {mean} vs {target} (se {se})"
        );
    }

    #[test]
    fn monte_carlo_cond_expect_projects_on_past() {
        // V = dW0^2 + dW1 with E_{t_1}[V] = dW0^2: degree-2 regression on
        // dW0 recovers it up to the noise of the fitted coefficients.
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let d = NoiseDriver::monte_carlo(grid, 8000, 3, 2).unwrap();
        let m = d.scenarios_at(0);
        let mut values = vec![0.0; m];
        for p in 0..m {
            let w0 = d.increment_on_path(2, p, 0);
            let w1 = d.increment_on_path(2, p, 1);
            values[p] = w0 * w0 + w1;
        }
        let fit = d.cond_expect(&values, 1, 2, 1);
        assert!(!fit.degraded);
        let mut worst = 0.0f64;
        for p in 0..m {
            let w0 = d.increment_on_path(2, p, 0);
            worst = worst.max((fit.values[p] - w0 * w0).abs());
        }
        assert!(worst < 0.15, "worst deviation {worst}");
    }

    #[test]
    fn rank_deficient_regression_degrades_gracefully() {
        // Three paths cannot support a degree-2 basis in two increments
        // (six columns): the regression falls back and flags it.
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let d = NoiseDriver::monte_carlo(grid, 3, 5, 2).unwrap();
        let values = vec![1.0, 2.0, 3.0];
        let c = d.cond_expect(&values, 1, 3, 2);
        assert!(c.degraded);
        assert_eq!(c.values.len(), 3);
        assert!(c.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn monomial_basis_counts() {
        assert_eq!(monomial_exponents(1, 2).len(), 3);
        assert_eq!(monomial_exponents(2, 2).len(), 6);
        assert_eq!(monomial_exponents(3, 0).len(), 1);
    }
}
