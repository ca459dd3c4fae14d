//! Built-in epidemic-control scenario.
//!
//! `X(t)` is the infected population, `u(t)` the vaccine supply.  Deaths
//! remove `F1(t-r) X(r)` and recoveries remove `F2(t-r) a(r) u(r)`, where
//! `F_i` are the cumulative distributions of the dying/recovery times and
//! `a` is a time-dependent efficiency index; noise in the efficiency makes
//! the recovery term diffusive:
//!
//! ```text
//! X(t) = x0 - ∫_0^t [F1(t-r) X(r) + F2(t-r) a(r) u(r)] dr - ∫_0^t F2(t-r) u(r) dW(r)
//! ```
//!
//! with running cost `G1(X(s)) + G2(u(s))` (care cost plus vaccine cost) and
//! no terminal cost.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::problem::{
    Coefficient, ControlSet, InitialTerm, ProblemSpec, RunningCost, TerminalCost,
};

/// Scalar function with first and second derivatives (cost term).
#[derive(Clone)]
pub struct CostTerm {
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d1: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl CostTerm {
    /// `c/2 * v^2`.
    pub fn quadratic(c: f64) -> Self {
        CostTerm {
            value: Arc::new(move |v| 0.5 * c * v * v),
            d1: Arc::new(move |v| c * v),
            d2: Arc::new(move |_| c),
        }
    }

    pub fn zero() -> Self {
        CostTerm {
            value: Arc::new(|_| 0.0),
            d1: Arc::new(|_| 0.0),
            d2: Arc::new(|_| 0.0),
        }
    }
}

#[derive(Clone)]
pub struct EpidemicParams {
    /// Infected population at time zero.
    pub x0: f64,
    /// Density of the dying-time distribution.
    pub m1: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Density of the recovery-time distribution.
    pub m2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Vaccine efficiency index.
    pub a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Care cost per infected individual.
    pub g1: CostTerm,
    /// Vaccine research-and-development cost.
    pub g2: CostTerm,
    pub control_set: ControlSet,
}

/// Cumulative distribution tabulated by the same left-point quadrature the
/// solver uses, extended piecewise-linearly between grid multiples.
#[derive(Clone)]
struct GridCdf {
    dt: f64,
    /// `table[k] = sum_{j<k} m(t_j) dt`.
    table: Vec<f64>,
    density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl GridCdf {
    fn build(
        density: &Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        grid: &TimeGrid,
    ) -> Result<Self> {
        let steps = grid.steps();
        let dt = grid.dt();
        let mut table = vec![0.0; steps + 1];
        for k in 0..steps {
            let m = density(k as f64 * dt);
            if m < 0.0 {
                return Err(Error::invalid(format!(
                    "density negative at r = {}: {m}",
                    k as f64 * dt
                )));
            }
            table[k + 1] = table[k] + m * dt;
        }
        Ok(GridCdf {
            dt,
            table,
            density: density.clone(),
        })
    }

    fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let k = ((r / self.dt).floor() as usize).min(self.table.len() - 1);
        let base = self.table[k];
        let rem = r - k as f64 * self.dt;
        if rem <= 0.0 || k + 1 >= self.table.len() {
            base
        } else {
            base + (self.density)(k as f64 * self.dt) * rem
        }
    }
}

/// Builds the epidemic [`ProblemSpec`] on the given grid.
///
/// The cumulative distributions `F_i(r) = ∫_0^r m_i` are computed with the
/// same left-point rule the forward solver uses, so the deterministic part
/// of the model is consistent with the discretisation.
pub fn epidemic_scenario(params: &EpidemicParams, grid: &TimeGrid) -> Result<ProblemSpec> {
    if params.x0 < 0.0 {
        return Err(Error::invalid("initial infected population must be >= 0"));
    }
    let f1 = GridCdf::build(&params.m1, grid)?;
    let f2 = GridCdf::build(&params.m2, grid)?;
    let eff = params.a.clone();

    let drift = {
        let value = {
            let (f1, f2, eff) = (f1.clone(), f2.clone(), eff.clone());
            Arc::new(move |t: f64, s: f64, x: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = -f1.eval(t - s) * x[0] - f2.eval(t - s) * eff(s) * u[0];
            })
        };
        let dx = {
            let f1 = f1.clone();
            Arc::new(move |t: f64, s: f64, _: &[f64], _: &[f64], out: &mut [f64]| {
                out[0] = -f1.eval(t - s)
            })
        };
        let du = {
            let (f2, eff) = (f2.clone(), eff.clone());
            Arc::new(move |t: f64, s: f64, _: &[f64], _: &[f64], out: &mut [f64]| {
                out[0] = -f2.eval(t - s) * eff(s)
            })
        };
        Coefficient {
            value,
            dx,
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: Some(du),
        }
    };
    let diffusion = {
        let value = {
            let f2 = f2.clone();
            Arc::new(move |t: f64, s: f64, _: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = -f2.eval(t - s) * u[0]
            })
        };
        let du = {
            let f2 = f2.clone();
            Arc::new(move |t: f64, s: f64, _: &[f64], _: &[f64], out: &mut [f64]| {
                out[0] = -f2.eval(t - s)
            })
        };
        Coefficient {
            value,
            dx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            dxx: Arc::new(|_, _, _, _, out| out[0] = 0.0),
            du: Some(du),
        }
    };

    let (g1, g2) = (params.g1.clone(), params.g2.clone());
    let running_cost = RunningCost {
        value: {
            let (g1, g2) = (g1.clone(), g2.clone());
            Arc::new(move |_, x, u| (g1.value)(x[0]) + (g2.value)(u[0]))
        },
        grad_x: {
            let g1 = g1.clone();
            Arc::new(move |_, x, _, out| out[0] = (g1.d1)(x[0]))
        },
        hess_x: {
            let g1 = g1.clone();
            Arc::new(move |_, x, _, out| out[0] = (g1.d2)(x[0]))
        },
        grad_u: {
            let g2 = g2.clone();
            Some(Arc::new(move |_, _, u, out| out[0] = (g2.d1)(u[0])))
        },
    };

    Ok(ProblemSpec {
        state_dim: 1,
        control_dim: 1,
        phi: InitialTerm::constant(vec![params.x0]),
        drift,
        diffusion,
        terminal_cost: TerminalCost::zero(),
        running_cost,
        control_set: params.control_set.clone(),
    })
}

/// A standard configuration used by the demos and experiments: unit death
/// density, constant recovery density and efficiency, quadratic costs.
pub fn default_epidemic(control_set: ControlSet) -> EpidemicParams {
    EpidemicParams {
        x0: 1.0,
        m1: Arc::new(|_| 1.0),
        m2: Arc::new(|_| 0.8),
        a: Arc::new(|_| 1.0),
        g1: CostTerm::quadratic(1.0),
        g2: CostTerm::quadratic(0.5),
        control_set,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::NoiseDriver;
    use crate::problem::{validate_assumptions, ValidationConfig};
    use crate::solver::{constant_control, solve_svie};

    fn box01() -> ControlSet {
        ControlSet::Box {
            lower: vec![0.0],
            upper: vec![1.0],
        }
    }

    #[test]
    fn zero_densities_freeze_the_state() {
        let params = EpidemicParams {
            x0: 3.0,
            m1: Arc::new(|_| 0.0),
            m2: Arc::new(|_| 0.0),
            a: Arc::new(|_| 1.0),
            g1: CostTerm::zero(),
            g2: CostTerm::zero(),
            control_set: box01(),
        };
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let spec = epidemic_scenario(&params, &grid).unwrap();
        let driver = NoiseDriver::tree(grid).unwrap();
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        for i in 0..=4usize {
            for v in 0..driver.scenarios_at(i) {
                assert_eq!(x.at(i, v)[0], 3.0);
            }
        }
    }

    #[test]
    fn negative_density_rejected() {
        let params = EpidemicParams {
            x0: 1.0,
            m1: Arc::new(|r| 0.5 - r), // negative for r > 0.5
            m2: Arc::new(|_| 0.0),
            a: Arc::new(|_| 1.0),
            g1: CostTerm::zero(),
            g2: CostTerm::zero(),
            control_set: box01(),
        };
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert!(epidemic_scenario(&params, &grid).is_err());
    }

    /// m1 = 1 gives F1(r) = r on the grid: the deterministic model reduces
    /// to X(t) = x0 - ∫ (t-r) X(r) dr, checked against a 10x-finer
    /// quadrature oracle.
    #[test]
    fn unit_death_density_matches_fine_oracle() {
        let params = EpidemicParams {
            x0: 1.0,
            m1: Arc::new(|_| 1.0),
            m2: Arc::new(|_| 0.0),
            a: Arc::new(|_| 0.0),
            g1: CostTerm::zero(),
            g2: CostTerm::zero(),
            control_set: box01(),
        };
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let spec = epidemic_scenario(&params, &grid).unwrap();
        let driver = NoiseDriver::monte_carlo(grid, 1, 1, 0).unwrap();
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();

        // Fine-grid oracle at 10x resolution.
        let fine = 640;
        let dt = 1.0 / fine as f64;
        let mut y = vec![1.0; fine + 1];
        for i in 1..=fine {
            let t = i as f64 * dt;
            let mut acc = 1.0;
            for j in 0..i {
                let s = j as f64 * dt;
                acc -= (t - s) * y[j] * dt;
            }
            y[i] = acc;
        }
        let rel = (x.at(64, 0)[0] - y[fine]).abs() / y[fine].abs();
        assert!(rel < 0.02, "relative error {rel}");
    }

    /// m2 = 1, u = 1, m1 = 0, a = 0, x0 = 0: X(t) = -∫ (t-r) dW(r), so
    /// Var X(1) discretises sum (1 - t_j)^2 dt, which approximates 1/3.
    #[test]
    fn recovery_noise_variance_matches_integral() {
        let params = EpidemicParams {
            x0: 0.0,
            m1: Arc::new(|_| 0.0),
            m2: Arc::new(|_| 1.0),
            a: Arc::new(|_| 0.0),
            g1: CostTerm::zero(),
            g2: CostTerm::zero(),
            control_set: box01(),
        };
        let steps = 64;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let spec = epidemic_scenario(&params, &grid).unwrap();
        let paths = 20000;
        let driver = NoiseDriver::monte_carlo(grid, paths, 11, 2).unwrap();
        let u = constant_control(&driver, &[1.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();

        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for p in 0..paths {
            let v = x.at(steps, p)[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / paths as f64;
        let var = sumsq / paths as f64 - mean * mean;

        // Exact variance of the discretised integral.
        let dt = grid.dt();
        let discrete: f64 = (0..steps)
            .map(|j| {
                let r = 1.0 - j as f64 * dt;
                r * r * dt
            })
            .sum();
        assert!((discrete - 1.0 / 3.0).abs() < 0.02, "discrete {discrete}");
        // Sample variance of a Gaussian: sd ~ var * sqrt(2 / M).
        let se = discrete * (2.0 / paths as f64).sqrt();
        assert!(
            (var - discrete).abs() < 5.0 * se,
            "var {var} vs {discrete} (se {se})"
        );
    }

    #[test]
    fn epidemic_spec_passes_assumption_checks() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let spec = epidemic_scenario(&default_epidemic(box01()), &grid).unwrap();
        let report = validate_assumptions(&spec, &grid, &ValidationConfig::default());
        assert!(report.passed(), "{:#?}", report.clauses);
    }
}
