//! Linear-quadratic problem data.
//!
//! Dynamics `b = A1(t,s) x + B1(t,s) u`, `sigma = A2(t,s) x + B2(t,s) u`
//! with cost `h = x' G x / 2` and
//! `l = [x' Q(s) x + 2 u' S(s) x + u' R(s) u] / 2`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::la;
use crate::problem::{
    Coefficient, ControlSet, InitialTerm, ProblemSpec, RunningCost, TerminalCost,
};

/// Two-time matrix kernel `(t, s) -> R^{rows x cols}` (row-major).
pub type MatKernelFn = Arc<dyn Fn(f64, f64, &mut [f64]) + Send + Sync>;
/// One-time matrix weight `s -> R^{rows x cols}` (row-major).
pub type MatWeightFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct LinearSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    /// Deterministic initial term `phi(t)`.
    pub phi: Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>,
    /// Drift kernels: `a1` is `n x n`, `b1` is `n x m`.
    pub a1: MatKernelFn,
    pub b1: MatKernelFn,
    /// Diffusion kernels: `a2` is `n x n`, `b2` is `n x m`.
    pub a2: MatKernelFn,
    pub b2: MatKernelFn,
    /// Running state weight `Q(s)` (`n x n`, symmetric).
    pub q: MatWeightFn,
    /// Cross weight `S(s)` (`m x n`).
    pub s: MatWeightFn,
    /// Control weight `R(s)` (`m x m`, symmetric).
    pub r: MatWeightFn,
    /// Terminal weight `G` (`n x n`, symmetric, deterministic).
    pub g: Vec<f64>,
    pub control_set: ControlSet,
}

impl LinearSpec {
    /// Scalar problem with constant kernels and weights.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar_constant(
        x0: f64,
        a1: f64,
        b1: f64,
        a2: f64,
        b2: f64,
        q: f64,
        s: f64,
        r: f64,
        g: f64,
        control_set: ControlSet,
    ) -> Self {
        LinearSpec {
            state_dim: 1,
            control_dim: 1,
            phi: Arc::new(move |_, out| out[0] = x0),
            a1: Arc::new(move |_, _, out| out[0] = a1),
            b1: Arc::new(move |_, _, out| out[0] = b1),
            a2: Arc::new(move |_, _, out| out[0] = a2),
            b2: Arc::new(move |_, _, out| out[0] = b2),
            q: Arc::new(move |_, out| out[0] = q),
            s: Arc::new(move |_, out| out[0] = s),
            r: Arc::new(move |_, out| out[0] = r),
            g: vec![g],
            control_set,
        }
    }

    /// Symmetry and dimension checks on sampled weights.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let n = self.state_dim;
        let m = self.control_dim;
        if self.g.len() != n * n {
            return Err(Error::invalid("terminal weight G has wrong dimensions"));
        }
        if la::asymmetry(n, &self.g) > 1e-12 {
            return Err(Error::invalid("terminal weight G must be symmetric"));
        }
        let mut q = vec![0.0; n * n];
        let mut r = vec![0.0; m * m];
        for k in 0..=8 {
            let s = horizon * k as f64 / 8.0;
            (self.q)(s, &mut q);
            (self.r)(s, &mut r);
            if la::asymmetry(n, &q) > 1e-12 {
                return Err(Error::invalid(format!("Q({s}) is not symmetric")));
            }
            if la::asymmetry(m, &r) > 1e-12 {
                return Err(Error::invalid(format!("R({s}) is not symmetric")));
            }
        }
        Ok(())
    }

    /// Bridges the linear data into coefficient-callback form.
    pub fn to_problem_spec(&self) -> ProblemSpec {
        let n = self.state_dim;
        let m = self.control_dim;
        let (a1, b1) = (self.a1.clone(), self.b1.clone());
        let (a2, b2) = (self.a2.clone(), self.b2.clone());

        let drift = {
            let (a1v, b1v) = (a1.clone(), b1.clone());
            Coefficient {
                value: Arc::new(move |t, s, x, u, out| {
                    let mut ma = vec![0.0; n * n];
                    let mut mb = vec![0.0; n * m];
                    a1v(t, s, &mut ma);
                    b1v(t, s, &mut mb);
                    la::mat_vec(n, n, &ma, x, out);
                    let mut tmp = vec![0.0; n];
                    la::mat_vec(n, m, &mb, u, &mut tmp);
                    for d in 0..n {
                        out[d] += tmp[d];
                    }
                }),
                dx: {
                    let a1v = a1.clone();
                    Arc::new(move |t, s, _, _, out| a1v(t, s, out))
                },
                dxx: Arc::new(|_, _, _, _, out| out.fill(0.0)),
                du: {
                    let b1v = b1.clone();
                    Some(Arc::new(move |t, s, _, _, out| b1v(t, s, out)))
                },
            }
        };
        let diffusion = {
            let (a2v, b2v) = (a2.clone(), b2.clone());
            Coefficient {
                value: Arc::new(move |t, s, x, u, out| {
                    let mut ma = vec![0.0; n * n];
                    let mut mb = vec![0.0; n * m];
                    a2v(t, s, &mut ma);
                    b2v(t, s, &mut mb);
                    la::mat_vec(n, n, &ma, x, out);
                    let mut tmp = vec![0.0; n];
                    la::mat_vec(n, m, &mb, u, &mut tmp);
                    for d in 0..n {
                        out[d] += tmp[d];
                    }
                }),
                dx: {
                    let a2v = a2.clone();
                    Arc::new(move |t, s, _, _, out| a2v(t, s, out))
                },
                dxx: Arc::new(|_, _, _, _, out| out.fill(0.0)),
                du: {
                    let b2v = b2.clone();
                    Some(Arc::new(move |t, s, _, _, out| b2v(t, s, out)))
                },
            }
        };

        let g = self.g.clone();
        let terminal_cost = TerminalCost {
            value: {
                let g = g.clone();
                Arc::new(move |x| 0.5 * la::quad_form(n, x, &g, x))
            },
            grad: {
                let g = g.clone();
                Arc::new(move |x, out| la::mat_vec(n, n, &g, x, out))
            },
            hess: {
                let g = g.clone();
                Arc::new(move |_, out| out.copy_from_slice(&g))
            },
        };

        let (qw, sw, rw) = (self.q.clone(), self.s.clone(), self.r.clone());
        let running_cost = RunningCost {
            value: {
                let (qw, sw, rw) = (qw.clone(), sw.clone(), rw.clone());
                Arc::new(move |s, x, u| {
                    let mut q = vec![0.0; n * n];
                    let mut sm = vec![0.0; m * n];
                    let mut r = vec![0.0; m * m];
                    qw(s, &mut q);
                    sw(s, &mut sm);
                    rw(s, &mut r);
                    let mut sx = vec![0.0; m];
                    la::mat_vec(m, n, &sm, x, &mut sx);
                    0.5 * la::quad_form(n, x, &q, x) + la::dot(u, &sx)
                        + 0.5 * la::quad_form(m, u, &r, u)
                })
            },
            grad_x: {
                let (qw, sw) = (qw.clone(), sw.clone());
                Arc::new(move |s, x, u, out| {
                    let mut q = vec![0.0; n * n];
                    let mut sm = vec![0.0; m * n];
                    qw(s, &mut q);
                    sw(s, &mut sm);
                    la::mat_vec(n, n, &q, x, out);
                    let mut stu = vec![0.0; n];
                    la::mat_tvec(m, n, &sm, u, &mut stu);
                    for d in 0..n {
                        out[d] += stu[d];
                    }
                })
            },
            hess_x: {
                let qw = qw.clone();
                Arc::new(move |s, _, _, out| qw(s, out))
            },
            grad_u: {
                let (sw, rw) = (sw.clone(), rw.clone());
                Some(Arc::new(move |s, x, u, out| {
                    let mut sm = vec![0.0; m * n];
                    let mut r = vec![0.0; m * m];
                    sw(s, &mut sm);
                    rw(s, &mut r);
                    la::mat_vec(m, n, &sm, x, out);
                    let mut ru = vec![0.0; m];
                    la::mat_vec(m, m, &r, u, &mut ru);
                    for d in 0..m {
                        out[d] += ru[d];
                    }
                }))
            },
        };

        let phi = self.phi.clone();
        ProblemSpec {
            state_dim: n,
            control_dim: m,
            phi: InitialTerm::Deterministic(phi),
            drift,
            diffusion,
            terminal_cost,
            running_cost,
            control_set: self.control_set.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::NoiseDriver;
    use crate::grid::TimeGrid;
    use crate::problem::{validate_assumptions, ValidationConfig};
    use crate::solver::{constant_control, eval_cost, solve_svie};

    #[test]
    fn bridged_spec_passes_validation() {
        let lin = LinearSpec::scalar_constant(
            1.0,
            -0.4,
            0.3,
            0.2,
            0.5,
            0.6,
            0.1,
            0.8,
            0.9,
            ControlSet::All { dim: 1 },
        );
        lin.validate(1.0).unwrap();
        let spec = lin.to_problem_spec();
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let report = validate_assumptions(&spec, &grid, &ValidationConfig::default());
        assert!(report.passed(), "{:#?}", report.clauses);
    }

    #[test]
    fn asymmetric_terminal_weight_rejected() {
        let mut lin = LinearSpec::scalar_constant(
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            ControlSet::All { dim: 1 },
        );
        lin.state_dim = 2;
        lin.g = vec![1.0, 0.3, 0.2, 1.0];
        assert!(lin.validate(1.0).is_err());
    }

    #[test]
    fn quadratic_cost_evaluates() {
        let lin = LinearSpec::scalar_constant(
            2.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
            1.0,
            ControlSet::All { dim: 1 },
        );
        let spec = lin.to_problem_spec();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let driver = NoiseDriver::tree(grid).unwrap();
        let u = constant_control(&driver, &[0.0]);
        let x = solve_svie(&spec, &u, &driver).unwrap();
        // Constant state 2: J = G/2 * 4 + sum Q/2 * 4 * dt = 2 + 2 = 4.
        let j = eval_cost(&spec, &x, &u, &driver);
        assert!((j - 4.0).abs() < 1e-14);
    }
}
