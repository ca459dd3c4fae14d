//! Numerical toolkit for optimal control of stochastic Volterra integral
//! equations (SVIEs).
//!
//! The state equation has the memory form
//!
//! ```text
//! X(t) = phi(t) + ∫_0^t b(t,s,X(s),u(s)) ds + ∫_0^t sigma(t,s,X(s),u(s)) dW(s)
//! ```
//!
//! with cost `J(u) = E[ h(X(T)) + ∫_0^T l(s,X(s),u(s)) ds ]`.  The crate
//! simulates such systems, solves desk-scale optimal-control problems over
//! adapted controls, computes first- and second-order adjoint processes, and
//! verifies Pontryagin-type maximum conditions on the discretised problem.
//!
//! The pieces fit together as follows:
//!
//! * [`grid`] / [`driver`] — time discretisation and Brownian drivers: an
//!   exact binomial tree (machine-precision conditional expectations) and a
//!   seeded Monte Carlo ensemble with regression-based projections.
//! * [`problem`] / [`linear`] / [`epidemic`] — problem descriptions:
//!   coefficient callbacks with hand-coded derivatives, linear-quadratic
//!   data, and a built-in epidemic-control scenario.
//! * [`solver`] — the forward Euler scheme for controlled and linear SVIEs,
//!   cost evaluation and stability diagnostics.
//! * [`adjoint`] — the first-order adjoint triple `(Y, Z, pi)` obtained from
//!   a linear backward SVIE (M-solution), the Hamiltonian and its Hessian.
//! * [`second_order`] — quadratic functionals of linear SVIE solutions, the
//!   bilinear forms `f1`/`f2`, the matrix process `B3`, and the classical
//!   second-order BSDE cross-checks for the degenerate SDE case.
//! * [`spike`] — spike (needle) variations, variational equations and the
//!   asymptotic experiments behind the maximum principle.
//! * [`mp`] / [`lq`] — the maximum-principle checker and the linear-quadratic
//!   solvers (exhaustive enumeration over adapted controls, normal
//!   equations) used as ground truth.
//! * [`scenario`] / [`report`] / [`cli`] — the text scenario format, result
//!   bundles and the command-line entry points.

pub mod adjoint;
pub(crate) mod la;
pub mod cli;
pub mod driver;
pub mod epidemic;
pub mod error;
pub mod grid;
pub mod linear;
pub mod lq;
pub mod mp;
pub mod problem;
pub mod process;
pub mod report;
pub mod scenario;
pub mod second_order;
pub mod solver;
pub mod spike;

pub use driver::{brownian_moment, DriverKind, NoiseDriver};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use process::{AdaptedProcess, TwoTimeProcess};
