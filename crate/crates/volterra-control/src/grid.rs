//! Uniform time discretisation of the control horizon.

use crate::error::{Error, Result};

/// A uniform partition of `[0, T]` with `N` steps.
///
/// All processes in this crate are indexed by the nodes `t_i = i * dt`,
/// `i = 0..=N`, with `dt = T / N`.
///
/// ```
/// use volterra_control::grid::TimeGrid;
///
/// let grid = TimeGrid::new(1.0, 4).unwrap();
/// assert_eq!(grid.dt(), 0.25);
/// assert_eq!(grid.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Builds a uniform grid on `[0, horizon]` with `steps` intervals.
    ///
    /// Fails when `horizon <= 0` or `steps == 0`.
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("grid must have at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_i = i * dt`; the last node is exactly `horizon`.
    pub fn time(&self, index: usize) -> f64 {
        debug_assert!(index <= self.steps);
        if index == self.steps {
            self.horizon
        } else {
            index as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_nodes() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(grid.dt(), 0.25);
        assert_eq!(grid.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn single_step_grid() {
        let grid = TimeGrid::new(2.0, 1).unwrap();
        assert_eq!(grid.times(), vec![0.0, 2.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            TimeGrid::new(1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            TimeGrid::new(0.0, 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            TimeGrid::new(-1.0, 4),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nodes_strictly_increasing_and_endpoints_exact() {
        let grid = TimeGrid::new(0.7, 13).unwrap();
        let ts = grid.times();
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 0.7);
        for w in ts.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
