//! Process containers indexed by the time grid.
//!
//! An [`AdaptedProcess`] stores one `R^n` value per (time index, scenario)
//! pair, where "scenario" is a tree node on the exact backend and a path on
//! the Monte Carlo backend.  Adaptedness is structural: the value at time
//! index `i` lives on the scenario set observable at `t_i`, so it cannot
//! depend on later noise.
//!
//! A [`TwoTimeProcess`] stores values `V(t_i, s_j)` for all grid pairs; for
//! fixed `t_i` the slice `s_j -> V(t_i, s_j)` is an adapted process in its
//! second argument.  This is the container for BSVIE kernels `Z(t, s)` and
//! for two-time coefficient dumps.

use crate::grid::TimeGrid;

/// Values of an adapted process on the grid.
///
/// `values[i]` is a flat buffer of length `scenarios(i) * dim`, where
/// `scenarios(i)` is the number of distinguishable scenarios at time `t_i`
/// (`2^i` nodes on the tree backend, the path count on Monte Carlo).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    grid: TimeGrid,
    dim: usize,
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    /// Allocates a zero process with the given per-level scenario counts.
    pub fn zeros(grid: TimeGrid, dim: usize, level_sizes: &[usize]) -> Self {
        let values = level_sizes.iter().map(|&c| vec![0.0; c * dim]).collect();
        AdaptedProcess { grid, dim, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored time levels.
    pub fn levels(&self) -> usize {
        self.values.len()
    }

    /// Number of scenarios stored at time index `i`.
    pub fn scenarios_at(&self, i: usize) -> usize {
        self.values[i].len() / self.dim.max(1)
    }

    pub fn at(&self, i: usize, scenario: usize) -> &[f64] {
        let d = self.dim;
        &self.values[i][scenario * d..(scenario + 1) * d]
    }

    pub fn at_mut(&mut self, i: usize, scenario: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.values[i][scenario * d..(scenario + 1) * d]
    }

    /// Whole level as a flat `scenarios * dim` buffer.
    pub fn level(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn level_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn set_level(&mut self, i: usize, data: Vec<f64>) {
        debug_assert_eq!(data.len() % self.dim.max(1), 0);
        self.values[i] = data;
    }

    /// Max absolute difference against another process of identical shape.
    pub fn sup_distance(&self, other: &AdaptedProcess) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// Values `V(t_i, s_j)` on the grid square.
///
/// Row `i` holds the slice `s_j -> V(t_i, s_j)` as an [`AdaptedProcess`] in
/// the second argument, which is exactly the measurability required of
/// BSVIE kernels: `V(t_i, s_j)` is known at time `s_j`.
#[derive(Debug, Clone)]
pub struct TwoTimeProcess {
    dim: usize,
    rows: Vec<AdaptedProcess>,
}

impl TwoTimeProcess {
    pub fn zeros(grid: TimeGrid, dim: usize, rows: usize, level_sizes: &[usize]) -> Self {
        let rows = (0..rows)
            .map(|_| AdaptedProcess::zeros(grid, dim, level_sizes))
            .collect();
        TwoTimeProcess { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    /// The adapted slice `s -> V(t_i, s)`.
    pub fn row(&self, i: usize) -> &AdaptedProcess {
        &self.rows[i]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut AdaptedProcess {
        &mut self.rows[i]
    }

    pub fn at(&self, i: usize, j: usize, scenario: usize) -> &[f64] {
        self.rows[i].at(j, scenario)
    }

    pub fn sup_distance(&self, other: &TwoTimeProcess) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| a.sup_distance(b))
            .fold(0.0, f64::max)
    }
}
