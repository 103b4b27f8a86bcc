//! The (γ, δ) grid sweep: one filtered episode per cell, run in parallel.

use rayon::prelude::*;
use singcbf_core::sim::spearman;
use singcbf_core::tuning::linspace;

/// Result of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub gamma: f64,
    pub delta: f64,
    /// `min_t z(q(t))`; `None` when the episode aborted.
    pub z_min: Option<f64>,
    /// Steps where the QP had to relax a CBF row.
    pub relaxed: usize,
    /// `γ ≤ γ*` and `δ ≥ δ*`.
    pub in_region: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Row-major: `γ` outer, `δ` inner.
    pub cells: Vec<SweepCell>,
}

/// Outcome of a single episode as seen by the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub z_min: Option<f64>,
    pub relaxed: usize,
    pub error: Option<String>,
}

/// Geometrically spaced points on `[lo, hi]`. The endpoints are exact, so a
/// grid anchored at `δ*` really contains `δ*`.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut out: Vec<f64> = linspace(lo.ln(), hi.ln(), count).into_iter().map(f64::exp).collect();
    if count >= 2 {
        out[0] = lo;
        out[count - 1] = hi;
    }
    out
}

impl SweepGrid {
    /// Runs `episode(γ, δ)` for every cell. Cells are independent and merged
    /// by index, so the result does not depend on scheduling.
    pub fn run<F>(gammas: Vec<f64>, deltas: Vec<f64>, star: Option<(f64, f64)>, episode: F) -> Self
    where
        F: Fn(f64, f64) -> CellOutcome + Sync,
    {
        let pairs: Vec<(f64, f64)> =
            gammas.iter().flat_map(|&g| deltas.iter().map(move |&d| (g, d))).collect();
        let cells = pairs
            .par_iter()
            .map(|&(gamma, delta)| {
                let out = episode(gamma, delta);
                SweepCell {
                    gamma,
                    delta,
                    z_min: out.z_min,
                    relaxed: out.relaxed,
                    in_region: star.is_some_and(|(gs, ds)| gamma <= gs && delta >= ds),
                    error: out.error,
                }
            })
            .collect();
        Self { gammas, deltas, cells }
    }

    pub fn cell(&self, i: usize, j: usize) -> &SweepCell {
        &self.cells[i * self.deltas.len() + j]
    }

    /// Mean `z_min` over the completed cells of each `γ` row.
    pub fn gamma_profile(&self) -> Vec<f64> {
        (0..self.gammas.len()).map(|i| mean((0..self.deltas.len()).filter_map(|j| self.cell(i, j).z_min))).collect()
    }

    /// Mean `z_min` over the completed cells of each `δ` column.
    pub fn delta_profile(&self) -> Vec<f64> {
        (0..self.deltas.len()).map(|j| mean((0..self.gammas.len()).filter_map(|i| self.cell(i, j).z_min))).collect()
    }

    /// Spearman correlation of the averaged `z_min` with `γ` and with `δ`.
    pub fn trend(&self) -> (f64, f64) {
        (spearman(&self.gammas, &self.gamma_profile()), spearman(&self.deltas, &self.delta_profile()))
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.z_min.is_none()).count()
    }

    /// In-region cells that aborted or dipped below `z = 0`.
    pub fn unsafe_in_region(&self) -> Vec<&SweepCell> {
        self.cells.iter().filter(|c| c.in_region && c.z_min.map_or(true, |z| z < 0.0)).collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = it.fold((0.0, 0usize), |(s, c), z| (s + z, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}
