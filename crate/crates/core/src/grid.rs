//! Uniform grids and trapezoid quadrature.
//!
//! All integrals in the crate go through these helpers so that every module
//! agrees on what "integrates to one" means.

/// Default number of cells on the response grid.
pub const DEFAULT_GRID_CELLS: usize = 1000;

/// `cells + 1` equally spaced points covering `[lo, hi]`, endpoints exact.
pub fn uniform_grid(lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    let cells = cells.max(1);
    let step = (hi - lo) / cells as f64;
    (0..=cells)
        .map(|i| {
            if i == cells {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect()
}

/// Unit-interval grid with `cells` cells.
pub fn unit_grid(cells: usize) -> Vec<f64> {
    uniform_grid(0.0, 1.0, cells)
}

/// Trapezoid rule for samples `values` at sorted abscissae `grid`.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(grid.len(), values.len());
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

/// Trapezoid weights such that `sum(w_i * f_i)` equals [`trapezoid`].
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Linear interpolation of grid samples at `x`, clamped to the grid ends.
pub fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if n == 0 {
        return f64::NAN;
    }
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    // First index with grid[idx] > x; idx in 1..n.
    let idx = grid.partition_point(|&g| g <= x);
    let (x0, x1) = (grid[idx - 1], grid[idx]);
    let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    values[idx - 1] + t * (values[idx] - values[idx - 1])
}

/// Index of the grid point nearest to `x` (lower index on exact midpoints).
pub fn nearest_index(grid: &[f64], x: f64) -> usize {
    let n = grid.len();
    let idx = grid.partition_point(|&g| g < x);
    if idx == 0 {
        0
    } else if idx >= n {
        n - 1
    } else if (x - grid[idx - 1]) <= (grid[idx] - x) {
        idx - 1
    } else {
        idx
    }
}
