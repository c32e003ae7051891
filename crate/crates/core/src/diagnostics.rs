//! Highest-density regions, coverage curves, point summaries and
//! fractional-error metrics.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdeError, Result};
use crate::grid::trapezoid;
use crate::loss::ConditionalDensity;
use crate::regress::Queries;
use crate::table::format_float;

/// Largest tolerated departure of a density's integral from one.
pub const NORMALIZATION_TOL: f64 = 1e-3;

/// Highest-density region of a grid density.
///
/// The grid is split into cells `[z_j, z_{j+1}]` carrying the average of
/// the density at their two ends, so cell masses sum to the trapezoid
/// integral. Cells are taken in decreasing density order until the mass
/// reaches the level; every cell tied with the last one is also taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpdRegion {
    pub level: f64,
    pub threshold: f64,
    /// Disjoint closed intervals in ascending order.
    pub segments: Vec<(f64, f64)>,
    pub achieved_mass: f64,
    /// Included cells by index (cell `j` spans `grid[j]..grid[j + 1]`).
    pub cells: Vec<usize>,
}

impl HpdRegion {
    pub fn contains(&self, z: f64) -> bool {
        self.segments.iter().any(|&(lo, hi)| z >= lo && z <= hi)
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(|(lo, hi)| hi - lo).sum()
    }
}

fn check_density(grid: &[f64], density: &[f64]) -> Result<()> {
    if grid.len() != density.len() {
        return Err(CdeError::Shape(format!("{} grid points for {} density values", grid.len(), density.len())));
    }
    if grid.len() < 2 {
        return Err(CdeError::Size("density grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CdeError::Config("density grid must be strictly ascending".into()));
    }
    if let Some(i) = density.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(CdeError::Contract(format!("density value {} at index {i} is not a finite nonnegative number", density[i])));
    }
    Ok(())
}

pub fn hpd_region(grid: &[f64], density: &[f64], level: f64) -> Result<HpdRegion> {
    check_density(grid, density)?;
    if !(0.0..=1.0).contains(&level) {
        return Err(CdeError::Config(format!("level {level} outside [0, 1]")));
    }
    let total = trapezoid(grid, density);
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(CdeError::Contract(format!("density integrates to {total}, not 1")));
    }
    let cells = grid.len() - 1;
    let height: Vec<f64> = (0..cells).map(|j| 0.5 * (density[j] + density[j + 1])).collect();
    let mass: Vec<f64> = (0..cells).map(|j| height[j] * (grid[j + 1] - grid[j])).collect();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| height[b].total_cmp(&height[a]).then(a.cmp(&b)));

    let mut taken = 0;
    let mut acc = 0.0;
    if level > 0.0 {
        while taken < cells {
            acc += mass[order[taken]];
            taken += 1;
            if acc >= level {
                break;
            }
        }
    }
    let threshold = if taken == 0 { f64::INFINITY } else { height[order[taken - 1]] };
    while taken > 0 && taken < cells && height[order[taken]] == threshold {
        taken += 1;
    }
    let mut included: Vec<usize> = order[..taken].to_vec();
    included.sort_unstable();

    let mut segments: Vec<(f64, f64)> = Vec::new();
    let mut prev: Option<usize> = None;
    for &j in &included {
        match (prev, segments.last_mut()) {
            (Some(p), Some(last)) if p + 1 == j => last.1 = grid[j + 1],
            _ => segments.push((grid[j], grid[j + 1])),
        }
        prev = Some(j);
    }
    Ok(HpdRegion {
        level,
        threshold,
        segments,
        achieved_mass: included.iter().map(|&j| mass[j]).sum(),
        cells: included,
    })
}

/// Empirical coverage of highest-density regions over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    /// `1.96 * sqrt(alpha_hat * (1 - alpha_hat) / n)`.
    pub half_width: Vec<f64>,
    pub n: usize,
}

impl CoverageCurve {
    /// Whether level `i` lies inside the 95% binomial band around its
    /// nominal value, `|alpha_hat - alpha| <= 1.96 * sqrt(alpha (1 - alpha) / n)`.
    pub fn within_band(&self, i: usize) -> bool {
        let a = self.levels[i];
        let band = 1.96 * (a * (1.0 - a) / self.n as f64).sqrt();
        (self.alpha_hat[i] - a).abs() <= band + 1e-12
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,alpha_hat,half_width\n");
        for i in 0..self.levels.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                format_float(self.levels[i]),
                format_float(self.alpha_hat[i]),
                format_float(self.half_width[i])
            );
        }
        s
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(CdeError::Config("no coverage levels".into()));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(CdeError::Config(format!("level {l} outside [0, 1]")));
    }
    Ok(())
}

/// Coverage from densities already evaluated on `grid` (one row per test
/// point) and the test responses `z` on the same scale.
pub fn coverage_from_densities(grid: &[f64], densities: &DMatrix<f64>, z: &[f64], levels: &[f64]) -> Result<CoverageCurve> {
    check_levels(levels)?;
    if z.is_empty() {
        return Err(CdeError::Size("empty test set".into()));
    }
    if densities.nrows() != z.len() {
        return Err(CdeError::Shape(format!("{} density rows for {} responses", densities.nrows(), z.len())));
    }
    let hits: Vec<Vec<bool>> = (0..z.len())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = densities.row(r).iter().copied().collect();
            levels
                .iter()
                .map(|&a| Ok(hpd_region(grid, &row, a)?.contains(z[r])))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;
    let n = z.len();
    let alpha_hat: Vec<f64> = (0..levels.len())
        .map(|i| hits.iter().filter(|h| h[i]).count() as f64 / n as f64)
        .collect();
    let half_width = alpha_hat.iter().map(|a| 1.96 * (a * (1.0 - a) / n as f64).sqrt()).collect();
    Ok(CoverageCurve {
        levels: levels.to_vec(),
        alpha_hat,
        half_width,
        n,
    })
}

/// Coverage of a model's regions on a test set, on the unit response scale.
pub fn coverage_curve<M: ConditionalDensity + ?Sized>(
    model: &M,
    queries: &Queries,
    z: &[f64],
    levels: &[f64],
) -> Result<CoverageCurve> {
    let grid = model.reference_grid();
    let d = model.unit_densities(queries)?;
    let u: Vec<f64> = z.iter().map(|&v| model.scaler().to_unit_clamped(v).0).collect();
    coverage_from_densities(&grid, &d.values, &u, levels)
}

/// Regions of every query at every level, as
/// `query_id,level,seg_lo,seg_hi` rows.
pub fn hpd_segments_csv(grid: &[f64], densities: &DMatrix<f64>, ids: &[String], levels: &[f64]) -> Result<String> {
    check_levels(levels)?;
    if ids.len() != densities.nrows() {
        return Err(CdeError::Shape(format!("{} ids for {} density rows", ids.len(), densities.nrows())));
    }
    let mut s = String::from("query_id,level,seg_lo,seg_hi\n");
    for (r, id) in ids.iter().enumerate() {
        let row: Vec<f64> = densities.row(r).iter().copied().collect();
        for &a in levels {
            for (lo, hi) in hpd_region(grid, &row, a)?.segments {
                let _ = writeln!(s, "{id},{},{},{}", format_float(a), format_float(lo), format_float(hi));
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub mean: f64,
    pub mode: f64,
}

/// Trapezoid mean and grid mode (lowest grid point on ties).
pub fn point_summaries(grid: &[f64], density: &[f64]) -> Result<PointSummary> {
    check_density(grid, density)?;
    let zf: Vec<f64> = grid.iter().zip(density).map(|(z, f)| z * f).collect();
    let mut best = 0;
    for (i, &v) in density.iter().enumerate() {
        if v > density[best] {
            best = i;
        }
    }
    Ok(PointSummary {
        mean: trapezoid(grid, &zf),
        mode: grid[best],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPredictionMetrics {
    pub mean: f64,
    pub median: f64,
    /// 0.68 quantile of the absolute fractional errors.
    pub scatter68: f64,
}

/// Quantile of a sample with linear interpolation between order statistics
/// at position `p * (n - 1)`.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CdeError::Size("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(CdeError::Config(format!("probability {p} outside [0, 1]")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let h = p * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    Ok(s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
}

/// Fractional errors `(predicted - observed) / observed` and their summaries.
pub fn fractional_errors(predicted: &[f64], observed: &[f64]) -> Result<PointPredictionMetrics> {
    if predicted.len() != observed.len() {
        return Err(CdeError::Shape(format!(
            "{} predictions for {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    if let Some(i) = observed.iter().position(|&o| o == 0.0) {
        return Err(CdeError::DivisionByZero(i));
    }
    let eps: Vec<f64> = predicted.iter().zip(observed).map(|(p, o)| (p - o) / o).collect();
    let abs: Vec<f64> = eps.iter().map(|e| e.abs()).collect();
    Ok(PointPredictionMetrics {
        mean: eps.iter().sum::<f64>() / eps.len().max(1) as f64,
        median: quantile(&eps, 0.5)?,
        scatter68: quantile(&abs, 0.68)?,
    })
}
