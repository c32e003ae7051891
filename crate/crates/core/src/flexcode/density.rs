//! Turning a raw truncated series into a proper density on a grid.

use serde::{Deserialize, Serialize};

use crate::error::{CdeError, Result};
use crate::grid::trapezoid_weights;

/// Post-processing applied to every raw series evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    /// Set negative values to zero before normalizing.
    pub clip_negative: bool,
    /// Contiguous positive regions carrying less mass than this are removed.
    /// Zero disables bump removal.
    pub bump_delta: f64,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess {
            clip_negative: true,
            bump_delta: 0.0,
        }
    }
}

impl PostProcess {
    pub fn validate(&self) -> Result<()> {
        if !(self.bump_delta >= 0.0 && self.bump_delta.is_finite()) {
            return Err(CdeError::Config(format!(
                "bump removal delta must be a nonnegative number, got {}",
                self.bump_delta
            )));
        }
        Ok(())
    }
}

/// A density on a grid after post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDensity {
    pub values: Vec<f64>,
    /// The raw input had no positive mass and was replaced by the uniform
    /// density.
    pub fallback: bool,
}

/// Clips, removes low-mass bumps and rescales `raw` to integrate to one
/// over `grid` by the trapezoid rule.
pub fn normalize_density(grid: &[f64], raw: &[f64], delta: f64) -> Result<NormalizedDensity> {
    post_process(grid, raw, &PostProcess {
        clip_negative: true,
        bump_delta: delta,
    })
}

pub(crate) fn post_process(grid: &[f64], raw: &[f64], pp: &PostProcess) -> Result<NormalizedDensity> {
    let w = trapezoid_weights(grid);
    post_process_weighted(&w, raw, pp)
}

/// As [`post_process`] with precomputed trapezoid weights.
pub(crate) fn post_process_weighted(w: &[f64], raw: &[f64], pp: &PostProcess) -> Result<NormalizedDensity> {
    if w.len() != raw.len() {
        return Err(CdeError::Shape(format!("{} density values for {} grid points", raw.len(), w.len())));
    }
    if w.len() < 2 {
        return Err(CdeError::Size("density grid needs at least two points".into()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(CdeError::Numeric(format!("density value at grid index {i} is not finite")));
    }
    let span: f64 = w.iter().sum();
    let uniform = || NormalizedDensity {
        values: vec![1.0 / span; w.len()],
        fallback: true,
    };

    let mut v = raw.to_vec();
    if pp.clip_negative {
        for x in &mut v {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    if v.iter().all(|&x| x <= 0.0) {
        return Ok(uniform());
    }
    if pp.bump_delta > 0.0 {
        remove_bumps(w, &mut v, pp.bump_delta);
    }
    let total: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
    if !(total > 0.0) {
        return Ok(uniform());
    }
    for x in &mut v {
        *x /= total;
    }
    Ok(NormalizedDensity { values: v, fallback: false })
}

/// Zeroes maximal runs of positive values whose trapezoid mass is below
/// `delta`. The heaviest run always survives.
fn remove_bumps(w: &[f64], v: &mut [f64], delta: f64) {
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    let mut i = 0;
    while i < v.len() {
        if v[i] > 0.0 {
            let start = i;
            let mut mass = 0.0;
            while i < v.len() && v[i] > 0.0 {
                mass += w[i] * v[i];
                i += 1;
            }
            runs.push((start, i, mass));
        } else {
            i += 1;
        }
    }
    let heaviest = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .2.total_cmp(&b.1 .2).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k);
    for (k, &(s, e, mass)) in runs.iter().enumerate() {
        if mass < delta && Some(k) != heaviest {
            v[s..e].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Clips and renormalizes a density on a product grid; `raw` is row-major
/// with the first coordinate varying slowest.
pub(crate) fn post_process_2d(w1: &[f64], w2: &[f64], raw: &[f64], pp: &PostProcess) -> Result<NormalizedDensity> {
    let (n1, n2) = (w1.len(), w2.len());
    if raw.len() != n1 * n2 {
        return Err(CdeError::Shape(format!("{} density values for a {n1}x{n2} grid", raw.len())));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(CdeError::Numeric(format!(
            "density value at grid cell ({}, {}) is not finite",
            i / n2,
            i % n2
        )));
    }
    let area: f64 = w1.iter().sum::<f64>() * w2.iter().sum::<f64>();
    let mut v = raw.to_vec();
    if pp.clip_negative {
        v.iter_mut().for_each(|x| *x = x.max(0.0));
    }
    let mut total = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            total += w1[i] * w2[j] * v[i * n2 + j];
        }
    }
    if v.iter().all(|&x| x <= 0.0) || !(total > 0.0) {
        return Ok(NormalizedDensity {
            values: vec![1.0 / area; n1 * n2],
            fallback: true,
        });
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(NormalizedDensity { values: v, fallback: false })
}
