//! Covariates that are themselves samples from a distribution: k-NN
//! Kullback-Leibler divergence estimates between sample sets, the
//! exponential KL kernel and its nearest positive semidefinite projection.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdeError, Result};
use crate::regress::Distance;

/// Distances below this are replaced by it before taking logs.
pub const DISTANCE_FLOOR: f64 = 1e-12;
/// Fraction of floored points above which an estimate is flagged.
pub const FLOOR_WARNING_FRACTION: f64 = 0.1;

/// A finite sample of `d`-dimensional observables, one row per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub id: String,
    points: DMatrix<f64>,
}

impl SampleSet {
    pub fn new(id: impl Into<String>, points: DMatrix<f64>) -> Result<Self> {
        let id = id.into();
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(CdeError::Size(format!("sample set '{id}' is empty")));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(CdeError::Data(format!(
                "sample set '{id}' has a non-finite value in row {}",
                i % points.nrows()
            )));
        }
        Ok(SampleSet { id, points })
    }

    pub fn from_values(id: impl Into<String>, values: &[f64]) -> Result<Self> {
        Self::new(id, DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Average over coordinates of the unbiased sample variance.
    pub fn sample_variance(&self) -> f64 {
        let n = self.len() as f64;
        if self.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .points
            .column_iter()
            .map(|c| {
                let m = c.sum() / n;
                c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum();
        total / self.dim() as f64
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.points.column_iter().map(|c| c.sum() / n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlConfig {
    pub k: usize,
    pub sigma2: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig { k: 2, sigma2: 1.0 }
    }
}

impl KlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CdeError::Config("neighbor order k must be at least 1".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(CdeError::Config(format!("kernel sigma^2 must be positive, got {}", self.sigma2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    /// Points of the first set for which either neighbor distance was floored.
    pub floored: usize,
    pub warning: bool,
}

/// Distance to the `k`-th nearest entry of the ascending slice `s`,
/// skipping position `skip`.
fn kth_sorted(s: &[f64], q: f64, k: usize, skip: Option<usize>) -> f64 {
    let pos = s.partition_point(|&v| v < q);
    let (mut l, mut r) = (pos as isize - 1, pos);
    let mut last = 0.0;
    let mut taken = 0;
    while taken < k {
        if skip == Some(r) {
            r += 1;
            continue;
        }
        if l >= 0 && skip == Some(l as usize) {
            l -= 1;
            continue;
        }
        let dl = if l >= 0 { q - s[l as usize] } else { f64::INFINITY };
        let dr = if r < s.len() { s[r] - q } else { f64::INFINITY };
        if dl <= dr {
            last = dl;
            l -= 1;
        } else {
            last = dr;
            r += 1;
        }
        taken += 1;
    }
    last
}

fn kth_brute(p: &DMatrix<f64>, row: usize, other: &DMatrix<f64>, k: usize, skip: Option<usize>) -> f64 {
    let mut d: Vec<f64> = (0..other.nrows())
        .filter(|&j| Some(j) != skip)
        .map(|j| {
            (0..p.ncols())
                .map(|c| (p[(row, c)] - other[(j, c)]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// k-NN estimate of `KL(p_A || p_B)` from samples `a` and `b`:
/// `(d / n) * sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))`, with
/// `rho_k(i)` the k-th neighbor distance of `a_i` within `a` (itself
/// excluded) and `nu_k(i)` its k-th neighbor distance within `b`.
pub fn kl_divergence(a: &SampleSet, b: &SampleSet, k: usize) -> Result<KlEstimate> {
    if k == 0 {
        return Err(CdeError::Config("neighbor order k must be at least 1".into()));
    }
    if a.dim() != b.dim() {
        return Err(CdeError::Shape(format!(
            "sets '{}' and '{}' have dimensions {} and {}",
            a.id,
            b.id,
            a.dim(),
            b.dim()
        )));
    }
    let (n, m, d) = (a.len(), b.len(), a.dim());
    if n < k + 1 || m < k {
        return Err(CdeError::Size(format!(
            "k = {k} needs at least {} points in '{}' and {k} in '{}', got {n} and {m}",
            k + 1,
            a.id,
            b.id
        )));
    }
    let pairs: Vec<(f64, f64)> = if d == 1 {
        let mut sa: Vec<f64> = a.points.iter().copied().collect();
        let mut sb: Vec<f64> = b.points.iter().copied().collect();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        (0..n)
            .map(|p| (kth_sorted(&sb, sa[p], k, None), kth_sorted(&sa, sa[p], k, Some(p))))
            .collect()
    } else {
        (0..n)
            .map(|i| (kth_brute(&a.points, i, &b.points, k, None), kth_brute(&a.points, i, &a.points, k, Some(i))))
            .collect()
    };
    Ok(assemble(&pairs, n, m, d))
}

fn assemble(pairs: &[(f64, f64)], n: usize, m: usize, d: usize) -> KlEstimate {
    let mut floored = 0;
    let mut sum = 0.0;
    for &(nu, rho) in pairs {
        if nu < DISTANCE_FLOOR || rho < DISTANCE_FLOOR {
            floored += 1;
        }
        sum += (nu.max(DISTANCE_FLOOR) / rho.max(DISTANCE_FLOOR)).ln();
    }
    KlEstimate {
        value: d as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln(),
        floored,
        warning: floored as f64 > FLOOR_WARNING_FRACTION * n as f64,
    }
}

/// Pairwise divergences and the projected exponential kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMatrix {
    /// `raw[(i, j)]` estimates `KL(p_i || p_j)`; not symmetric.
    pub raw: DMatrix<f64>,
    /// `exp(-(raw_ij + raw_ji) / (2 sigma^2))` off the diagonal, 1 on it.
    pub unprojected: DMatrix<f64>,
    /// Nearest positive semidefinite matrix to `unprojected`.
    pub kernel: DMatrix<f64>,
    /// Frobenius distance between `unprojected` and `kernel`.
    pub projection_shift: f64,
    pub sigma2: f64,
    /// Ordered pairs whose estimate carried a floor warning.
    pub warnings: Vec<(usize, usize)>,
}

/// All ordered pairwise divergences between `sets`, computed in parallel.
pub fn divergence_matrix(sets: &[SampleSet], k: usize) -> Result<(DMatrix<f64>, Vec<(usize, usize)>)> {
    cross_divergences(sets, sets, k)
}

/// `KL(q_i || t_j)` for every query set `q_i` and reference set `t_j`.
pub fn cross_divergences(
    queries: &[SampleSet],
    reference: &[SampleSet],
    k: usize,
) -> Result<(DMatrix<f64>, Vec<(usize, usize)>)> {
    let (n, m) = (queries.len(), reference.len());
    let est: Vec<KlEstimate> = (0..n * m)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / m, c % m);
            kl_divergence(&queries[i], &reference[j], k).map_err(|e| {
                CdeError::Data(format!(
                    "divergence from '{}' to '{}' failed: {e}",
                    queries[i].id, reference[j].id
                ))
            })
        })
        .collect::<Result<_>>()?;
    let raw = DMatrix::from_fn(n, m, |i, j| est[i * m + j].value);
    let warnings = (0..n * m).filter(|&c| est[c].warning).map(|c| (c / m, c % m)).collect();
    Ok((raw, warnings))
}

/// Symmetrized divergence `(raw_ij + raw_ji) / 2` with a zero diagonal.
pub fn symmetrized(raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = raw.nrows();
    if raw.ncols() != n {
        return Err(CdeError::Shape(format!("divergence matrix is {}x{}", n, raw.ncols())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.5 * (raw[(i, j)] + raw[(j, i)]) }))
}

/// Builds the projected kernel from a raw divergence matrix.
///
/// The kernel diagonal is `exp(0) = 1`: a distribution has zero divergence
/// from itself, while the k-NN estimate on a set against itself is biased.
pub fn kernel_from_divergences(raw: DMatrix<f64>, sigma2: f64, warnings: Vec<(usize, usize)>) -> Result<DivergenceMatrix> {
    KlConfig { k: 1, sigma2 }.validate()?;
    let sym = symmetrized(&raw)?;
    let unprojected = sym.map(|s| (-s / sigma2).exp());
    let (kernel, projection_shift) = nearest_psd(&unprojected)?;
    Ok(DivergenceMatrix {
        raw,
        unprojected,
        kernel,
        projection_shift,
        sigma2,
        warnings,
    })
}

pub fn kl_kernel_matrix(sets: &[SampleSet], config: &KlConfig) -> Result<DivergenceMatrix> {
    config.validate()?;
    let (raw, warnings) = divergence_matrix(sets, config.k)?;
    kernel_from_divergences(raw, config.sigma2, warnings)
}

/// Frobenius-nearest positive semidefinite matrix to a symmetric matrix
/// (symmetrized first), and the Frobenius distance moved.
pub fn nearest_psd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(CdeError::Shape(format!("matrix is {}x{}", n, m.ncols())));
    }
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        return Err(CdeError::Numeric(format!("non-finite entry at ({}, {})", i % n, i / n)));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    out = (&out + out.transpose()) * 0.5;
    let shift = (&out - m).norm();
    Ok((out, shift))
}

/// Kernel scale candidates: powers of two from `1/16` to `4` times the
/// median off-diagonal symmetrized divergence.
pub fn sigma2_grid(raw: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sym = symmetrized(raw)?;
    let n = sym.nrows();
    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| sym[(i, j)])
        .collect();
    if off.is_empty() {
        return Err(CdeError::Size("need at least two sample sets".into()));
    }
    off.sort_by(f64::total_cmp);
    let h = off.len() / 2;
    let median = if off.len() % 2 == 0 { 0.5 * (off[h - 1] + off[h]) } else { off[h] };
    if !(median > 0.0) {
        return Err(CdeError::Numeric(format!("median divergence {median} is not positive")));
    }
    Ok([0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|f| f * median).collect())
}

/// Square root of the symmetrized divergence, clamped at zero: a distance
/// whose Gaussian kernel `exp(-d^2 / (4h))` is the KL kernel with
/// `sigma^2 = 4h`.
pub fn divergence_distance(raw: &DMatrix<f64>) -> Result<Distance> {
    Distance::precomputed(symmetrized(raw)?.map(|s| s.max(0.0).sqrt()))
}

/// Query-to-reference counterpart of [`divergence_distance`]: `raw_qr` holds
/// `KL(q_i || t_j)` and `raw_rq` holds `KL(t_j || q_i)` transposed to the
/// same shape.
pub fn cross_divergence_distance(raw_qr: &DMatrix<f64>, raw_rq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if raw_qr.shape() != raw_rq.shape() {
        return Err(CdeError::Shape("divergence blocks differ in shape".into()));
    }
    Ok(raw_qr.zip_map(raw_rq, |a, b| (0.5 * (a + b)).max(0.0).sqrt()))
}

/// Distance induced by a positive semidefinite kernel,
/// `sqrt(K_ii + K_jj - 2 K_ij)`.
pub fn kernel_distance(kernel: &DMatrix<f64>) -> Result<Distance> {
    let n = kernel.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (kernel[(i, i)] + kernel[(j, j)] - 2.0 * kernel[(i, j)]).max(0.0).sqrt()
        }
    });
    Distance::precomputed((&d + d.transpose()) * 0.5)
}

/// Reads sample sets from a directory holding `index.csv` (columns `id`
/// and `response_col`) and one `<id>.csv` per set with a header row and one
/// numeric row per point.
pub fn read_sample_sets(dir: impl AsRef<Path>, response_col: &str) -> Result<(Vec<SampleSet>, Vec<f64>)> {
    let dir = dir.as_ref();
    let index = dir.join("index.csv");
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(&index)
        .map_err(|e| CdeError::Data(format!("{}: {e}", index.display())))?;
    let header = rdr.headers().map_err(|e| CdeError::Data(format!("{}: {e}", index.display())))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CdeError::Data(format!("{}: column '{name}' not found", index.display())))
    };
    let (id_col, z_col) = (col("id")?, col(response_col)?);
    let mut sets = Vec::new();
    let mut z = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CdeError::Data(format!("{} row {}: {e}", index.display(), r + 1)))?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let value: f64 = rec
            .get(z_col)
            .and_then(|s| s.parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CdeError::Data(format!("{} row {}: bad response", index.display(), r + 1)))?;
        sets.push(read_set(&dir.join(format!("{id}.csv")), &id)?);
        z.push(value);
    }
    if sets.is_empty() {
        return Err(CdeError::Data(format!("{} lists no sets", index.display())));
    }
    Ok((sets, z))
}

fn read_set(path: &Path, id: &str) -> Result<SampleSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CdeError::Data(format!("{}: {e}", path.display())))?;
    let width = rdr.headers().map_err(|e| CdeError::Data(format!("{}: {e}", path.display())))?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CdeError::Data(format!("{} row {}: {e}", path.display(), r + 1)))?;
        for f in rec.iter() {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| CdeError::Data(format!("{} row {}: '{f}' is not numeric", path.display(), r + 1)))?,
            );
        }
        rows += 1;
    }
    SampleSet::new(id, DMatrix::from_row_slice(rows, width, &values))
}

/// Writes sample sets in the layout read by [`read_sample_sets`], each file
/// opening with `comment` as a `#` line when given.
pub fn write_sample_sets(
    dir: impl AsRef<Path>,
    sets: &[SampleSet],
    z: &[f64],
    response_col: &str,
    comment: Option<&str>,
) -> Result<()> {
    let head = comment.map(|c| format!("# {c}\n")).unwrap_or_default();
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CdeError::io(dir, e))?;
    if sets.len() != z.len() {
        return Err(CdeError::Shape(format!("{} sets for {} responses", sets.len(), z.len())));
    }
    let mut index = format!("{head}id,{response_col}\n");
    for (s, v) in sets.iter().zip(z) {
        index.push_str(&format!("{},{}\n", s.id, crate::table::format_float(*v)));
        let mut body = head.clone();
        body += &(1..=s.dim()).map(|c| format!("v{c}")).collect::<Vec<_>>().join(",");
        body.push('\n');
        for r in 0..s.len() {
            let row: Vec<String> = (0..s.dim()).map(|c| crate::table::format_float(s.points[(r, c)])).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        let path = dir.join(format!("{}.csv", s.id));
        std::fs::write(&path, body).map_err(|e| CdeError::io(&path, e))?;
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index).map_err(|e| CdeError::io(&path, e))
}
