//! Standardization, PCA and k-means over [`FeatureMatrix`] data.
//!
//! Covariance is the population (1/N) estimate. PCA uses cyclic Jacobi
//! rotations, which are exact enough at the handful of features used here
//! and need no convergence tuning. k-means++ draws from [`SplitMix64`] so
//! that seeds reproduce across implementations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::FeatureMatrix;

/// Columns with a smaller standard deviation are treated as constant.
pub const DEGENERATE_STD: f64 = 1e-12;
/// `pca` refuses input whose column means exceed this.
pub const STANDARDIZED_MEAN_TOL: f64 = 1e-6;
/// Off-diagonal Frobenius norm at which Jacobi iteration stops.
pub const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("bad k={k}: {reason}")]
    BadK { k: usize, reason: String },
    #[error("column {column:?} has mean {mean:e}; standardize first")]
    NotStandardized { column: String, mean: f64 },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl AnalysisError {
    pub fn kind(&self) -> &'static str {
        match self {
            AnalysisError::TooFewRows(_) => "TooFewRows",
            AnalysisError::BadK { .. } => "BadK",
            AnalysisError::NotStandardized { .. } => "NotStandardized",
            AnalysisError::SchemaMismatch(_) => "SchemaMismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 for degenerate columns.
    pub std: Vec<f64>,
}

/// Z-scores each column using its valid cells only.
///
/// Invalid cells are imputed to 0 (the post-standardization mean) and
/// marked valid; the original mask is kept as the matrix's source mask.
pub fn standardize(matrix: &FeatureMatrix) -> Result<(FeatureMatrix, StandardizationStats), AnalysisError> {
    if matrix.n_rows() < 2 {
        return Err(AnalysisError::TooFewRows(matrix.n_rows()));
    }
    let n_cols = matrix.n_columns();
    let mut mean = vec![0.0; n_cols];
    let mut std = vec![0.0; n_cols];
    for c in 0..n_cols {
        let vals: Vec<f64> = (0..matrix.n_rows()).filter_map(|r| matrix.get(r, c)).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean[c] = mu;
        std[c] = if var.sqrt() < DEGENERATE_STD { 0.0 } else { var.sqrt() };
    }
    let mut out = matrix.clone();
    out.set_source_valid(matrix.valid().to_vec());
    out.map_values(|_, c, v, ok| {
        let z = if ok && std[c] > 0.0 { (v - mean[c]) / std[c] } else { 0.0 };
        (z, true)
    });
    Ok((
        out,
        StandardizationStats {
            columns: matrix.columns().to_vec(),
            mean,
            std,
        },
    ))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as rows, sorted
/// by descending eigenvalue, each oriented so its largest-magnitude entry
/// is positive.
pub fn jacobi_eigen(symmetric: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = symmetric.len();
    let mut a: Vec<Vec<f64>> = symmetric.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    let off_norm = |a: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i][j] * a[i][j];
                }
            }
        }
        s.sqrt()
    };

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&a) <= JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut vec: Vec<f64> = v.iter().map(|row| row[i]).collect();
            let lead = vec
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0f64), |best, (j, x)| if x.abs() > best.1.abs() { (j, x) } else { best });
            if lead.1 < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
            vec
        })
        .collect();
    (values, vectors)
}

/// Population covariance of all cells (invalid cells count as 0).
pub fn covariance(matrix: &FeatureMatrix) -> Vec<Vec<f64>> {
    let f = matrix.n_columns();
    let n = matrix.n_rows() as f64;
    let mean: Vec<f64> = (0..f)
        .map(|c| (0..matrix.n_rows()).map(|r| matrix.row(r)[c]).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; f]; f];
    for r in 0..matrix.n_rows() {
        let row = matrix.row(r);
        for i in 0..f {
            let di = row[i] - mean[i];
            for j in i..f {
                cov[i][j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..f {
        for j in i..f {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub columns: Vec<String>,
    /// `k x F`, rows orthonormal.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Trace of the covariance matrix.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }
}

/// Principal components of a standardized matrix.
pub fn pca(matrix: &FeatureMatrix, k: usize) -> Result<PcaModel, AnalysisError> {
    let f = matrix.n_columns();
    if k == 0 || k > f {
        return Err(AnalysisError::BadK {
            k,
            reason: format!("need 1 <= k <= {f} features"),
        });
    }
    if f > matrix.n_rows() {
        return Err(AnalysisError::BadK {
            k,
            reason: format!("{f} features exceed {} rows", matrix.n_rows()),
        });
    }
    for c in 0..f {
        let mean = (0..matrix.n_rows()).map(|r| matrix.row(r)[c]).sum::<f64>() / matrix.n_rows() as f64;
        if mean.abs() > STANDARDIZED_MEAN_TOL {
            return Err(AnalysisError::NotStandardized {
                column: matrix.columns()[c].clone(),
                mean,
            });
        }
    }
    let cov = covariance(matrix);
    let trace: f64 = (0..f).map(|i| cov[i][i]).sum();
    let (values, vectors) = jacobi_eigen(&cov);
    let eigenvalues: Vec<f64> = values.into_iter().take(k).map(|l| l.max(0.0)).collect();
    let explained_variance_ratio = eigenvalues
        .iter()
        .map(|l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(PcaModel {
        columns: matrix.columns().to_vec(),
        components: vectors.into_iter().take(k).collect(),
        eigenvalues,
        explained_variance_ratio,
        total_variance: trace,
    })
}

/// `scores = X · componentsᵀ`, one row of `k` scores per matrix row.
pub fn project(matrix: &FeatureMatrix, model: &PcaModel) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if matrix.columns() != model.columns.as_slice() {
        return Err(AnalysisError::SchemaMismatch(format!(
            "matrix columns {:?} differ from model columns {:?}",
            matrix.columns(),
            model.columns
        )));
    }
    Ok((0..matrix.n_rows())
        .map(|r| {
            let row = matrix.row(r);
            model
                .components
                .iter()
                .map(|comp| comp.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect())
}

/// SplitMix64 (Steele, Lea & Flood 2014): add `0x9E3779B97F4A7C15`, then
/// mix with multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB` and
/// shifts 30/27/31. Floats take the top 53 bits.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(rows: &[&[f64]], k: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let n = rows.len();
    let first = ((rng.next_f64() * n as f64) as usize).min(n - 1);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, rows[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let u = rng.next_f64();
        let next = if total > 0.0 {
            let target = u * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave acc <= target; fall back to the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(dist2(r, rows[next]));
        }
    }
    chosen.iter().map(|&i| rows[i].to_vec()).collect()
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Assignment ties go to the lower centroid index. An empty cluster seizes
/// the point farthest from its own centroid (among clusters with more than
/// one member). Iteration stops once inertia improves by less than `tol`
/// or after `max_iter` assignment steps.
pub fn kmeans(matrix: &FeatureMatrix, params: KMeansParams) -> Result<Clustering, AnalysisError> {
    let n = matrix.n_rows();
    let k = params.k;
    if k == 0 || k > n {
        return Err(AnalysisError::BadK {
            k,
            reason: format!("need 1 <= k <= {n} rows"),
        });
    }
    let rows: Vec<&[f64]> = (0..n).map(|r| matrix.row(r)).collect();
    let dims = matrix.n_columns();
    let mut rng = SplitMix64::new(params.seed);
    let mut centroids = plus_plus_init(&rows, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let max_iter = params.max_iter.max(1);

    loop {
        for (i, r) in rows.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = dist2(r, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assignments[i] = best.0;
            dists[i] = best.1;
        }

        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for j in 0..k {
            if sizes[j] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[assignments[i]] > 1)
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            let Some(i) = donor else { break };
            sizes[assignments[i]] -= 1;
            sizes[j] = 1;
            assignments[i] = j;
            dists[i] = 0.0;
            centroids[j] = rows[i].to_vec();
        }

        let inertia: f64 = dists.iter().sum();
        let converged = history.last().is_some_and(|&prev: &f64| prev - inertia < params.tol);
        history.push(inertia);
        if converged || history.len() >= max_iter {
            break;
        }

        let mut sums = vec![vec![0.0; dims]; k];
        for (i, r) in rows.iter().enumerate() {
            for (s, x) in sums[assignments[i]].iter_mut().zip(r.iter()) {
                *s += x;
            }
        }
        for j in 0..k {
            if sizes[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / sizes[j] as f64).collect();
            }
        }
    }

    Ok(Clustering {
        assignments,
        centroids,
        inertia: *history.last().expect("at least one iteration"),
        iterations: history.len(),
        inertia_history: history,
    })
}

/// Mean silhouette coefficient over all rows.
///
/// Singleton clusters score 0; a row with `max(a, b) = 0` scores 0.
pub fn silhouette_hint(matrix: &FeatureMatrix, clustering: &Clustering) -> Result<f64, AnalysisError> {
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    silhouette_over(matrix, clustering, &rows)
}

/// Silhouette over an evenly strided subset of at most `max_rows` rows,
/// for matrices too large for the quadratic computation.
pub fn silhouette_sampled(matrix: &FeatureMatrix, clustering: &Clustering, max_rows: usize) -> Result<f64, AnalysisError> {
    let n = matrix.n_rows();
    let rows: Vec<usize> = if n <= max_rows {
        (0..n).collect()
    } else {
        (0..max_rows).map(|i| i * n / max_rows).collect()
    };
    silhouette_over(matrix, clustering, &rows)
}

fn silhouette_over(matrix: &FeatureMatrix, clustering: &Clustering, rows: &[usize]) -> Result<f64, AnalysisError> {
    let k = clustering.k();
    if k < 2 {
        return Err(AnalysisError::BadK {
            k,
            reason: "silhouette needs at least 2 clusters".into(),
        });
    }
    if clustering.assignments.len() != matrix.n_rows() {
        return Err(AnalysisError::SchemaMismatch(format!(
            "{} assignments for {} rows",
            clustering.assignments.len(),
            matrix.n_rows()
        )));
    }
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut sizes = vec![0usize; k];
    for &r in rows {
        sizes[clustering.assignments[r]] += 1;
    }
    let mut total = 0.0;
    for &i in rows {
        let own = clustering.assignments[i];
        let mut sums = vec![0.0; k];
        for &j in rows {
            if i != j {
                sums[clustering.assignments[j]] += dist2(matrix.row(i), matrix.row(j)).sqrt();
            }
        }
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / rows.len() as f64)
}
