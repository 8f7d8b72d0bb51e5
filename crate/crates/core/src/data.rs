//! Tabular data: CSV ingestion, standardization / PCA, client splits and
//! empirical least-squares problems.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{ClientSpec, CovarianceModel, ProblemSpec};
use crate::rng::{stream, Role, StreamKey};

/// `n × d` feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Matrix,
    pub labels: Vec<f64>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(rows: Matrix, labels: Vec<f64>, feature_names: Option<Vec<String>>) -> Result<Self> {
        if rows.nrows() != labels.len() {
            return Err(Error::InvalidDimension(format!(
                "{} rows but {} labels",
                rows.nrows(),
                labels.len()
            )));
        }
        if let Some(names) = &feature_names {
            if names.len() != rows.ncols() {
                return Err(Error::InvalidDimension(format!(
                    "{} feature names for {} columns",
                    names.len(),
                    rows.ncols()
                )));
            }
        }
        if rows.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDimension("dataset has non-finite entries".into()));
        }
        Ok(Self {
            rows,
            labels,
            feature_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let rows = Matrix::from_fn(idx.len(), self.dim(), |i, j| self.rows[(idx[i], j)]);
        Dataset {
            rows,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn column_means(&self) -> Vector {
        let n = self.n_rows() as f64;
        Vector::from_iterator(self.dim(), self.rows.column_iter().map(|c| c.sum() / n))
    }

    /// `XᵀX / n`.
    pub fn second_moment(&self) -> Matrix {
        linalg::symmetrize(&(self.rows.tr_mul(&self.rows) / self.n_rows() as f64))
    }

    /// Covariance with `1/n` normalization.
    pub fn covariance(&self) -> Matrix {
        let means = self.column_means();
        let centered = Matrix::from_fn(self.n_rows(), self.dim(), |i, j| self.rows[(i, j)] - means[j]);
        linalg::symmetrize(&(centered.tr_mul(&centered) / self.n_rows() as f64))
    }
}

/// Counts reported by [`load_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub dropped_rows: usize,
}

/// Reads a headed CSV; `label_column` names the target. Rows holding a
/// NaN, an infinity or an empty field are dropped and counted.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, label_column)
}

pub fn read_csv<R: std::io::Read>(input: R, label_column: &str) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            row: 0,
            column: label_column.to_string(),
            message: "label column not found in header".into(),
        })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = names.len();
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut report = LoadReport::default();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = r + 1;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: row_no,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut values = Vec::with_capacity(headers.len());
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            let v = if field.is_empty() {
                f64::NAN
            } else {
                field.parse::<f64>().map_err(|e| Error::Parse {
                    row: row_no,
                    column: headers[j].clone(),
                    message: format!("'{field}': {e}"),
                })?
            };
            values.push(v);
        }
        if values.iter().any(|v| !v.is_finite()) {
            report.dropped_rows += 1;
            continue;
        }
        labels.push(values[label_idx]);
        flat.extend(
            values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != label_idx)
                .map(|(_, v)| *v),
        );
    }
    let rows = Matrix::from_row_slice(labels.len(), d, &flat);
    Ok((Dataset::new(rows, labels, Some(names))?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessKind {
    #[default]
    None,
    Standardize,
    Pca,
}

/// A fitted feature transform `x ↦ ((x − mean) / scale) · rotation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub kind: PreprocessKind,
    pub fitted_means: Vector,
    pub fitted_scales: Vector,
    pub rotation: Option<Matrix>,
    /// Columns left unscaled because their variance is zero.
    pub zero_variance_columns: Vec<usize>,
}

impl Preprocess {
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.fitted_means.len() {
            return Err(Error::InvalidDimension(format!(
                "transform fitted on {} columns, dataset has {}",
                self.fitted_means.len(),
                ds.dim()
            )));
        }
        let mut rows = Matrix::from_fn(ds.n_rows(), ds.dim(), |i, j| {
            (ds.rows[(i, j)] - self.fitted_means[j]) / self.fitted_scales[j]
        });
        let mut names = ds.feature_names.clone();
        if let Some(rot) = &self.rotation {
            rows *= rot;
            names = Some((0..ds.dim()).map(|j| format!("pc{}", j + 1)).collect());
        }
        Dataset::new(rows, ds.labels.clone(), names)
    }
}

pub fn fit_apply_preprocess(ds: &Dataset, kind: PreprocessKind) -> Result<(Dataset, Preprocess)> {
    let n = ds.n_rows();
    let d = ds.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!("preprocessing needs >= 2 rows, got {n}")));
    }
    let mut pre = Preprocess {
        kind,
        fitted_means: Vector::zeros(d),
        fitted_scales: Vector::from_element(d, 1.0),
        rotation: None,
        zero_variance_columns: Vec::new(),
    };
    match kind {
        PreprocessKind::None => {}
        PreprocessKind::Standardize => {
            pre.fitted_means = ds.column_means();
            for j in 0..d {
                let m = pre.fitted_means[j];
                let var = ds.rows.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                if var > 0.0 {
                    pre.fitted_scales[j] = var.sqrt();
                } else {
                    pre.zero_variance_columns.push(j);
                }
            }
        }
        PreprocessKind::Pca => {
            pre.fitted_means = ds.column_means();
            let (_, vecs) = linalg::sym_eigen(&ds.covariance());
            pre.rotation = Some(vecs);
        }
    }
    let out = pre.apply(ds)?;
    Ok((out, pre))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Iid,
    Cluster,
}

/// Sizes `⌊n/N⌋`, with one extra for the first `n mod N` parts.
fn part_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// Partitions the rows into `n_clients` parts of equal size (±1).
///
/// `Iid` shuffles; `Cluster` runs k-means (k-means++ seeding, Lloyd
/// iterations) and then fills clients greedily by increasing distance to
/// their centroid under the size caps. Each part keeps the original row order.
pub fn split_clients(ds: &Dataset, n_clients: usize, strategy: SplitStrategy, seed: u64) -> Result<Vec<Dataset>> {
    let n = ds.n_rows();
    if n_clients == 0 || n_clients > n {
        return Err(Error::Config(format!(
            "cannot split {n} rows into {n_clients} clients"
        )));
    }
    let mut rng = stream(seed, StreamKey::new(0, 0, Role::Split));
    let sizes = part_sizes(n, n_clients);
    let mut assignment = vec![usize::MAX; n];
    match strategy {
        SplitStrategy::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut start = 0;
            for (c, &size) in sizes.iter().enumerate() {
                for &i in &idx[start..start + size] {
                    assignment[i] = c;
                }
                start += size;
            }
        }
        SplitStrategy::Cluster => {
            let centroids = kmeans(&ds.rows, n_clients, 100, &mut rng);
            let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n_clients);
            for i in 0..n {
                for (c, centroid) in centroids.iter().enumerate() {
                    pairs.push((sq_dist(&ds.rows, i, centroid), i, c));
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut room = sizes.clone();
            for (_, i, c) in pairs {
                if assignment[i] == usize::MAX && room[c] > 0 {
                    assignment[i] = c;
                    room[c] -= 1;
                }
            }
        }
    }
    Ok((0..n_clients)
        .map(|c| {
            let idx: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            ds.select(&idx)
        })
        .collect())
}

fn sq_dist(rows: &Matrix, i: usize, c: &Vector) -> f64 {
    rows.row(i)
        .iter()
        .zip(c.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn kmeans<R: Rng + ?Sized>(rows: &Matrix, k: usize, max_iter: usize, rng: &mut R) -> Vec<Vector> {
    let n = rows.nrows();
    let row = |i: usize| rows.row(i).transpose();
    let mut centroids = vec![row(rng.random_range(0..n))];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(rows, i, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick);
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(rows, i, &c));
        }
        centroids.push(c);
    }
    let mut labels = vec![0usize; n];
    for it in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(rows, i, &centroids[a]).total_cmp(&sq_dist(rows, i, &centroids[b])))
                .expect("k >= 1");
            if best != *label || it == 0 {
                changed |= best != *label;
                *label = best;
            }
        }
        if it > 0 && !changed {
            break;
        }
        let mut sums = vec![Vector::zeros(rows.ncols()); k];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            sums[c] += row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = &sums[c] / counts[c] as f64;
            }
        }
    }
    centroids
}

/// An empirical problem plus the numerical rank of its mean moment.
#[derive(Debug, Clone)]
pub struct EmpiricalProblem {
    pub problem: ProblemSpec,
    pub rank: usize,
}

impl EmpiricalProblem {
    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.problem.dim()
    }
}

/// Builds client `i` from its data: `Hᵢ = XᵢᵀXᵢ/nᵢ`, `w*ᵢ` the minimum-norm
/// least-squares solution and σ²ᵢ the mean squared residual at `w*ᵢ`.
/// The global `w*` then solves `H̄ w = (1/N) Σ Xᵢᵀyᵢ/nᵢ`.
pub fn empirical_problem(clients: &[Dataset]) -> Result<EmpiricalProblem> {
    if clients.is_empty() {
        return Err(Error::Config("need at least one client dataset".into()));
    }
    let mut specs = Vec::with_capacity(clients.len());
    for (i, ds) in clients.iter().enumerate() {
        if ds.n_rows() == 0 {
            return Err(Error::InsufficientData(format!("client {i} has no rows")));
        }
        let n = ds.n_rows() as f64;
        let h = ds.second_moment();
        let b = ds.rows.tr_mul(&Vector::from_column_slice(&ds.labels)) / n;
        let (pinv, _) = linalg::psd_pseudo_inverse(&h, 1e-12);
        let w = pinv * b;
        let resid = &ds.rows * &w - Vector::from_column_slice(&ds.labels);
        let sigma2 = resid.norm_squared() / n;
        specs.push(ClientSpec::new(CovarianceModel::new(h)?, w, sigma2)?);
    }
    let problem = ProblemSpec::new(specs)?;
    let (_, rank) = linalg::psd_pseudo_inverse(problem.hessian.matrix(), 1e-12);
    Ok(EmpiricalProblem { problem, rank })
}

/// Mean squared residual over all rows of all clients.
pub fn pooled_loss(clients: &[Dataset], w: &Vector) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for ds in clients {
        let r = &ds.rows * w - Vector::from_column_slice(&ds.labels);
        acc += r.norm_squared();
        n += ds.n_rows();
    }
    acc / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn blob_dataset(n_per: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed);
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for b in 0..2 {
            let shift = if b == 0 { -4.0 } else { 4.0 };
            for _ in 0..n_per {
                let g = linalg::gaussian_vector(3, &mut rng);
                flat.extend([g[0] + shift, g[1], g[2] - shift]);
                labels.push(g[0] - g[2]);
            }
        }
        Dataset::new(Matrix::from_row_slice(2 * n_per, 3, &flat), labels, None).unwrap()
    }

    #[test]
    fn reads_rows_as_written() {
        let text = "a,y,b\n1,2,3\n4,5,6\n-1.5,0,2e-3\n";
        let (ds, rep) = read_csv(text.as_bytes(), "y").unwrap();
        assert_eq!(rep.dropped_rows, 0);
        assert_eq!(ds.labels, vec![2.0, 5.0, 0.0]);
        assert_eq!(ds.rows, Matrix::from_row_slice(3, 2, &[1.0, 3.0, 4.0, 6.0, -1.5, 2e-3]));
        assert_eq!(ds.feature_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
    }

    #[test]
    fn nan_rows_are_dropped() {
        let text = "a,y\n1,2\nNaN,3\n4,5\n";
        let (ds, rep) = read_csv(text.as_bytes(), "y").unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(rep.dropped_rows, 1);
    }

    #[test]
    fn parse_errors_locate_the_cell() {
        let text = "a,y\n1,2\n3,oops\n";
        match read_csv(text.as_bytes(), "y") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_csv("a,b\n1,2\n".as_bytes(), "y"), Err(Error::Parse { .. })));
    }

    #[test]
    fn wide_header_gives_dimension() {
        let mut header: Vec<String> = (0..65).map(|j| format!("f{j}")).collect();
        header.push("target".into());
        let mut text = header.join(",") + "\n";
        for r in 0..4 {
            let row: Vec<String> = (0..66).map(|j| ((r * 66 + j) as f64 * 0.1).to_string()).collect();
            text += &(row.join(",") + "\n");
        }
        let (ds, _) = read_csv(text.as_bytes(), "target").unwrap();
        assert_eq!(ds.dim(), 65);
    }

    #[test]
    fn standardize_invariants() {
        let ds = blob_dataset(50, 1);
        let (out, pre) = fit_apply_preprocess(&ds, PreprocessKind::Standardize).unwrap();
        let cov = out.covariance();
        let means = out.column_means();
        for j in 0..3 {
            assert!(means[j].abs() < 1e-8);
            assert!((cov[(j, j)] - 1.0).abs() < 1e-6);
        }
        assert!(pre.zero_variance_columns.is_empty());
        let (again, _) = fit_apply_preprocess(&out, PreprocessKind::Standardize).unwrap();
        assert!((again.rows - out.rows).norm() < 1e-9);
    }

    #[test]
    fn zero_variance_column_kept() {
        let rows = Matrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let ds = Dataset::new(rows, vec![0.0; 3], None).unwrap();
        let (out, pre) = fit_apply_preprocess(&ds, PreprocessKind::Standardize).unwrap();
        assert_eq!(pre.zero_variance_columns, vec![1]);
        assert_eq!(pre.fitted_scales[1], 1.0);
        assert!(out.rows.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pca_decorrelates() {
        let ds = blob_dataset(60, 2);
        let (out, pre) = fit_apply_preprocess(&ds, PreprocessKind::Pca).unwrap();
        let cov = out.covariance();
        assert!(linalg::off_diagonal_norm(&cov) < 1e-6 * cov.trace());
        for j in 1..3 {
            assert!(cov[(j - 1, j - 1)] >= cov[(j, j)]);
        }
        assert!(pre.rotation.is_some());
    }

    #[test]
    fn iid_split_sizes() {
        let ds = blob_dataset(50, 3);
        let parts = split_clients(&ds, 10, SplitStrategy::Iid, 1).unwrap();
        assert!(parts.iter().all(|p| p.n_rows() == 10));
        let whole = split_clients(&ds, 1, SplitStrategy::Iid, 1).unwrap();
        assert_eq!(whole[0], ds);
        assert!(split_clients(&ds, 101, SplitStrategy::Iid, 1).is_err());
    }

    fn between_client_variance(parts: &[Dataset]) -> f64 {
        let means: Vec<Vector> = parts.iter().map(Dataset::column_means).collect();
        let grand = means.iter().fold(Vector::zeros(3), |a, b| a + b) / means.len() as f64;
        means.iter().map(|m| (m - &grand).norm_squared()).sum::<f64>() / means.len() as f64
    }

    #[test]
    fn cluster_split_is_more_heterogeneous() {
        let ds = blob_dataset(100, 4);
        let cl = split_clients(&ds, 2, SplitStrategy::Cluster, 7).unwrap();
        let iid = split_clients(&ds, 2, SplitStrategy::Iid, 7).unwrap();
        assert_eq!(cl[0].n_rows(), 100);
        assert!(between_client_variance(&cl) > between_client_variance(&iid));
        assert_eq!(cl, split_clients(&ds, 2, SplitStrategy::Cluster, 7).unwrap());
    }

    #[test]
    fn noiseless_labels_recover_weights() {
        let mut rng = seeded(5);
        let rows = linalg::gaussian_matrix(200, 4, &mut rng);
        let w = Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let labels: Vec<f64> = (&rows * &w).iter().copied().collect();
        let ds = Dataset::new(rows, labels, None).unwrap();
        let ep = empirical_problem(&[ds]).unwrap();
        assert!((&ep.problem.w_star_global - &w).norm() < 1e-9);
        assert!(ep.problem.clients[0].noise_var < 1e-10);
        assert!(!ep.is_rank_deficient());
    }

    #[test]
    fn standardized_single_client_has_unit_diagonal() {
        let ds = blob_dataset(40, 6);
        let (out, _) = fit_apply_preprocess(&ds, PreprocessKind::Standardize).unwrap();
        let ep = empirical_problem(&[out]).unwrap();
        let h = ep.problem.hessian.matrix();
        for j in 0..3 {
            assert!((h[(j, j)] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cluster_clients_differ_but_pool_matches() {
        let ds = blob_dataset(50, 8);
        let parts = split_clients(&ds, 2, SplitStrategy::Cluster, 3).unwrap();
        let ep = empirical_problem(&parts).unwrap();
        let h1 = ep.problem.clients[0].covariance.matrix();
        let h2 = ep.problem.clients[1].covariance.matrix();
        assert!((h1 - h2).norm() > 0.0);
        assert!((ep.problem.hessian.matrix() - ds.second_moment()).norm() < 1e-10);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let rows = Matrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0, 3.0, 6.0]);
        let ds = Dataset::new(rows, vec![1.0, 2.0, -1.0, 3.0], None).unwrap();
        let ep = empirical_problem(&[ds]).unwrap();
        assert!(ep.is_rank_deficient());
        assert_eq!(ep.rank, 1);
    }

    #[test]
    fn optimum_beats_perturbations() {
        let ds = blob_dataset(60, 9);
        let parts = split_clients(&ds, 2, SplitStrategy::Iid, 1).unwrap();
        let ep = empirical_problem(&parts).unwrap();
        let w = &ep.problem.w_star_global;
        let base = pooled_loss(&parts, w);
        let mut rng = seeded(10);
        for _ in 0..100 {
            let mut delta = linalg::gaussian_vector(3, &mut rng);
            delta *= 1e-3 / delta.norm();
            assert!(pooled_loss(&parts, &(w + delta)) > base);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn splits_preserve_rows(seed in any::<u64>(), n_clients in 1usize..7, cluster in any::<bool>()) {
            let ds = blob_dataset(15, seed % 1000);
            let strategy = if cluster { SplitStrategy::Cluster } else { SplitStrategy::Iid };
            let parts = split_clients(&ds, n_clients, strategy, seed).unwrap();
            let mut sizes: Vec<usize> = parts.iter().map(Dataset::n_rows).collect();
            sizes.sort();
            prop_assert!(sizes[sizes.len() - 1] - sizes[0] <= 1);
            let mut all: Vec<Vec<u64>> = parts
                .iter()
                .flat_map(|p| (0..p.n_rows()).map(move |i| {
                    let mut r: Vec<u64> = p.rows.row(i).iter().map(|v| v.to_bits()).collect();
                    r.push(p.labels[i].to_bits());
                    r
                }))
                .collect();
            let mut orig: Vec<Vec<u64>> = (0..ds.n_rows()).map(|i| {
                let mut r: Vec<u64> = ds.rows.row(i).iter().map(|v| v.to_bits()).collect();
                r.push(ds.labels[i].to_bits());
                r
            }).collect();
            all.sort();
            orig.sort();
            prop_assert_eq!(all, orig);
        }
    }
}
