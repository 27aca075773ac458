//! Clustered longitudinal data: in-memory model, long-format CSV ingestion and
//! covariate standardization.
//!
//! Row order inside a cluster is kept exactly as read, since the AR(1) working
//! structure depends on it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{PwgeeError, Result};

/// One cluster: `m` observations of a response and `p` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

impl ClusterData {
    pub fn new(id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let id = id.into();
        if y.is_empty() {
            return Err(PwgeeError::InvalidDataset(format!("cluster {id} is empty")));
        }
        if x.nrows() != y.len() {
            return Err(PwgeeError::DimensionMismatch(format!(
                "cluster {id}: {} covariate rows for {} responses",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self { id, y, x })
    }

    /// Cluster size `M_i`.
    pub fn size(&self) -> usize {
        self.y.len()
    }
}

/// Immutable collection of independent clusters sharing a covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    clusters: Vec<ClusterData>,
    covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(clusters: Vec<ClusterData>, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.len() < 2 {
            return Err(PwgeeError::TooFewClusters {
                needed: 2,
                got: clusters.len(),
            });
        }
        let p = covariate_names.len();
        if p == 0 {
            return Err(PwgeeError::InvalidDataset("no covariate columns".into()));
        }
        let mut names: Vec<&str> = covariate_names.iter().map(String::as_str).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(PwgeeError::InvalidDataset(format!(
                "duplicate covariate name {}",
                w[0]
            )));
        }
        let mut seen = HashMap::with_capacity(clusters.len());
        for c in &clusters {
            if c.x.ncols() != p {
                return Err(PwgeeError::DimensionMismatch(format!(
                    "cluster {} has {} covariates, expected {p}",
                    c.id,
                    c.x.ncols()
                )));
            }
            if seen.insert(c.id.as_str(), ()).is_some() {
                return Err(PwgeeError::InvalidDataset(format!(
                    "duplicate cluster id {}",
                    c.id
                )));
            }
        }
        Ok(Self {
            clusters,
            covariate_names,
        })
    }

    /// Builds a dataset with generated covariate names `x1..xp`.
    pub fn from_clusters(clusters: Vec<ClusterData>) -> Result<Self> {
        let p = clusters.first().map(|c| c.x.ncols()).unwrap_or(0);
        Self::new(clusters, default_names(p))
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &ClusterData {
        &self.clusters[i]
    }

    /// Number of clusters `n`.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    /// Covariate dimension `p`.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(ClusterData::size).collect()
    }

    /// Total number of observations `N = sum M_i`.
    pub fn total_observations(&self) -> usize {
        self.clusters.iter().map(ClusterData::size).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters
            .iter()
            .map(ClusterData::size)
            .max()
            .unwrap_or(0)
    }

    /// Sub-dataset made of the given clusters, in the given order.
    pub fn select_clusters(&self, indices: &[usize]) -> Result<Self> {
        let clusters = indices.iter().map(|&i| self.clusters[i].clone()).collect();
        Self::new(clusters, self.covariate_names.clone())
    }

    /// Sub-dataset restricted to the given covariate columns.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&j| j >= self.p()) {
            return Err(PwgeeError::DimensionMismatch(format!(
                "column {bad} out of range for p = {}",
                self.p()
            )));
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| ClusterData {
                id: c.id.clone(),
                y: c.y.clone(),
                x: c.x.select_columns(columns),
            })
            .collect();
        let names = columns
            .iter()
            .map(|&j| self.covariate_names[j].clone())
            .collect();
        Self::new(clusters, names)
    }

    /// Same design with responses replaced cluster by cluster.
    pub fn with_responses(&self, responses: Vec<DVector<f64>>) -> Result<Self> {
        if responses.len() != self.n() {
            return Err(PwgeeError::DimensionMismatch(
                "one response vector per cluster required".into(),
            ));
        }
        let clusters = self
            .clusters
            .iter()
            .zip(responses)
            .map(|(c, y)| ClusterData::new(c.id.clone(), y, c.x.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clusters, self.covariate_names.clone())
    }

    /// Prepends an all-ones column named `name`.
    pub fn with_intercept(&self, name: &str) -> Result<Self> {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let m = c.size();
                let mut x = DMatrix::from_element(m, self.p() + 1, 1.0);
                x.columns_mut(1, self.p()).copy_from(&c.x);
                ClusterData::new(c.id.clone(), c.y.clone(), x)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut names = vec![name.to_string()];
        names.extend(self.covariate_names.iter().cloned());
        Self::new(clusters, names)
    }

    /// SHA-256 over cluster ids, sizes and the bit patterns of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clusters {
            h.update(c.id.as_bytes());
            h.update((c.size() as u64).to_le_bytes());
            for v in c.y.iter().chain(c.x.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the dataset in long format (`cluster,y,<covariates>`), values with
    /// 17 significant digits so that reloading reproduces every bit.
    pub fn write_long_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        write!(out, "cluster,y")?;
        for name in &self.covariate_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for c in &self.clusters {
            for r in 0..c.size() {
                write!(out, "{},{:.16e}", c.id, c.y[r])?;
                for j in 0..self.p() {
                    write!(out, ",{:.16e}", c.x[(r, j)])?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Which columns of a long CSV are covariates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovariateColumns {
    /// Every column other than the cluster and response columns, in file order.
    AllRemaining,
    Named(Vec<String>),
}

/// Reads a long-format CSV: one observation per row, a cluster id column, a
/// numeric response column and numeric covariate columns.
///
/// Rows of the same cluster need not be contiguous; clusters appear in order of
/// first occurrence and rows keep their file order within a cluster.
pub fn load_long_csv(
    path: impl AsRef<Path>,
    response_column: &str,
    cluster_column: &str,
    covariates: &CovariateColumns,
) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_long_csv(
        text.as_bytes(),
        &path.display().to_string(),
        response_column,
        cluster_column,
        covariates,
    )
}

/// Same as [`load_long_csv`] over any reader; `source` names it in errors.
pub fn parse_long_csv<R: Read>(
    reader: R,
    source: &str,
    response_column: &str,
    cluster_column: &str,
    covariates: &CovariateColumns,
) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PwgeeError::MissingColumn(name.to_string()))
    };
    let cluster_idx = find(cluster_column)?;
    let response_idx = find(response_column)?;
    let covariate_idx: Vec<usize> = match covariates {
        CovariateColumns::AllRemaining => (0..headers.len())
            .filter(|&j| j != cluster_idx && j != response_idx)
            .collect(),
        CovariateColumns::Named(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
    };
    if covariate_idx.is_empty() {
        return Err(PwgeeError::InvalidDataset("no covariate columns".into()));
    }

    let parse = |record: &csv::StringRecord, j: usize, row: usize| -> Result<f64> {
        let cell = record.get(j).unwrap_or("");
        cell.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| PwgeeError::NonNumericCell {
                column: headers[j].clone(),
                row,
                value: cell.to_string(),
            })
    };

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let id = record.get(cluster_idx).unwrap_or("").to_string();
        let y = parse(&record, response_idx, row + 1)?;
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(y);
        for &j in &covariate_idx {
            entry.1.push(parse(&record, j, row + 1)?);
        }
    }
    if order.is_empty() {
        return Err(PwgeeError::EmptyFile(source.to_string()));
    }

    let p = covariate_idx.len();
    let clusters = order
        .into_iter()
        .map(|id| {
            let (y, x) = rows.remove(&id).expect("cluster recorded on first sight");
            let m = y.len();
            ClusterData::new(id, DVector::from_vec(y), DMatrix::from_row_slice(m, p, &x))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = covariate_idx.iter().map(|&j| headers[j].clone()).collect();
    LongitudinalDataset::new(clusters, names)
}

/// Pooled per-column location and scale used by [`standardize_covariates`].
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: DVector<f64>,
    pub sds: DVector<f64>,
}

impl Standardization {
    /// Maps coefficients fitted on standardized covariates back to the original
    /// scale (slopes only; no intercept is implied).
    pub fn unscale_coefficients(&self, beta: &DVector<f64>) -> DVector<f64> {
        beta.component_div(&self.sds)
    }
}

/// Centers and scales every covariate column to pooled mean 0 and sample sd 1
/// (denominator `N - 1`, `N` the total number of observations).
pub fn standardize_covariates(
    data: &LongitudinalDataset,
) -> Result<(LongitudinalDataset, Standardization)> {
    let p = data.p();
    let total = data.total_observations();
    if total < 2 {
        return Err(PwgeeError::InvalidDataset(
            "need at least two observations to standardize".into(),
        ));
    }
    let mut means: DVector<f64> = DVector::zeros(p);
    for c in data.clusters() {
        for j in 0..p {
            means[j] += c.x.column(j).sum();
        }
    }
    means /= total as f64;
    let mut sds: DVector<f64> = DVector::zeros(p);
    for c in data.clusters() {
        for j in 0..p {
            sds[j] +=
                c.x.column(j)
                    .iter()
                    .map(|v| (v - means[j]).powi(2))
                    .sum::<f64>();
        }
    }
    for j in 0..p {
        sds[j] = (sds[j] / (total - 1) as f64).sqrt();
        if sds[j].is_nan() || sds[j] <= 1e-12 * means[j].abs().max(1.0) {
            return Err(PwgeeError::ZeroVarianceColumn(
                data.covariate_names()[j].clone(),
            ));
        }
    }
    let clusters = data
        .clusters()
        .iter()
        .map(|c| {
            let mut x = c.x.clone();
            for j in 0..p {
                let (mu, sd) = (means[j], sds[j]);
                x.column_mut(j).apply(|v| *v = (*v - mu) / sd);
            }
            ClusterData {
                id: c.id.clone(),
                y: c.y.clone(),
                x,
            }
        })
        .collect();
    let out = LongitudinalDataset::new(clusters, data.covariate_names().to_vec())?;
    Ok((out, Standardization { means, sds }))
}
