//! Fourfold cross-validation over a grid of tuning parameters.
//!
//! Folds are whole clusters. Each (fold, lambda) training fit gets its own
//! Rademacher seed, and held-out loss uses the independence likelihood.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LongitudinalDataset;
use crate::error::{PwgeeError, Result};
use crate::solver::{fit_pwgee, score_at, FitConfig, FitResult, ModelSpec};
use crate::weighting::{hash_words, Weighting};

pub const NUM_FOLDS: usize = 4;
pub const DEFAULT_GRID_SIZE: usize = 25;
/// Smallest grid value as a fraction of `lambda_max`.
pub const DEFAULT_GRID_RATIO: f64 = 0.01;

const FOLD_TAG: u64 = 0x464f_4c44;
const FIT_TAG: u64 = 0x4356_4649;

/// Splits clusters `0..n` into four folds: seeded shuffle, then round-robin.
pub fn make_folds(n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < NUM_FOLDS {
        return Err(PwgeeError::TooFewClusters {
            needed: NUM_FOLDS,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, FOLD_TAG]));
    order.shuffle(&mut rng);
    let mut folds: Vec<Vec<usize>> = (0..NUM_FOLDS)
        .map(|_| Vec::with_capacity(n / NUM_FOLDS + 1))
        .collect();
    for (k, i) in order.into_iter().enumerate() {
        folds[k % NUM_FOLDS].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Smallest lambda for which every penalized coordinate fails the screen at
/// the starting point.
pub fn lambda_max(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    config: &FitConfig,
) -> Result<f64> {
    let p = data.p();
    config.validate(p)?;
    let start = match &config.init {
        Some(b) => DVector::from_column_slice(b),
        None => DVector::zeros(p),
    };
    let eval = score_at(data, model, &start)?;
    let unit_rate = config.penalty.kind.with_lambda(1.0).rate_at_zero_plus()?;
    let max = (0..p)
        .filter(|j| !config.penalty_exempt.contains(j))
        .map(|j| eval.mean_abs[j])
        .fold(0.0, f64::max);
    if !max.is_finite() || max <= 0.0 {
        return Err(PwgeeError::InvalidConfig(format!(
            "cannot derive a lambda grid: largest screening statistic is {max}"
        )));
    }
    Ok(max / unit_rate)
}

/// `size` log-spaced values from `max` down to `ratio * max`.
pub fn log_grid(max: f64, ratio: f64, size: usize) -> Vec<f64> {
    if size == 1 {
        return vec![max];
    }
    let (hi, lo) = (max.ln(), (max * ratio).ln());
    (0..size)
        .map(|k| (hi + (lo - hi) * k as f64 / (size - 1) as f64).exp())
        .collect()
}

/// Default grid: 25 log-spaced values from `lambda_max` to `0.01 lambda_max`.
pub fn default_grid(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    config: &FitConfig,
) -> Result<Vec<f64>> {
    Ok(log_grid(
        lambda_max(data, model, config)?,
        DEFAULT_GRID_RATIO,
        DEFAULT_GRID_SIZE,
    ))
}

/// How the grid value is picked from the cross-validation curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Smallest summed loss; exact ties go to the larger lambda.
    Min,
    /// Largest lambda whose summed loss is within one paired standard error
    /// of the minimum. The standard error comes from the cluster-wise
    /// held-out loss differences against the minimizer.
    #[default]
    OneSe,
}

impl std::fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionRule::Min => "min",
            SelectionRule::OneSe => "one_se",
        })
    }
}

impl std::str::FromStr for SelectionRule {
    type Err = PwgeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(SelectionRule::Min),
            "one_se" | "1se" | "one-se" => Ok(SelectionRule::OneSe),
            _ => Err(PwgeeError::InvalidConfig(format!(
                "unknown selection rule '{s}'; expected min or one_se"
            ))),
        }
    }
}

/// Held-out loss of one fold at one lambda.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub fold: usize,
    /// `+inf` when the training fit failed.
    pub loss: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvOutcome {
    /// Grid in descending order.
    pub grid: Vec<f64>,
    /// Summed held-out loss per grid value.
    pub totals: Vec<f64>,
    pub rule: SelectionRule,
    pub lambda_star: f64,
    pub index_star: usize,
    /// Position of the smallest summed loss.
    pub index_min: usize,
    /// Rows ordered by lambda (descending), then fold.
    pub curve: Vec<CvPoint>,
    /// Held-out loss of every cluster, one row per grid value.
    pub cluster_loss: Vec<Vec<f64>>,
    pub failed_fits: usize,
}

/// Weighting seed of the training fit for `fold` at grid position `lambda_index`.
pub fn training_seed(seed: u64, fold: usize, lambda_index: usize) -> u64 {
    hash_words(&[seed, FIT_TAG, fold as u64, lambda_index as u64])
}

/// Fits on all clusters outside `folds[fold]`.
pub fn training_fit(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    config: &FitConfig,
    folds: &[Vec<usize>],
    fold: usize,
    lambda: (usize, f64),
    seed: u64,
) -> Result<FitResult> {
    let train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let train = data.select_clusters(&train)?;
    let model = model.with_seed(training_seed(seed, fold, lambda.0));
    fit_pwgee(&train, &model, &config.with_lambda(lambda.1))
}

/// Independence-likelihood loss of `beta` on each of the given clusters. With
/// weighting on, each cluster's loss is divided by its size.
pub fn cluster_heldout_losses(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    clusters: &[usize],
    beta: &DVector<f64>,
) -> Vec<f64> {
    clusters
        .iter()
        .map(|&i| {
            let c = data.cluster(i);
            let w = match model.weighting {
                Weighting::On => 1.0 / c.size() as f64,
                Weighting::Off => 1.0,
            };
            let eta = &c.x * beta;
            c.y.iter()
                .zip(eta.iter())
                .map(|(&y, &e)| model.family.heldout_loss(y, e))
                .sum::<f64>()
                * w
        })
        .collect()
}

/// Summed [`cluster_heldout_losses`].
pub fn heldout_loss(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    clusters: &[usize],
    beta: &DVector<f64>,
) -> f64 {
    cluster_heldout_losses(data, model, clusters, beta)
        .iter()
        .sum()
}

/// Cross-validates the grid; ties go to the larger lambda.
pub fn cv_select(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    config: &FitConfig,
    grid: &[f64],
    rule: SelectionRule,
    seed: u64,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(PwgeeError::EmptyInput("lambda grid".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(PwgeeError::InvalidConfig(format!(
            "invalid grid value {bad}"
        )));
    }
    config.validate(data.p())?;
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let folds = make_folds(data.n(), seed)?;

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|l| (0..NUM_FOLDS).map(move |f| (l, f)))
        .collect();
    let results: Vec<(CvPoint, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(l, f)| {
            let lambda = grid[l];
            match training_fit(data, model, config, &folds, f, (l, lambda), seed) {
                Ok(fit) => {
                    let losses = cluster_heldout_losses(data, model, &folds[f], &fit.beta)
                        .into_iter()
                        .map(|v| if v.is_nan() { f64::INFINITY } else { v })
                        .collect::<Vec<_>>();
                    let point = CvPoint {
                        lambda,
                        fold: f,
                        loss: losses.iter().sum(),
                        error: None,
                    };
                    (point, losses)
                }
                Err(e) => {
                    let point = CvPoint {
                        lambda,
                        fold: f,
                        loss: f64::INFINITY,
                        error: Some(e.to_string()),
                    };
                    (point, vec![f64::INFINITY; folds[f].len()])
                }
            }
        })
        .collect();

    let mut cluster_loss = vec![vec![0.0; data.n()]; grid.len()];
    let mut totals = vec![0.0; grid.len()];
    let mut curve = Vec::with_capacity(results.len());
    for (&(l, f), (point, losses)) in jobs.iter().zip(results) {
        for (&i, v) in folds[f].iter().zip(losses) {
            cluster_loss[l][i] = v;
        }
        totals[l] += point.loss;
        curve.push(point);
    }
    let index_min = argmin_prefer_first(&totals);
    let index_star = match rule {
        SelectionRule::Min => index_min,
        SelectionRule::OneSe => one_se_index(&cluster_loss, &totals, index_min),
    };
    let failed_fits = curve.iter().filter(|p| p.error.is_some()).count();
    Ok(CvOutcome {
        rule,
        lambda_star: grid[index_star],
        index_star,
        index_min,
        grid,
        totals,
        curve,
        cluster_loss,
        failed_fits,
    })
}

/// Grid is descending, so keeping the first minimum sends ties to the larger lambda.
fn argmin_prefer_first(totals: &[f64]) -> usize {
    let mut best = 0;
    for (l, &t) in totals.iter().enumerate() {
        if t < totals[best] {
            best = l;
        }
    }
    best
}

/// Rows of `unit_loss` are grid values; columns are the units whose paired
/// differences give the standard error.
fn one_se_index(unit_loss: &[Vec<f64>], totals: &[f64], index_min: usize) -> usize {
    let best = &unit_loss[index_min];
    let k = best.len() as f64;
    for l in 0..index_min {
        let diffs: Vec<f64> = unit_loss[l].iter().zip(best).map(|(a, b)| a - b).collect();
        if diffs.iter().any(|d| !d.is_finite()) {
            continue;
        }
        let mean = diffs.iter().sum::<f64>() / k;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let se_total = (var * k).sqrt();
        if totals[l] - totals[index_min] <= se_total {
            return l;
        }
    }
    index_min
}
