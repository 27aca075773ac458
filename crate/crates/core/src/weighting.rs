//! Cluster-size weighting of the inverse working correlation.
//!
//! Diagonal weights are `1 / sum_k g_kk`; off-diagonal weights are a random sign
//! divided by `sum_{k != l} g_kl` (zero when that sum vanishes). The signs come
//! from a counter-based stream so that every weight is a pure function of
//! `(seed, cluster, pair)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::correlation::WorkingCorrelation;
use crate::dataset::LongitudinalDataset;
use crate::error::{PwgeeError, Result};

/// Off-diagonal sums below this magnitude are treated as zero.
pub const OFF_DIAGONAL_ZERO: f64 = 1e-12;

/// Whether the cluster-size weights are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    On,
    Off,
}

impl Weighting {
    pub fn is_on(self) -> bool {
        matches!(self, Weighting::On)
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_on() { "on" } else { "off" })
    }
}

impl FromStr for Weighting {
    type Err = PwgeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" | "true" | "yes" => Ok(Weighting::On),
            "off" | "false" | "no" => Ok(Weighting::Off),
            other => Err(PwgeeError::InvalidConfig(format!(
                "unknown weighting '{other}'"
            ))),
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple into 64 bits, absorbing one word at a time.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(GOLDEN, |acc, &w| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(w.wrapping_add(GOLDEN)))
    })
}

/// Keyed Rademacher signs `B_{i,kl}`, symmetric in `(k, l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RademacherStream {
    pub seed: u64,
}

impl RademacherStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn draw(&self, cluster: usize, k: usize, l: usize) -> f64 {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        let h = hash_words(&[self.seed, cluster as u64, a as u64, b as u64]);
        if h >> 63 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// The per-cluster matrix `G^{-1} o W` used in place of the inverse working
/// correlation. Not itself the inverse of any correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedInverseCorrelation(DMatrix<f64>);

impl WeightedInverseCorrelation {
    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Weight matrix for cluster `cluster_index` given its inverse working
/// correlation.
pub fn build_weight_matrix(
    ginv: &DMatrix<f64>,
    stream: &RademacherStream,
    cluster_index: usize,
) -> DMatrix<f64> {
    let m = ginv.nrows();
    let diag_sum = ginv.diagonal().sum();
    assert!(
        diag_sum > 0.0,
        "inverse correlation must have positive diagonal"
    );
    let off_sum = ginv.sum() - diag_sum;
    let diag_w = 1.0 / diag_sum;
    let off_scale = if off_sum.abs() < OFF_DIAGONAL_ZERO {
        0.0
    } else {
        1.0 / off_sum
    };
    DMatrix::from_fn(m, m, |k, l| {
        if k == l {
            diag_w
        } else if off_scale == 0.0 {
            0.0
        } else {
            off_scale * stream.draw(cluster_index, k, l)
        }
    })
}

/// Entrywise product `G^{-1} o W`.
pub fn weighted_inverse(
    ginv: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<WeightedInverseCorrelation> {
    if ginv.shape() != w.shape() {
        return Err(PwgeeError::DimensionMismatch(format!(
            "inverse correlation {:?} vs weights {:?}",
            ginv.shape(),
            w.shape()
        )));
    }
    Ok(WeightedInverseCorrelation(ginv.component_mul(w)))
}

/// Plain GEE: the inverse working correlation is used unchanged.
pub fn unweighted_mode(ginv: &DMatrix<f64>) -> WeightedInverseCorrelation {
    WeightedInverseCorrelation(ginv.clone())
}

/// Per-cluster matrices for a whole dataset. Cluster `i` of `data` uses sign
/// stream index `i`.
pub fn cluster_matrices(
    data: &LongitudinalDataset,
    corr: &WorkingCorrelation,
    weighting: Weighting,
    stream: &RademacherStream,
) -> Result<Vec<WeightedInverseCorrelation>> {
    data.clusters()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ginv = corr.inverse(c.size())?;
            Ok(match weighting {
                Weighting::On => {
                    let w = build_weight_matrix(&ginv, stream, i);
                    weighted_inverse(&ginv, &w)?
                }
                Weighting::Off => unweighted_mode(&ginv),
            })
        })
        .collect()
}
