//! Working correlation structures: construction, inversion and moment
//! estimation of the correlation parameter from Pearson residuals.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::LongitudinalDataset;
use crate::error::{PwgeeError, Result};
use crate::family::Family;

/// Margin kept between an estimated correlation and the edge of its valid range.
pub const RHO_CLAMP_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[serde(rename = "indep")]
    Independence,
    #[serde(rename = "exch")]
    Exchangeable,
    Ar1,
}

impl CorrelationKind {
    pub fn label(self) -> &'static str {
        match self {
            CorrelationKind::Independence => "indep",
            CorrelationKind::Exchangeable => "exch",
            CorrelationKind::Ar1 => "ar1",
        }
    }

    pub fn has_parameter(self) -> bool {
        !matches!(self, CorrelationKind::Independence)
    }

    /// Open interval of correlation values giving a positive-definite matrix for
    /// every cluster size up to `max_m`.
    pub fn valid_range(self, max_m: usize) -> (f64, f64) {
        match self {
            CorrelationKind::Independence => (f64::NEG_INFINITY, f64::INFINITY),
            CorrelationKind::Exchangeable if max_m <= 1 => (f64::NEG_INFINITY, f64::INFINITY),
            CorrelationKind::Exchangeable => (-1.0 / (max_m as f64 - 1.0), 1.0),
            CorrelationKind::Ar1 => (-1.0, 1.0),
        }
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CorrelationKind {
    type Err = PwgeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indep" | "independence" => Ok(CorrelationKind::Independence),
            "exch" | "exchangeable" => Ok(CorrelationKind::Exchangeable),
            "ar1" => Ok(CorrelationKind::Ar1),
            other => Err(PwgeeError::InvalidConfig(format!(
                "unknown correlation structure '{other}'"
            ))),
        }
    }
}

/// A working correlation structure with a concrete parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub kind: CorrelationKind,
    pub rho: f64,
}

impl WorkingCorrelation {
    pub fn independence() -> Self {
        Self {
            kind: CorrelationKind::Independence,
            rho: 0.0,
        }
    }

    pub fn exchangeable(rho: f64) -> Self {
        Self {
            kind: CorrelationKind::Exchangeable,
            rho,
        }
    }

    pub fn ar1(rho: f64) -> Self {
        Self {
            kind: CorrelationKind::Ar1,
            rho,
        }
    }

    fn check(&self, m: usize) -> Result<()> {
        let (lo, hi) = self.kind.valid_range(m);
        if self.kind.has_parameter() && !(self.rho > lo && self.rho < hi) {
            return Err(PwgeeError::InvalidCorrelation { rho: self.rho, m });
        }
        Ok(())
    }

    /// The `m x m` working correlation matrix.
    pub fn matrix(&self, m: usize) -> Result<DMatrix<f64>> {
        self.check(m)?;
        let rho = self.rho;
        Ok(match self.kind {
            CorrelationKind::Independence => DMatrix::identity(m, m),
            CorrelationKind::Exchangeable => {
                DMatrix::from_fn(m, m, |k, l| if k == l { 1.0 } else { rho })
            }
            CorrelationKind::Ar1 => DMatrix::from_fn(m, m, |k, l| rho.powi(k.abs_diff(l) as i32)),
        })
    }

    /// Closed-form inverse of [`Self::matrix`].
    pub fn inverse(&self, m: usize) -> Result<DMatrix<f64>> {
        self.check(m)?;
        let rho = self.rho;
        Ok(match self.kind {
            CorrelationKind::Independence => DMatrix::identity(m, m),
            _ if m == 1 => DMatrix::identity(1, 1),
            CorrelationKind::Exchangeable => {
                let a = 1.0 / (1.0 - rho);
                let b = rho / (1.0 + (m as f64 - 1.0) * rho);
                DMatrix::from_fn(m, m, |k, l| if k == l { a * (1.0 - b) } else { -a * b })
            }
            CorrelationKind::Ar1 => {
                let s = 1.0 / (1.0 - rho * rho);
                DMatrix::from_fn(m, m, |k, l| {
                    if k == l {
                        if k == 0 || k == m - 1 {
                            s
                        } else {
                            s * (1.0 + rho * rho)
                        }
                    } else if k.abs_diff(l) == 1 {
                        -rho * s
                    } else {
                        0.0
                    }
                })
            }
        })
    }
}

/// Builds the working correlation matrix of size `m`.
pub fn build_correlation(spec: &WorkingCorrelation, m: usize) -> Result<DMatrix<f64>> {
    spec.matrix(m)
}

/// General symmetric positive-definite inverse via Cholesky. On failure the
/// smallest eigenvalue is reported.
pub fn invert_correlation(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !g.is_square() {
        return Err(PwgeeError::DimensionMismatch(format!(
            "{}x{} matrix is not square",
            g.nrows(),
            g.ncols()
        )));
    }
    match g.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => {
            let min_eigenvalue = g
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Err(PwgeeError::NotPositiveDefinite { min_eigenvalue })
        }
    }
}

/// Pearson residuals `(y - mu) / sqrt(phi)` for one cluster.
pub fn pearson_residuals(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    family: Family,
) -> DVector<f64> {
    let eta = x * beta;
    DVector::from_fn(y.len(), |k, _| {
        (y[k] - family.mean(eta[k])) / family.variance(eta[k]).sqrt()
    })
}

/// Moment estimate of the working correlation parameter.
///
/// Cross-products of Pearson residuals over all within-cluster pairs
/// (exchangeable) or adjacent pairs (AR(1)) are averaged with a `- p` degrees of
/// freedom correction, which is dropped when it would leave a nonpositive
/// denominator, and divided by the pooled residual scale. The result is clamped
/// inside the positive-definite range.
pub fn estimate_rho(
    data: &LongitudinalDataset,
    beta: &DVector<f64>,
    family: Family,
    kind: CorrelationKind,
) -> Result<f64> {
    if !kind.has_parameter() {
        return Ok(0.0);
    }
    let p = beta.iter().filter(|b| **b != 0.0).count() as f64;
    let mut cross = 0.0;
    let mut pairs = 0usize;
    let mut ss = 0.0;
    for c in data.clusters() {
        let r = pearson_residuals(&c.x, &c.y, beta, family);
        let m = r.len();
        ss += r.norm_squared();
        match kind {
            CorrelationKind::Exchangeable => {
                // sum_{k<l} r_k r_l = ((sum r)^2 - sum r^2) / 2
                let s = r.sum();
                cross += (s * s - r.norm_squared()) / 2.0;
                pairs += m * (m - 1) / 2;
            }
            CorrelationKind::Ar1 => {
                for k in 1..m {
                    cross += r[k - 1] * r[k];
                }
                pairs += m - 1;
            }
            CorrelationKind::Independence => unreachable!(),
        }
    }
    if pairs == 0 {
        return Err(PwgeeError::NoCorrelationPairs);
    }
    let total = data.total_observations() as f64;
    let pair_df = if pairs as f64 - p > 0.0 {
        pairs as f64 - p
    } else {
        pairs as f64
    };
    let obs_df = if total - p > 0.0 { total - p } else { total };
    let scale = ss / obs_df;
    let rho = if scale > 0.0 && cross != 0.0 {
        (cross / pair_df) / scale
    } else {
        0.0
    };
    let (lo, hi) = kind.valid_range(data.max_cluster_size());
    let lo = if lo.is_finite() {
        lo + RHO_CLAMP_MARGIN
    } else {
        -1.0 + RHO_CLAMP_MARGIN
    };
    Ok(rho.clamp(lo, hi - RHO_CLAMP_MARGIN))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClusterData;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn build_examples() {
        assert_eq!(
            WorkingCorrelation::independence().matrix(3).unwrap(),
            DMatrix::identity(3, 3)
        );
        let g = WorkingCorrelation::exchangeable(0.5).matrix(3).unwrap();
        assert_eq!(
            g,
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0])
        );
        let g = WorkingCorrelation::ar1(0.5).matrix(3).unwrap();
        assert_eq!(
            g,
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0])
        );
    }

    #[test]
    fn closed_form_inverses() {
        let inv = WorkingCorrelation::exchangeable(0.5).inverse(3).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.5, -0.5, -0.5, -0.5, 1.5, -0.5, -0.5, -0.5, 1.5]);
        assert!(max_abs(&inv, &expected) < 1e-14);
        let inv = WorkingCorrelation::ar1(0.5).inverse(3).unwrap();
        let t = 2.0 / 3.0;
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[4.0 / 3.0, -t, 0.0, -t, 5.0 / 3.0, -t, 0.0, -t, 4.0 / 3.0],
        );
        assert!(max_abs(&inv, &expected) < 1e-14);
        let i3 = DMatrix::identity(3, 3);
        assert_eq!(invert_correlation(&i3).unwrap(), i3);
    }

    #[test]
    fn out_of_range_rho_rejected() {
        assert!(WorkingCorrelation::exchangeable(-0.6).matrix(3).is_err());
        assert!(WorkingCorrelation::exchangeable(-0.6).matrix(2).is_ok());
        assert!(WorkingCorrelation::ar1(1.0).matrix(2).is_err());
        assert!(WorkingCorrelation::exchangeable(1.0).inverse(4).is_err());
    }

    #[test]
    fn non_pd_reports_smallest_eigenvalue() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match invert_correlation(&g) {
            Err(PwgeeError::NotPositiveDefinite { min_eigenvalue }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn build_invert_multiply_is_identity() {
        for m in 1..=15usize {
            for rho in [-0.3, 0.0, 0.3, 0.5, 0.9] {
                for kind in [
                    CorrelationKind::Independence,
                    CorrelationKind::Exchangeable,
                    CorrelationKind::Ar1,
                ] {
                    let spec = WorkingCorrelation { kind, rho };
                    let Ok(g) = spec.matrix(m) else { continue };
                    let eye = DMatrix::identity(m, m);
                    let closed = spec.inverse(m).unwrap();
                    assert!(
                        max_abs(&(&g * &closed), &eye) < 1e-10,
                        "{kind} m={m} rho={rho}"
                    );
                    let generic = invert_correlation(&g).unwrap();
                    assert!(max_abs(&(&g * &generic), &eye) < 1e-10);
                }
            }
        }
    }

    fn residual_dataset(rows: Vec<Vec<f64>>) -> LongitudinalDataset {
        // Intercept-free single covariate fixed at zero so that residuals equal y.
        let clusters = rows
            .into_iter()
            .enumerate()
            .map(|(i, y)| {
                let m = y.len();
                ClusterData::new(i.to_string(), DVector::from_vec(y), DMatrix::zeros(m, 1)).unwrap()
            })
            .collect();
        LongitudinalDataset::from_clusters(clusters).unwrap()
    }

    #[test]
    fn zero_residuals_give_zero() {
        let d = residual_dataset(vec![vec![0.0; 3], vec![0.0; 2]]);
        let rho = estimate_rho(
            &d,
            &DVector::zeros(1),
            Family::Gaussian,
            CorrelationKind::Exchangeable,
        )
        .unwrap();
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn equal_residuals_clamp_to_upper_bound() {
        let d = residual_dataset(vec![vec![1.0, 1.0, 1.0], vec![-1.0, -1.0], vec![1.0, 1.0]]);
        for kind in [CorrelationKind::Exchangeable, CorrelationKind::Ar1] {
            let rho = estimate_rho(&d, &DVector::zeros(1), Family::Gaussian, kind).unwrap();
            assert_eq!(rho, 1.0 - RHO_CLAMP_MARGIN);
        }
    }

    #[test]
    fn singleton_clusters_have_no_pairs() {
        let d = residual_dataset(vec![vec![1.0], vec![2.0]]);
        let err = estimate_rho(
            &d,
            &DVector::zeros(1),
            Family::Gaussian,
            CorrelationKind::Ar1,
        )
        .unwrap_err();
        assert!(matches!(err, PwgeeError::NoCorrelationPairs));
    }

    fn exchangeable_sample(rho: f64, n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let shared: f64 = StandardNormal.sample(&mut rng);
                (0..m)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        rho.sqrt() * shared + (1.0 - rho).sqrt() * e
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn recovers_exchangeable_rho() {
        let d = residual_dataset(exchangeable_sample(0.5, 2000, 4, 11));
        let rho = estimate_rho(
            &d,
            &DVector::zeros(1),
            Family::Gaussian,
            CorrelationKind::Exchangeable,
        )
        .unwrap();
        assert!((0.45..=0.55).contains(&rho), "{rho}");
    }

    #[test]
    fn invariant_to_cluster_order() {
        let mut rows = exchangeable_sample(0.3, 50, 3, 5);
        let d1 = residual_dataset(rows.clone());
        rows.reverse();
        let d2 = residual_dataset(rows);
        for kind in [CorrelationKind::Exchangeable, CorrelationKind::Ar1] {
            let a = estimate_rho(&d1, &DVector::zeros(1), Family::Gaussian, kind).unwrap();
            let b = estimate_rho(&d2, &DVector::zeros(1), Family::Gaussian, kind).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
