//! The weighted estimating function `Q_n`, its Fisher-scoring matrix `H_n` and
//! the local-quadratic penalty ridge `D_n`.
//!
//! Per-observation factors: with `eta = X beta`, `s = mu'(eta) / sqrt(phi(eta))`
//! and `r = (y - mu(eta)) / sqrt(phi(eta))`, cluster `i` contributes
//! `X_i^T diag(s) G_i (r)` to the score and `X_S^T diag(s) G_i diag(s) X_S` to
//! `H_n`, where `G_i` is the (weighted) inverse working correlation.
//! Clusters are always reduced in ascending index order.

use nalgebra::{DMatrix, DVector};

use crate::dataset::LongitudinalDataset;
use crate::error::{PwgeeError, Result};
use crate::family::Family;
use crate::penalty::Penalty;
use crate::weighting::WeightedInverseCorrelation;

/// Default `c` in the `D_n` denominator.
pub const DEFAULT_RIDGE_C: f64 = 1e-6;

/// Score and screening statistics at one coefficient vector.
#[derive(Debug, Clone)]
pub struct ScoreEvaluation {
    /// `Q_n(beta)`.
    pub q: DVector<f64>,
    /// `n^{-1} sum_i |eta~_ij(beta)|` for every coordinate `j`.
    pub mean_abs: DVector<f64>,
    /// Observations whose working variance hit the binomial floor.
    pub variance_floors: usize,
}

struct RowFactors {
    s: DVector<f64>,
    r: DVector<f64>,
    floors: usize,
}

/// Data, family and per-cluster weighted inverse correlations for one fit.
#[derive(Debug, Clone)]
pub struct EquationContext<'a> {
    data: &'a LongitudinalDataset,
    family: Family,
    ginv: Vec<WeightedInverseCorrelation>,
}

impl<'a> EquationContext<'a> {
    pub fn new(
        data: &'a LongitudinalDataset,
        family: Family,
        ginv: Vec<WeightedInverseCorrelation>,
    ) -> Result<Self> {
        if ginv.len() != data.n() {
            return Err(PwgeeError::DimensionMismatch(format!(
                "{} correlation matrices for {} clusters",
                ginv.len(),
                data.n()
            )));
        }
        for (c, g) in data.clusters().iter().zip(&ginv) {
            if g.size() != c.size() {
                return Err(PwgeeError::DimensionMismatch(format!(
                    "cluster {} has size {} but its correlation matrix is {}x{}",
                    c.id,
                    c.size(),
                    g.size(),
                    g.size()
                )));
            }
        }
        Ok(Self { data, family, ginv })
    }

    pub fn data(&self) -> &LongitudinalDataset {
        self.data
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn weighted_inverse(&self, i: usize) -> &WeightedInverseCorrelation {
        &self.ginv[i]
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.data.p() {
            return Err(PwgeeError::DimensionMismatch(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.data.p()
            )));
        }
        Ok(())
    }

    fn factors(&self, i: usize, beta: &DVector<f64>) -> RowFactors {
        let c = self.data.cluster(i);
        let eta = &c.x * beta;
        let m = c.size();
        let mut s = DVector::zeros(m);
        let mut r = DVector::zeros(m);
        let mut floors = 0;
        for k in 0..m {
            let (phi, floored) = self.family.variance_checked(eta[k]);
            floors += usize::from(floored);
            let root = phi.sqrt();
            s[k] = self.family.mean_deriv(eta[k]) / root;
            r[k] = (c.y[k] - self.family.mean(eta[k])) / root;
        }
        RowFactors { s, r, floors }
    }

    fn cluster_score_with(&self, i: usize, f: &RowFactors) -> DVector<f64> {
        let v = (self.ginv[i].matrix() * &f.r).component_mul(&f.s);
        self.data.cluster(i).x.tr_mul(&v)
    }

    /// `eta~_i(beta)`, the contribution of cluster `i` to the score.
    pub fn cluster_score(&self, i: usize, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        let f = self.factors(i, beta);
        Ok(self.cluster_score_with(i, &f))
    }

    /// `Q_n(beta) = n^{-1} sum_i eta~_i(beta)`.
    pub fn q_n(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate_score(beta)?.q)
    }

    /// `Q_n` together with the per-coordinate mean absolute cluster score.
    pub fn evaluate_score(&self, beta: &DVector<f64>) -> Result<ScoreEvaluation> {
        self.check_beta(beta)?;
        let p = self.data.p();
        let mut q = DVector::zeros(p);
        let mut mean_abs = DVector::zeros(p);
        let mut variance_floors = 0;
        for i in 0..self.data.n() {
            let f = self.factors(i, beta);
            variance_floors += f.floors;
            let score = self.cluster_score_with(i, &f);
            q += &score;
            mean_abs += score.abs();
        }
        let n = self.data.n() as f64;
        q /= n;
        mean_abs /= n;
        Ok(ScoreEvaluation {
            q,
            mean_abs,
            variance_floors,
        })
    }

    /// `H_n(beta, S)`, an `|S| x |S|` symmetric matrix.
    pub fn h_n(&self, beta: &DVector<f64>, active: &[usize]) -> Result<DMatrix<f64>> {
        self.check_beta(beta)?;
        if active.is_empty() {
            return Err(PwgeeError::InvalidConfig(
                "H_n needs a nonempty index set".into(),
            ));
        }
        if let Some(&bad) = active.iter().find(|&&j| j >= self.data.p()) {
            return Err(PwgeeError::DimensionMismatch(format!(
                "index {bad} out of range"
            )));
        }
        let total = self.data.total_observations();
        let width = active.len();
        // Stack diag(s) X_S and G diag(s) X_S over clusters, then one product.
        let mut left = DMatrix::zeros(total, width);
        let mut right = DMatrix::zeros(total, width);
        let mut row = 0;
        for i in 0..self.data.n() {
            let c = self.data.cluster(i);
            let m = c.size();
            let f = self.factors(i, beta);
            let mut v = c.x.select_columns(active);
            for k in 0..m {
                v.row_mut(k).scale_mut(f.s[k]);
            }
            let g = self.ginv[i].matrix();
            let gv = g * &v;
            left.rows_mut(row, m).copy_from(&v);
            right.rows_mut(row, m).copy_from(&gv);
            row += m;
        }
        let mut h = left.tr_mul(&right);
        h /= self.data.n() as f64;
        // symmetric in exact arithmetic; remove rounding asymmetry
        let ht = h.transpose();
        h += ht;
        h *= 0.5;
        Ok(h)
    }
}

/// `D_n(beta, S) = diag(rho_lambda(|beta_j|) / (c + |beta_j|))` for `j` in `S`.
pub fn d_n(beta: &DVector<f64>, active: &[usize], penalty: &Penalty, c: f64) -> DMatrix<f64> {
    let diag = DVector::from_iterator(
        active.len(),
        active.iter().map(|&j| {
            let t = beta[j].abs();
            penalty.rate(t) / (c + t)
        }),
    );
    DMatrix::from_diagonal(&diag)
}
