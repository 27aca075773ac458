//! Quasi-Newton-Raphson solver for the penalized weighted estimating equations.
//!
//! Each iteration solves `(H_n + D_n) step = (Q_n - rho(|beta|) sgn(beta))_S` on
//! the current index set `S`, pins coordinates outside `S` at zero, and then
//! re-screens `S` from the mean absolute cluster scores (kept coordinates:
//! score above `lambda * rho_bar(0+)`, penalty-exempt, or `|beta_j|` above the
//! zero threshold).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::{estimate_rho, CorrelationKind, WorkingCorrelation};
use crate::dataset::LongitudinalDataset;
use crate::equations::{d_n, EquationContext, ScoreEvaluation, DEFAULT_RIDGE_C};
use crate::error::{PwgeeError, Result};
use crate::family::Family;
use crate::penalty::Penalty;
use crate::weighting::{cluster_matrices, RademacherStream, Weighting};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-15;
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-3;
const MAX_STEP_HALVINGS: usize = 30;
const RIDGE_JITTER: f64 = 1e-8;

/// Everything about the marginal model except the penalty: family, working
/// correlation, weighting switch and the seed of the sign stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub correlation: CorrelationKind,
    /// Pinned correlation parameter; re-estimated every iteration when absent.
    pub rho: Option<f64>,
    pub weighting: Weighting,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        correlation: CorrelationKind,
        weighting: Weighting,
        seed: u64,
    ) -> Self {
        Self {
            family,
            correlation,
            rho: None,
            weighting,
            seed,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub penalty: Penalty,
    pub max_iter: usize,
    /// Stop when the l1 change of beta between iterations is at most this.
    pub tol: f64,
    /// Penalized coefficients below this magnitude are reported as zero.
    pub zero_threshold: f64,
    /// Coordinates that are never penalized (e.g. an intercept column).
    pub penalty_exempt: Vec<usize>,
    pub init: Option<Vec<f64>>,
    /// `c` in the `D_n` denominator.
    pub ridge_c: f64,
}

impl FitConfig {
    pub fn new(penalty: Penalty) -> Self {
        Self {
            penalty,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
            penalty_exempt: Vec::new(),
            init: None,
            ridge_c: DEFAULT_RIDGE_C,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut c = self.clone();
        c.penalty.lambda = lambda;
        c
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        self.penalty.kind.validate()?;
        Penalty::new(self.penalty.kind, self.penalty.lambda)?;
        if self.max_iter < 1 {
            return Err(PwgeeError::InvalidConfig(
                "max_iter must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0 && self.zero_threshold > 0.0 && self.ridge_c > 0.0) {
            return Err(PwgeeError::InvalidConfig(
                "tolerances and ridge constant must be positive".into(),
            ));
        }
        if let Some(&j) = self.penalty_exempt.iter().find(|&&j| j >= p) {
            return Err(PwgeeError::InvalidConfig(format!(
                "exempt index {j} out of range"
            )));
        }
        if let Some(init) = &self.init {
            if init.len() != p {
                return Err(PwgeeError::DimensionMismatch(format!(
                    "initial value has length {}, expected {p}",
                    init.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Observation evaluations at which the binomial variance floor engaged.
    pub variance_floors: usize,
    pub step_halvings: usize,
    pub ridge_jitters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// Nonzero coordinates plus penalty-exempt ones, ascending.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// `||Q_n(beta) - v||_inf` with `v` the best subgradient choice.
    pub final_score_norm: f64,
    pub rho_hat: Option<f64>,
    /// l1 change of beta at every iteration.
    pub trace: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

fn is_exempt(exempt: &[bool], j: usize) -> bool {
    exempt[j]
}

fn signed_rate(penalty: &Penalty, exempt: &[bool], beta: &DVector<f64>, j: usize) -> f64 {
    if is_exempt(exempt, j) || beta[j] == 0.0 {
        0.0
    } else {
        penalty.rate(beta[j].abs()) * beta[j].signum()
    }
}

/// Residual of the approximate-solution condition: for nonzero `beta_j` the
/// gap `Q_j - rho(|beta_j|) sgn(beta_j)`; for zero penalized `beta_j` the
/// distance of `Q_j` from `[-lambda rho_bar(0+), lambda rho_bar(0+)]`.
pub fn certificate_residuals(
    q: &DVector<f64>,
    beta: &DVector<f64>,
    penalty: &Penalty,
    exempt: &[usize],
) -> DVector<f64> {
    let mut is_ex = vec![false; beta.len()];
    for &j in exempt {
        is_ex[j] = true;
    }
    let thr = penalty.threshold();
    DVector::from_fn(beta.len(), |j, _| {
        if beta[j] != 0.0 || is_ex[j] {
            q[j] - signed_rate(penalty, &is_ex, beta, j)
        } else {
            let a = q[j].abs();
            if a > thr {
                a - thr
            } else {
                0.0
            }
        }
    })
}

struct Workspace<'a> {
    data: &'a LongitudinalDataset,
    model: &'a ModelSpec,
    stream: RademacherStream,
    rho: Option<f64>,
    ctx: EquationContext<'a>,
    full_h: Option<DMatrix<f64>>,
}

impl<'a> Workspace<'a> {
    fn new(
        data: &'a LongitudinalDataset,
        model: &'a ModelSpec,
        beta: &DVector<f64>,
    ) -> Result<Self> {
        let stream = RademacherStream::new(model.seed);
        let rho = Self::rho_for(data, model, beta)?;
        let ctx = Self::context(data, model, &stream, rho)?;
        Ok(Self {
            data,
            model,
            stream,
            rho,
            ctx,
            full_h: None,
        })
    }

    fn rho_for(
        data: &LongitudinalDataset,
        model: &ModelSpec,
        beta: &DVector<f64>,
    ) -> Result<Option<f64>> {
        if !model.correlation.has_parameter() {
            return Ok(None);
        }
        match model.rho {
            Some(r) => Ok(Some(r)),
            None => estimate_rho(data, beta, model.family, model.correlation).map(Some),
        }
    }

    fn context(
        data: &'a LongitudinalDataset,
        model: &ModelSpec,
        stream: &RademacherStream,
        rho: Option<f64>,
    ) -> Result<EquationContext<'a>> {
        let corr = WorkingCorrelation {
            kind: model.correlation,
            rho: rho.unwrap_or(0.0),
        };
        let g = cluster_matrices(data, &corr, model.weighting, stream)?;
        EquationContext::new(data, model.family, g)
    }

    fn rho_is_estimated(&self) -> bool {
        self.model.correlation.has_parameter() && self.model.rho.is_none()
    }

    /// Re-estimates the correlation parameter at `beta`; true if the equations changed.
    fn refresh(&mut self, beta: &DVector<f64>) -> Result<bool> {
        if !self.rho_is_estimated() {
            return Ok(false);
        }
        let rho = Self::rho_for(self.data, self.model, beta)?;
        if rho == self.rho {
            return Ok(false);
        }
        self.rho = rho;
        self.ctx = Self::context(self.data, self.model, &self.stream, rho)?;
        self.full_h = None;
        Ok(true)
    }

    fn h_block(&mut self, beta: &DVector<f64>, active: &[usize]) -> Result<DMatrix<f64>> {
        if !self.model.family.has_constant_weights() {
            return self.ctx.h_n(beta, active);
        }
        // H_n does not depend on beta here: build it once over all coordinates.
        if self.full_h.is_none() {
            let all: Vec<usize> = (0..self.data.p()).collect();
            self.full_h = Some(self.ctx.h_n(beta, &all)?);
        }
        let full = self.full_h.as_ref().expect("cached above");
        Ok(full.select_rows(active).select_columns(active))
    }
}

/// Score evaluation at `beta` under the model, with the correlation parameter
/// estimated at `beta` when it is not pinned.
pub fn score_at(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    beta: &DVector<f64>,
) -> Result<ScoreEvaluation> {
    let ws = Workspace::new(data, model, beta)?;
    ws.ctx.evaluate_score(beta)
}

/// LU solve that treats pivots below `1e-14` of the largest as singular.
fn try_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.lu();
    let pivots = lu.u().diagonal().abs();
    if pivots.min() <= 1e-14 * pivots.max() {
        return None;
    }
    lu.solve(b).filter(|x| x.iter().all(|v| v.is_finite()))
}

fn solve_system(
    mut a: DMatrix<f64>,
    b: &DVector<f64>,
    jitters: &mut usize,
) -> Result<DVector<f64>> {
    let dim = b.len();
    if let Some(x) = try_solve(a.clone(), b) {
        return Ok(x);
    }
    *jitters += 1;
    let bump = RIDGE_JITTER * a.trace().abs().max(f64::MIN_POSITIVE) / dim as f64;
    for k in 0..dim {
        a[(k, k)] += bump;
    }
    try_solve(a, b).ok_or(PwgeeError::SingularSystem(dim))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Fits the penalized weighted GEE.
pub fn fit_pwgee(
    data: &LongitudinalDataset,
    model: &ModelSpec,
    config: &FitConfig,
) -> Result<FitResult> {
    let p = data.p();
    config.validate(p)?;
    let penalty = config.penalty;
    let threshold = penalty.threshold();
    let mut exempt = vec![false; p];
    for &j in &config.penalty_exempt {
        exempt[j] = true;
    }

    let mut beta = match &config.init {
        Some(b) => DVector::from_column_slice(b),
        None => DVector::zeros(p),
    };
    let mut ws = Workspace::new(data, model, &beta)?;
    let mut diagnostics = FitDiagnostics::default();
    let mut active: Vec<usize> = (0..p).collect();
    let mut eval = ws.ctx.evaluate_score(&beta)?;
    diagnostics.variance_floors += eval.variance_floors;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        if ws.refresh(&beta)? {
            eval = ws.ctx.evaluate_score(&beta)?;
            diagnostics.variance_floors += eval.variance_floors;
        }

        // Penalized zeros whose score is within the threshold stay at zero.
        let moving: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&j| exempt[j] || beta[j] != 0.0 || eval.q[j].abs() > threshold)
            .collect();

        let mut next = DVector::zeros(p);
        let mut next_eval: Option<ScoreEvaluation> = None;
        if !moving.is_empty() {
            let mut lhs = ws.h_block(&beta, &moving)?;
            let ridge = d_n(&beta, &moving, &penalty, config.ridge_c);
            let mut rhs = DVector::zeros(moving.len());
            for (a, &j) in moving.iter().enumerate() {
                if !exempt[j] {
                    lhs[(a, a)] += ridge[(a, a)];
                }
                rhs[a] = eval.q[j] - signed_rate(&penalty, &exempt, &beta, j);
            }
            let step = solve_system(lhs, &rhs, &mut diagnostics.ridge_jitters)?;

            let mut scale = 1.0;
            let mut halvings = 0;
            loop {
                next.fill(0.0);
                for (a, &j) in moving.iter().enumerate() {
                    let v = beta[j] + scale * step[a];
                    let crossed = !exempt[j] && beta[j] * v < 0.0;
                    next[j] = if crossed { 0.0 } else { v };
                }
                if all_finite(&next) {
                    let e = ws.ctx.evaluate_score(&next)?;
                    if all_finite(&e.q) && all_finite(&e.mean_abs) {
                        next_eval = Some(e);
                        break;
                    }
                }
                if halvings == MAX_STEP_HALVINGS {
                    return Err(PwgeeError::NonFiniteUpdate(halvings));
                }
                halvings += 1;
                scale *= 0.5;
            }
            diagnostics.step_halvings += halvings;
        }
        let next_eval = match next_eval {
            Some(e) => e,
            None => ws.ctx.evaluate_score(&next)?,
        };
        diagnostics.variance_floors += next_eval.variance_floors;

        active = (0..p)
            .filter(|&j| {
                exempt[j]
                    || next[j].abs() > config.zero_threshold
                    || next_eval.mean_abs[j] > threshold
            })
            .collect();

        let change: f64 = (&next - &beta).abs().sum();
        trace.push(change);
        beta = next;
        eval = next_eval;
        if change <= config.tol {
            converged = true;
            break;
        }
    }

    let mut thresholded = false;
    for j in 0..p {
        if !exempt[j] && beta[j] != 0.0 && beta[j].abs() < config.zero_threshold {
            beta[j] = 0.0;
            thresholded = true;
        }
    }
    if thresholded || ws.rho_is_estimated() {
        ws.refresh(&beta)?;
        eval = ws.ctx.evaluate_score(&beta)?;
    }
    let residuals = certificate_residuals(&eval.q, &beta, &penalty, &config.penalty_exempt);
    let active_set = (0..p).filter(|&j| beta[j] != 0.0 || exempt[j]).collect();

    Ok(FitResult {
        beta,
        active_set,
        iterations,
        converged,
        final_score_norm: residuals.amax(),
        rho_hat: ws.rho,
        trace,
        diagnostics,
    })
}

/// Unpenalized fit on the given support (the oracle estimator). The returned
/// coefficient vector has full length with zeros off the support.
pub fn fit_wgee_oracle(
    data: &LongitudinalDataset,
    support: &[usize],
    model: &ModelSpec,
    config: &FitConfig,
) -> Result<FitResult> {
    if support.is_empty() {
        return Err(PwgeeError::InvalidConfig("oracle support is empty".into()));
    }
    let restricted = data.select_columns(support)?;
    let mut cfg = config.with_lambda(0.0);
    cfg.penalty_exempt = (0..support.len()).collect();
    cfg.init = config
        .init
        .as_ref()
        .map(|b| support.iter().map(|&j| b[j]).collect());
    let fit = fit_pwgee(&restricted, model, &cfg)?;
    let mut beta = DVector::zeros(data.p());
    for (a, &j) in support.iter().enumerate() {
        beta[j] = fit.beta[a];
    }
    let active_set = support
        .iter()
        .copied()
        .filter(|&j| beta[j] != 0.0)
        .collect();
    Ok(FitResult {
        beta,
        active_set,
        ..fit
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClusterData;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_data(n: usize, p: usize, beta: &[f64], seed: u64) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..n)
            .map(|i| {
                let m = 1 + i % 4;
                let x = DMatrix::from_fn(m, p, |_, _| StandardNormal.sample(&mut rng));
                let b = DVector::from_column_slice(beta);
                let noise = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
                let y = &x * b + noise;
                ClusterData::new(i.to_string(), y, x).unwrap()
            })
            .collect();
        LongitudinalDataset::from_clusters(clusters).unwrap()
    }

    fn ols(data: &LongitudinalDataset) -> DVector<f64> {
        let p = data.p();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        for c in data.clusters() {
            xtx += c.x.tr_mul(&c.x);
            xty += c.x.tr_mul(&c.y);
        }
        xtx.cholesky().unwrap().solve(&xty)
    }

    fn indep(weighting: Weighting) -> ModelSpec {
        ModelSpec::new(
            Family::Gaussian,
            CorrelationKind::Independence,
            weighting,
            1,
        )
    }

    #[test]
    fn unpenalized_unweighted_gaussian_is_ols() {
        let data = gaussian_data(60, 3, &[1.0, -0.5, 0.25], 3);
        let fit = fit_pwgee(
            &data,
            &indep(Weighting::Off),
            &FitConfig::new(Penalty::scad(0.0)),
        )
        .unwrap();
        assert!((&fit.beta - ols(&data)).amax() < 1e-8);
        assert_eq!(fit.active_set, vec![0, 1, 2]);
    }

    #[test]
    fn huge_lambda_zeroes_penalized_coordinates() {
        let data = gaussian_data(40, 4, &[1.0, -1.0, 0.0, 0.5], 8);
        let mut cfg = FitConfig::new(Penalty::scad(1e3));
        let fit = fit_pwgee(&data, &indep(Weighting::On), &cfg).unwrap();
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        assert!(fit.active_set.is_empty());
        cfg.penalty_exempt = vec![0];
        let fit = fit_pwgee(&data, &indep(Weighting::On), &cfg).unwrap();
        assert_eq!(fit.active_set, vec![0]);
        assert!(fit.beta[0] != 0.0 && fit.beta.rows(1, 3).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn scalar_oracle_least_squares() {
        let c1 = ClusterData::new(
            "a",
            DVector::from_element(1, 2.0),
            DMatrix::from_row_slice(1, 2, &[1.5, 9.0]),
        )
        .unwrap();
        let c2 = ClusterData::new(
            "b",
            DVector::from_element(1, -1.0),
            DMatrix::from_row_slice(1, 2, &[0.5, 3.0]),
        )
        .unwrap();
        let data = LongitudinalDataset::from_clusters(vec![c1, c2]).unwrap();
        let fit = fit_wgee_oracle(
            &data,
            &[0],
            &indep(Weighting::Off),
            &FitConfig::new(Penalty::scad(0.1)),
        )
        .unwrap();
        let expected = (1.5 * 2.0 - 0.5) / (1.5f64.powi(2) + 0.25);
        assert!((fit.beta[0] - expected).abs() < 1e-12);
        assert_eq!(fit.beta[1], 0.0);
    }

    #[test]
    fn sparse_recovery_and_certificate() {
        let data = gaussian_data(
            150,
            12,
            &[1.5, -1.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            21,
        );
        let fit = fit_pwgee(
            &data,
            &indep(Weighting::On),
            &FitConfig::new(Penalty::scad(0.15)),
        )
        .unwrap();
        assert_eq!(fit.active_set, vec![0, 1, 4]);
        assert!(fit
            .beta
            .iter()
            .enumerate()
            .all(|(j, &b)| fit.active_set.contains(&j) || b == 0.0));
        if fit.converged {
            assert!(fit.final_score_norm <= 1e-6, "{}", fit.final_score_norm);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let data = gaussian_data(50, 6, &[1.0, 0.0, -1.0, 0.0, 0.0, 0.5], 4);
        let model = ModelSpec::new(
            Family::Gaussian,
            CorrelationKind::Exchangeable,
            Weighting::On,
            9,
        );
        let cfg = FitConfig::new(Penalty::scad(0.1));
        let a = fit_pwgee(&data, &model, &cfg).unwrap();
        let b = fit_pwgee(&data, &model, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.rho_hat.is_some());
    }

    #[test]
    fn config_validation() {
        let data = gaussian_data(10, 2, &[1.0, 0.0], 1);
        let mut cfg = FitConfig::new(Penalty::scad(0.1));
        cfg.max_iter = 0;
        assert!(fit_pwgee(&data, &indep(Weighting::On), &cfg).is_err());
        let mut cfg = FitConfig::new(Penalty::scad(0.1));
        cfg.penalty_exempt = vec![5];
        assert!(fit_pwgee(&data, &indep(Weighting::On), &cfg).is_err());
        let mut cfg = FitConfig::new(Penalty::scad(0.1));
        cfg.init = Some(vec![0.0]);
        assert!(fit_pwgee(&data, &indep(Weighting::On), &cfg).is_err());
    }

    #[test]
    fn singular_system_is_jittered() {
        // duplicated column: X^T X singular at lambda = 0
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clusters = (0..20)
            .map(|i| {
                let v: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                ClusterData::new(
                    i.to_string(),
                    DVector::from_element(1, v + e),
                    DMatrix::from_row_slice(1, 2, &[v, v]),
                )
                .unwrap()
            })
            .collect();
        let data = LongitudinalDataset::from_clusters(clusters).unwrap();
        let mut cfg = FitConfig::new(Penalty::scad(0.0));
        cfg.max_iter = 5;
        let fit = fit_pwgee(&data, &indep(Weighting::Off), &cfg).unwrap();
        assert!(fit.diagnostics.ridge_jitters > 0);
        assert!(fit.beta.iter().all(|b| b.is_finite()));
    }
}
