//! Monte-Carlo experiment runner.
//!
//! Every replicate generates one dataset and runs every method on it. Penalized
//! methods pick lambda by fourfold cross-validation (or use a fixed value);
//! oracle methods fit the true support without penalty. Replicates run in
//! parallel and are reduced in replicate order, so the output does not depend
//! on the thread count.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationKind;
use crate::error::{PwgeeError, Result};
use crate::metrics::{mean_sd, selection_metrics, squared_error, SelectionTruth};
use crate::penalty::{Penalty, PenaltyKind};
use crate::simgen::{generate, replicate_seed, Example, ScenarioSpec};
use crate::solver::{
    fit_pwgee, fit_wgee_oracle, FitConfig, FitResult, ModelSpec, DEFAULT_MAX_ITER, DEFAULT_TOL,
    DEFAULT_ZERO_THRESHOLD,
};
use crate::tuning::{
    cv_select, lambda_max, log_grid, SelectionRule, DEFAULT_GRID_RATIO, DEFAULT_GRID_SIZE,
};
use crate::weighting::{hash_words, Weighting};

const CV_TAG: u64 = 0x4356;
const FINAL_FIT_TAG: u64 = 0x0046_494e_414c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Penalized fit with the given penalty family.
    Penalized(PenaltyKind),
    /// Unpenalized fit on the true support.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub weighting: Weighting,
    pub correlation: CorrelationKind,
    pub estimator: Estimator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MethodSpec {
    pub fn penalized(
        weighting: Weighting,
        correlation: CorrelationKind,
        penalty: PenaltyKind,
    ) -> Self {
        Self {
            weighting,
            correlation,
            estimator: Estimator::Penalized(penalty),
            label: None,
        }
    }

    pub fn oracle(weighting: Weighting, correlation: CorrelationKind) -> Self {
        Self {
            weighting,
            correlation,
            estimator: Estimator::Oracle,
            label: None,
        }
    }

    /// `PWGEE.indep`, `PGEE.exch`, `Oracle.WGEE.ar1`, ... unless overridden.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let corr = self.correlation.label();
        match (self.estimator, self.weighting) {
            (Estimator::Penalized(_), Weighting::On) => format!("PWGEE.{corr}"),
            (Estimator::Penalized(_), Weighting::Off) => format!("PGEE.{corr}"),
            (Estimator::Oracle, Weighting::On) => format!("Oracle.WGEE.{corr}"),
            (Estimator::Oracle, Weighting::Off) => format!("Oracle.GEE.{corr}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    /// Cross-validate a log grid from `lambda_max` down to `ratio * lambda_max`.
    Cv {
        grid_size: usize,
        grid_ratio: f64,
        #[serde(default)]
        rule: SelectionRule,
    },
    Fixed(f64),
}

impl Default for LambdaChoice {
    fn default() -> Self {
        LambdaChoice::Cv {
            grid_size: DEFAULT_GRID_SIZE,
            grid_ratio: DEFAULT_GRID_RATIO,
            rule: SelectionRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// 1-4.
    pub example: u8,
    pub n: usize,
    pub p: usize,
    #[serde(default = "default_rho_gen")]
    pub rho_gen: f64,
}

fn default_rho_gen() -> f64 {
    0.5
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub scenario: ScenarioConfig,
    pub methods: Vec<MethodSpec>,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub lambda: LambdaChoice,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl ExperimentGrid {
    pub fn new(
        scenario: ScenarioConfig,
        methods: Vec<MethodSpec>,
        reps: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            scenario,
            methods,
            reps,
            master_seed,
            lambda: LambdaChoice::default(),
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(PwgeeError::InvalidConfig("reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(PwgeeError::InvalidConfig("no methods given".into()));
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(PwgeeError::InvalidConfig(format!(
                "duplicate method label {}",
                w[0]
            )));
        }
        for m in &self.methods {
            if let Estimator::Penalized(k) = m.estimator {
                k.validate()?;
            }
        }
        match self.lambda {
            LambdaChoice::Cv {
                grid_size,
                grid_ratio,
                ..
            } => {
                if grid_size < 1 || !(grid_ratio > 0.0 && grid_ratio <= 1.0) {
                    return Err(PwgeeError::InvalidConfig(
                        "cv grid needs size >= 1 and ratio in (0, 1]".into(),
                    ));
                }
            }
            LambdaChoice::Fixed(l) => {
                if !(l.is_finite() && l >= 0.0) {
                    return Err(PwgeeError::InvalidConfig(format!(
                        "invalid fixed lambda {l}"
                    )));
                }
            }
        }
        self.replicate_spec(0)?;
        Ok(())
    }

    /// Scenario of replicate `r`.
    pub fn replicate_spec(&self, r: usize) -> Result<ScenarioSpec> {
        let mut spec = ScenarioSpec::new(
            Example::from_number(self.scenario.example)?,
            self.scenario.n,
            self.scenario.p,
            replicate_seed(self.master_seed, r),
        );
        spec.rho_gen = self.scenario.rho_gen;
        Ok(spec)
    }
}

/// One method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: String,
    pub data_hash: String,
    pub ok: bool,
    pub error: Option<String>,
    pub lambda: Option<f64>,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    pub cr: Option<u8>,
    pub squared_error: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub certificate: Option<f64>,
    /// Selected coefficients as `index:value` pairs separated by `;`.
    pub support: Option<String>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, method: String, data_hash: String, error: String) -> Self {
        Self {
            replicate,
            method,
            data_hash,
            ok: false,
            error: Some(error),
            lambda: None,
            tp: None,
            fp: None,
            cr: None,
            squared_error: None,
            converged: None,
            iterations: None,
            certificate: None,
            support: None,
        }
    }
}

/// Aggregate over replicates for one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub fits: usize,
    pub failed: usize,
    pub tp_mean: f64,
    pub tp_sd: f64,
    pub fp_mean: f64,
    pub fp_sd: f64,
    pub cr_mean: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub converged: usize,
    /// Set when fewer than two fits succeeded, so the sd fields are 0 by convention.
    pub sd_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub grid: ExperimentGrid,
    pub summary: Vec<SummaryRow>,
    pub records: Vec<ReplicateRecord>,
}

fn fit_method(
    data: &crate::dataset::LongitudinalDataset,
    spec: &ScenarioSpec,
    method: &MethodSpec,
    grid: &ExperimentGrid,
) -> Result<(FitResult, Option<f64>)> {
    let family = spec.example.family();
    let model = ModelSpec::new(
        family,
        method.correlation,
        method.weighting,
        hash_words(&[spec.seed, FINAL_FIT_TAG]),
    );
    let with_solver = |penalty: Penalty| {
        let mut c = FitConfig::new(penalty);
        c.max_iter = grid.max_iter;
        c.tol = grid.tol;
        c.zero_threshold = DEFAULT_ZERO_THRESHOLD;
        c
    };
    match method.estimator {
        Estimator::Oracle => {
            let config = with_solver(Penalty::lasso(0.0));
            Ok((
                fit_wgee_oracle(data, &spec.true_support(), &model, &config)?,
                None,
            ))
        }
        Estimator::Penalized(kind) => {
            let base = with_solver(kind.with_lambda(1.0));
            let lambda = match grid.lambda {
                LambdaChoice::Fixed(l) => l,
                LambdaChoice::Cv {
                    grid_size,
                    grid_ratio,
                    rule,
                } => {
                    let lmax = lambda_max(data, &model, &base)?;
                    let values = log_grid(lmax, grid_ratio, grid_size);
                    cv_select(
                        data,
                        &model,
                        &base,
                        &values,
                        rule,
                        hash_words(&[spec.seed, CV_TAG]),
                    )?
                    .lambda_star
                }
            };
            Ok((
                fit_pwgee(data, &model, &base.with_lambda(lambda))?,
                Some(lambda),
            ))
        }
    }
}

fn sparse_string(beta: &DVector<f64>) -> String {
    beta.iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(j, b)| format!("{j}:{b:e}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Runs every method on replicate `r`.
pub fn run_replicate(grid: &ExperimentGrid, r: usize) -> Result<Vec<ReplicateRecord>> {
    let spec = grid.replicate_spec(r)?;
    let data = generate(&spec)?.data;
    let hash = data.content_hash();
    let truth = SelectionTruth::new(spec.beta_star().as_slice().to_vec());
    let mut out = Vec::with_capacity(grid.methods.len());
    for method in &grid.methods {
        let label = method.label();
        let record = match fit_method(&data, &spec, method, grid) {
            Ok((fit, lambda)) => {
                let sel = selection_metrics(fit.beta.as_slice(), &truth)?;
                ReplicateRecord {
                    replicate: r,
                    method: label,
                    data_hash: hash.clone(),
                    ok: true,
                    error: None,
                    lambda,
                    tp: Some(sel.tp),
                    fp: Some(sel.fp),
                    cr: Some(sel.cr),
                    squared_error: Some(squared_error(fit.beta.as_slice(), truth.beta_star())?),
                    converged: Some(fit.converged),
                    iterations: Some(fit.iterations),
                    certificate: Some(fit.final_score_norm),
                    support: Some(sparse_string(&fit.beta)),
                }
            }
            Err(e) => ReplicateRecord::failed(r, label, hash.clone(), e.to_string()),
        };
        out.push(record);
    }
    Ok(out)
}

/// Aggregates records in the order of `methods`.
pub fn summarize(methods: &[MethodSpec], records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    methods
        .iter()
        .map(|m| {
            let label = m.label();
            let mine: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.method == label).collect();
            let ok: Vec<&&ReplicateRecord> = mine.iter().filter(|r| r.ok).collect();
            let col = |f: &dyn Fn(&ReplicateRecord) -> f64| -> Vec<f64> {
                ok.iter().map(|r| f(r)).collect()
            };
            let tp = col(&|r| r.tp.unwrap_or(0) as f64);
            let fp = col(&|r| r.fp.unwrap_or(0) as f64);
            let cr = col(&|r| r.cr.unwrap_or(0) as f64);
            let se = col(&|r| r.squared_error.unwrap_or(f64::NAN));
            let nan = (f64::NAN, f64::NAN);
            let (tp_mean, tp_sd) = mean_sd(&tp).unwrap_or(nan);
            let (fp_mean, fp_sd) = mean_sd(&fp).unwrap_or(nan);
            let (cr_mean, _) = mean_sd(&cr).unwrap_or(nan);
            let (mse_mean, mse_sd) = mean_sd(&se).unwrap_or(nan);
            SummaryRow {
                method: label,
                fits: ok.len(),
                failed: mine.len() - ok.len(),
                tp_mean,
                tp_sd,
                fp_mean,
                fp_sd,
                cr_mean,
                mse_mean,
                mse_sd,
                converged: ok.iter().filter(|r| r.converged == Some(true)).count(),
                sd_degenerate: ok.len() < 2,
            }
        })
        .collect()
}

/// Runs the grid on the current rayon pool.
pub fn run_experiment(grid: &ExperimentGrid) -> Result<ExperimentReport> {
    grid.validate()?;
    let per_rep: Vec<Vec<ReplicateRecord>> = (0..grid.reps)
        .into_par_iter()
        .map(|r| run_replicate(grid, r))
        .collect::<Result<_>>()?;
    for recs in &per_rep {
        if recs.windows(2).any(|w| w[0].data_hash != w[1].data_hash) {
            return Err(PwgeeError::InvalidDataset(
                "methods within a replicate saw different data".into(),
            ));
        }
    }
    let records: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();
    Ok(ExperimentReport {
        summary: summarize(&grid.methods, &records),
        grid: grid.clone(),
        records,
    })
}

impl ExperimentReport {
    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&self.summary)
    }

    pub fn records_csv(&self) -> Result<String> {
        to_csv(&self.records)
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.summary_csv()?)?;
        Ok(())
    }

    pub fn write_records_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.records_csv()?)?;
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == label)
    }

    /// Aligned `mean(sd)` table.
    pub fn text_table(&self) -> String {
        format_table(&self.summary)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| PwgeeError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn mean_sd_cell(mean: f64, sd: f64, digits: usize) -> String {
    format!("{mean:.digits$}({sd:.digits$})")
}

/// Formats summary rows the way the tables in the literature do.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let header = ["Method", "TP", "FP", "CR", "MSE", "fits", "failed"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            let mut method = r.method.clone();
            if r.sd_degenerate {
                method.push('*');
            }
            [
                method,
                mean_sd_cell(r.tp_mean, r.tp_sd, 2),
                mean_sd_cell(r.fp_mean, r.fp_sd, 2),
                format!("{:.2}", r.cr_mean),
                mean_sd_cell(r.mse_mean, r.mse_sd, 3),
                r.fits.to_string(),
                r.failed.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|row| row[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    if rows.iter().any(|r| r.sd_degenerate) {
        out.push_str("* fewer than two successful fits; sd reported as 0\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid(reps: usize) -> ExperimentGrid {
        let mut g = ExperimentGrid::new(
            ScenarioConfig {
                example: 1,
                n: 24,
                p: 6,
                rho_gen: 0.5,
            },
            vec![
                MethodSpec::penalized(
                    Weighting::On,
                    CorrelationKind::Independence,
                    PenaltyKind::scad(),
                ),
                MethodSpec::penalized(
                    Weighting::Off,
                    CorrelationKind::Independence,
                    PenaltyKind::scad(),
                ),
                MethodSpec::oracle(Weighting::On, CorrelationKind::Independence),
            ],
            reps,
            11,
        );
        g.lambda = LambdaChoice::Cv {
            grid_size: 5,
            grid_ratio: 0.05,
            rule: SelectionRule::OneSe,
        };
        g
    }

    #[test]
    fn labels() {
        let g = tiny_grid(1);
        let labels: Vec<String> = g.methods.iter().map(MethodSpec::label).collect();
        assert_eq!(
            labels,
            vec!["PWGEE.indep", "PGEE.indep", "Oracle.WGEE.indep"]
        );
        let mut dup = g.clone();
        dup.methods.push(dup.methods[0].clone());
        assert!(dup.validate().is_err());
        let mut zero = g.clone();
        zero.reps = 0;
        assert!(zero.validate().is_err());
    }

    #[test]
    fn single_replicate_reports_zero_sd_with_flag() {
        let report = run_experiment(&tiny_grid(1)).unwrap();
        assert_eq!(report.records.len(), 3);
        for row in &report.summary {
            assert!(row.sd_degenerate);
            assert_eq!((row.tp_sd, row.fp_sd, row.mse_sd), (0.0, 0.0, 0.0));
        }
        assert!(report.text_table().contains("PWGEE.indep*"));
    }

    #[test]
    fn methods_share_each_replicate_dataset() {
        let report = run_experiment(&tiny_grid(3)).unwrap();
        for r in 0..3 {
            let hashes: Vec<&str> = report
                .records
                .iter()
                .filter(|x| x.replicate == r)
                .map(|x| x.data_hash.as_str())
                .collect();
            assert_eq!(hashes.len(), 3);
            assert!(hashes.iter().all(|h| *h == hashes[0]));
        }
        let oracle = report.row("Oracle.WGEE.indep").unwrap();
        assert_eq!(
            (oracle.tp_mean, oracle.fp_mean, oracle.cr_mean),
            (4.0, 0.0, 1.0)
        );
    }

    #[test]
    fn aggregation_ignores_replicate_order() {
        let g = tiny_grid(3);
        let mut records: Vec<ReplicateRecord> =
            (0..3).flat_map(|r| run_replicate(&g, r).unwrap()).collect();
        let forward = summarize(&g.methods, &records);
        records.reverse();
        let backward = summarize(&g.methods, &records);
        for (a, b) in forward.iter().zip(&backward) {
            assert_eq!(a.tp_mean, b.tp_mean);
            assert!((a.mse_mean - b.mse_mean).abs() <= 1e-15 * a.mse_mean.abs().max(1.0));
        }
    }

    #[test]
    fn failures_are_counted_not_dropped() {
        let methods = vec![MethodSpec::penalized(
            Weighting::On,
            CorrelationKind::Independence,
            PenaltyKind::scad(),
        )];
        let mut records = vec![
            ReplicateRecord::failed(0, "PWGEE.indep".into(), "h".into(), "boom".into()),
            ReplicateRecord::failed(1, "PWGEE.indep".into(), "h".into(), "boom".into()),
        ];
        records[1].ok = true;
        records[1].error = None;
        records[1].tp = Some(4);
        records[1].fp = Some(1);
        records[1].cr = Some(1);
        records[1].squared_error = Some(0.5);
        let rows = summarize(&methods, &records);
        assert_eq!((rows[0].fits, rows[0].failed), (1, 1));
        assert_eq!((rows[0].tp_mean, rows[0].mse_mean), (4.0, 0.5));
    }

    #[test]
    fn grid_json_round_trip() {
        let g = tiny_grid(2);
        let text = serde_json::to_string(&g).unwrap();
        let back: ExperimentGrid = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
        let minimal: ExperimentGrid = serde_json::from_str(
            r#"{"scenario":{"example":2,"n":50,"p":20},"reps":2,"master_seed":1,
                "methods":[{"weighting":"on","correlation":"exch","estimator":"oracle"},
                           {"weighting":"off","correlation":"indep",
                            "estimator":{"penalized":{"kind":"mcp","gamma":3.0}}}]}"#,
        )
        .unwrap();
        assert_eq!(minimal.lambda, LambdaChoice::default());
        assert_eq!(minimal.methods[1].label(), "PGEE.indep");
    }
}
