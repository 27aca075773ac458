//! JSON shapes written and read by the subcommands.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficient {
    pub index: usize,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub variance_floors: usize,
    pub step_halvings: usize,
    pub ridge_jitters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub data: String,
    pub response: String,
    pub cluster: String,
    pub family: String,
    pub corr: String,
    pub rho: Option<f64>,
    pub weighting: String,
    pub seed: u64,
    pub penalty: pwgee::PenaltyKind,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub zero_threshold: f64,
    pub exempt: Vec<String>,
    pub standardize: bool,
    pub intercept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub covariates: Vec<String>,
    /// Nonzero coefficients only.
    pub beta: Vec<Coefficient>,
    /// Nonzero coefficients mapped back to the unstandardized covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_original_scale: Option<Vec<Coefficient>>,
    pub active_set: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub final_score_norm: f64,
    pub rho_hat: Option<f64>,
    pub diagnostics: Diagnostics,
    pub config: ConfigEcho,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutput {
    pub rule: String,
    pub lambda_star: f64,
    pub grid: Vec<f64>,
    pub totals: Vec<f64>,
    pub failed_fits: usize,
    pub fit: FitOutput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub beta_star: Vec<f64>,
    #[serde(default)]
    pub covariate_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedFile {
    pub replicate: usize,
    pub file: String,
    pub seed: u64,
    pub data_hash: String,
    pub log_floor_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub example: u8,
    pub n: usize,
    pub p: usize,
    pub master_seed: u64,
    pub replicates: Vec<SimulatedFile>,
}

/// Fit JSON as consumed by `metrics`: a bare fit or the `fit` member of a cv result.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum AnyFit {
    Cv(Box<CvOutput>),
    Fit(Box<FitOutput>),
}

impl AnyFit {
    pub fn into_fit(self) -> FitOutput {
        match self {
            AnyFit::Cv(c) => c.fit,
            AnyFit::Fit(f) => *f,
        }
    }
}
