//! Penalized weighted generalized estimating equations for clustered and
//! longitudinal data whose cluster size may be informative.

pub mod correlation;
pub mod dataset;
pub mod equations;
pub mod error;
pub mod experiment;
pub mod family;
pub mod metrics;
pub mod penalty;
pub mod simgen;
pub mod solver;
pub mod tuning;
pub mod weighting;

pub use correlation::{CorrelationKind, WorkingCorrelation};
pub use dataset::{ClusterData, CovariateColumns, LongitudinalDataset};
pub use error::{PwgeeError, Result};
pub use experiment::{run_experiment, ExperimentGrid, ExperimentReport, MethodSpec};
pub use family::Family;
pub use metrics::{selection_metrics, SelectionTruth};
pub use penalty::{Penalty, PenaltyKind};
pub use simgen::{generate, Example, ScenarioSpec};
pub use solver::{fit_pwgee, fit_wgee_oracle, FitConfig, FitResult, ModelSpec};
pub use tuning::{cv_select, CvOutcome, SelectionRule};
pub use weighting::{RademacherStream, Weighting};
