//! Marginal mean, its derivative and the working variance for the supported
//! link/variance pairs. Dispersion is fixed at 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::PwgeeError;

/// Lower bound applied to the binomial working variance.
pub const BINOMIAL_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Identity link, unit variance.
    Gaussian,
    /// Log link, variance equal to the mean.
    Poisson,
    /// Logit link, variance `mu (1 - mu)`.
    Binomial,
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Family {
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Binomial => logistic(eta),
        }
    }

    pub fn mean_deriv(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => eta.exp(),
            Family::Binomial => {
                let mu = logistic(eta);
                mu * (1.0 - mu)
            }
        }
    }

    /// Working variance together with a flag telling whether the binomial floor
    /// was applied.
    pub fn variance_checked(self, eta: f64) -> (f64, bool) {
        match self {
            Family::Gaussian => (1.0, false),
            Family::Poisson => (eta.exp(), false),
            Family::Binomial => {
                let mu = logistic(eta);
                let v = mu * (1.0 - mu);
                if v < BINOMIAL_VARIANCE_FLOOR {
                    (BINOMIAL_VARIANCE_FLOOR, true)
                } else {
                    (v, false)
                }
            }
        }
    }

    pub fn variance(self, eta: f64) -> f64 {
        self.variance_checked(eta).0
    }

    /// True when neither `mu'` nor the variance depends on the linear predictor.
    pub fn has_constant_weights(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    /// Held-out loss for one observation treated as independent: squared error
    /// for gaussian, minus twice the log-likelihood otherwise.
    pub fn heldout_loss(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Gaussian => (y - eta).powi(2),
            Family::Poisson => -2.0 * (y * eta - eta.exp() - ln_gamma(y + 1.0)),
            // log mu = -softplus(-eta), log(1 - mu) = -softplus(eta)
            Family::Binomial => 2.0 * (y * softplus(-eta) + (1.0 - y) * softplus(eta)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = PwgeeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "binomial" => Ok(Family::Binomial),
            other => Err(PwgeeError::InvalidConfig(format!(
                "unknown family '{other}'"
            ))),
        }
    }
}
