//! Penalty rate functions `rho_lambda(t)`: the derivative of a folded-concave
//! penalty (or the lasso) evaluated at `t = |beta_j|`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PwgeeError, Result};

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_MCP_GAMMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PenaltyKind {
    Scad { a: f64 },
    Mcp { gamma: f64 },
    Lasso,
}

impl PenaltyKind {
    pub fn scad() -> Self {
        PenaltyKind::Scad { a: DEFAULT_SCAD_A }
    }

    pub fn mcp() -> Self {
        PenaltyKind::Mcp {
            gamma: DEFAULT_MCP_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltyKind::Scad { a } if a.is_nan() || a <= 2.0 => Err(PwgeeError::InvalidConfig(
                format!("SCAD requires a > 2, got {a}"),
            )),
            PenaltyKind::Mcp { gamma } if gamma.is_nan() || gamma <= 1.0 => Err(
                PwgeeError::InvalidConfig(format!("MCP requires gamma > 1, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PenaltyKind::Scad { .. } => "scad",
            PenaltyKind::Mcp { .. } => "mcp",
            PenaltyKind::Lasso => "lasso",
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Penalty {
        Penalty { kind: self, lambda }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A penalty family with its tuning parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub kind: PenaltyKind,
    pub lambda: f64,
}

impl Penalty {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        kind.validate()?;
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(PwgeeError::InvalidConfig(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(Self { kind, lambda })
    }

    pub fn scad(lambda: f64) -> Self {
        PenaltyKind::scad().with_lambda(lambda)
    }

    pub fn mcp(lambda: f64) -> Self {
        PenaltyKind::mcp().with_lambda(lambda)
    }

    pub fn lasso(lambda: f64) -> Self {
        PenaltyKind::Lasso.with_lambda(lambda)
    }

    /// `rho_lambda(t)` for `t >= 0`.
    pub fn rate(&self, t: f64) -> f64 {
        let lambda = self.lambda;
        if lambda == 0.0 {
            return 0.0;
        }
        match self.kind {
            PenaltyKind::Scad { a } => {
                if t <= lambda {
                    lambda
                } else {
                    (a * lambda - t).max(0.0) / (a - 1.0)
                }
            }
            PenaltyKind::Mcp { gamma } => (lambda - t / gamma).max(0.0),
            PenaltyKind::Lasso => lambda,
        }
    }

    /// `lim_{t -> 0+} rho_lambda(t) / lambda`.
    pub fn rate_at_zero_plus(&self) -> Result<f64> {
        if self.lambda == 0.0 {
            return Err(PwgeeError::ZeroLambda);
        }
        Ok(match self.kind {
            PenaltyKind::Scad { .. } | PenaltyKind::Mcp { .. } | PenaltyKind::Lasso => 1.0,
        })
    }

    /// Screening threshold `lambda * rho_bar(0+)`; zero when `lambda = 0`.
    pub fn threshold(&self) -> f64 {
        self.rate_at_zero_plus().map_or(0.0, |r| self.lambda * r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scad_branches() {
        let p = Penalty::scad(0.5);
        assert_eq!(p.rate(0.2), 0.5);
        assert!((p.rate(1.0) - 0.5 * (1.85 - 1.0) / (2.7 * 0.5)).abs() < 1e-15);
        assert!((p.rate(1.0) - 0.31481).abs() < 1e-5);
        assert_eq!(p.rate(2.0), 0.0);
    }

    #[test]
    fn mcp_and_lasso() {
        assert!((Penalty::mcp(0.5).rate(0.6) - 0.3).abs() < 1e-15);
        assert_eq!(Penalty::lasso(0.5).rate(7.0), 0.5);
    }

    #[test]
    fn zero_lambda() {
        for p in [Penalty::scad(0.0), Penalty::mcp(0.0), Penalty::lasso(0.0)] {
            assert_eq!(p.rate(0.3), 0.0);
            assert!(matches!(p.rate_at_zero_plus(), Err(PwgeeError::ZeroLambda)));
            assert_eq!(p.threshold(), 0.0);
        }
    }

    #[test]
    fn rate_at_zero_plus_is_one() {
        for p in [Penalty::scad(0.3), Penalty::mcp(0.3), Penalty::lasso(0.3)] {
            assert_eq!(p.rate_at_zero_plus().unwrap(), 1.0);
            assert!((p.rate(1e-12) / p.lambda - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn continuity_at_breakpoints() {
        let lambda = 0.4;
        let scad = Penalty::scad(lambda);
        let mcp = Penalty::mcp(lambda);
        for (p, t) in [(scad, lambda), (scad, 3.7 * lambda), (mcp, 3.0 * lambda)] {
            for dt in [-1e-9, 1e-9] {
                assert!((p.rate(t + dt) - p.rate(t)).abs() <= 1e-8 * lambda);
            }
        }
    }

    #[test]
    fn vanishes_for_large_signals() {
        let scad = Penalty::scad(0.3);
        let mcp = Penalty::mcp(0.3);
        for t in [3.7 * 0.3, 2.0, 10.0] {
            assert_eq!(scad.rate(t), 0.0);
        }
        for t in [0.9, 2.0] {
            assert_eq!(mcp.rate(t), 0.0);
        }
    }

    #[test]
    fn invalid_shapes() {
        assert!(Penalty::new(PenaltyKind::Scad { a: 2.0 }, 0.1).is_err());
        assert!(Penalty::new(PenaltyKind::Mcp { gamma: 1.0 }, 0.1).is_err());
        assert!(Penalty::new(PenaltyKind::Lasso, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn nonincreasing_in_t(t in 0.0f64..5.0, dt in 0.0f64..1.0, lambda in 0.01f64..1.0) {
            for p in [Penalty::scad(lambda), Penalty::mcp(lambda)] {
                prop_assert!(p.rate(t + dt) <= p.rate(t));
                prop_assert!(p.rate(t) >= 0.0);
            }
            prop_assert_eq!(Penalty::lasso(lambda).rate(t), Penalty::lasso(lambda).rate(t + dt));
        }

        #[test]
        fn normalized_rate_nondecreasing_in_lambda(t in 0.0f64..3.0) {
            let grid: Vec<f64> = (1..=100).map(|k| k as f64 * 0.01).collect();
            for kind in [PenaltyKind::scad(), PenaltyKind::mcp(), PenaltyKind::Lasso] {
                let vals: Vec<f64> = grid.iter().map(|&l| kind.with_lambda(l).rate(t) / l).collect();
                for w in vals.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-12);
                }
            }
        }
    }
}
