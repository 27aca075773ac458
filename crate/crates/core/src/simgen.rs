//! Data-generating processes for the four simulation designs.
//!
//! Cluster sizes take values 2, 4, 15 with probabilities 9/16, 3/8, 1/16.
//! Covariate rows are independent `N(0, 0.5 I + 0.5 J)`; within a cluster the
//! errors (or, for counts, the latent copula normals) are exchangeable with
//! correlation `rho_gen`. Designs 1 and 2 shift the response by a term driven by
//! `1(M > 4) - 1/16`, which has mean zero and so leaves the marginal mean
//! intact while making the cluster size informative.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::dataset::{ClusterData, LongitudinalDataset};
use crate::error::{PwgeeError, Result};
use crate::family::Family;
use crate::weighting::hash_words;

/// Centering constant `P(M = 15)`.
pub const LARGE_CLUSTER_PROBABILITY: f64 = 1.0 / 16.0;
/// Floor for the log argument of the count-design shift.
pub const LOG_ARGUMENT_FLOOR: f64 = 1e-8;
/// Cross-covariate correlation of the covariate rows.
pub const COVARIATE_CORRELATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Example {
    /// Linear model with informative cluster size.
    LinearIcs,
    /// Poisson model with informative cluster size.
    PoissonIcs,
    /// Linear model, cluster size not informative.
    Linear,
    /// Poisson model, cluster size not informative.
    Poisson,
}

impl Example {
    pub fn from_number(k: u8) -> Result<Self> {
        match k {
            1 => Ok(Example::LinearIcs),
            2 => Ok(Example::PoissonIcs),
            3 => Ok(Example::Linear),
            4 => Ok(Example::Poisson),
            _ => Err(PwgeeError::InvalidConfig(format!(
                "unknown example {k}; expected 1-4"
            ))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Example::LinearIcs => 1,
            Example::PoissonIcs => 2,
            Example::Linear => 3,
            Example::Poisson => 4,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Example::LinearIcs | Example::Linear => Family::Gaussian,
            Example::PoissonIcs | Example::Poisson => Family::Poisson,
        }
    }

    pub fn informative(self) -> bool {
        matches!(self, Example::LinearIcs | Example::PoissonIcs)
    }

    /// Leading nonzero coefficients; the rest of the vector is zero.
    pub fn signal(self) -> &'static [f64] {
        match self.family() {
            Family::Gaussian => &[2.0, -1.0, 1.0, -1.5],
            _ => &[1.0, -0.8, 0.9, -1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub example: Example,
    /// Number of clusters.
    pub n: usize,
    /// Covariate dimension.
    pub p: usize,
    /// Within-cluster correlation of the errors / latent normals.
    pub rho_gen: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(example: Example, n: usize, p: usize, seed: u64) -> Self {
        Self {
            example,
            n,
            p,
            rho_gen: 0.5,
            seed,
        }
    }

    pub fn beta_star(&self) -> DVector<f64> {
        let signal = self.example.signal();
        DVector::from_fn(self.p, |j, _| signal.get(j).copied().unwrap_or(0.0))
    }

    pub fn true_support(&self) -> Vec<usize> {
        (0..self.example.signal().len().min(self.p)).collect()
    }

    /// Same design, seed of replicate `r` derived from this spec's seed.
    pub fn replicate(&self, r: usize) -> Self {
        Self {
            seed: replicate_seed(self.seed, r),
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(PwgeeError::InvalidConfig(format!(
                "scenario needs n >= 2 and p >= 1 (got n = {}, p = {})",
                self.n, self.p
            )));
        }
        if !(self.rho_gen >= 0.0 && self.rho_gen < 1.0) {
            return Err(PwgeeError::InvalidConfig(format!(
                "generating correlation must lie in [0, 1), got {}",
                self.rho_gen
            )));
        }
        Ok(())
    }
}

/// Seed for replicate `r` of a run with master seed `master`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    hash_words(&[master, 0x5349_4d55_4c41_5445, r as u64])
}

/// Draws a cluster size in {2, 4, 15} with probabilities 9/16, 6/16, 1/16.
pub fn gen_cluster_size<R: Rng + ?Sized>(rng: &mut R) -> usize {
    match rng.random_range(0..16u32) {
        0..=8 => 2,
        9..=14 => 4,
        _ => 15,
    }
}

/// `m` independent rows from `N(0, 0.5 I + 0.5 J)` in `p` dimensions.
pub fn gen_covariates<R: Rng + ?Sized>(rng: &mut R, m: usize, p: usize) -> DMatrix<f64> {
    let shared_w = COVARIATE_CORRELATION.sqrt();
    let own_w = (1.0 - COVARIATE_CORRELATION).sqrt();
    let mut x = DMatrix::zeros(m, p);
    for r in 0..m {
        let shared: f64 = StandardNormal.sample(rng);
        for j in 0..p {
            let z: f64 = StandardNormal.sample(rng);
            x[(r, j)] = shared_w * shared + own_w * z;
        }
    }
    x
}

/// Standard-normal vector of length `m` with exchangeable correlation `rho`.
pub fn exchangeable_normals<R: Rng + ?Sized>(rng: &mut R, m: usize, rho: f64) -> DVector<f64> {
    let shared: f64 = StandardNormal.sample(rng);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    DVector::from_fn(m, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        a * shared + b * z
    })
}

/// Multiplier `1 - 1.5 (1(M > 4) - 1/16)` applied to `X beta` in the linear
/// informative design.
pub fn linear_ics_multiplier(m: usize) -> f64 {
    let indicator = if m > 4 { 1.0 } else { 0.0 };
    1.0 - 1.5 * (indicator - LARGE_CLUSTER_PROBABILITY)
}

/// Argument of the log shift in the count design, `1 + 1.5 |X beta| (1(M > 4) - 1/16)`,
/// before flooring.
pub fn poisson_ics_factor(m: usize, linear_predictor: f64) -> f64 {
    let indicator = if m > 4 { 1.0 } else { 0.0 };
    1.0 + 1.5 * linear_predictor.abs() * (indicator - LARGE_CLUSTER_PROBABILITY)
}

/// Smallest count whose Poisson CDF reaches `u`.
pub fn poisson_quantile(u: f64, mean: f64) -> u64 {
    let u = u.clamp(0.0, 1.0 - 1e-16);
    let dist = Poisson::new(mean).expect("positive Poisson mean");
    dist.inverse_cdf(u)
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub data: LongitudinalDataset,
    pub beta_star: DVector<f64>,
    /// Observations whose log-shift argument was floored.
    pub log_floor_count: usize,
}

/// Generates one dataset for the scenario.
pub fn generate(spec: &ScenarioSpec) -> Result<SimulatedData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::standard();
    let beta = spec.beta_star();
    let mut log_floor_count = 0;
    let mut clusters = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let m = gen_cluster_size(&mut rng);
        let x = gen_covariates(&mut rng, m, spec.p);
        let latent = exchangeable_normals(&mut rng, m, spec.rho_gen);
        let eta = &x * &beta;
        let y = match spec.example {
            Example::LinearIcs => eta * linear_ics_multiplier(m) + latent,
            Example::Linear => eta + latent,
            Example::PoissonIcs | Example::Poisson => DVector::from_fn(m, |k, _| {
                let mut mean = eta[k].exp();
                if spec.example == Example::PoissonIcs {
                    let factor = poisson_ics_factor(m, eta[k]);
                    if factor < LOG_ARGUMENT_FLOOR {
                        log_floor_count += 1;
                    }
                    mean *= factor.max(LOG_ARGUMENT_FLOOR);
                }
                poisson_quantile(std_normal.cdf(latent[k]), mean) as f64
            }),
        };
        clusters.push(ClusterData::new((i + 1).to_string(), y, x)?);
    }
    Ok(SimulatedData {
        data: LongitudinalDataset::from_clusters(clusters)?,
        beta_star: beta,
        log_floor_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_size_probabilities() {
        assert_eq!(9.0 / 16.0 + 6.0 / 16.0 + 1.0 / 16.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            match gen_cluster_size(&mut rng) {
                2 => counts[0] += 1,
                4 => counts[1] += 1,
                15 => counts[2] += 1,
                other => panic!("size {other}"),
            }
        }
        for (c, p) in counts.iter().zip([0.5625, 0.375, 0.0625]) {
            let freq = *c as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * se, "{freq} vs {p}");
        }
    }

    #[test]
    fn large_cluster_indicator_is_centered() {
        let e = 9.0 / 16.0 * linear_ics_multiplier(2)
            + 6.0 / 16.0 * linear_ics_multiplier(4)
            + 1.0 / 16.0 * linear_ics_multiplier(15);
        assert!((e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ics_multipliers() {
        assert_eq!(linear_ics_multiplier(15), -0.40625);
        assert_eq!(linear_ics_multiplier(2), 1.09375);
        assert_eq!(linear_ics_multiplier(4), 1.09375);
        assert!(
            (1.0f64.exp() * poisson_ics_factor(15, 1.0) - 1.0f64.exp() * 2.40625).abs() < 1e-15
        );
    }

    #[test]
    fn covariate_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = 100_000;
        let x = gen_covariates(&mut rng, rows, 5);
        let cov = x.tr_mul(&x) / rows as f64;
        for j in 0..5 {
            for k in 0..5 {
                let range = if j == k { 0.97..=1.03 } else { 0.47..=0.53 };
                assert!(range.contains(&cov[(j, k)]), "({j},{k}) {}", cov[(j, k)]);
            }
        }
        // rows independent: lag-1 autocorrelation of the first column
        let col = x.column(0);
        let lag: f64 = (1..rows).map(|r| col[r] * col[r - 1]).sum::<f64>() / (rows - 1) as f64;
        assert!(lag.abs() <= 3.0 / (rows as f64).sqrt());
    }

    #[test]
    fn single_covariate_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gen_covariates(&mut rng, 50_000, 1);
        let mean = x.mean();
        let var = x.iter().map(|v| v * v).sum::<f64>() / 50_000.0;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03);
    }

    #[test]
    fn beta_star_layout() {
        let s = ScenarioSpec::new(Example::LinearIcs, 10, 6, 0);
        assert_eq!(s.beta_star().as_slice(), &[2.0, -1.0, 1.0, -1.5, 0.0, 0.0]);
        let s = ScenarioSpec::new(Example::Poisson, 10, 5, 0);
        assert_eq!(s.beta_star().as_slice(), &[1.0, -0.8, 0.9, -1.0, 0.0]);
        assert_eq!(s.true_support(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn generation_is_reproducible() {
        for ex in 1..=4 {
            let spec = ScenarioSpec::new(Example::from_number(ex).unwrap(), 30, 8, 77);
            let a = generate(&spec).unwrap();
            let b = generate(&spec).unwrap();
            assert_eq!(a.data, b.data);
            assert_ne!(a.data, generate(&spec.replicate(1)).unwrap().data);
        }
    }

    #[test]
    fn poisson_marginal_mean_without_ics() {
        // single covariate, beta = (1): E Y = E exp(X) = exp(1/2)
        let spec = ScenarioSpec::new(Example::Poisson, 20_000, 1, 5);
        let sim = generate(&spec).unwrap();
        let ys: Vec<f64> = sim
            .data
            .clusters()
            .iter()
            .flat_map(|c| c.y.iter().copied())
            .collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // clusters are correlated; inflate the naive standard error by the largest design effect
        let se = sd / n.sqrt() * (1.0 + 14.0 * 0.5f64).sqrt();
        assert!((mean - 0.5f64.exp()).abs() <= 3.0 * se, "{mean}");
    }

    #[test]
    fn copula_counts_are_positively_correlated() {
        let spec = ScenarioSpec::new(Example::Poisson, 4000, 1, 6);
        let sim = generate(&spec).unwrap();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for c in sim.data.clusters() {
            let mu: Vec<f64> = c.x.column(0).iter().map(|x| x.exp()).collect();
            let a = (c.y[0] - mu[0]) / mu[0].sqrt();
            let b = (c.y[1] - mu[1]) / mu[1].sqrt();
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!(r > 0.1, "within-cluster Pearson correlation {r}");
    }

    fn stratum_slope(example: Example, size: usize) -> f64 {
        // one covariate with beta = 2: slope of y on x within the stratum
        let spec = ScenarioSpec::new(example, 20_000, 1, 12);
        let sim = generate(&spec).unwrap();
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for c in sim.data.clusters().iter().filter(|c| c.size() == size) {
            for k in 0..c.size() {
                sxy += c.x[(k, 0)] * c.y[k];
                sxx += c.x[(k, 0)].powi(2);
            }
        }
        sxy / sxx
    }

    #[test]
    fn informativeness_switch() {
        let big = stratum_slope(Example::LinearIcs, 15);
        let small = stratum_slope(Example::LinearIcs, 2);
        assert!(
            (big / small - (-0.40625 / 1.09375)).abs() < 0.05,
            "{big} {small}"
        );
        let big = stratum_slope(Example::Linear, 15);
        let small = stratum_slope(Example::Linear, 2);
        assert!((big - small).abs() < 0.1, "{big} {small}");
    }
}
