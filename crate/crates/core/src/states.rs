//! Photon-number distributions of the light states used for tomography and
//! reconstruction, and the scalar figures of merit computed from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_factorial, normalize_log_weights};

/// Default Hilbert-space truncation.
pub const DEFAULT_N_MR: usize = 30;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Diagonal photon-number probabilities `rho_nn` for `n = 0..=n_mr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FockDistribution {
    probs: Vec<f64>,
}

impl FockDistribution {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((n, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidDistribution(format!(
                "probability {p} at n = {n} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Renormalizes non-negative weights to a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Uniform distribution over `0..=n_mr`.
    pub fn uniform(n_mr: usize) -> Self {
        Self {
            probs: vec![1.0 / (n_mr + 1) as f64; n_mr + 1],
        }
    }

    /// Pure Fock state `|n><n|` truncated at `n_mr`.
    pub fn fock(n: usize, n_mr: usize) -> Result<Self> {
        if n > n_mr {
            return Err(Error::domain(format!("photon number {n} exceeds n_mr = {n_mr}")));
        }
        let mut probs = vec![0.0; n_mr + 1];
        probs[n] = 1.0;
        Ok(Self { probs })
    }

    /// Vacuum state.
    pub fn vacuum(n_mr: usize) -> Self {
        let mut probs = vec![0.0; n_mr + 1];
        probs[0] = 1.0;
        Self { probs }
    }

    pub(crate) fn from_normalized_unchecked(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_mr(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn get(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Raw moment `sum_n n^k rho_nn`.
    fn moment(&self, k: i32) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| (n as f64).powi(k) * p)
            .sum()
    }
}

impl TryFrom<Vec<f64>> for FockDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<FockDistribution> for Vec<f64> {
    fn from(d: FockDistribution) -> Self {
        d.probs
    }
}

/// Reference state families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Coherent,
    Thermal,
}

impl Family {
    pub fn distribution(self, mean: f64, n_mr: usize) -> Result<FockDistribution> {
        match self {
            Family::Coherent => coherent_distribution(mean, n_mr),
            Family::Thermal => thermal_distribution(mean, n_mr),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Coherent => "coherent",
            Family::Thermal => "thermal",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coherent" => Ok(Family::Coherent),
            "thermal" => Ok(Family::Thermal),
            other => Err(Error::domain(format!("unknown state family '{other}'"))),
        }
    }
}

fn check_mean(mean: f64) -> Result<()> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::domain(format!(
            "mean photon number must be finite and non-negative, got {mean}"
        )));
    }
    Ok(())
}

/// Poissonian photon statistics of a coherent state, renormalized over `0..=n_mr`.
pub fn coherent_distribution(mean: f64, n_mr: usize) -> Result<FockDistribution> {
    check_mean(mean)?;
    if mean == 0.0 {
        return Ok(FockDistribution::vacuum(n_mr));
    }
    let ln_mean = mean.ln();
    let log_w: Vec<f64> = (0..=n_mr)
        .map(|n| n as f64 * ln_mean - mean - ln_factorial(n))
        .collect();
    Ok(FockDistribution::from_normalized_unchecked(
        normalize_log_weights(&log_w),
    ))
}

/// Bose-Einstein statistics `m^n / (1+m)^(n+1)`, renormalized over `0..=n_mr`.
pub fn thermal_distribution(mean: f64, n_mr: usize) -> Result<FockDistribution> {
    check_mean(mean)?;
    if mean == 0.0 {
        return Ok(FockDistribution::vacuum(n_mr));
    }
    let ln_ratio = mean.ln() - mean.ln_1p();
    let log_w: Vec<f64> = (0..=n_mr)
        .map(|n| n as f64 * ln_ratio - mean.ln_1p())
        .collect();
    Ok(FockDistribution::from_normalized_unchecked(
        normalize_log_weights(&log_w),
    ))
}

pub fn mean_photon_number(d: &FockDistribution) -> f64 {
    d.moment(1)
}

/// Zero-delay second-order coherence `(<n^2> - <n>) / <n>^2`.
pub fn g2_zero(d: &FockDistribution) -> Result<f64> {
    let mean = d.moment(1);
    if mean <= 0.0 {
        return Err(Error::UndefinedStatistic(
            "g2(0) is undefined for a zero-mean distribution",
        ));
    }
    Ok((d.moment(2) - mean) / (mean * mean))
}

/// Bhattacharyya overlap `sum_n sqrt(a_n b_n)`.
pub fn fidelity(a: &FockDistribution, b: &FockDistribution) -> Result<f64> {
    if a.probs.len() != b.probs.len() {
        return Err(Error::Dimension {
            expected: a.probs.len(),
            found: b.probs.len(),
        });
    }
    let f: f64 = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| (x * y).sqrt())
        .sum();
    Ok(f.min(1.0))
}

/// Member of `family` with the same mean photon number and truncation as `d`.
pub fn closest_reference_state(d: &FockDistribution, family: Family) -> FockDistribution {
    family
        .distribution(mean_photon_number(d), d.n_mr())
        .expect("mean of a valid distribution is finite and non-negative")
}
