//! Detector description: per-setting nonlinear response, the binomial loss
//! channel, POVM assembly and the two forward click-probability models.
//!
//! A detector is modelled as a linear loss stage of efficiency `eta` followed
//! by a nonlinear element that clicks with probability `p[k]` when exactly `k`
//! photons reach it. Only `p[0..=4]` are free; for `k > 4` the element always
//! clicks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{binomial_pmf, binomial_tail, poisson_pmf, poisson_tail};
use crate::states::FockDistribution;

/// Number of free nonlinear click probabilities (`k = 0..=4`).
pub const RESPONSE_LEN: usize = 5;

/// Value of the tuning knob at one detector setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Tuning {
    /// Bias current through the nanowire, microamperes.
    BiasCurrent(f64),
    /// Transmission of a variable attenuator in front of the detector.
    Transmission(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSetting {
    pub index: usize,
    pub tuning: Tuning,
}

impl DetectorSetting {
    pub fn bias(index: usize, current_ua: f64) -> Result<Self> {
        if !(current_ua.is_finite() && current_ua > 0.0) {
            return Err(Error::domain(format!(
                "bias current must be positive, got {current_ua}"
            )));
        }
        Ok(Self {
            index,
            tuning: Tuning::BiasCurrent(current_ua),
        })
    }

    pub fn transmission(index: usize, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("transmission {t} outside [0, 1]")));
        }
        Ok(Self {
            index,
            tuning: Tuning::Transmission(t),
        })
    }

    /// Numeric value of the tuning knob regardless of its kind.
    pub fn value(&self) -> f64 {
        match self.tuning {
            Tuning::BiasCurrent(v) | Tuning::Transmission(v) => v,
        }
    }

    pub fn bias_current(&self) -> Option<f64> {
        match self.tuning {
            Tuning::BiasCurrent(v) => Some(v),
            Tuning::Transmission(_) => None,
        }
    }
}

/// Linear efficiency plus click probabilities for exactly `k` absorbed photons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearResponse {
    pub eta: f64,
    pub p: [f64; RESPONSE_LEN],
}

impl NonlinearResponse {
    pub fn new(eta: f64, p: [f64; RESPONSE_LEN]) -> Result<Self> {
        let r = Self { eta, p };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::domain(format!(
                "linear efficiency {} outside (0, 1]",
                self.eta
            )));
        }
        if let Some((k, pk)) = self
            .p
            .iter()
            .enumerate()
            .find(|(_, pk)| !(0.0..=1.0).contains(*pk))
        {
            return Err(Error::domain(format!("p[{k}] = {pk} outside [0, 1]")));
        }
        Ok(())
    }

    /// Ideal linear on/off detector: one absorbed photon suffices.
    pub fn linear(eta: f64) -> Result<Self> {
        Self::new(eta, [0.0, 1.0, 1.0, 1.0, 1.0])
    }

    /// Click probability for exactly `k` absorbed photons.
    pub fn p_absorbed(&self, k: usize) -> f64 {
        self.p.get(k).copied().unwrap_or(1.0)
    }
}

/// Click elements `Pi[nu][n]` for every setting `nu` and incident photon number
/// `n = 0..=n_mr`. The no-click element is implicitly `1 - Pi[nu][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Povm {
    settings: Vec<DetectorSetting>,
    elements: Vec<f64>,
    n_mr: usize,
}

impl Povm {
    pub fn new(settings: Vec<DetectorSetting>, rows: Vec<Vec<f64>>, n_mr: usize) -> Result<Self> {
        if settings.len() != rows.len() {
            return Err(Error::Dimension {
                expected: settings.len(),
                found: rows.len(),
            });
        }
        let mut elements = Vec::with_capacity(rows.len() * (n_mr + 1));
        for (nu, row) in rows.into_iter().enumerate() {
            if row.len() != n_mr + 1 {
                return Err(Error::Dimension {
                    expected: n_mr + 1,
                    found: row.len(),
                }
                .at_setting(nu));
            }
            if let Some((n, v)) = row.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Validation(format!(
                    "POVM element ({nu}, {n}) = {v} outside [0, 1]"
                )));
            }
            elements.extend(row);
        }
        Ok(Self {
            settings,
            elements,
            n_mr,
        })
    }

    /// Assembles the POVM of a detector described by one response per setting.
    pub fn from_responses(
        settings: Vec<DetectorSetting>,
        responses: &[NonlinearResponse],
        n_mr: usize,
    ) -> Result<Self> {
        let rows = responses
            .iter()
            .enumerate()
            .map(|(nu, r)| assemble_povm_row(r, n_mr).map_err(|e| e.at_setting(nu)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(settings, rows, n_mr)
    }

    pub fn settings(&self) -> &[DetectorSetting] {
        &self.settings
    }

    pub fn n_settings(&self) -> usize {
        self.settings.len()
    }

    pub fn n_mr(&self) -> usize {
        self.n_mr
    }

    pub fn row(&self, nu: usize) -> &[f64] {
        let w = self.n_mr + 1;
        &self.elements[nu * w..(nu + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.elements.chunks_exact(self.n_mr + 1)
    }

    /// Row-major element storage.
    pub fn elements(&self) -> &[f64] {
        &self.elements
    }

    /// Keeps only the first `n_mr + 1` photon-number columns.
    pub fn truncated(&self, n_mr: usize) -> Result<Self> {
        if n_mr > self.n_mr {
            return Err(Error::domain(format!(
                "cannot extend a POVM truncated at {} to {n_mr}",
                self.n_mr
            )));
        }
        let rows = self.rows().map(|r| r[..=n_mr].to_vec()).collect();
        Self::new(self.settings.clone(), rows, n_mr)
    }

    /// Sub-POVM made of the given setting indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut settings = Vec::with_capacity(indices.len());
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_settings() {
                return Err(Error::domain(format!(
                    "setting index {i} out of range ({} settings)",
                    self.n_settings()
                )));
            }
            settings.push(self.settings[i]);
            rows.push(self.row(i).to_vec());
        }
        Self::new(settings, rows, self.n_mr)
    }

    /// Click probabilities `p_nu = sum_n Pi[nu][n] rho_n` for every setting.
    pub fn predict(&self, d: &FockDistribution) -> Result<Vec<f64>> {
        self.rows().map(|r| click_probability_state(r, d)).collect()
    }
}

/// Binomial loss channel `L[k][k'] = C(k,k') eta^k' (1-eta)^(k-k')`.
pub fn bernoulli_matrix(eta: f64, n_mr: usize) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("efficiency {eta} outside [0, 1]")));
    }
    Ok(DMatrix::from_fn(n_mr + 1, n_mr + 1, |k, kp| {
        if kp <= k {
            binomial_pmf(k, kp, eta)
        } else {
            0.0
        }
    }))
}

/// One POVM row: the nonlinear response vector (padded with ones beyond
/// `k = 4`) pushed through the binomial loss channel.
///
/// Summed as `sum_{k<=4} L[n][k] p[k] + P(Bin(n, eta) >= 5)` so that every
/// term is non-negative.
pub fn assemble_povm_row(resp: &NonlinearResponse, n_mr: usize) -> Result<Vec<f64>> {
    if n_mr < RESPONSE_LEN - 1 {
        return Err(Error::Truncation(n_mr));
    }
    resp.validate()?;
    Ok((0..=n_mr)
        .map(|n| {
            let head: f64 = (0..=n.min(RESPONSE_LEN - 1))
                .map(|k| binomial_pmf(n, k, resp.eta) * resp.p[k])
                .sum();
            (head + binomial_tail(n, RESPONSE_LEN, resp.eta)).clamp(0.0, 1.0)
        })
        .collect())
}

/// Click probability for a coherent state of mean photon number `mean`.
///
/// With `mu = eta * mean` this is `1 - e^{-mu} sum_{k<=4} (1-p[k]) mu^k/k!`,
/// evaluated as `P(Poisson(mu) >= 5) + sum_{k<=4} p[k] e^{-mu} mu^k/k!`.
pub fn click_probability_coherent(resp: &NonlinearResponse, mean: f64) -> Result<f64> {
    if !(mean.is_finite() && mean >= 0.0) {
        return Err(Error::domain(format!(
            "mean photon number must be non-negative, got {mean}"
        )));
    }
    Ok(coherent_click_unchecked(resp, mean))
}

pub(crate) fn coherent_click_unchecked(resp: &NonlinearResponse, mean: f64) -> f64 {
    let mu = resp.eta * mean;
    let head: f64 = resp
        .p
        .iter()
        .enumerate()
        .map(|(k, pk)| pk * poisson_pmf(k, mu))
        .sum();
    (head + poisson_tail(RESPONSE_LEN, mu)).clamp(0.0, 1.0)
}

/// `Tr(rho Pi_nu)` for a diagonal POVM row.
pub fn click_probability_state(povm_row: &[f64], d: &FockDistribution) -> Result<f64> {
    if povm_row.len() != d.probs().len() {
        return Err(Error::Dimension {
            expected: povm_row.len(),
            found: d.probs().len(),
        });
    }
    Ok(povm_row
        .iter()
        .zip(d.probs())
        .map(|(pi, p)| pi * p)
        .sum::<f64>()
        .clamp(0.0, 1.0))
}
