//! Maximum-likelihood reconstruction of photon-number distributions by the
//! expectation-maximization iteration, plus chi-square scoring and
//! coherent/thermal discrimination.
//!
//! Each setting is a Bernoulli trial with click probability
//! `p_nu = sum_n Pi[nu][n] rho_n`. With outcome completion on (the default),
//! every setting contributes a click outcome weighted by `R_nu` and a no-click
//! outcome weighted by `1 - R_nu`, which makes the multiplicative update an
//! exact EM step for the log-likelihood
//! `L = sum_nu R_nu ln p_nu + (1 - R_nu) ln(1 - p_nu)`. With completion off the
//! click-only update is applied as written, normalized by the column sums of
//! the click elements, and the result is renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::Povm;
use crate::states::{closest_reference_state, Family, FockDistribution, DEFAULT_N_MR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub iterations: u64,
    /// Stop once one iteration raises the log-likelihood by less than this;
    /// zero disables early stopping.
    pub early_stop_delta: f64,
    pub n_mr: usize,
    pub include_no_click: bool,
    /// Log-likelihood sampling period of the recorded trace.
    pub trace_every: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            iterations: 1_000_000,
            early_stop_delta: 0.0,
            n_mr: DEFAULT_N_MR,
            include_no_click: true,
            trace_every: 1_000,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::domain("at least one iteration is required"));
        }
        if self.trace_every < 1 {
            return Err(Error::domain("trace period must be at least one iteration"));
        }
        if !(self.early_stop_delta >= 0.0) {
            return Err(Error::domain("early-stop threshold must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub rho: FockDistribution,
    /// Log-likelihood at iteration 0, every `trace_every` iterations, and at
    /// the final iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations_run: u64,
    /// Click probabilities predicted by `rho` at every setting.
    pub predicted: Vec<f64>,
    pub config: ReconstructionConfig,
}

/// Reusable buffers for repeated EM steps on one POVM and data set.
struct EmEngine<'a> {
    povm: &'a Povm,
    measured: &'a [f64],
    include_no_click: bool,
    column_sums: Vec<f64>,
    predicted: Vec<f64>,
    coef: Vec<f64>,
    factor: Vec<f64>,
}

impl<'a> EmEngine<'a> {
    fn new(povm: &'a Povm, measured: &'a [f64], include_no_click: bool) -> Result<Self> {
        if measured.len() != povm.n_settings() {
            return Err(Error::Dimension {
                expected: povm.n_settings(),
                found: measured.len(),
            });
        }
        if let Some((nu, r)) = measured
            .iter()
            .enumerate()
            .find(|(_, r)| !(0.0..=1.0).contains(*r))
        {
            return Err(Error::domain(format!(
                "measured click probability {r} at setting {nu} outside [0, 1]"
            )));
        }
        let width = povm.n_mr() + 1;
        let mut column_sums = vec![0.0; width];
        for row in povm.rows() {
            for (s, pi) in column_sums.iter_mut().zip(row) {
                *s += pi;
            }
        }
        Ok(Self {
            povm,
            measured,
            include_no_click,
            column_sums,
            predicted: vec![0.0; povm.n_settings()],
            coef: vec![0.0; povm.n_settings()],
            factor: vec![0.0; width],
        })
    }

    fn predict(&mut self, rho: &[f64]) {
        for (p, row) in self.predicted.iter_mut().zip(self.povm.rows()) {
            *p = row.iter().zip(rho).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0);
        }
    }

    fn log_likelihood(&self) -> f64 {
        bernoulli_log_likelihood(self.measured, &self.predicted)
    }

    /// One multiplicative update of `rho`, using the predictions of the
    /// current `rho` (call [`Self::predict`] first).
    fn step(&mut self, rho: &mut [f64]) -> Result<()> {
        let n_settings = self.povm.n_settings() as f64;
        let mut constant = 0.0;
        for (nu, ((c, &r), &p)) in self
            .coef
            .iter_mut()
            .zip(self.measured)
            .zip(&self.predicted)
            .enumerate()
        {
            let click = if r > 0.0 {
                if p <= 0.0 {
                    return Err(Error::SupportMismatch {
                        setting: nu,
                        predicted: p,
                        observed: r,
                    });
                }
                r / p
            } else {
                0.0
            };
            if self.include_no_click {
                let miss = if r < 1.0 {
                    if p >= 1.0 {
                        return Err(Error::SupportMismatch {
                            setting: nu,
                            predicted: 1.0 - p,
                            observed: 1.0 - r,
                        });
                    }
                    (1.0 - r) / (1.0 - p)
                } else {
                    0.0
                };
                *c = click - miss;
                constant += miss;
            } else {
                *c = click;
            }
        }

        self.factor.iter_mut().for_each(|f| *f = 0.0);
        for (row, &c) in self.povm.rows().zip(&self.coef) {
            if c != 0.0 {
                for (f, pi) in self.factor.iter_mut().zip(row) {
                    *f += c * pi;
                }
            }
        }
        if self.include_no_click {
            for f in self.factor.iter_mut() {
                *f = (*f + constant) / n_settings;
            }
        } else {
            for (f, s) in self.factor.iter_mut().zip(&self.column_sums) {
                *f = if *s > 0.0 { *f / s } else { 0.0 };
            }
        }

        let mut total = 0.0;
        for (x, f) in rho.iter_mut().zip(&self.factor) {
            *x *= f.max(0.0);
            total += *x;
        }
        if !(total > 0.0) {
            return Err(Error::InvalidDistribution(
                "EM update annihilated every photon-number component".into(),
            ));
        }
        rho.iter_mut().for_each(|x| *x /= total);
        Ok(())
    }
}

/// `sum_nu R ln p + (1 - R) ln(1 - p)` with `0 ln 0 = 0`.
pub fn bernoulli_log_likelihood(measured: &[f64], predicted: &[f64]) -> f64 {
    measured
        .iter()
        .zip(predicted)
        .map(|(&r, &p)| {
            let mut l = 0.0;
            if r > 0.0 {
                l += r * p.ln();
            }
            if r < 1.0 {
                l += (1.0 - r) * (-p).ln_1p();
            }
            l
        })
        .sum()
}

/// Log-likelihood of `rho` given measured click probabilities.
pub fn log_likelihood(povm: &Povm, measured: &[f64], rho: &FockDistribution) -> Result<f64> {
    let predicted = povm.predict(rho)?;
    if predicted.len() != measured.len() {
        return Err(Error::Dimension {
            expected: predicted.len(),
            found: measured.len(),
        });
    }
    Ok(bernoulli_log_likelihood(measured, &predicted))
}

fn check_rho(povm: &Povm, rho: &FockDistribution) -> Result<()> {
    if rho.n_mr() != povm.n_mr() {
        return Err(Error::Dimension {
            expected: povm.n_mr() + 1,
            found: rho.n_mr() + 1,
        });
    }
    Ok(())
}

/// A single EM update of `rho`.
pub fn em_step(
    rho: &FockDistribution,
    povm: &Povm,
    measured: &[f64],
    include_no_click: bool,
) -> Result<FockDistribution> {
    check_rho(povm, rho)?;
    let mut engine = EmEngine::new(povm, measured, include_no_click)?;
    let mut x = rho.probs().to_vec();
    engine.predict(&x);
    engine.step(&mut x)?;
    Ok(FockDistribution::from_normalized_unchecked(x))
}

/// Iterates EM from `start` (uniform when `None`). Components that start at
/// zero stay at zero under the multiplicative update.
pub fn reconstruct_from(
    povm: &Povm,
    measured: &[f64],
    cfg: &ReconstructionConfig,
    start: Option<&FockDistribution>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let truncated;
    let povm = if cfg.n_mr == povm.n_mr() {
        povm
    } else {
        truncated = povm.truncated(cfg.n_mr)?;
        &truncated
    };
    let mut rho = match start {
        Some(s) => {
            check_rho(povm, s)?;
            s.probs().to_vec()
        }
        None => FockDistribution::uniform(cfg.n_mr).into_vec(),
    };
    let mut engine = EmEngine::new(povm, measured, cfg.include_no_click)?;
    engine.predict(&rho);
    let mut current = engine.log_likelihood();
    let mut trace = vec![current];
    let mut run = 0;
    while run < cfg.iterations {
        engine.step(&mut rho)?;
        engine.predict(&rho);
        run += 1;
        let sample = run % cfg.trace_every == 0;
        if cfg.early_stop_delta > 0.0 || sample {
            let next = engine.log_likelihood();
            if sample {
                trace.push(next);
            }
            let gain = next - current;
            current = next;
            if cfg.early_stop_delta > 0.0 && gain < cfg.early_stop_delta {
                break;
            }
        }
    }
    if run % cfg.trace_every != 0 {
        trace.push(engine.log_likelihood());
    }
    Ok(ReconstructionResult {
        rho: FockDistribution::from_normalized_unchecked(rho),
        loglik_trace: trace,
        iterations_run: run,
        predicted: engine.predicted.clone(),
        config: *cfg,
    })
}

/// Iterates EM from the uniform distribution.
pub fn reconstruct(
    povm: &Povm,
    measured: &[f64],
    cfg: &ReconstructionConfig,
) -> Result<ReconstructionResult> {
    reconstruct_from(povm, measured, cfg, None)
}

/// Reduced chi-square under a constant relative error model. Settings with a
/// zero measured rate are left out of both the sum and the count.
pub fn chi_square(measured: &[f64], predicted: &[f64], relative_error: f64) -> Result<f64> {
    if measured.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: measured.len(),
            found: predicted.len(),
        });
    }
    if !(relative_error > 0.0) {
        return Err(Error::domain(format!(
            "relative error must be positive, got {relative_error}"
        )));
    }
    let (sum, count) = measured
        .iter()
        .zip(predicted)
        .filter(|(m, _)| **m > 0.0)
        .fold((0.0, 0usize), |(s, c), (m, p)| {
            let z = (m - p) / (relative_error * m);
            (s + z * z, c + 1)
        });
    if count == 0 {
        return Err(Error::DegenerateData("every measured rate is zero".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Coherent,
    Thermal,
    Undecided,
}

/// Relative chi-square gap below which no family is preferred.
pub const UNDECIDED_MARGIN: f64 = 0.10;

#[derive(Debug, Clone)]
pub struct Classification {
    pub verdict: Verdict,
    pub chi2_coherent: f64,
    pub chi2_thermal: f64,
    pub reconstruction: ReconstructionResult,
}

/// Reconstructs the state, then scores the measured rates against the rates
/// predicted by the mean-matched coherent and thermal states.
pub fn classify_family(
    povm: &Povm,
    measured: &[f64],
    relative_error: f64,
    cfg: &ReconstructionConfig,
) -> Result<Classification> {
    let reconstruction = reconstruct(povm, measured, cfg)?;
    let povm = povm.truncated(cfg.n_mr)?;
    let chi2 = |family: Family| -> Result<f64> {
        let reference = closest_reference_state(&reconstruction.rho, family);
        chi_square(measured, &povm.predict(&reference)?, relative_error)
    };
    let chi2_coherent = chi2(Family::Coherent)?;
    let chi2_thermal = chi2(Family::Thermal)?;
    let verdict = if (chi2_coherent - chi2_thermal).abs()
        < UNDECIDED_MARGIN * chi2_coherent.max(chi2_thermal)
    {
        Verdict::Undecided
    } else if chi2_coherent < chi2_thermal {
        Verdict::Coherent
    } else {
        Verdict::Thermal
    };
    Ok(Classification {
        verdict,
        chi2_coherent,
        chi2_thermal,
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::povm::DetectorSetting;
    use crate::states::fidelity;

    fn settings(n: usize) -> Vec<DetectorSetting> {
        (0..n).map(|i| DetectorSetting::bias(i, 1.0 + i as f64).unwrap()).collect()
    }

    fn toy_povm() -> Povm {
        let rows = vec![
            vec![0.1, 0.5, 0.7, 0.9],
            vec![0.05, 0.2, 0.6, 0.8],
            vec![0.3, 0.35, 0.4, 0.95],
            vec![0.02, 0.7, 0.75, 0.8],
            vec![0.6, 0.1, 0.3, 0.5],
        ];
        Povm::new(settings(5), rows, 3).unwrap()
    }

    #[test]
    fn fixed_point_when_data_match_prediction() {
        let povm = toy_povm();
        let rho = FockDistribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let measured = povm.predict(&rho).unwrap();
        for complete in [true, false] {
            let next = em_step(&rho, &povm, &measured, complete).unwrap();
            for (a, b) in next.probs().iter().zip(rho.probs()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_resolver_inverts_directly() {
        let n_mr = 4;
        let rows = (0..=n_mr)
            .map(|nu| (0..=n_mr).map(|n| if n == nu { 1.0 } else { 0.0 }).collect())
            .collect();
        let povm = Povm::new(settings(n_mr + 1), rows, n_mr).unwrap();
        let q = [0.1, 0.35, 0.3, 0.2, 0.05];
        let cfg = ReconstructionConfig {
            iterations: 2000,
            n_mr,
            ..Default::default()
        };
        let result = reconstruct(&povm, &q, &cfg).unwrap();
        for (a, b) in result.rho.probs().iter().zip(q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_components_stay_zero() {
        let povm = toy_povm();
        let start = FockDistribution::new(vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        let measured = povm
            .predict(&FockDistribution::new(vec![0.25; 4]).unwrap())
            .unwrap();
        let cfg = ReconstructionConfig {
            iterations: 500,
            n_mr: 3,
            ..Default::default()
        };
        let r = reconstruct_from(&povm, &measured, &cfg, Some(&start)).unwrap();
        assert_eq!(r.rho.get(1), 0.0);
        assert_eq!(r.rho.get(3), 0.0);
    }

    #[test]
    fn support_mismatch_is_reported() {
        let rows = vec![vec![0.0, 0.0], vec![0.5, 0.5]];
        let povm = Povm::new(settings(2), rows, 1).unwrap();
        let rho = FockDistribution::uniform(1);
        assert!(matches!(
            em_step(&rho, &povm, &[0.2, 0.5], true),
            Err(Error::SupportMismatch { setting: 0, .. })
        ));
        let rows = vec![vec![1.0, 1.0], vec![0.5, 0.5]];
        let povm = Povm::new(settings(2), rows, 1).unwrap();
        assert!(matches!(
            em_step(&rho, &povm, &[0.9, 0.5], true),
            Err(Error::SupportMismatch { setting: 0, .. })
        ));
        // the click-only form never looks at the no-click outcome
        assert!(em_step(&rho, &povm, &[0.9, 0.5], false).is_ok());
    }

    #[test]
    fn trace_is_sampled_and_non_decreasing() {
        let povm = toy_povm();
        let measured = [0.3, 0.25, 0.5, 0.4, 0.35];
        let cfg = ReconstructionConfig {
            iterations: 2500,
            n_mr: 3,
            trace_every: 1000,
            ..Default::default()
        };
        let r = reconstruct(&povm, &measured, &cfg).unwrap();
        assert_eq!(r.iterations_run, 2500);
        assert_eq!(r.loglik_trace.len(), 4);
        assert!(r.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let single = reconstruct(
            &povm,
            &measured,
            &ReconstructionConfig {
                iterations: 1,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(single.iterations_run, 1);
        assert_eq!(single.loglik_trace.len(), 2);
    }

    #[test]
    fn early_stop_cuts_iterations() {
        let povm = toy_povm();
        let rho = FockDistribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let measured = povm.predict(&rho).unwrap();
        let cfg = ReconstructionConfig {
            iterations: 1_000_000,
            early_stop_delta: 1e-13,
            n_mr: 3,
            ..Default::default()
        };
        let r = reconstruct(&povm, &measured, &cfg).unwrap();
        assert!(r.iterations_run < 1_000_000);
        assert!(fidelity(&r.rho, &rho).unwrap() > 0.999);
    }

    #[test]
    fn chi_square_examples() {
        let m = [0.2, 0.4, 0.0, 0.8];
        assert_eq!(chi_square(&m, &m, 0.02).unwrap(), 0.0);
        let p: Vec<f64> = m
            .iter()
            .enumerate()
            .map(|(i, x)| if i % 2 == 0 { x * 1.02 } else { x * 0.98 })
            .collect();
        assert!((chi_square(&m, &p, 0.02).unwrap() - 1.0).abs() < 1e-12);
        assert!(chi_square(&[0.0, 0.0], &[0.1, 0.1], 0.02).is_err());
        assert!(chi_square(&m, &m, 0.0).is_err());
        assert!(chi_square(&m, &m[..2], 0.02).is_err());
    }

    #[test]
    fn dimension_checks() {
        let povm = toy_povm();
        assert!(matches!(
            em_step(&FockDistribution::uniform(3), &povm, &[0.1; 4], true),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            em_step(&FockDistribution::uniform(5), &povm, &[0.1; 5], true),
            Err(Error::Dimension { .. })
        ));
        let cfg = ReconstructionConfig {
            iterations: 0,
            n_mr: 3,
            ..Default::default()
        };
        assert!(reconstruct(&povm, &[0.1; 5], &cfg).is_err());
    }
}
