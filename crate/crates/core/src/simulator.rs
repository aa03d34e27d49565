//! Synthetic ground truth: a parametric superconducting detector, noisy rate
//! generation and the repeated-experiment fidelity sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::{
    click_probability_coherent, DetectorSetting, NonlinearResponse, Povm, RESPONSE_LEN,
};
use crate::reconstruction::{reconstruct, ReconstructionConfig};
use crate::states::{closest_reference_state, fidelity, Family, FockDistribution};
use crate::tomography::{fit_all, uniform_grid, CountRateSurface};

/// Bias current at which the single-photon system efficiency is pinned.
pub const REFERENCE_CURRENT_UA: f64 = 13.3;
/// Single-photon system efficiency at [`REFERENCE_CURRENT_UA`].
pub const REFERENCE_EFFICIENCY: f64 = 0.028;
pub const GRID_MIN_UA: f64 = 5.0;
pub const GRID_MAX_UA: f64 = 13.25;
pub const GRID_COUNT: usize = 165;
pub const POWER_MIN: f64 = 0.05;
pub const POWER_MAX: f64 = 4.0e4;
pub const POWER_COUNT: usize = 20;
pub const DEFAULT_REPEATS: usize = 30;
pub const COHERENT_NOISE: f64 = 0.02;
pub const THERMAL_NOISE: f64 = 0.06;

/// Sigmoidal detector model: `p_k(I) = 1 / (1 + exp(-(I - I_k) / w))` for
/// `k = 1..=4` and dark counts `p_0(I) = dark0 * exp((I - I_c) / w)`, capped
/// at `p_1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDetector {
    pub critical_current: f64,
    /// Midpoint currents of the one- to four-photon transitions.
    pub threshold_currents: [f64; 4],
    pub transition_width: f64,
    pub eta0: f64,
    pub dark0: f64,
}

impl Default for SyntheticDetector {
    /// Single-photon sensitivity rising towards the top of the 5-13.25 uA
    /// window, a two-photon regime below it, and 2.8 % single-photon system
    /// efficiency at 13.3 uA (about 12 % linear efficiency).
    fn default() -> Self {
        let mut det = Self {
            critical_current: 14.8,
            threshold_currents: [14.0, 6.0, 2.5, 1.5],
            transition_width: 0.6,
            eta0: REFERENCE_EFFICIENCY,
            dark0: 0.01,
        };
        // single-photon efficiency = eta p_1 + (1 - eta) p_0
        let r = det
            .sigmoid_response(REFERENCE_CURRENT_UA)
            .expect("reference current is inside the operating range");
        det.eta0 = (REFERENCE_EFFICIENCY - r[0]) / (r[1] - r[0]);
        det
    }
}

impl SyntheticDetector {
    pub fn validate(&self) -> Result<()> {
        let t = &self.threshold_currents;
        let ordered = t.windows(2).all(|w| w[1] < w[0]);
        if !(ordered && t[3] > 0.0 && t[0] < self.critical_current) {
            return Err(Error::domain(
                "threshold currents must decrease in k and lie in (0, critical current)",
            ));
        }
        if !(self.transition_width > 0.0) {
            return Err(Error::domain("transition width must be positive"));
        }
        if !(self.eta0 > 0.0 && self.eta0 <= 1.0) {
            return Err(Error::domain("eta0 must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dark0) {
            return Err(Error::domain("dark0 must lie in [0, 1]"));
        }
        Ok(())
    }

    fn sigmoid_response(&self, current: f64) -> Result<[f64; RESPONSE_LEN]> {
        if !(current > 0.0 && current < self.critical_current) {
            return Err(Error::domain(format!(
                "bias current {current} uA outside (0, {})",
                self.critical_current
            )));
        }
        let w = self.transition_width;
        let mut p = [0.0; RESPONSE_LEN];
        p[0] = (self.dark0 * ((current - self.critical_current) / w).exp()).min(1.0);
        for k in 1..RESPONSE_LEN {
            let x = (current - self.threshold_currents[k - 1]) / w;
            p[k] = 1.0 / (1.0 + (-x).exp());
        }
        p[0] = p[0].min(p[1]);
        Ok(p)
    }

    /// Detector POVM at the given bias currents.
    pub fn povm(&self, currents: &[f64], n_mr: usize) -> Result<Povm> {
        let settings = currents
            .iter()
            .enumerate()
            .map(|(i, &c)| DetectorSetting::bias(i, c))
            .collect::<Result<Vec<_>>>()?;
        let responses = currents
            .iter()
            .map(|&c| synthetic_response(self, c))
            .collect::<Result<Vec<_>>>()?;
        Povm::from_responses(settings, &responses, n_mr)
    }
}

/// Nonlinear response of the synthetic detector at one bias current.
pub fn synthetic_response(det: &SyntheticDetector, bias_current: f64) -> Result<NonlinearResponse> {
    det.validate()?;
    NonlinearResponse::new(det.eta0, det.sigmoid_response(bias_current)?)
}

/// Multiplicative uniform noise `R (1 + a u)`, `u ~ U[-1, 1]`, optionally
/// followed by binomial sampling over a finite number of pulses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub relative_amplitude: f64,
    pub seed: u64,
    pub shot_pulses: Option<u64>,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            relative_amplitude: 0.0,
            seed: 0,
            shot_pulses: None,
        }
    }

    pub fn uniform(relative_amplitude: f64, seed: u64) -> Self {
        Self {
            relative_amplitude,
            seed,
            shot_pulses: None,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.relative_amplitude) {
            return Err(Error::domain(format!(
                "relative noise amplitude {} outside [0, 1)",
                self.relative_amplitude
            )));
        }
        if self.shot_pulses == Some(0) {
            return Err(Error::domain("shot-noise mode needs at least one pulse"));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn perturb(&self, rate: f64, rng: &mut ChaCha8Rng) -> f64 {
        let mut r = rate;
        if self.relative_amplitude > 0.0 {
            let u: f64 = rng.random_range(-1.0..=1.0);
            r = (rate * (1.0 + self.relative_amplitude * u)).clamp(0.0, 1.0);
        }
        if let Some(pulses) = self.shot_pulses {
            let counts = Binomial::new(pulses, r)
                .expect("rate is a probability")
                .sample(rng);
            r = counts as f64 / pulses as f64;
        }
        r
    }

    /// Applies the noise to a sequence of exact rates, one draw per entry.
    pub fn apply(&self, rates: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = self.rng();
        Ok(rates.iter().map(|&r| self.perturb(r, &mut rng)).collect())
    }
}

/// Coherent-state click probabilities of the synthetic detector on a
/// (current x power) grid, with noise drawn cell by cell in row-major order.
pub fn simulate_surface(
    det: &SyntheticDetector,
    currents: &[f64],
    powers: &[f64],
    noise: &NoiseModel,
) -> Result<CountRateSurface> {
    noise.validate()?;
    let mut rng = noise.rng();
    let mut settings = Vec::with_capacity(currents.len());
    let mut rates = Vec::with_capacity(currents.len());
    for (i, &c) in currents.iter().enumerate() {
        let resp = synthetic_response(det, c)?;
        let row = powers
            .iter()
            .map(|&m| Ok(noise.perturb(click_probability_coherent(&resp, m)?, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        settings.push(DetectorSetting::bias(i, c)?);
        rates.push(row);
    }
    CountRateSurface::new(settings, powers.to_vec(), rates, noise.shot_pulses)
}

/// Noisy click probabilities of a state measured with `povm`.
pub fn simulate_rates(povm: &Povm, state: &FockDistribution, noise: &NoiseModel) -> Result<Vec<f64>> {
    noise.apply(&povm.predict(state)?)
}

/// `count` log-spaced values over `[min, max]`.
pub fn log_spaced(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let (a, b) = (min.ln(), max.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        min
                    } else if i + 1 == count {
                        max
                    } else {
                        (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Measurement grid and tomography policy of a fidelity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub currents: Vec<f64>,
    pub powers: Vec<f64>,
    /// Redo tomography on a freshly simulated noisy surface for every repeat
    /// instead of reusing one noiseless fit.
    pub refit_per_repeat: bool,
}

impl Default for SweepSetup {
    fn default() -> Self {
        Self {
            currents: uniform_grid(GRID_MIN_UA, GRID_MAX_UA, GRID_COUNT),
            powers: log_spaced(POWER_MIN, POWER_MAX, POWER_COUNT),
            refit_per_repeat: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub mean: f64,
    pub fidelity_mean: f64,
    /// Sample standard deviation over successful repeats.
    pub fidelity_spread: f64,
    pub successes: usize,
    /// Errors of failed repeats, by repeat index.
    pub failures: Vec<(usize, String)>,
}

/// Simulates `repeats` experiments per mean photon number and reports the
/// fidelity of each reconstruction to its mean-matched family reference.
/// Repeat `r` uses noise seed `noise.seed + r`.
pub fn fidelity_curve(
    det: &SyntheticDetector,
    family: Family,
    means: &[f64],
    repeats: usize,
    noise: &NoiseModel,
    cfg: &ReconstructionConfig,
    setup: &SweepSetup,
) -> Result<Vec<FidelityPoint>> {
    if repeats < 1 {
        return Err(Error::domain("at least one repeat is required"));
    }
    noise.validate()?;
    cfg.validate()?;
    let truth = det.povm(&setup.currents, cfg.n_mr)?;
    let shared_fit = if setup.refit_per_repeat {
        None
    } else {
        let surface = simulate_surface(det, &setup.currents, &setup.powers, &NoiseModel::noiseless())?;
        Some(fit_all(&surface, cfg.n_mr)?.povm)
    };

    means
        .iter()
        .map(|&mean| {
            let state = family.distribution(mean, cfg.n_mr)?;
            let exact = truth.predict(&state)?;
            let outcomes: Vec<Result<f64>> = (0..repeats)
                .into_par_iter()
                .map(|r| {
                    let sub = noise.with_seed(noise.seed.wrapping_add(r as u64));
                    let measured = sub.apply(&exact)?;
                    let refit;
                    let povm = match &shared_fit {
                        Some(p) => p,
                        None => {
                            let surface = simulate_surface(det, &setup.currents, &setup.powers, &sub)?;
                            refit = fit_all(&surface, cfg.n_mr)?.povm;
                            &refit
                        }
                    };
                    let result = reconstruct(povm, &measured, cfg)?;
                    fidelity(&result.rho, &closest_reference_state(&result.rho, family))
                })
                .collect();
            let mut values = Vec::with_capacity(repeats);
            let mut failures = Vec::new();
            for (r, o) in outcomes.into_iter().enumerate() {
                match o {
                    Ok(f) => values.push(f),
                    Err(e) => failures.push((r, e.to_string())),
                }
            }
            let (m, s) = mean_and_spread(&values);
            Ok(FidelityPoint {
                mean,
                fidelity_mean: m,
                fidelity_spread: s,
                successes: values.len(),
                failures,
            })
        })
        .collect()
}

fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_detector_matches_reference_efficiency() {
        let det = SyntheticDetector::default();
        det.validate().unwrap();
        let resp = synthetic_response(&det, REFERENCE_CURRENT_UA).unwrap();
        let single = crate::povm::assemble_povm_row(&resp, 4).unwrap()[1];
        assert!((single - 0.028).abs() < 1e-12);
        // single photons are ignored but pairs detected in mid-window
        let mid = synthetic_response(&det, 8.0).unwrap();
        assert!(mid.p[1] < 1e-4 && mid.p[2] > 0.95);
    }

    #[test]
    fn sigmoid_midpoint_and_cutoff() {
        let det = SyntheticDetector::default();
        let r = synthetic_response(&det, det.threshold_currents[0]).unwrap();
        assert_eq!(r.p[1], 0.5);
        let far = SyntheticDetector {
            threshold_currents: [14.0, 13.9, 13.8, 13.7],
            transition_width: 0.05,
            ..det
        };
        let r = synthetic_response(&far, 1.0).unwrap();
        assert!(r.p.iter().all(|&p| p < 1e-12));
        assert!(synthetic_response(&det, 15.0).is_err());
        assert!(synthetic_response(&det, 0.0).is_err());
    }

    #[test]
    fn response_is_monotone_in_k_and_current() {
        let det = SyntheticDetector::default();
        let mut prev = [0.0; 5];
        for c in uniform_grid(0.5, 14.5, 200) {
            let r = synthetic_response(&det, c).unwrap();
            assert!(r.p.windows(2).all(|w| w[0] <= w[1]));
            for k in 0..5 {
                assert!(r.p[k] >= prev[k]);
            }
            prev = r.p;
        }
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let det = SyntheticDetector::default();
        let currents = [6.0, 9.0, 12.0];
        let powers = log_spaced(0.05, 4e4, 20);
        let exact = simulate_surface(&det, &currents, &powers, &NoiseModel::noiseless()).unwrap();
        let noisy = simulate_surface(&det, &currents, &powers, &NoiseModel::uniform(0.02, 9)).unwrap();
        let again = simulate_surface(&det, &currents, &powers, &NoiseModel::uniform(0.02, 9)).unwrap();
        assert_eq!(noisy, again);
        for (a, b) in exact.rates().iter().flatten().zip(noisy.rates().iter().flatten()) {
            assert!(*b >= (a * 0.98).max(0.0) - 1e-15 && *b <= (a * 1.02).min(1.0) + 1e-15);
        }
        assert!(NoiseModel::uniform(1.0, 0).validate().is_err());
    }

    #[test]
    fn shot_noise_mode_yields_count_ratios() {
        let noise = NoiseModel {
            relative_amplitude: 0.0,
            seed: 3,
            shot_pulses: Some(1000),
        };
        let rates = noise.apply(&[0.5, 0.01, 0.0, 1.0]).unwrap();
        for r in &rates {
            assert_eq!((r * 1000.0).round() / 1000.0, *r);
        }
        assert_eq!(rates[2], 0.0);
        assert_eq!(rates[3], 1.0);
    }

    #[test]
    fn log_spacing_hits_both_ends() {
        let p = log_spaced(0.05, 4e4, 20);
        assert_eq!(p[0], 0.05);
        assert_eq!(p[19], 4e4);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
    }
}
