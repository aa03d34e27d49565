//! Detector tomography from click-probability-versus-power curves.
//!
//! Every tuning setting is fitted on its own: the coherent-state click model
//! is linear in the response vector `p` once `eta` is fixed, so `p` is solved
//! exactly as a box-constrained least-squares problem and only `eta` is
//! searched numerically. The search scans a log-spaced `eta` grid and refines
//! the best local minima of that profile with a golden-section search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxls::BoxQp;
use crate::error::{Error, Result};
use crate::math::{poisson_pmf, poisson_tail};
use crate::povm::{
    coherent_click_unchecked, DetectorSetting, NonlinearResponse, Povm, RESPONSE_LEN,
};

/// Rates below this are weighted as if they were this large.
pub const RATE_FLOOR: f64 = 1e-12;
/// Number of refined starting points for the efficiency search.
pub const MULTI_STARTS: usize = 8;
/// Smallest `eta` considered by the fit.
pub const ETA_MIN: f64 = 1e-9;
const ETA_GRID_PER_DECADE: usize = 10;
const LOG_ETA_TOL: f64 = 1e-11;
const FLAT_REL_TOL: f64 = 1e-12;
const FLAT_ABS_TOL: f64 = 1e-22;
/// Post-fit warning threshold for `p[k] > p[k+1]`.
pub const MONOTONICITY_SLACK: f64 = 0.05;
const MIN_POINTS: usize = RESPONSE_LEN + 1;

/// Measured or simulated click probabilities on a (setting x power) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRateSurface {
    settings: Vec<DetectorSetting>,
    powers: Vec<f64>,
    rates: Vec<Vec<f64>>,
    pulses: Option<u64>,
}

impl CountRateSurface {
    pub fn new(
        settings: Vec<DetectorSetting>,
        powers: Vec<f64>,
        rates: Vec<Vec<f64>>,
        pulses: Option<u64>,
    ) -> Result<Self> {
        if settings.is_empty() {
            return Err(Error::Validation("surface has no settings".into()));
        }
        if powers.is_empty() {
            return Err(Error::Validation("surface has no powers".into()));
        }
        if let Some(p) = powers.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Validation(format!("power {p} is not positive")));
        }
        if let Some(w) = powers.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "powers must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if rates.len() != settings.len() {
            return Err(Error::Dimension {
                expected: settings.len(),
                found: rates.len(),
            });
        }
        for (nu, row) in rates.iter().enumerate() {
            if row.len() != powers.len() {
                return Err(Error::Dimension {
                    expected: powers.len(),
                    found: row.len(),
                }
                .at_setting(nu));
            }
            if let Some((j, r)) = row.iter().enumerate().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
                return Err(Error::Validation(format!(
                    "rate {r} at setting {nu} (tuning {}), power column {j} ({} photons/pulse) outside [0, 1]",
                    settings[nu].value(),
                    powers[j]
                )));
            }
        }
        Ok(Self {
            settings,
            powers,
            rates,
            pulses,
        })
    }

    pub fn settings(&self) -> &[DetectorSetting] {
        &self.settings
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    pub fn pulses(&self) -> Option<u64> {
        self.pulses
    }

    pub fn n_settings(&self) -> usize {
        self.settings.len()
    }

    /// Surface restricted to the given setting indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let settings = indices.iter().map(|&i| self.settings[i]).collect();
        let rates = indices.iter().map(|&i| self.rates[i].clone()).collect();
        Self::new(settings, self.powers.clone(), rates, self.pulses)
    }
}

/// Fit outcome for one tuning setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingFit {
    pub response: NonlinearResponse,
/// Root-mean-square relative residual of the fit.
    pub residual: f64,
    /// Set when the efficiency is not identifiable from the data.
    pub degenerate: bool,
}

/// Per-setting responses and the POVM assembled from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TomographyFit {
    pub responses: Vec<NonlinearResponse>,
    pub residual: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub povm: Povm,
}

impl TomographyFit {
    pub fn settings(&self) -> &[DetectorSetting] {
        self.povm.settings()
    }
}

/// Linearly interpolates the rate surface onto new bias currents.
pub fn grid_by_current(raw: &CountRateSurface, grid: &[f64]) -> Result<CountRateSurface> {
    let currents: Vec<f64> = raw
        .settings
        .iter()
        .map(|s| {
            s.bias_current()
                .ok_or_else(|| Error::domain("gridding needs bias-current settings"))
        })
        .collect::<Result<_>>()?;
    if currents.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(
            "raw settings must be sorted by strictly increasing bias current".into(),
        ));
    }
    let (lo, hi) = (currents[0], currents[currents.len() - 1]);
    let mut settings = Vec::with_capacity(grid.len());
    let mut rates = Vec::with_capacity(grid.len());
    for (i, &g) in grid.iter().enumerate() {
        if !(lo..=hi).contains(&g) {
            return Err(Error::Extrapolation {
                point: g,
                min: lo,
                max: hi,
            });
        }
        // first measured current >= g
        let upper = currents.partition_point(|&c| c < g);
        let row = if currents[upper] == g {
            raw.rates[upper].clone()
        } else {
            let (c0, c1) = (currents[upper - 1], currents[upper]);
            let w = (g - c0) / (c1 - c0);
            raw.rates[upper - 1]
                .iter()
                .zip(&raw.rates[upper])
                .map(|(a, b)| (a + w * (b - a)).clamp(0.0, 1.0))
                .collect()
        };
        settings.push(DetectorSetting::bias(i, g)?);
        rates.push(row);
    }
    CountRateSurface::new(settings, raw.powers.clone(), rates, raw.pulses)
}

/// `count` bias currents evenly spaced over `[min, max]`.
pub fn uniform_grid(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..count)
            .map(|i| min + (max - min) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Weighted least-squares problem of one setting, profiled over `eta`.
struct SettingProblem<'a> {
    powers: &'a [f64],
    rates: &'a [f64],
    weights: Vec<f64>,
}

struct ProfilePoint {
    log_eta: f64,
    p: [f64; RESPONSE_LEN],
    objective: f64,
}

impl<'a> SettingProblem<'a> {
    fn new(powers: &'a [f64], rates: &'a [f64]) -> Self {
        let weights = rates.iter().map(|r| 1.0 / r.max(RATE_FLOOR)).collect();
        Self {
            powers,
            rates,
            weights,
        }
    }

    fn evaluate(&self, log_eta: f64) -> ProfilePoint {
        let eta = log_eta.exp().min(1.0);
        let rows: Vec<([f64; RESPONSE_LEN], f64)> = self
            .powers
            .iter()
            .zip(self.rates)
            .zip(&self.weights)
            .map(|((m, r), w)| {
                let mu = eta * m;
                let a = std::array::from_fn(|k| poisson_pmf(k, mu) * w);
                (a, (r - poisson_tail(RESPONSE_LEN, mu)) * w)
            })
            .collect();
        let p = BoxQp::from_rows(rows.iter().map(|(a, b)| (a, *b))).solve();
        let objective = rows
            .iter()
            .map(|(a, b)| {
                let fit: f64 = a.iter().zip(&p).map(|(x, y)| x * y).sum();
                (fit - b) * (fit - b)
            })
            .sum();
        ProfilePoint {
            log_eta,
            p,
            objective,
        }
    }

    fn golden(&self, mut a: f64, mut b: f64) -> ProfilePoint {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let mut fc = self.evaluate(c);
        let mut fd = self.evaluate(d);
        while (b - a).abs() > LOG_ETA_TOL {
            if fc.objective <= fd.objective {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = self.evaluate(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = self.evaluate(d);
            }
        }
        if fc.objective <= fd.objective {
            fc
        } else {
            fd
        }
    }
}

/// Fits `(eta, p[0..=4])` to one click-probability-versus-power curve by
/// minimizing squared relative residuals.
pub fn fit_setting(powers: &[f64], rates: &[f64]) -> Result<SettingFit> {
    if powers.len() != rates.len() {
        return Err(Error::Dimension {
            expected: powers.len(),
            found: rates.len(),
        });
    }
    if powers.len() < MIN_POINTS {
        return Err(Error::Underdetermined(format!(
            "{} power points for {MIN_POINTS} unknowns",
            powers.len()
        )));
    }
    if powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::domain("powers must be positive"));
    }
    let (pmin, pmax) = powers
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    if pmax / pmin < 100.0 {
        return Err(Error::Underdetermined(format!(
            "powers span {:.2} decades; at least two are needed",
            (pmax / pmin).log10()
        )));
    }
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::domain("rates must lie in [0, 1]"));
    }
    if rates.iter().all(|&r| r == 0.0) {
        return Err(Error::DegenerateData("all rates are zero".into()));
    }

    let problem = SettingProblem::new(powers, rates);
    let decades = -ETA_MIN.log10();
    let n_grid = (decades * ETA_GRID_PER_DECADE as f64).round() as usize + 1;
    let step = decades * std::f64::consts::LN_10 / (n_grid - 1) as f64;
    let ln_min = ETA_MIN.ln();
    let grid: Vec<ProfilePoint> = (0..n_grid)
        .map(|i| problem.evaluate((ln_min + step * i as f64).min(0.0)))
        .collect();

    // local minima of the coarse profile, best first
    let mut starts: Vec<usize> = (0..n_grid)
        .filter(|&i| {
            let f = grid[i].objective;
            (i == 0 || f <= grid[i - 1].objective) && (i + 1 == n_grid || f <= grid[i + 1].objective)
        })
        .collect();
    starts.sort_by(|&a, &b| grid[a].objective.total_cmp(&grid[b].objective).then(a.cmp(&b)));
    starts.truncate(MULTI_STARTS);

    let mut best = starts
        .iter()
        .map(|&i| {
            let a = grid[i.saturating_sub(1)].log_eta;
            let b = grid[(i + 1).min(n_grid - 1)].log_eta;
            problem.golden(a, b)
        })
        .min_by(|x, y| x.objective.total_cmp(&y.objective))
        .expect("at least one start");
    if grid[starts[0]].objective < best.objective {
        best = problem.evaluate(grid[starts[0]].log_eta);
    }

    // Extra binomial loss can move between eta and p almost for free (loss
    // channels compose), leaving a nearly flat valley toward larger eta. Take
    // the smallest eta that still attains the optimum.
    let threshold = best.objective + (FLAT_REL_TOL * best.objective).max(FLAT_ABS_TOL);
    if let Some(left) = grid
        .iter()
        .rev()
        .filter(|g| g.log_eta < best.log_eta)
        .find(|g| g.objective > threshold)
    {
        let (mut above, mut below) = (left.log_eta, best.log_eta);
        while below - above > LOG_ETA_TOL {
            let mid = 0.5 * (above + below);
            let point = problem.evaluate(mid);
            if point.objective > threshold {
                above = mid;
            } else {
                below = mid;
                best = point;
            }
        }
    }

    // eta is unidentifiable when a decade away fits equally well
    let far_best = grid
        .iter()
        .filter(|g| (g.log_eta - best.log_eta).abs() >= std::f64::consts::LN_10)
        .map(|g| g.objective)
        .fold(f64::INFINITY, f64::min);
    let degenerate = far_best <= 2.0 * best.objective + 1e-14;

    let response = NonlinearResponse::new(best.log_eta.exp().min(1.0), best.p)?;
    let residual = relative_rms(&response, powers, rates);
    if let Some(k) = (0..RESPONSE_LEN - 1).find(|&k| response.p[k] > response.p[k + 1] + MONOTONICITY_SLACK) {
        log::warn!(
            "fitted response is non-monotone: p[{k}] = {:.4} > p[{}] = {:.4}",
            response.p[k],
            k + 1,
            response.p[k + 1]
        );
    }
    if degenerate {
        log::warn!("linear efficiency is not identifiable from this curve");
    }
    Ok(SettingFit {
        response,
        residual,
        degenerate,
    })
}

/// Root-mean-square relative residual of a response against measured rates.
pub fn relative_rms(resp: &NonlinearResponse, powers: &[f64], rates: &[f64]) -> f64 {
    let ss: f64 = powers
        .iter()
        .zip(rates)
        .map(|(&m, &r)| {
            let e = (coherent_click_unchecked(resp, m) - r) / r.max(RATE_FLOOR);
            e * e
        })
        .sum();
    (ss / powers.len() as f64).sqrt()
}

/// Fits every setting independently and assembles the POVM truncated at `n_mr`.
pub fn fit_all(surface: &CountRateSurface, n_mr: usize) -> Result<TomographyFit> {
    if n_mr < RESPONSE_LEN - 1 {
        return Err(Error::Truncation(n_mr));
    }
    let fits: Vec<SettingFit> = surface
        .rates
        .par_iter()
        .enumerate()
        .map(|(nu, row)| fit_setting(&surface.powers, row).map_err(|e| e.at_setting(nu)))
        .collect::<Result<_>>()?;
    let responses: Vec<NonlinearResponse> = fits.iter().map(|f| f.response).collect();
    let povm = Povm::from_responses(surface.settings.clone(), &responses, n_mr)?;
    Ok(TomographyFit {
        residual: fits.iter().map(|f| f.residual).collect(),
        degenerate: fits.iter().map(|f| f.degenerate).collect(),
        responses,
        povm,
    })
}
