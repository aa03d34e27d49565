//! Fisher information of click/no-click data and the Cramér-Rao bounds it
//! implies for the photon-number probabilities.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::{DetectorSetting, Povm};
use crate::states::FockDistribution;

/// Click probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before they
/// enter the denominators.
pub const P_CLAMP: f64 = 1e-12;
/// Eigenvalues below this fraction of the largest are dropped from the
/// pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Relative errors are only compared where the probability exceeds this.
pub const COMPARE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementBudget {
    pub total_shots: u64,
    pub shots_per_setting: Vec<u64>,
}

impl MeasurementBudget {
    /// Splits `total` as evenly as possible; the first `total % n` settings
    /// get one extra shot.
    pub fn uniform(total: u64, n_settings: usize) -> Result<Self> {
        if n_settings == 0 {
            return Err(Error::domain("a budget needs at least one setting"));
        }
        let n = n_settings as u64;
        let (base, extra) = (total / n, total % n);
        let shots_per_setting = (0..n).map(|i| base + u64::from(i < extra)).collect();
        Ok(Self {
            total_shots: total,
            shots_per_setting,
        })
    }

    pub fn new(shots_per_setting: Vec<u64>) -> Result<Self> {
        if shots_per_setting.is_empty() {
            return Err(Error::domain("a budget needs at least one setting"));
        }
        let total_shots = shots_per_setting
            .iter()
            .try_fold(0u64, |acc, &s| acc.checked_add(s))
            .ok_or_else(|| Error::domain("total shot count overflows"))?;
        Ok(Self {
            total_shots,
            shots_per_setting,
        })
    }

    pub fn n_settings(&self) -> usize {
        self.shots_per_setting.len()
    }

    /// Same split with every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Result<Self> {
        let shots = self
            .shots_per_setting
            .iter()
            .map(|&s| s.checked_mul(factor))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::domain("scaled shot count overflows"))?;
        Self::new(shots)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbReport {
    pub sigma: Vec<f64>,
    /// `sigma / rho`, infinite where `rho` is zero (`null` in JSON).
    #[serde(with = "infinite_as_null")]
    pub relative: Vec<f64>,
    /// Set when the information matrix was rank deficient at the cutoff.
    pub condition_flag: bool,
    /// Whether the bound was taken on the normalization-preserving subspace.
    pub constrained: bool,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Information matrix of independent per-setting Bernoulli trials,
/// `F_ab = sum_nu N_nu Pi_nu,a Pi_nu,b / (p_nu (1 - p_nu))`. With
/// `include_no_click` off only click counts are modeled (Poisson limit) and
/// the denominator is `p_nu`.
pub fn fisher_matrix_with(
    povm: &Povm,
    rho: &FockDistribution,
    budget: &MeasurementBudget,
    include_no_click: bool,
) -> Result<DMatrix<f64>> {
    let d = povm.n_mr() + 1;
    if rho.probs().len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: rho.probs().len(),
        });
    }
    if budget.n_settings() != povm.n_settings() {
        return Err(Error::Dimension {
            expected: povm.n_settings(),
            found: budget.n_settings(),
        });
    }
    let mut f = DMatrix::<f64>::zeros(d, d);
    for (row, &shots) in povm.rows().zip(&budget.shots_per_setting) {
        if shots == 0 || row.iter().all(|&x| x == 0.0) {
            continue;
        }
        let p: f64 = row.iter().zip(rho.probs()).map(|(a, b)| a * b).sum();
        let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
        let denom = if include_no_click { p * (1.0 - p) } else { p };
        let w = shots as f64 / denom;
        for a in 0..d {
            let wa = w * row[a];
            if wa == 0.0 {
                continue;
            }
            for b in a..d {
                f[(a, b)] += wa * row[b];
            }
        }
    }
    f.fill_lower_triangle_with_upper_triangle();
    Ok(f)
}

/// Click/no-click information matrix.
pub fn fisher_matrix(povm: &Povm, rho: &FockDistribution, budget: &MeasurementBudget) -> Result<DMatrix<f64>> {
    fisher_matrix_with(povm, rho, budget, true)
}

/// Pseudo-inverse of a symmetric PSD matrix plus whether anything was cut.
fn pseudo_inverse(f: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = f.nrows();
    let eig = SymmetricEigen::new(f.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let mut inv = DMatrix::<f64>::zeros(n, n);
    let mut dropped = false;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if !(max > 0.0 && lambda > PINV_CUTOFF * max) {
            dropped = true;
            continue;
        }
        let v = eig.eigenvectors.column(k);
        inv += (&v * v.transpose()) / lambda;
    }
    (inv, dropped)
}

fn report(cov_diag: impl Iterator<Item = f64>, rho: &FockDistribution, flag: bool, constrained: bool) -> CrbReport {
    let sigma: Vec<f64> = cov_diag.map(|v| v.max(0.0).sqrt()).collect();
    let relative = sigma
        .iter()
        .zip(rho.probs())
        .map(|(&s, &r)| if r > 0.0 { s / r } else { f64::INFINITY })
        .collect();
    CrbReport {
        sigma,
        relative,
        condition_flag: flag,
        constrained,
    }
}

fn check_square(fisher: &DMatrix<f64>, rho: &FockDistribution) -> Result<()> {
    let d = rho.probs().len();
    if fisher.nrows() != d || fisher.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            found: fisher.nrows(),
        });
    }
    Ok(())
}

/// Unconstrained bound `sigma_n = sqrt((F^+)_nn)`.
pub fn crb_errors(fisher: &DMatrix<f64>, rho: &FockDistribution) -> Result<CrbReport> {
    check_square(fisher, rho)?;
    let (inv, flag) = pseudo_inverse(fisher);
    Ok(report(inv.diagonal().iter().copied(), rho, flag, false))
}

/// Bound restricted to perturbations that keep `sum rho = 1`:
/// `C = U (U^T F U)^+ U^T` with `U` an orthonormal basis of the tangent space.
pub fn crb_errors_constrained(fisher: &DMatrix<f64>, rho: &FockDistribution) -> Result<CrbReport> {
    check_square(fisher, rho)?;
    let d = fisher.nrows();
    if d < 2 {
        // a single normalized component is fixed at 1
        return Ok(report(std::iter::once(0.0), rho, false, true));
    }
    let u = simplex_tangent_basis(d);
    let reduced = u.transpose() * fisher * &u;
    let (inv, flag) = pseudo_inverse(&reduced);
    let cov = &u * inv * u.transpose();
    Ok(report(cov.diagonal().iter().copied(), rho, flag, true))
}

/// Orthonormal basis (d x (d-1)) of `{x : sum x = 0}` from the eigenvectors of
/// the centering projector.
fn simplex_tangent_basis(d: usize) -> DMatrix<f64> {
    let p = DMatrix::<f64>::identity(d, d) - DMatrix::<f64>::from_element(d, d, 1.0 / d as f64);
    let eig = SymmetricEigen::new(p);
    let cols: Vec<_> = (0..d)
        .filter(|&k| eig.eigenvalues[k] > 0.5)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Linear click detector behind a variable attenuator:
/// `Pi_nu,n = 1 - (1 - eta t_nu)^n`.
pub fn linear_apd_povm(eta: f64, transmissions: &[f64], n_mr: usize) -> Result<Povm> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::domain(format!("eta = {eta} outside (0, 1]")));
    }
    let mut settings = Vec::with_capacity(transmissions.len());
    let mut rows = Vec::with_capacity(transmissions.len());
    for (i, &t) in transmissions.iter().enumerate() {
        settings.push(DetectorSetting::transmission(i, t)?);
        let miss = 1.0 - eta * t;
        rows.push((0..=n_mr).map(|n| 1.0 - miss.powi(n as i32)).collect());
    }
    Povm::new(settings, rows, n_mr)
}

/// Per-n ratio `relative_a / relative_b` of two detectors' unconstrained
/// bounds, for the components with `rho_n > COMPARE_FLOOR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorComparison {
    pub n: Vec<usize>,
    pub relative_a: Vec<f64>,
    pub relative_b: Vec<f64>,
    pub ratio: Vec<f64>,
}

pub fn compare_detectors(
    povm_a: &Povm,
    povm_b: &Povm,
    rho: &FockDistribution,
    budget: &MeasurementBudget,
) -> Result<DetectorComparison> {
    compare_detectors_with(povm_a, povm_b, rho, budget, true, false)
}

pub fn compare_detectors_with(
    povm_a: &Povm,
    povm_b: &Povm,
    rho: &FockDistribution,
    budget: &MeasurementBudget,
    include_no_click: bool,
    constrained: bool,
) -> Result<DetectorComparison> {
    if povm_a.n_mr() != povm_b.n_mr() {
        return Err(Error::Dimension {
            expected: povm_a.n_mr() + 1,
            found: povm_b.n_mr() + 1,
        });
    }
    let bound = |povm: &Povm| -> Result<CrbReport> {
        let f = fisher_matrix_with(povm, rho, budget, include_no_click)?;
        if constrained {
            crb_errors_constrained(&f, rho)
        } else {
            crb_errors(&f, rho)
        }
    };
    let (a, b) = (bound(povm_a)?, bound(povm_b)?);
    let mut out = DetectorComparison {
        n: Vec::new(),
        relative_a: Vec::new(),
        relative_b: Vec::new(),
        ratio: Vec::new(),
    };
    for (n, &r) in rho.probs().iter().enumerate() {
        if r > COMPARE_FLOOR {
            out.n.push(n);
            out.relative_a.push(a.relative[n]);
            out.relative_b.push(b.relative[n]);
            out.ratio.push(a.relative[n] / b.relative[n]);
        }
    }
    Ok(out)
}
