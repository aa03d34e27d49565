//! Small numeric helpers shared by the state, POVM and fitting code.

use statrs::function::gamma::ln_gamma;

/// `ln(n!)`, exact summation for small `n` and log-gamma beyond.
pub fn ln_factorial(n: usize) -> f64 {
    if n < 32 {
        (2..=n).map(|k| (k as f64).ln()).sum()
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

pub fn ln_binomial(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Binomial probability mass `C(n,k) eta^k (1-eta)^(n-k)` evaluated in log space.
pub fn binomial_pmf(n: usize, k: usize, eta: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if eta <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if eta >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_binomial(n, k) + k as f64 * eta.ln() + (n - k) as f64 * (-eta).ln_1p()).exp()
}

/// Poisson probability mass `e^{-mu} mu^k / k!`.
pub fn poisson_pmf(k: usize, mu: f64) -> f64 {
    if mu <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (-mu + k as f64 * mu.ln() - ln_factorial(k)).exp()
}

/// Upper Poisson tail `P(N >= k0)` for `N ~ Poisson(mu)`, free of cancellation
/// for small `mu`.
pub fn poisson_tail(k0: usize, mu: f64) -> f64 {
    if mu <= 0.0 {
        return if k0 == 0 { 1.0 } else { 0.0 };
    }
    if k0 == 0 {
        return 1.0;
    }
    if mu < 20.0 + k0 as f64 {
        // series from k0 upwards; terms decay once k > mu
        let mut term = poisson_pmf(k0, mu);
        let mut sum = 0.0;
        let mut k = k0;
        loop {
            sum += term;
            k += 1;
            term *= mu / k as f64;
            if (k as f64 > mu && term <= sum * 1e-18) || term == 0.0 {
                break;
            }
        }
        sum.min(1.0)
    } else {
        let head: f64 = (0..k0).map(|k| poisson_pmf(k, mu)).sum();
        (1.0 - head).max(0.0)
    }
}

/// Upper binomial tail `P(K >= k0)` for `K ~ Bin(n, eta)`, summed term by term.
pub fn binomial_tail(n: usize, k0: usize, eta: f64) -> f64 {
    if k0 > n {
        return 0.0;
    }
    (k0..=n).map(|k| binomial_pmf(n, k, eta)).sum::<f64>().min(1.0)
}

/// Exponentiates and normalizes log-weights with the max subtracted first.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorials_agree_across_the_switchover() {
        let direct: f64 = (2..=40).map(|k| (k as f64).ln()).sum();
        assert!((ln_factorial(40) - direct).abs() < 1e-11);
        assert_eq!(ln_factorial(0), 0.0);
        assert_eq!(ln_factorial(1), 0.0);
    }

    #[test]
    fn poisson_tail_matches_complement_at_moderate_mean() {
        for &mu in &[0.3, 2.0, 7.5, 19.0, 30.0] {
            let head: f64 = (0..5).map(|k| poisson_pmf(k, mu)).sum();
            assert!((poisson_tail(5, mu) - (1.0 - head)).abs() < 1e-13, "mu = {mu}");
        }
    }

    #[test]
    fn poisson_tail_small_mean_is_relatively_accurate() {
        // leading term mu^5/120 dominates; next term is mu/6 smaller
        let mu: f64 = 1e-4;
        let leading = f64::powi(mu, 5) / 120.0 * (-mu as f64).exp();
        let rel = (poisson_tail(5, mu) - leading) / leading;
        assert!(rel > 0.0 && rel < 2e-5);
    }

    #[test]
    fn binomial_pmf_edges() {
        assert_eq!(binomial_pmf(3, 0, 0.0), 1.0);
        assert_eq!(binomial_pmf(3, 3, 1.0), 1.0);
        assert_eq!(binomial_pmf(3, 1, 1.0), 0.0);
        assert!((binomial_pmf(2, 1, 0.5) - 0.5).abs() < 1e-15);
    }
}
