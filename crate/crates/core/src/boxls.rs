//! Exact solver for the five-variable box-constrained least-squares problem
//! `min ||A x - b||^2` subject to `0 <= x <= 1`.
//!
//! The optimum of a convex quadratic over a box has some set of variables at
//! a bound and the rest at the stationary point of the reduced problem, so all
//! `3^5` free/lower/upper patterns are enumerated and the best feasible
//! candidate wins. Patterns whose reduced Hessian is singular are skipped: a
//! flat direction can always be followed to a bound without changing the
//! objective, so some other pattern attains the same minimum.

use nalgebra::{DMatrix, DVector};

const N: usize = 5;
/// Reduced problems whose triangular factor has a diagonal below this (with
/// unit-norm columns) are treated as singular.
const RANK_TOL: f64 = 1e-13;

/// The problem is reduced once to `min ||R y - c||^2` with `R` the triangular
/// QR factor of the column-normalized design matrix, so every sub-problem is
/// solved from `R` without forming normal equations.
#[derive(Debug, Clone)]
pub(crate) struct BoxQp {
    r: DMatrix<f64>,
    c: DVector<f64>,
    scale: [f64; N],
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Free,
    Lower,
    Upper,
}

impl BoxQp {
    pub(crate) fn from_rows<'a>(rows: impl Iterator<Item = (&'a [f64; N], f64)>) -> Self {
        let rows: Vec<(&[f64; N], f64)> = rows.collect();
        let m = rows.len();
        let mut a = DMatrix::<f64>::zeros(m.max(N), N);
        let mut b = DVector::<f64>::zeros(m.max(N));
        for (i, (row, bi)) in rows.iter().enumerate() {
            for j in 0..N {
                a[(i, j)] = row[j];
            }
            b[i] = *bi;
        }
        let mut scale = [1.0; N];
        for j in 0..N {
            let norm = a.column(j).norm();
            if norm > 0.0 {
                scale[j] = norm;
                a.column_mut(j).unscale_mut(norm);
            }
        }
        let qr = a.qr();
        let c = qr.q().transpose() * &b;
        let r = qr.r();
        Self { r, c, scale }
    }

    /// `||R y - c||^2` in scaled coordinates, up to the constant part of the
    /// residual orthogonal to the column space.
    fn objective(&self, y: &[f64; N]) -> f64 {
        let y = DVector::from_column_slice(y);
        (&self.r * y - &self.c).norm_squared()
    }

    pub(crate) fn solve(&self) -> [f64; N] {
        let all_free = [Slot::Free; N];
        let best = match self.candidate(&all_free) {
            // convex problem: a feasible stationary point is the optimum
            Some(y) => y,
            None => {
                let mut best = [0.0; N];
                let mut best_f = f64::INFINITY;
                let mut slots = [Slot::Free; N];
                for code in 1..3usize.pow(N as u32) {
                    let mut c = code;
                    for s in slots.iter_mut() {
                        *s = match c % 3 {
                            0 => Slot::Free,
                            1 => Slot::Lower,
                            _ => Slot::Upper,
                        };
                        c /= 3;
                    }
                    if let Some(y) = self.candidate(&slots) {
                        let f = self.objective(&y);
                        if f < best_f {
                            best_f = f;
                            best = y;
                        }
                    }
                }
                best
            }
        };
        std::array::from_fn(|i| (best[i] / self.scale[i]).clamp(0.0, 1.0))
    }

    fn candidate(&self, slots: &[Slot; N]) -> Option<[f64; N]> {
        let mut y = [0.0; N];
        let free: Vec<usize> = (0..N).filter(|&i| slots[i] == Slot::Free).collect();
        for i in 0..N {
            if slots[i] == Slot::Upper {
                y[i] = self.scale[i];
            }
        }
        if free.is_empty() {
            return Some(y);
        }
        let fixed = DVector::from_column_slice(&y);
        let rhs = &self.c - &self.r * fixed;
        let sub = self.r.select_columns(free.iter());
        let qr = sub.qr();
        let rr = qr.r();
        if (0..free.len()).any(|k| !(rr[(k, k)].abs() > RANK_TOL)) {
            return None;
        }
        let qtb = qr.q().transpose() * rhs;
        let sol = rr.solve_upper_triangular(&qtb)?;
        for (a, &i) in free.iter().enumerate() {
            let xi = sol[a] / self.scale[i];
            if !(-1e-12..=1.0 + 1e-12).contains(&xi) {
                return None;
            }
            y[i] = sol[a];
        }
        Some(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(rows: &[([f64; N], f64)], x: &[f64; N]) -> f64 {
        rows.iter()
            .map(|(a, b)| {
                let r: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() - b;
                r * r
            })
            .sum()
    }

    #[test]
    fn interior_solution_is_exact() {
        let truth = [0.1, 0.4, 0.25, 0.9, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<([f64; N], f64)> = (0..12)
            .map(|_| {
                let a: [f64; N] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let b = a.iter().zip(&truth).map(|(x, y)| x * y).sum();
                (a, b)
            })
            .collect();
        let x = BoxQp::from_rows(rows.iter().map(|(a, b)| (a, *b))).solve();
        for i in 0..N {
            assert!((x[i] - truth[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn beats_random_feasible_points() {
        // any feasible point must be no better than the returned optimum
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let rows: Vec<([f64; N], f64)> = (0..8)
                .map(|_| {
                    let a: [f64; N] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    (a, rng.random_range(-3.0..3.0))
                })
                .collect();
            let x = BoxQp::from_rows(rows.iter().map(|(a, b)| (a, *b))).solve();
            let fx = objective(&rows, &x);
            for _ in 0..2000 {
                let y: [f64; N] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
                assert!(fx <= objective(&rows, &y) + 1e-9);
            }
        }
    }

    #[test]
    fn zero_columns_are_tolerated() {
        let rows = [([1.0, 0.0, 0.0, 0.0, 0.0], 0.3), ([2.0, 0.0, 0.0, 0.0, 0.0], 0.6)];
        let x = BoxQp::from_rows(rows.iter().map(|(a, b)| (a, *b))).solve();
        assert!((x[0] - 0.3).abs() < 1e-12);
    }
}
