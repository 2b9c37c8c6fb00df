//! Independent oracles for the integration suites: a golden-section
//! minimizer, one-dimensional reductions of the trinomial dual problem,
//! and direct Bayes arithmetic. None of this code touches the Newton
//! solvers under test.

#![allow(dead_code)]

use weakinfo::market::MarketModel;
use weakinfo::preferences::UtilityField;
use weakinfo::prob_space::{FiniteFilteredSpace, Measure};

pub const GOLDEN_TOL: f64 = 1e-13;

/// Golden-section search for the minimizer of a unimodal function.
pub fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = 0.618_033_988_749_894_9_f64;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + a.abs() + b.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// The standard one-period trinomial market: one asset at 1 moving to
/// (2, 1, 0.5).
pub fn trinomial() -> MarketModel {
    let sp = FiniteFilteredSpace::one_period(&["up", "mid", "down"]).unwrap();
    MarketModel::new(sp, vec![vec![1.0, 2.0, 1.0, 0.5]]).unwrap()
}

pub fn binomial() -> MarketModel {
    let sp = FiniteFilteredSpace::one_period(&["up", "down"]).unwrap();
    MarketModel::new(sp, vec![vec![1.0, 2.0, 0.5]]).unwrap()
}

/// Martingale measures of the trinomial lie on the segment
/// `q(t) = (t/2, 1 - 3t/2, t)` for `t` in (0, 2/3): the mass and
/// martingale equations leave one degree of freedom.
pub fn trinomial_q(t: f64) -> [f64; 3] {
    [0.5 * t, 1.0 - 1.5 * t, t]
}

/// Dual objective of the trinomial reduced to the segment parameter.
pub fn trinomial_dual_objective(u: &UtilityField, p: &Measure, y: f64, t: f64) -> f64 {
    let q = trinomial_q(t);
    let v = u.conjugate().unwrap();
    (0..3)
        .map(|o| p.weight(o) * v.eval(o, y * q[o] / p.weight(o)))
        .sum()
}

/// Golden-section minimizer of the trinomial dual problem: the optimal
/// segment parameter, independent of any Newton iteration.
pub fn trinomial_dual_oracle(u: &UtilityField, p: &Measure, y: f64) -> [f64; 3] {
    let eps = 1e-9;
    let t = golden_min(
        |t| trinomial_dual_objective(u, p, y, t),
        eps,
        2.0 / 3.0 - eps,
        GOLDEN_TOL,
    );
    trinomial_q(t)
}

/// Expected value of a payoff under a weight vector.
pub fn dot(q: &[f64], f: &[f64]) -> f64 {
    q.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Direct Bayes arithmetic for the measure matching a target law of a
/// statistic while keeping conditionals: each atom is scaled by the ratio
/// of the target label weight to the current label probability.
pub fn bayes_reweight(p: &[f64], labels: &[&str], nu: &[(&str, f64)]) -> Vec<f64> {
    let prob_of = |label: &str| -> f64 {
        p.iter()
            .zip(labels)
            .filter(|(_, l)| **l == label)
            .map(|(w, _)| w)
            .sum()
    };
    p.iter()
        .zip(labels)
        .map(|(w, l)| {
            let target = nu.iter().find(|(n, _)| n == l).map(|(_, v)| *v).unwrap();
            w * target / prob_of(l)
        })
        .collect()
}

/// Deterministic linear congruential stream, independent of the library's
/// generator choices, for oracle-side sampling.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.unit() * n as f64) as usize % n
    }
}
