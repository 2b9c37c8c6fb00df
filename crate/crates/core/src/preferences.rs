//! Utility fields on outcomes, their convex conjugates, inverse marginals,
//! and the midpoint divergence used by the stability experiments.
//!
//! A utility field assigns every outcome an increasing strictly concave
//! utility from the log/power family, optionally wrapped affinely with a
//! positive slope: `x -> scale * U0(x) + shift`. Extended-real conventions:
//! utilities are -inf off their domain, conjugates are +inf off theirs.

use crate::error::{Error, Result};
use crate::prob_space::Measure;

/// Tolerance for the conjugacy verification run at conjugate construction.
pub const CONJUGATE_CHECK_TOL: f64 = 1e-10;

/// Base utility family. `Power(p)` is `x^p / p` with `p < 1`, `p != 0`;
/// `Log` is the natural logarithm (the `p -> 0` member).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Log,
    Power(f64),
}

impl Family {
    fn validate(self) -> Result<()> {
        match self {
            Family::Log => Ok(()),
            Family::Power(p) => {
                if !p.is_finite() || p >= 1.0 || p == 0.0 {
                    Err(Error::DomainError(format!(
                        "power exponent must be finite, below 1 and nonzero, got {p}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// One outcome's utility: `x -> scale * U0(x) + shift`, `scale > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeUtility {
    pub family: Family,
    pub scale: f64,
    pub shift: f64,
}

impl OutcomeUtility {
    pub fn new(family: Family, scale: f64, shift: f64) -> Result<Self> {
        family.validate()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::DomainError(format!("slope must be positive, got {scale}")));
        }
        if !shift.is_finite() {
            return Err(Error::DomainError("shift must be finite".into()));
        }
        Ok(Self { family, scale, shift })
    }

    fn eval(&self, x: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        match self.family {
            Family::Log => {
                if x == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    self.scale * x.ln() + self.shift
                }
            }
            Family::Power(p) => {
                if x == 0.0 {
                    if p > 0.0 {
                        self.shift
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    self.scale * x.powf(p) / p + self.shift
                }
            }
        }
    }

    fn marginal(&self, x: f64) -> f64 {
        debug_assert!(x > 0.0, "marginal utility needs positive wealth");
        match self.family {
            Family::Log => self.scale / x,
            Family::Power(p) => self.scale * x.powf(p - 1.0),
        }
    }

    fn inverse_marginal(&self, y: f64) -> f64 {
        match self.family {
            Family::Log => self.scale / y,
            Family::Power(p) => (y / self.scale).powf(1.0 / (p - 1.0)),
        }
    }

    fn marginal_derivative(&self, x: f64) -> f64 {
        debug_assert!(x > 0.0);
        match self.family {
            Family::Log => -self.scale / (x * x),
            Family::Power(p) => self.scale * (p - 1.0) * x.powf(p - 2.0),
        }
    }
}

/// Utility assignment per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityField {
    per_outcome: Vec<OutcomeUtility>,
}

impl UtilityField {
    /// Same log utility at every outcome.
    pub fn log(outcomes: usize) -> Self {
        let u = OutcomeUtility { family: Family::Log, scale: 1.0, shift: 0.0 };
        Self { per_outcome: vec![u; outcomes] }
    }

    /// Same power utility `x^p / p` at every outcome.
    pub fn power(outcomes: usize, p: f64) -> Result<Self> {
        let u = OutcomeUtility::new(Family::Power(p), 1.0, 0.0)?;
        Ok(Self { per_outcome: vec![u; outcomes] })
    }

    /// Arbitrary per-outcome assignment. Each entry is validated and the
    /// marginal is checked to be positive and strictly decreasing on a
    /// 100-point log grid spanning [1e-6, 1e6].
    pub fn from_parts(per_outcome: Vec<OutcomeUtility>) -> Result<Self> {
        if per_outcome.is_empty() {
            return Err(Error::Invalid("utility field needs at least one outcome".into()));
        }
        for u in &per_outcome {
            OutcomeUtility::new(u.family, u.scale, u.shift)?;
            let mut prev = f64::INFINITY;
            for k in 0..100 {
                let x = 10f64.powf(-6.0 + 12.0 * k as f64 / 99.0);
                let m = u.marginal(x);
                if !(m > 0.0) || m >= prev {
                    return Err(Error::DomainError(
                        "marginal utility must be positive and strictly decreasing".into(),
                    ));
                }
                prev = m;
            }
        }
        Ok(Self { per_outcome })
    }

    /// Affine wrap `x -> a_w * U_w(x) + b_w` with positive slopes.
    pub fn wrap_affine(&self, slopes: &[f64], shifts: &[f64]) -> Result<UtilityField> {
        if slopes.len() != self.len() || shifts.len() != self.len() {
            return Err(Error::Invalid("wrap vectors must match the outcome count".into()));
        }
        let parts = self
            .per_outcome
            .iter()
            .zip(slopes.iter().zip(shifts))
            .map(|(u, (&a, &b))| {
                OutcomeUtility::new(u.family, a * u.scale, a * u.shift + b)
            })
            .collect::<Result<Vec<_>>>()?;
        UtilityField::from_parts(parts)
    }

    /// Composition with a terminal rescaling of wealth: `x -> U_w(s_w * x)`.
    /// This stays inside the family, so numeraire changes are exact.
    pub fn rescale_terminal(&self, factors: &[f64]) -> Result<UtilityField> {
        if factors.len() != self.len() {
            return Err(Error::Invalid("factor vector must match the outcome count".into()));
        }
        if factors.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::DomainError("rescaling factors must be positive".into()));
        }
        let parts = self
            .per_outcome
            .iter()
            .zip(factors)
            .map(|(u, &s)| match u.family {
                Family::Log => OutcomeUtility::new(Family::Log, u.scale, u.shift + u.scale * s.ln()),
                Family::Power(p) => {
                    OutcomeUtility::new(Family::Power(p), u.scale * s.powf(p), u.shift)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        UtilityField::from_parts(parts)
    }

    pub fn len(&self) -> usize {
        self.per_outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_outcome.is_empty()
    }

    pub fn part(&self, outcome: usize) -> &OutcomeUtility {
        &self.per_outcome[outcome]
    }

    /// True when every outcome shares one base family member (log, or power
    /// with one exponent). Slopes and shifts may still vary; in that case the
    /// dual optimizer over densities does not depend on the dual scale, which
    /// the primal solver exploits.
    pub fn has_uniform_exponent(&self) -> bool {
        let first = self.per_outcome[0].family;
        self.per_outcome.iter().all(|u| match (u.family, first) {
            (Family::Log, Family::Log) => true,
            (Family::Power(a), Family::Power(b)) => a == b,
            _ => false,
        })
    }

    pub fn eval(&self, outcome: usize, x: f64) -> f64 {
        self.per_outcome[outcome].eval(x)
    }

    pub fn marginal(&self, outcome: usize, x: f64) -> f64 {
        self.per_outcome[outcome].marginal(x)
    }

    /// `U''(x)`, strictly negative on the domain.
    pub fn marginal_derivative(&self, outcome: usize, x: f64) -> f64 {
        self.per_outcome[outcome].marginal_derivative(x)
    }

    /// Inverse marginal `I = (U')^{-1}`, the bridge from dual to primal
    /// optimizers. Defined for `y > 0` only.
    pub fn inverse_marginal(&self, outcome: usize, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::DomainError(format!(
                "inverse marginal needs a positive argument, got {y}"
            )));
        }
        Ok(self.per_outcome[outcome].inverse_marginal(y))
    }

    /// Convex conjugate field, verified against `sup_x (U(x) - x y)` on a
    /// grid (including the analytic argmax) within 1e-10 relative slack.
    pub fn conjugate(&self) -> Result<ConjugateField> {
        let parts: Vec<OutcomeConjugate> =
            self.per_outcome.iter().map(OutcomeConjugate::from_utility).collect();
        let field = ConjugateField { per_outcome: parts };
        field.verify_against(self, CONJUGATE_CHECK_TOL)?;
        Ok(field)
    }
}

/// One outcome's conjugate `V(y) = sup_x (U(x) - x y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeConjugate {
    family: Family,
    scale: f64,
    shift: f64,
}

impl OutcomeConjugate {
    fn from_utility(u: &OutcomeUtility) -> Self {
        Self { family: u.family, scale: u.scale, shift: u.shift }
    }

    /// Dual exponent `q = p / (1 - p)` for the power member.
    fn dual_exponent(p: f64) -> f64 {
        p / (1.0 - p)
    }

    fn eval(&self, y: f64) -> f64 {
        if y < 0.0 {
            return f64::INFINITY;
        }
        match self.family {
            Family::Log => {
                if y == 0.0 {
                    f64::INFINITY
                } else {
                    self.scale * (-(y / self.scale).ln() - 1.0) + self.shift
                }
            }
            Family::Power(p) => {
                let q = Self::dual_exponent(p);
                if y == 0.0 {
                    if q > 0.0 {
                        f64::INFINITY
                    } else {
                        // p < 0: V extends continuously with V(0) = shift.
                        self.shift
                    }
                } else {
                    self.scale * (y / self.scale).powf(-q) / q + self.shift
                }
            }
        }
    }

    fn derivative(&self, y: f64) -> f64 {
        debug_assert!(y > 0.0);
        match self.family {
            Family::Log => -self.scale / y,
            Family::Power(p) => -(y / self.scale).powf(1.0 / (p - 1.0)),
        }
    }

    fn second_derivative(&self, y: f64) -> f64 {
        debug_assert!(y > 0.0);
        match self.family {
            Family::Log => self.scale / (y * y),
            Family::Power(p) => {
                -(y / self.scale).powf(1.0 / (p - 1.0) - 1.0) / ((p - 1.0) * self.scale)
            }
        }
    }
}

/// Conjugate assignment per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateField {
    per_outcome: Vec<OutcomeConjugate>,
}

impl ConjugateField {
    pub fn len(&self) -> usize {
        self.per_outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_outcome.is_empty()
    }

    pub fn eval(&self, outcome: usize, y: f64) -> f64 {
        self.per_outcome[outcome].eval(y)
    }

    /// `V'(y)`, equal to `-I(y)` for `y > 0`.
    pub fn derivative(&self, outcome: usize, y: f64) -> f64 {
        self.per_outcome[outcome].derivative(y)
    }

    pub fn second_derivative(&self, outcome: usize, y: f64) -> f64 {
        self.per_outcome[outcome].second_derivative(y)
    }

    /// Midpoint convexity gap `(V(x) + V(y)) / 2 - V((x + y) / 2) >= 0`.
    /// Strictly positive for `x != y`; both arguments must be positive.
    pub fn gamma_divergence(&self, outcome: usize, x: f64, y: f64) -> Result<f64> {
        if !(x > 0.0 && y > 0.0) {
            return Err(Error::DomainError(format!(
                "midpoint divergence needs positive arguments, got ({x}, {y})"
            )));
        }
        let v = &self.per_outcome[outcome];
        Ok(0.5 * (v.eval(x) + v.eval(y)) - v.eval(0.5 * (x + y)))
    }

    /// Checks `V(y) = sup_x (U(x) - x y)` on a log grid of arguments. The
    /// supremum is evaluated over a wealth grid extended by the analytic
    /// argmax, so equality holds to rounding for a correct conjugate.
    pub fn verify_against(&self, u: &UtilityField, tol: f64) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::Invalid("conjugate and utility sizes differ".into()));
        }
        for w in 0..u.len() {
            for ky in 0..7 {
                let y = 10f64.powf(-2.0 + 4.0 * ky as f64 / 6.0);
                let mut sup = f64::NEG_INFINITY;
                for kx in 0..50 {
                    let x = 10f64.powf(-3.0 + 6.0 * kx as f64 / 49.0);
                    sup = sup.max(u.eval(w, x) - x * y);
                }
                let xstar = u.inverse_marginal(w, y)?;
                sup = sup.max(u.eval(w, xstar) - xstar * y);
                let v = self.eval(w, y);
                if (v - sup).abs() > tol * (1.0 + v.abs()) {
                    return Err(Error::Invalid(format!(
                        "conjugate mismatch at outcome {w}, y = {y:.6e}: {v:.16e} vs {sup:.16e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Expectation with the lower convention used for utility payoffs: the value
/// is -inf as soon as any charged outcome is -inf.
pub fn expectation_lower(p: &Measure, values: &[f64]) -> Result<f64> {
    if values.len() != p.len() {
        return Err(Error::SpaceMismatch("payoff length mismatch".into()));
    }
    let mut acc = 0.0;
    for (w, v) in p.weights().iter().zip(values) {
        if *w == 0.0 {
            continue;
        }
        if *v == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Expectation with the upper convention used for conjugate payoffs: the
/// value is +inf as soon as any charged outcome is +inf.
pub fn expectation_upper(p: &Measure, values: &[f64]) -> Result<f64> {
    if values.len() != p.len() {
        return Err(Error::SpaceMismatch("payoff length mismatch".into()));
    }
    let mut acc = 0.0;
    for (w, v) in p.weights().iter().zip(values) {
        if *w == 0.0 {
            continue;
        }
        if *v == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        acc += w * v;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_exponent_validation() {
        assert!(UtilityField::power(3, 0.5).is_ok());
        assert!(UtilityField::power(3, -1.0).is_ok());
        assert!(matches!(UtilityField::power(3, 1.0), Err(Error::DomainError(_))));
        assert!(matches!(UtilityField::power(3, 1.5), Err(Error::DomainError(_))));
        assert!(matches!(UtilityField::power(3, 0.0), Err(Error::DomainError(_))));
        assert!(matches!(
            OutcomeUtility::new(Family::Log, -2.0, 0.0),
            Err(Error::DomainError(_))
        ));
    }

    #[test]
    fn conjugates_match_closed_forms() {
        let u = UtilityField::log(1);
        let v = u.conjugate().unwrap();
        // V(y) = -ln y - 1 for the plain log utility.
        assert!((v.eval(0, 1.0) + 1.0).abs() < 1e-15);
        assert!((v.eval(0, 2.0) - (-(2f64.ln()) - 1.0)).abs() < 1e-15);

        let u = UtilityField::power(1, 0.5).unwrap();
        let v = u.conjugate().unwrap();
        // q = 1, V(y) = 1 / y.
        assert!((v.eval(0, 0.25) - 4.0).abs() < 1e-12);

        let u = UtilityField::power(1, -1.0).unwrap();
        let v = u.conjugate().unwrap();
        // q = -1/2, V(y) = -2 sqrt(y), finite at zero.
        assert!((v.eval(0, 4.0) + 4.0).abs() < 1e-12);
        assert_eq!(v.eval(0, 0.0), 0.0);
        // Log and positive-power conjugates blow up at zero instead.
        assert_eq!(UtilityField::log(1).conjugate().unwrap().eval(0, 0.0), f64::INFINITY);
    }

    #[test]
    fn fenchel_young_equality_at_the_marginal() {
        let fields = [
            UtilityField::log(1),
            UtilityField::power(1, 0.5).unwrap(),
            UtilityField::power(1, -1.5).unwrap(),
            UtilityField::log(1).wrap_affine(&[2.5], &[-0.7]).unwrap(),
        ];
        for u in &fields {
            let v = u.conjugate().unwrap();
            for k in 0..40 {
                let x = 10f64.powf(-2.0 + 4.0 * k as f64 / 39.0);
                let y = u.marginal(0, x);
                let gap = u.eval(0, x) - x * y - v.eval(0, y);
                assert!(gap.abs() < 1e-9 * (1.0 + v.eval(0, y).abs()), "gap {gap:.3e}");
                // Strict inequality away from the touching point.
                let y_off = 1.7 * y;
                assert!(u.eval(0, x) - x * y_off < v.eval(0, y_off) + 1e-12);
            }
        }
    }

    #[test]
    fn conjugate_derivative_is_negative_inverse_marginal() {
        let fields = [
            UtilityField::log(1),
            UtilityField::power(1, 0.5).unwrap(),
            UtilityField::power(1, -1.0).unwrap(),
            UtilityField::power(1, 0.9).unwrap().wrap_affine(&[0.3], &[1.0]).unwrap(),
        ];
        for u in &fields {
            let v = u.conjugate().unwrap();
            for k in 0..25 {
                let y = 10f64.powf(-1.0 + 2.0 * k as f64 / 24.0);
                // Five-point stencil for V'.
                let h = 1e-4 * y;
                let fd = (-v.eval(0, y + 2.0 * h) + 8.0 * v.eval(0, y + h)
                    - 8.0 * v.eval(0, y - h)
                    + v.eval(0, y - 2.0 * h))
                    / (12.0 * h);
                let i = u.inverse_marginal(0, y).unwrap();
                assert!((-fd - i).abs() <= 1e-10 * (1.0 + i.abs()), "y={y} fd={fd} i={i}");
                assert!((v.derivative(0, y) + i).abs() <= 1e-13 * (1.0 + i.abs()));
            }
        }
    }

    #[test]
    fn inverse_marginal_rejects_nonpositive_arguments() {
        let u = UtilityField::log(2);
        assert!(matches!(u.inverse_marginal(0, 0.0), Err(Error::DomainError(_))));
        assert!(matches!(u.inverse_marginal(1, -3.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn gamma_divergence_log_example_and_positivity() {
        let v = UtilityField::log(1).conjugate().unwrap();
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let got = v.gamma_divergence(0, 1.0, e2).unwrap();
        let want = ((1.0 + e2) / 2.0).ln() - 1.0;
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.433_780_830_483_026_85).abs() < 1e-14);
        // Zero on the diagonal, positive off it, domain errors off the axis.
        assert_eq!(v.gamma_divergence(0, 3.0, 3.0).unwrap(), 0.0);
        assert!(v.gamma_divergence(0, 0.5, 2.0).unwrap() > 0.0);
        assert!(matches!(v.gamma_divergence(0, 0.0, 1.0), Err(Error::DomainError(_))));
        assert!(matches!(v.gamma_divergence(0, 1.0, -1.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn extended_real_conventions() {
        let u = UtilityField::log(2);
        assert_eq!(u.eval(0, 0.0), f64::NEG_INFINITY);
        assert_eq!(u.eval(0, -1.0), f64::NEG_INFINITY);
        let upos = UtilityField::power(1, 0.5).unwrap();
        assert_eq!(upos.eval(0, 0.0), 0.0);

        let sp = crate::prob_space::FiniteFilteredSpace::one_period(&["a", "b"]).unwrap();
        let p = Measure::new(&sp, vec![0.5, 0.5]).unwrap();
        let lower = expectation_lower(&p, &[f64::NEG_INFINITY, 1.0]).unwrap();
        assert_eq!(lower, f64::NEG_INFINITY);
        let upper = expectation_upper(&p, &[f64::INFINITY, 1.0]).unwrap();
        assert_eq!(upper, f64::INFINITY);
        // Null outcomes do not contribute, whatever their payoff.
        let p0 = Measure::new(&sp, vec![0.0, 1.0]).unwrap();
        assert_eq!(expectation_lower(&p0, &[f64::NEG_INFINITY, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn terminal_rescaling_stays_in_family() {
        let u = UtilityField::from_parts(vec![
            OutcomeUtility::new(Family::Log, 2.0, 0.5).unwrap(),
            OutcomeUtility::new(Family::Power(0.5), 1.0, 0.0).unwrap(),
        ])
        .unwrap();
        let s = [3.0, 0.25];
        let r = u.rescale_terminal(&s).unwrap();
        for k in 0..20 {
            let x = 0.1 + 0.5 * k as f64;
            for w in 0..2 {
                let direct = u.eval(w, s[w] * x);
                assert!((r.eval(w, x) - direct).abs() < 1e-12 * (1.0 + direct.abs()));
            }
        }
    }
}
