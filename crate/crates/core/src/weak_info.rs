//! Weak information: minimal measures consistent with an anticipated law of
//! a statistic, perturbation sequences of laws, and the value of the
//! associated utility gain.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::market::{is_complete, MarketModel};
use crate::preferences::UtilityField;
use crate::prob_space::{FiniteFilteredSpace, Measure, MASS_TOL};

/// A statistic on outcomes taking values in a finite label set.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomElement {
    labels: Vec<String>,
    space_fp: u64,
}

impl RandomElement {
    /// One label per outcome; the label set is whatever is attained.
    pub fn new(space: &FiniteFilteredSpace, labels: Vec<String>) -> Result<Self> {
        if labels.len() != space.outcome_count() {
            return Err(Error::SpaceMismatch("one label per outcome required".into()));
        }
        if labels.iter().any(|l| l.is_empty()) {
            return Err(Error::Invalid("labels must be nonempty strings".into()));
        }
        Ok(Self { labels, space_fp: space.fingerprint() })
    }

    /// The identity statistic: every outcome is its own label.
    pub fn identity(space: &FiniteFilteredSpace) -> Self {
        Self {
            labels: space.labels().to_vec(),
            space_fp: space.fingerprint(),
        }
    }

    pub fn label(&self, outcome: usize) -> &str {
        &self.labels[outcome]
    }

    /// Distinct labels in first-appearance order.
    pub fn label_set(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for l in &self.labels {
            if !seen.contains(l) {
                seen.push(l.clone());
            }
        }
        seen
    }

    pub fn space_fingerprint(&self) -> u64 {
        self.space_fp
    }

    /// Law of the statistic under a measure.
    pub fn law_under(&self, p: &Measure) -> Result<Law> {
        if p.space_fingerprint() != self.space_fp {
            return Err(Error::SpaceMismatch("statistic and measure live on different spaces".into()));
        }
        let mut weights: BTreeMap<String, f64> = BTreeMap::new();
        for l in self.label_set() {
            weights.insert(l, 0.0);
        }
        for (o, l) in self.labels.iter().enumerate() {
            *weights.get_mut(l).expect("label set covers all labels") += p.weight(o);
        }
        Ok(Law { weights })
    }
}

/// A probability law on a finite label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Law {
    weights: BTreeMap<String, f64>,
}

impl Law {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Invalid("a law needs at least one label".into()));
        }
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("law weights must be finite and nonnegative".into()));
        }
        let mass: f64 = weights.values().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Invalid(format!(
                "law mass {mass:.16e} differs from 1 beyond tolerance"
            )));
        }
        Ok(Self { weights })
    }

    pub fn from_pairs(pairs: &[(&str, f64)]) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (l, w) in pairs {
            if weights.insert(l.to_string(), *w).is_some() {
                return Err(Error::Invalid(format!("duplicate label '{l}'")));
            }
        }
        Self::new(weights)
    }

    pub fn weight(&self, label: &str) -> Option<f64> {
        self.weights.get(label).copied()
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    /// Same labels with the same supports.
    pub fn is_equivalent_to(&self, other: &Law) -> bool {
        self.weights.len() == other.weights.len()
            && self.weights.iter().all(|(l, &w)| {
                other.weights.get(l).map(|&v| (v > 0.0) == (w > 0.0)).unwrap_or(false)
            })
    }

    /// Total variation distance on the label set; requires equal label sets.
    pub fn tv_distance(&self, other: &Law) -> Result<f64> {
        if self.weights.len() != other.weights.len()
            || !self.weights.keys().all(|l| other.weights.contains_key(l))
        {
            return Err(Error::LawMismatch("laws on different label sets".into()));
        }
        Ok(0.5
            * self
                .weights
                .iter()
                .map(|(l, w)| (w - other.weights[l]).abs())
                .sum::<f64>())
    }
}

/// The minimal measure consistent with anticipating law `nu` for `Y`:
/// each atom is reweighted by `nu(Y(w)) / P(Y = Y(w))`, preserving all
/// conditional probabilities given the statistic.
pub fn minimal_measure(
    space: &FiniteFilteredSpace,
    p: &Measure,
    y: &RandomElement,
    nu: &Law,
) -> Result<Measure> {
    p.require_space(space)?;
    if y.space_fingerprint() != space.fingerprint() {
        return Err(Error::SpaceMismatch("statistic built on a different space".into()));
    }
    let p_law = y.law_under(p)?;
    if !p_law.is_equivalent_to(nu) {
        return Err(Error::LawMismatch(
            "anticipated law is not equivalent to the law of the statistic".into(),
        ));
    }
    let mut ratio: BTreeMap<&str, f64> = BTreeMap::new();
    for (label, &mass) in p_law.weights() {
        let target = nu.weight(label).expect("equivalence checked");
        ratio.insert(label.as_str(), if mass > 0.0 { target / mass } else { 1.0 });
    }
    let weights: Vec<f64> = (0..space.outcome_count())
        .map(|o| p.weight(o) * ratio[y.label(o)])
        .collect();
    Measure::new(space, weights)
}

/// Mixture path `nu_n = (1 - 1/n) target + (1/n) start`, `n = 1..=n_max`.
pub fn perturbation_sequence(target: &Law, start: &Law, n_max: usize) -> Result<Vec<Law>> {
    if !target.is_equivalent_to(start) {
        return Err(Error::LawMismatch("mixture endpoints must be equivalent".into()));
    }
    if n_max == 0 {
        return Err(Error::Invalid("sequence length must be positive".into()));
    }
    let mut seq = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let t = 1.0 / n as f64;
        let weights: BTreeMap<String, f64> = target
            .weights()
            .iter()
            .map(|(l, &w)| (l.clone(), (1.0 - t) * w + t * start.weight(l).expect("same labels")))
            .collect();
        seq.push(Law::new(weights)?);
    }
    Ok(seq)
}

/// Utility value attainable when weakly informed of `(Y, nu)`: the primal
/// value under the minimal measure. Stated for complete models only;
/// incomplete models are rejected.
pub fn value_of_weak_information(
    model: &MarketModel,
    u: &UtilityField,
    x: f64,
    y: &RandomElement,
    nu: &Law,
    p: &Measure,
) -> Result<f64> {
    if !is_complete(model)? {
        return Err(Error::CompletenessRequired(
            "the weak-information value is defined here for complete models".into(),
        ));
    }
    let p_nu = minimal_measure(model.space(), p, y, nu)?;
    Ok(crate::duality::solve_primal(model, u, &p_nu, x)?.value)
}
