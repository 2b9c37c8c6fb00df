//! Small reference markets used across tests, demos, and the command line.

use crate::error::Result;
use crate::market::MarketModel;
use crate::prob_space::{FiniteFilteredSpace, Measure};

/// One-period trinomial: a single asset at 1 moving to 2, 1, or 0.5.
/// Incomplete; martingale measures form a segment.
pub fn trinomial() -> MarketModel {
    let sp = FiniteFilteredSpace::one_period(&["up", "mid", "down"]).expect("static tree");
    MarketModel::new(sp, vec![vec![1.0, 2.0, 1.0, 0.5]]).expect("static prices")
}

/// One-period binomial: a single asset at 1 moving to 2 or 0.5. Complete;
/// the unique martingale measure is (1/3, 2/3).
pub fn binomial() -> MarketModel {
    let sp = FiniteFilteredSpace::one_period(&["up", "down"]).expect("static tree");
    MarketModel::new(sp, vec![vec![1.0, 2.0, 0.5]]).expect("static prices")
}

/// One-period two-factor product market: outcomes pair the asset factor
/// (first letter, drives the price to 1.5 or 0.75) with an independent
/// binary factor (second letter, does not touch the price).
pub fn two_factor() -> MarketModel {
    let sp =
        FiniteFilteredSpace::one_period(&["uu", "ud", "du", "dd"]).expect("static tree");
    MarketModel::new(sp, vec![vec![1.0, 1.5, 1.5, 0.75, 0.75]]).expect("static prices")
}

/// Product measure on the two-factor space: the asset factor goes up with
/// probability `p_w`, the independent factor is a fair coin.
pub fn two_factor_measure(model: &MarketModel, p_w: f64) -> Result<Measure> {
    if !(p_w > 0.0 && p_w < 1.0) {
        return Err(crate::error::Error::Invalid(format!(
            "factor probability must lie in (0, 1), got {p_w}"
        )));
    }
    Measure::new(
        model.space(),
        vec![p_w * 0.5, p_w * 0.5, (1.0 - p_w) * 0.5, (1.0 - p_w) * 0.5],
    )
}

/// Multiplicative binomial tree over `levels` periods. Outcome labels are
/// up/down letter strings; prices multiply by `up` or `down` per step.
pub fn binomial_tree(levels: usize, up: f64, down: f64, s0: f64) -> Result<MarketModel> {
    if levels == 0 || levels > 16 {
        return Err(crate::error::Error::Invalid(format!(
            "binomial tree needs 1..=16 levels, got {levels}"
        )));
    }
    let mut names: Vec<String> = vec!["r".to_string()];
    for level in 1..=levels {
        let start = names.len() - (1 << (level - 1));
        let parents: Vec<String> = names[start..].to_vec();
        for p in parents {
            names.push(format!("{p}u"));
            names.push(format!("{p}d"));
        }
    }
    let edges: Vec<(&str, &str)> = names
        .iter()
        .skip(1)
        .map(|c| (&c[..c.len() - 1], c.as_str()))
        .collect();
    let labels: Vec<&str> = names
        .iter()
        .filter(|n| n.len() == levels + 1)
        .map(|s| s.as_str())
        .collect();
    let sp = FiniteFilteredSpace::from_edges(&labels, &edges)?;
    let prices: Vec<f64> = (0..sp.node_count())
        .map(|n| {
            let name = sp.node_name(n);
            let ups = name.chars().filter(|&c| c == 'u').count() as i32;
            let downs = name.chars().filter(|&c| c == 'd').count() as i32;
            s0 * up.powi(ups) * down.powi(downs)
        })
        .collect();
    MarketModel::new(sp, vec![prices])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{is_complete, martingale_measure_constraints};

    #[test]
    fn reference_markets_admit_martingale_measures() {
        for model in [trinomial(), binomial(), two_factor()] {
            let cs = martingale_measure_constraints(&model).unwrap();
            assert!(cs.interior_point().iter().all(|&q| q > 0.0));
        }
        assert!(is_complete(&binomial()).unwrap());
        assert!(!is_complete(&trinomial()).unwrap());
        assert!(!is_complete(&two_factor()).unwrap());
    }

    #[test]
    fn two_factor_measure_is_a_product() {
        let model = two_factor();
        let p = two_factor_measure(&model, 0.3).unwrap();
        let w = p.weights();
        assert!((w[0] + w[1] - 0.3).abs() < 1e-15);
        assert!((w[0] + w[2] - 0.5).abs() < 1e-15);
        assert!(two_factor_measure(&model, 0.0).is_err());
    }

    #[test]
    fn binomial_tree_prices_follow_the_letters() {
        let model = binomial_tree(3, 2.0, 0.5, 1.0).unwrap();
        let sp = model.space();
        assert_eq!(sp.outcome_count(), 8);
        assert_eq!(sp.horizon(), 3);
        for n in 0..sp.node_count() {
            let name = sp.node_name(n);
            let ups = name.chars().filter(|&c| c == 'u').count() as i32;
            let downs = name.chars().filter(|&c| c == 'd').count() as i32;
            assert!((model.price(0, n) - 2.0_f64.powi(ups) * 0.5_f64.powi(downs)).abs() < 1e-12);
        }
        assert!(is_complete(&model).unwrap());
        assert!(binomial_tree(0, 2.0, 0.5, 1.0).is_err());
    }
}
