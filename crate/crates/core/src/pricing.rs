//! Indifference prices via the dual representation, definitional and
//! uniqueness verification, price-invariance analysis across scenarios, and
//! the invariant-claim subspace.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::duality::{primal_with_endowment, solve_dual, solve_primal};
use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{
    change_numeraire, is_complete, martingale_measure_constraints, ClaimVector, MarketModel,
    Numeraire,
};
use crate::preferences::UtilityField;
use crate::prob_space::Measure;

/// Martingale certificate ceiling for an emitted price.
pub const CERTIFICATE_TOL: f64 = 1e-9;
/// Worst definitional slack accepted for the representation price.
pub const DEFINITIONAL_TOL: f64 = 1e-6;
/// Relative price-spread ceiling for invariance verdicts.
pub const INVARIANCE_TOL: f64 = 1e-7;
/// Offset used by the price-uniqueness probe.
pub const UNIQUENESS_PROBE_DELTA: f64 = 1e-3;
/// Claim quantities over which the definitional property is certified.
/// Concavity of q -> u(x - q pi, q) makes the symmetric grid an adequate
/// finite certificate.
pub const QUANTITY_GRID: [f64; 8] = [-1.0, -0.5, -0.1, -0.01, 0.01, 0.1, 0.5, 1.0];

/// Price of a claim plus the evidence backing it.
#[derive(Debug, Clone)]
pub struct PriceReport {
    pub price: f64,
    pub y_star: f64,
    /// Pricing density `z = dQ_hat/dP` per outcome.
    pub pricing_density: Vec<f64>,
    /// Worst martingale-constraint violation of the pricing measure.
    pub martingale_certificate: f64,
    /// Worst slack `u(x - q pi, q) - u(x, 0)` over the quantity grid; the
    /// representation price must keep this at or below `DEFINITIONAL_TOL`.
    pub definitional_check: f64,
    /// The per-quantity slacks behind `definitional_check`.
    pub definitional_slacks: Vec<(f64, f64)>,
}

/// One pricing scenario: initial capital, preferences, reference measure.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub x: f64,
    pub utility: UtilityField,
    pub measure: Measure,
}

/// Worst slack of the definitional indifference property at a candidate
/// price, along with the per-quantity detail.
pub fn definitional_slacks(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
    f: &ClaimVector,
    price: f64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let u0 = primal_with_endowment(model, u, p, x, 0.0, f)?.value;
    let mut worst = f64::NEG_INFINITY;
    let mut detail = Vec::with_capacity(QUANTITY_GRID.len());
    for &q in &QUANTITY_GRID {
        let uq = primal_with_endowment(model, u, p, x - q * price, q, f)?.value;
        let slack = uq - u0;
        detail.push((q, slack));
        if slack > worst {
            worst = slack;
        }
    }
    Ok((worst, detail))
}

/// Indifference price of a bounded claim: the expectation of the claim under
/// the dual-optimal martingale measure at `y_star = u'(x)`, certified by the
/// martingale constraints and the definitional quantity grid.
pub fn indifference_price(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
    f: &ClaimVector,
) -> Result<PriceReport> {
    f.require_space(model.space())?;
    let primal = solve_primal(model, u, p, x)?;
    let dual = solve_dual(model, u, p, primal.y_star)?;
    let cs = martingale_measure_constraints(model)?;
    let certificate = cs.max_violation(dual.q_hat.weights());
    if certificate > CERTIFICATE_TOL {
        return Err(Error::MartingalePropertyViolation(format!(
            "pricing density violates the martingale constraints by {certificate:.3e}"
        )));
    }
    let price: f64 = p
        .weights()
        .iter()
        .zip(dual.z_hat.values())
        .zip(f.payoff())
        .map(|((pw, z), fv)| pw * z * fv)
        .sum();
    let (worst, detail) = definitional_slacks(model, u, p, x, f, price)?;
    Ok(PriceReport {
        price,
        y_star: primal.y_star,
        pricing_density: dual.z_hat.values().to_vec(),
        martingale_certificate: certificate,
        definitional_check: worst,
        definitional_slacks: detail,
    })
}

/// Outcome of probing a shifted price against the definitional check.
#[derive(Debug, Clone, Copy)]
pub struct UniquenessProbe {
    /// Slack at `price + delta`; positive beyond tolerance means the shifted
    /// price is rejected by some quantity, as uniqueness demands.
    pub plus_slack: f64,
    pub minus_slack: f64,
}

impl UniquenessProbe {
    pub fn separates(&self) -> bool {
        self.plus_slack > DEFINITIONAL_TOL && self.minus_slack > DEFINITIONAL_TOL
    }
}

/// Certifies that prices `price ± delta` fail the definitional check: some
/// grid quantity must strictly prefer trading at the shifted price.
pub fn probe_price_uniqueness(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
    f: &ClaimVector,
    price: f64,
    delta: f64,
) -> Result<UniquenessProbe> {
    let (plus, _) = definitional_slacks(model, u, p, x, f, price + delta)?;
    let (minus, _) = definitional_slacks(model, u, p, x, f, price - delta)?;
    Ok(UniquenessProbe { plus_slack: plus, minus_slack: minus })
}

/// Prices a claim under every scenario and reports the spread.
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub prices: Vec<f64>,
    pub spread: f64,
    pub invariant: bool,
}

pub fn invariance_check(
    model: &MarketModel,
    f: &ClaimVector,
    scenarios: &[Scenario],
) -> Result<InvarianceReport> {
    if scenarios.is_empty() {
        return Err(Error::Invalid("invariance needs at least one scenario".into()));
    }
    let mut prices = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let report = indifference_price(model, &s.utility, &s.measure, s.x, f)?;
        prices.push(report.price);
    }
    let lo = prices.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = prices.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    let invariant = spread <= INVARIANCE_TOL * (1.0 + f.sup_norm());
    Ok(InvarianceReport { prices, spread, invariant })
}

/// Orthonormal basis of the sampled invariant-claim subspace.
#[derive(Debug, Clone)]
pub struct InvariantBasis {
    /// Rows form an orthonormal basis of the claims whose price agrees
    /// across all sampled pricing measures.
    pub basis: Vec<Vec<f64>>,
    /// Set when every sampled pricing density coincided in an incomplete
    /// model, so the sample cannot separate anything.
    pub inconclusive: bool,
}

/// Estimates the invariant-claim subspace as the orthogonal complement of
/// the span of pairwise pricing-measure differences across scenarios.
pub fn invariant_claim_basis(
    model: &MarketModel,
    scenarios: &[Scenario],
) -> Result<InvariantBasis> {
    if scenarios.is_empty() {
        return Err(Error::Invalid("basis sampling needs at least one scenario".into()));
    }
    let m = model.space().outcome_count();
    let mut densities: Vec<Vec<f64>> = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let primal = solve_primal(model, &s.utility, &s.measure, s.x)?;
        let dual = solve_dual(model, &s.utility, &s.measure, primal.y_star)?;
        densities.push(dual.q_hat.weights().to_vec());
    }
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for i in 1..densities.len() {
        let mut row: Vec<f64> = densities[i]
            .iter()
            .zip(&densities[0])
            .map(|(a, b)| a - b)
            .collect();
        let sup = row.iter().fold(0.0_f64, |mx, v| mx.max(v.abs()));
        // Differences at the solver noise floor are the same optimizer.
        if sup > 1e-8 {
            row.iter_mut().for_each(|v| *v /= sup);
            diffs.push(row);
        }
    }
    if diffs.is_empty() {
        // No separation in the sample: the whole claim space looks invariant.
        // That is the truth in a complete market and undersampling otherwise.
        let mut basis = Vec::with_capacity(m);
        for i in 0..m {
            let mut row = vec![0.0; m];
            row[i] = 1.0;
            basis.push(row);
        }
        let inconclusive = !is_complete(model)?;
        return Ok(InvariantBasis { basis, inconclusive });
    }
    let mat = nalgebra::DMatrix::from_row_slice(
        diffs.len(),
        m,
        &diffs.iter().flatten().copied().collect::<Vec<f64>>(),
    );
    // Rows are unit-sup-norm optimizer differences known to about nine
    // digits, so directions smaller than 1e-7 of the leading one are noise.
    Ok(InvariantBasis { basis: linalg::null_space(&mat, 1e-7), inconclusive: false })
}

/// Prices a claim through a risky numeraire: deflate prices and payoff,
/// transport the utility by the terminal rescaling, price the bounded
/// deflated claim, and convert back. Stated for models whose numeraire
/// starts at 1 so capital keeps its meaning across units.
pub fn price_via_numeraire(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
    asset: usize,
    f: &ClaimVector,
) -> Result<PriceReport> {
    if asset >= model.asset_count() {
        return Err(Error::InvalidNumeraire(format!("asset {asset} out of range")));
    }
    let s0 = model.price(asset, 0);
    if (s0 - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidNumeraire(format!(
            "numeraire must start at sanity price 1, got {s0}"
        )));
    }
    let (deflated_model, deflated_claim) = change_numeraire(model, Numeraire::Asset(asset), f)?;
    let u_deflated = u.rescale_terminal(&model.terminal_prices(asset))?;
    indifference_price(&deflated_model, &u_deflated, p, x, &deflated_claim)
}

/// Uniform random claims with payoffs in `[lo, hi]`, reproducible by seed.
pub fn sample_bounded_claims(
    model: &MarketModel,
    count: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<Vec<ClaimVector>> {
    if !(hi > lo) {
        return Err(Error::Invalid("empty payoff range".into()));
    }
    let m = model.space().outcome_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let payoff: Vec<f64> = (0..m).map(|_| rng.gen_range(lo..hi)).collect();
            ClaimVector::new(model.space(), payoff)
        })
        .collect()
}

/// Random replicable claims: terminal wealth of random strategies with a
/// random initial cost, reproducible by seed.
pub fn sample_replicable_claims(
    model: &MarketModel,
    count: usize,
    seed: u64,
) -> Result<Vec<(ClaimVector, f64)>> {
    let sp = model.space();
    let d = model.asset_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let cost = rng.gen_range(0.5..1.5);
        let holdings: Vec<Vec<f64>> = (0..sp.node_count())
            .map(|n| {
                if sp.is_terminal(n) {
                    Vec::new()
                } else {
                    (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect()
                }
            })
            .collect();
        let strategy = crate::market::Strategy::new(model, holdings)?;
        let payoff = crate::market::terminal_wealth(model, cost, &strategy)?;
        out.push((ClaimVector::new(sp, payoff)?, cost));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::is_replicable;
    use crate::prob_space::FiniteFilteredSpace;

    fn trinomial() -> MarketModel {
        let sp = FiniteFilteredSpace::one_period(&["up", "mid", "down"]).unwrap();
        MarketModel::new(sp, vec![vec![1.0, 2.0, 1.0, 0.5]]).unwrap()
    }

    fn binomial() -> MarketModel {
        let sp = FiniteFilteredSpace::one_period(&["up", "down"]).unwrap();
        MarketModel::new(sp, vec![vec![1.0, 2.0, 0.5]]).unwrap()
    }

    #[test]
    fn trinomial_log_digital_price_is_the_dual_weight() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::log(3);
        let f = ClaimVector::new(model.space(), vec![1.0, 0.0, 0.0]).unwrap();
        let report = indifference_price(&model, &u, &p, 1.0, &f).unwrap();
        assert!((report.price - 2.0 / 9.0).abs() < 1e-9);
        assert!(report.martingale_certificate <= CERTIFICATE_TOL);
        assert!(report.definitional_check <= DEFINITIONAL_TOL);
        assert!((report.y_star - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trinomial_sqrt_digital_price() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::power(3, 0.5).unwrap().wrap_affine(&[2.0; 3], &[0.0; 3]).unwrap();
        let f = ClaimVector::new(model.space(), vec![1.0, 0.0, 0.0]).unwrap();
        let report = indifference_price(&model, &u, &p, 1.0, &f).unwrap();
        let t = 1.0 / (1.5 + 0.5_f64.sqrt());
        assert!((report.price - 0.5 * t).abs() < 1e-9);
        assert!((report.price - 0.226_540_919_6).abs() < 1e-9);
    }

    #[test]
    fn constants_price_at_face_value() {
        let model = trinomial();
        let p = Measure::new(model.space(), vec![0.2, 0.45, 0.35]).unwrap();
        for u in [UtilityField::log(3), UtilityField::power(3, -1.0).unwrap()] {
            let f = ClaimVector::new(model.space(), vec![0.7; 3]).unwrap();
            let report = indifference_price(&model, &u, &p, 1.5, &f).unwrap();
            assert!((report.price - 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn price_respects_no_arbitrage_bounds() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::power(3, 0.5).unwrap();
        let claims = sample_bounded_claims(&model, 20, -0.5, 1.5, 7).unwrap();
        for f in claims {
            let report = indifference_price(&model, &u, &p, 1.0, &f).unwrap();
            let lo = f.payoff().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f.payoff().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(report.price >= lo - 1e-9 && report.price <= hi + 1e-9);
        }
    }

    #[test]
    fn uniqueness_probe_rejects_shifted_prices() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::log(3);
        let f = ClaimVector::new(model.space(), vec![1.0, 0.0, 0.0]).unwrap();
        let report = indifference_price(&model, &u, &p, 1.0, &f).unwrap();
        let probe = probe_price_uniqueness(
            &model,
            &u,
            &p,
            1.0,
            &f,
            report.price,
            UNIQUENESS_PROBE_DELTA,
        )
        .unwrap();
        assert!(probe.separates(), "probe slacks: {probe:?}");
    }

    #[test]
    fn replicable_claims_price_at_replication_cost_and_are_invariant() {
        let model = trinomial();
        let sp = model.space();
        let scenarios = vec![
            Scenario {
                name: "log-uniform".into(),
                x: 1.0,
                utility: UtilityField::log(3),
                measure: Measure::uniform(sp),
            },
            Scenario {
                name: "sqrt-skew".into(),
                x: 0.5,
                utility: UtilityField::power(3, 0.5).unwrap(),
                measure: Measure::new(sp, vec![0.5, 0.3, 0.2]).unwrap(),
            },
            Scenario {
                name: "crra2-skew".into(),
                x: 2.0,
                utility: UtilityField::power(3, -1.0).unwrap(),
                measure: Measure::new(sp, vec![0.2, 0.3, 0.5]).unwrap(),
            },
        ];
        for (f, _) in sample_replicable_claims(&model, 5, 11).unwrap() {
            let rep = is_replicable(&model, &f).unwrap().expect("built replicable");
            let inv = invariance_check(&model, &f, &scenarios).unwrap();
            assert!(inv.invariant, "spread {}", inv.spread);
            for price in &inv.prices {
                assert!((price - rep.cost).abs() < 1e-8);
            }
        }
        // The digital claim is not invariant in the trinomial.
        let f = ClaimVector::new(sp, vec![1.0, 0.0, 0.0]).unwrap();
        let inv = invariance_check(&model, &f, &scenarios).unwrap();
        assert!(!inv.invariant);
        assert!(inv.spread > 4e-3);
    }

    #[test]
    fn binomial_prices_everything_at_the_unique_measure() {
        let model = binomial();
        let sp = model.space();
        let q = [1.0 / 3.0, 2.0 / 3.0];
        let scenarios = [
            Scenario {
                name: "log".into(),
                x: 1.0,
                utility: UtilityField::log(2),
                measure: Measure::new(sp, vec![0.5, 0.5]).unwrap(),
            },
            Scenario {
                name: "sqrt".into(),
                x: 2.0,
                utility: UtilityField::power(2, 0.5).unwrap(),
                measure: Measure::new(sp, vec![0.8, 0.2]).unwrap(),
            },
        ];
        for f in sample_bounded_claims(&model, 25, 0.0, 1.0, 3).unwrap() {
            let want: f64 = q.iter().zip(f.payoff()).map(|(a, b)| a * b).sum();
            for s in &scenarios {
                let got = indifference_price(&model, &s.utility, &s.measure, s.x, &f)
                    .unwrap()
                    .price;
                assert!((got - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn invariant_basis_matches_the_known_plane() {
        let model = trinomial();
        let sp = model.space();
        let scenarios = vec![
            Scenario {
                name: "log-uniform".into(),
                x: 1.0,
                utility: UtilityField::log(3),
                measure: Measure::uniform(sp),
            },
            Scenario {
                name: "sqrt-uniform".into(),
                x: 1.0,
                utility: UtilityField::power(3, 0.5).unwrap(),
                measure: Measure::uniform(sp),
            },
            Scenario {
                name: "log-skew".into(),
                x: 1.0,
                utility: UtilityField::log(3),
                measure: Measure::new(sp, vec![0.5, 0.3, 0.2]).unwrap(),
            },
        ];
        let basis = invariant_claim_basis(&model, &scenarios).unwrap();
        assert!(!basis.inconclusive);
        assert_eq!(basis.basis.len(), 2);
        // The plane is orthogonal to (-0.5, 1.5, -1) and contains the
        // riskless and risky payoffs.
        let normal = [-0.5, 1.5, -1.0];
        for row in &basis.basis {
            let dot: f64 = row.iter().zip(normal).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "basis row not in the plane: {row:?}");
        }
        for claim in [vec![1.0, 1.0, 1.0], vec![2.0, 1.0, 0.5]] {
            // Project the claim on the basis and check it is reproduced.
            let mut residual = claim.clone();
            for row in &basis.basis {
                let coef: f64 = row.iter().zip(&claim).map(|(a, b)| a * b).sum();
                for (r, v) in residual.iter_mut().zip(row) {
                    *r -= coef * v;
                }
            }
            let err = residual.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-8, "claim {claim:?} leaves the sampled plane by {err:.2e}");
        }
    }

    #[test]
    fn complete_market_basis_is_everything() {
        let model = binomial();
        let sp = model.space();
        let scenarios = vec![
            Scenario {
                name: "log".into(),
                x: 1.0,
                utility: UtilityField::log(2),
                measure: Measure::new(sp, vec![0.5, 0.5]).unwrap(),
            },
            Scenario {
                name: "pow".into(),
                x: 1.0,
                utility: UtilityField::power(2, 0.5).unwrap(),
                measure: Measure::new(sp, vec![0.7, 0.3]).unwrap(),
            },
        ];
        let basis = invariant_claim_basis(&model, &scenarios).unwrap();
        assert_eq!(basis.basis.len(), 2);
        assert!(!basis.inconclusive);
        // A single scenario in an incomplete model cannot separate anything.
        let model3 = trinomial();
        let lone = vec![Scenario {
            name: "only".into(),
            x: 1.0,
            utility: UtilityField::log(3),
            measure: Measure::uniform(model3.space()),
        }];
        let basis = invariant_claim_basis(&model3, &lone).unwrap();
        assert!(basis.inconclusive);
    }

    #[test]
    fn call_priced_through_the_numeraire_matches_direct_pricing() {
        // Binomial: the call is replicable, so both routes give the cost.
        let model = binomial();
        let p = Measure::new(model.space(), vec![0.6, 0.4]).unwrap();
        let u = UtilityField::log(2);
        let call = ClaimVector::call(&model, 0, 1.0).unwrap();
        let rep = is_replicable(&model, &call).unwrap().expect("binomial call");
        let via = price_via_numeraire(&model, &u, &p, 1.0, 0, &call).unwrap();
        assert!((via.price - rep.cost).abs() < 1e-9);
        let direct = indifference_price(&model, &u, &p, 1.0, &call).unwrap();
        assert!((via.price - direct.price).abs() < 1e-9);

        // Trinomial: not replicable; the two routes must still agree.
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::log(3);
        let call = ClaimVector::call(&model, 0, 1.0).unwrap();
        let via = price_via_numeraire(&model, &u, &p, 1.0, 0, &call).unwrap();
        let direct = indifference_price(&model, &u, &p, 1.0, &call).unwrap();
        assert!(
            (via.price - direct.price).abs() < 1e-9,
            "via {} direct {}",
            via.price,
            direct.price
        );
    }
}
