//! Market models on finite event trees: adapted price systems, trading
//! strategies and their wealth processes, replication, the linear system
//! cutting out the martingale measures, and numeraire changes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::prob_space::{FiniteFilteredSpace, NodeId};

/// Relative replication tolerance: a claim is attainable when the least-norm
/// residual is strictly below `REPLICATION_TOL * (1 + sup |f|)`.
pub const REPLICATION_TOL: f64 = 1e-9;

/// A finite market: a riskless asset pegged at 1 plus `d` risky assets with
/// strictly positive adapted prices on the tree.
#[derive(Debug, Clone)]
pub struct MarketModel {
    space: FiniteFilteredSpace,
    /// `prices[asset][node]`.
    prices: Vec<Vec<f64>>,
}

impl MarketModel {
    pub fn new(space: FiniteFilteredSpace, prices: Vec<Vec<f64>>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::Invalid("a market needs at least one risky asset".into()));
        }
        for (a, series) in prices.iter().enumerate() {
            if series.len() != space.node_count() {
                return Err(Error::Invalid(format!(
                    "asset {a} has {} prices for {} nodes",
                    series.len(),
                    space.node_count()
                )));
            }
            if series.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(Error::Invalid(format!(
                    "asset {a} has a nonpositive or nonfinite price"
                )));
            }
        }
        Ok(Self { space, prices })
    }

    pub fn space(&self) -> &FiniteFilteredSpace {
        &self.space
    }

    pub fn asset_count(&self) -> usize {
        self.prices.len()
    }

    pub fn price(&self, asset: usize, node: NodeId) -> f64 {
        self.prices[asset][node]
    }

    pub fn prices(&self, asset: usize) -> &[f64] {
        &self.prices[asset]
    }

    /// Terminal price of an asset per outcome.
    pub fn terminal_prices(&self, asset: usize) -> Vec<f64> {
        (0..self.space.outcome_count())
            .map(|o| self.prices[asset][self.space.leaf_of_outcome(o)])
            .collect()
    }
}

/// Holdings in the risky assets per non-terminal node. Terminal nodes carry
/// an empty row. The riskless position is implied by self-financing.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    holdings: Vec<Vec<f64>>,
}

impl Strategy {
    pub fn new(model: &MarketModel, holdings: Vec<Vec<f64>>) -> Result<Self> {
        let sp = model.space();
        if holdings.len() != sp.node_count() {
            return Err(Error::Invalid("strategy must carry one row per node".into()));
        }
        for (n, row) in holdings.iter().enumerate() {
            let want = if sp.is_terminal(n) { 0 } else { model.asset_count() };
            if row.len() != want {
                return Err(Error::Invalid(format!(
                    "node '{}' expects {want} holdings, got {}",
                    sp.node_name(n),
                    row.len()
                )));
            }
            if row.iter().any(|h| !h.is_finite()) {
                return Err(Error::Invalid("holdings must be finite".into()));
            }
        }
        Ok(Self { holdings })
    }

    pub fn zeros(model: &MarketModel) -> Self {
        let sp = model.space();
        let holdings = (0..sp.node_count())
            .map(|n| {
                if sp.is_terminal(n) {
                    Vec::new()
                } else {
                    vec![0.0; model.asset_count()]
                }
            })
            .collect();
        Self { holdings }
    }

    pub fn holdings(&self, node: NodeId) -> &[f64] {
        &self.holdings[node]
    }
}

/// Terminal payoff vector indexed by outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimVector {
    payoff: Vec<f64>,
    space_fp: u64,
}

impl ClaimVector {
    pub fn new(space: &FiniteFilteredSpace, payoff: Vec<f64>) -> Result<Self> {
        if payoff.len() != space.outcome_count() {
            return Err(Error::SpaceMismatch("claim length mismatch".into()));
        }
        if payoff.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("claim payoffs must be finite".into()));
        }
        Ok(Self { payoff, space_fp: space.fingerprint() })
    }

    /// European call `max(S_T - strike, 0)` on a risky asset.
    pub fn call(model: &MarketModel, asset: usize, strike: f64) -> Result<Self> {
        if asset >= model.asset_count() {
            return Err(Error::Invalid(format!("asset {asset} out of range")));
        }
        let payoff = model
            .terminal_prices(asset)
            .into_iter()
            .map(|s| (s - strike).max(0.0))
            .collect();
        Self::new(model.space(), payoff)
    }

    pub fn payoff(&self) -> &[f64] {
        &self.payoff
    }

    pub fn value(&self, outcome: usize) -> f64 {
        self.payoff[outcome]
    }

    pub fn sup_norm(&self) -> f64 {
        self.payoff.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn space_fingerprint(&self) -> u64 {
        self.space_fp
    }

    pub(crate) fn require_space(&self, space: &FiniteFilteredSpace) -> Result<()> {
        space.check_same(self.space_fp, "claim")
    }
}

/// Wealth process of a self-financing strategy started at `x`: the root
/// carries `x`, every child adds the holdings times the price increment.
pub fn wealth_process(model: &MarketModel, x: f64, strategy: &Strategy) -> Result<Vec<f64>> {
    let sp = model.space();
    if strategy.holdings.len() != sp.node_count() {
        return Err(Error::Invalid("strategy built for a different tree".into()));
    }
    let mut wealth = vec![0.0; sp.node_count()];
    wealth[0] = x;
    for node in 0..sp.node_count() {
        if sp.is_terminal(node) {
            continue;
        }
        for &child in sp.children(node) {
            let mut w = wealth[node];
            for (a, h) in strategy.holdings[node].iter().enumerate() {
                w += h * (model.price(a, child) - model.price(a, node));
            }
            wealth[child] = w;
        }
    }
    Ok(wealth)
}

/// Terminal wealth per outcome for a strategy started at `x`.
pub fn terminal_wealth(model: &MarketModel, x: f64, strategy: &Strategy) -> Result<Vec<f64>> {
    let sp = model.space();
    let wealth = wealth_process(model, x, strategy)?;
    Ok((0..sp.outcome_count())
        .map(|o| wealth[sp.leaf_of_outcome(o)])
        .collect())
}

/// Certificate that a claim is attainable: initial capital, a replicating
/// strategy, and the sup-norm residual of the best linear fit.
#[derive(Debug, Clone)]
pub struct Replication {
    pub cost: f64,
    pub strategy: Strategy,
    pub residual: f64,
}

/// Stacks the payoff map of self-financing trading: column 0 is the initial
/// capital, the rest are per-(node, asset) increment columns.
fn replication_matrix(model: &MarketModel) -> (DMatrix<f64>, Vec<NodeId>) {
    let sp = model.space();
    let m = sp.outcome_count();
    let d = model.asset_count();
    let nonterminal = sp.nonterminal_nodes();
    let mut col_of = vec![usize::MAX; sp.node_count()];
    for (i, &n) in nonterminal.iter().enumerate() {
        col_of[n] = 1 + i * d;
    }
    let mut mat = DMatrix::<f64>::zeros(m, 1 + nonterminal.len() * d);
    for o in 0..m {
        mat[(o, 0)] = 1.0;
        let path = sp.path_to_outcome(o);
        for step in 0..path.len() - 1 {
            let node = path[step];
            let child = path[step + 1];
            for a in 0..d {
                mat[(o, col_of[node] + a)] = model.price(a, child) - model.price(a, node);
            }
        }
    }
    (mat, nonterminal)
}

fn strategy_from_flat(model: &MarketModel, nonterminal: &[NodeId], flat: &[f64]) -> Strategy {
    let sp = model.space();
    let d = model.asset_count();
    let mut holdings: Vec<Vec<f64>> = (0..sp.node_count())
        .map(|n| if sp.is_terminal(n) { Vec::new() } else { vec![0.0; d] })
        .collect();
    for (i, &n) in nonterminal.iter().enumerate() {
        for a in 0..d {
            holdings[n][a] = flat[i * d + a];
        }
    }
    Strategy { holdings }
}

/// Least-norm replication attempt. Returns the certificate when the residual
/// beats `REPLICATION_TOL * (1 + sup |f|)` strictly, `None` otherwise.
pub fn is_replicable(model: &MarketModel, claim: &ClaimVector) -> Result<Option<Replication>> {
    claim.require_space(model.space())?;
    let (mat, nonterminal) = replication_matrix(model);
    let f = DVector::from_column_slice(claim.payoff());
    let sol = linalg::svd_solve(&mat, &f)
        .ok_or_else(|| Error::SolverFailure("replication least-squares failed".into()))?;
    let fit = &mat * &sol;
    let residual = (fit - &f).amax();
    if residual < REPLICATION_TOL * (1.0 + claim.sup_norm()) {
        let cost = sol[0];
        let strategy = strategy_from_flat(model, &nonterminal, sol.as_slice().split_at(1).1);
        Ok(Some(Replication { cost, strategy, residual }))
    } else {
        Ok(None)
    }
}

/// The linear system `A q = b, q >= 0` whose solutions are the martingale
/// measures: one mass row plus one row per (non-terminal node, asset).
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    /// Full coefficient rows, row-major, including redundant ones.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub row_labels: Vec<String>,
    reduced: DMatrix<f64>,
    reduced_b: DVector<f64>,
    interior: Vec<f64>,
}

impl ConstraintSystem {
    pub fn unknowns(&self) -> usize {
        self.a.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn row_count(&self) -> usize {
        self.a.len()
    }

    /// Independent subset of the rows, used by the solvers.
    pub(crate) fn reduced(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.reduced, &self.reduced_b)
    }

    /// A strictly positive feasible point found during construction.
    pub fn interior_point(&self) -> &[f64] {
        &self.interior
    }

    /// Worst violation `max_i |(A q - b)_i|` over the full row set.
    pub fn max_violation(&self, q: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, &bi)| {
                (row.iter().zip(q).map(|(aij, qj)| aij * qj).sum::<f64>() - bi).abs()
            })
            .fold(0.0_f64, f64::max)
    }
}

/// Builds the martingale constraint system and certifies strict feasibility
/// by computing an interior point. An empty or boundary-only solution set is
/// a `NoArbitrageViolation`.
pub fn martingale_measure_constraints(model: &MarketModel) -> Result<ConstraintSystem> {
    let sp = model.space();
    let m = sp.outcome_count();
    let mut a: Vec<Vec<f64>> = vec![vec![1.0; m]];
    let mut b = vec![1.0];
    let mut row_labels = vec!["mass".to_string()];
    for &node in &sp.nonterminal_nodes() {
        for asset in 0..model.asset_count() {
            let mut row = vec![0.0; m];
            for &o in sp.outcomes_below(node) {
                let path = sp.path_to_outcome(o);
                let child = path[sp.depth(node) + 1];
                row[o] = model.price(asset, child) - model.price(asset, node);
            }
            a.push(row);
            b.push(0.0);
            row_labels.push(format!("node:{} asset:{}", sp.node_name(node), asset));
        }
    }
    let (reduced, reduced_b) = independent_rows(&a, &b)?;
    let interior = analytic_center(&reduced, &reduced_b)?;
    let system = ConstraintSystem { a, b, row_labels, reduced, reduced_b, interior };
    // The reduction only certifies consistency of the linear span; re-check
    // the interior point against every original row.
    let violation = system.max_violation(&system.interior);
    if violation > 1e-9 {
        return Err(Error::NoArbitrageViolation(format!(
            "constraint system inconsistent, residual {violation:.3e}"
        )));
    }
    Ok(system)
}

/// Selects a maximal independent subset of rows by Gaussian elimination with
/// partial pivoting; detects inconsistent systems on the way.
fn independent_rows(a: &[Vec<f64>], b: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rows = a.len();
    let cols = a[0].len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let tol = 1e-11 * scale;
    let mut work: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(r, &bi)| {
            let mut row = r.clone();
            row.push(bi);
            row
        })
        .collect();
    let mut used = vec![false; rows];
    let mut pivots: Vec<usize> = Vec::new();
    for col in 0..cols {
        let mut best = None;
        let mut best_val = tol;
        for (r, row) in work.iter().enumerate() {
            if !used[r] && row[col].abs() > best_val {
                best_val = row[col].abs();
                best = Some(r);
            }
        }
        let Some(p) = best else { continue };
        used[p] = true;
        pivots.push(p);
        for r in 0..rows {
            if !used[r] && work[r][col].abs() > 0.0 {
                let factor = work[r][col] / work[p][col];
                let pivot_row = work[p].clone();
                let row = &mut work[r];
                for c in col..=cols {
                    row[c] -= factor * pivot_row[c];
                }
            }
        }
    }
    for (r, row) in work.iter().enumerate() {
        if !used[r] && row[cols].abs() > 1e-11 * (1.0 + scale) {
            return Err(Error::NoArbitrageViolation(
                "martingale constraints are inconsistent".into(),
            ));
        }
    }
    pivots.sort_unstable();
    let mut reduced = DMatrix::<f64>::zeros(pivots.len(), cols);
    let mut reduced_b = DVector::<f64>::zeros(pivots.len());
    for (i, &r) in pivots.iter().enumerate() {
        for c in 0..cols {
            reduced[(i, c)] = a[r][c];
        }
        reduced_b[i] = b[r];
    }
    Ok((reduced, reduced_b))
}

/// Analytic center of `{A q = b, q > 0}` by infeasible-start Newton from the
/// uniform vector. Failure to reach feasibility certifies that no strictly
/// positive martingale measure exists.
fn analytic_center(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>> {
    let n = a.ncols();
    let m = a.nrows();
    let mut q = DVector::from_element(n, 1.0 / n as f64);
    let mut nu = DVector::<f64>::zeros(m);
    let b_scale = 1.0 + b.amax();
    let mut res_norm = f64::INFINITY;
    for _ in 0..200 {
        let r_pri = a * &q - b;
        let r_dual = {
            let mut r = a.transpose() * &nu;
            for i in 0..n {
                r[i] -= 1.0 / q[i];
            }
            r
        };
        res_norm = r_pri.amax().max(r_dual.amax() * 1e-4);
        if r_pri.amax() <= 1e-13 * b_scale && r_dual.amax() <= 1e-7 {
            break;
        }
        let h: Vec<f64> = q.iter().map(|&qi| 1.0 / (qi * qi)).collect();
        let rhs1 = -r_dual.clone();
        let rhs2 = -r_pri.clone();
        let Some((dq, dnu)) = linalg::solve_kkt(&h, a, &rhs1, &rhs2) else {
            return Err(Error::NoArbitrageViolation(
                "feasibility Newton system is singular".into(),
            ));
        };
        // Fraction to the positivity boundary, then backtracking on the
        // residual norm.
        let mut t: f64 = 1.0;
        for i in 0..n {
            if dq[i] < 0.0 {
                t = t.min(0.99 * q[i] / -dq[i]);
            }
        }
        let base = norm_residual(a, b, &q, &nu);
        let mut accepted = false;
        for _ in 0..60 {
            let q_new = &q + &dq * t;
            let nu_new = &nu + &dnu * t;
            if norm_residual(a, b, &q_new, &nu_new) <= (1.0 - 0.1 * t) * base {
                q = q_new;
                nu = nu_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let feasible = (a * &q - b).amax() <= 1e-10 * b_scale;
    let positive = q.iter().all(|&v| v > 1e-13);
    if !(feasible && positive) {
        return Err(Error::NoArbitrageViolation(format!(
            "no strictly positive martingale measure (residual {res_norm:.3e})"
        )));
    }
    Ok(q.as_slice().to_vec())
}

fn norm_residual(a: &DMatrix<f64>, b: &DVector<f64>, q: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let r_pri = a * q - b;
    let mut r_dual = a.transpose() * nu;
    for i in 0..q.len() {
        r_dual[i] -= 1.0 / q[i];
    }
    (r_pri.norm_squared() + r_dual.norm_squared()).sqrt()
}

/// Completeness test: the martingale measure is unique exactly when the
/// constraint matrix has full column rank. Requires a strictly positive
/// feasible point, which construction certifies.
pub fn is_complete(model: &MarketModel) -> Result<bool> {
    let system = martingale_measure_constraints(model)?;
    let rows = system.row_count();
    let cols = system.unknowns();
    let mut full = DMatrix::<f64>::zeros(rows, cols);
    for (r, row) in system.a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            full[(r, c)] = *v;
        }
    }
    Ok(linalg::rank(&full) == cols)
}

/// Choice of pricing unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Numeraire {
    Riskless,
    Asset(usize),
}

/// Re-expresses prices and a claim in units of the chosen numeraire. The
/// riskless choice is the identity. For a risky numeraire `k`, slot `k` of
/// the new model holds the deflated riskless asset `1 / S_k`, every other
/// asset becomes `S_a / S_k`, and the claim becomes `f / S_k(T)`.
pub fn change_numeraire(
    model: &MarketModel,
    numeraire: Numeraire,
    claim: &ClaimVector,
) -> Result<(MarketModel, ClaimVector)> {
    claim.require_space(model.space())?;
    match numeraire {
        Numeraire::Riskless => Ok((model.clone(), claim.clone())),
        Numeraire::Asset(k) => {
            if k >= model.asset_count() {
                return Err(Error::InvalidNumeraire(format!("asset {k} out of range")));
            }
            let sp = model.space();
            let deflator = &model.prices[k];
            if deflator.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidNumeraire(
                    "numeraire prices must be strictly positive".into(),
                ));
            }
            let mut prices = Vec::with_capacity(model.asset_count());
            for a in 0..model.asset_count() {
                let series = if a == k {
                    (0..sp.node_count()).map(|nde| 1.0 / deflator[nde]).collect()
                } else {
                    (0..sp.node_count())
                        .map(|nde| model.prices[a][nde] / deflator[nde])
                        .collect()
                };
                prices.push(series);
            }
            let payoff = (0..sp.outcome_count())
                .map(|o| claim.value(o) / deflator[sp.leaf_of_outcome(o)])
                .collect();
            let new_model = MarketModel::new(sp.clone(), prices)?;
            let new_claim = ClaimVector::new(sp, payoff)?;
            Ok((new_model, new_claim))
        }
    }
}
