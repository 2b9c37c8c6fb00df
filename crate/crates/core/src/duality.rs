//! Primal and dual utility maximization on finite market models.
//!
//! The dual problem minimizes `E_P[V(y dQ/dP)]` over the martingale-measure
//! polytope by a damped Newton method on the equality-constrained KKT system
//! with a logarithmic barrier for nonnegativity (continuation from mu = 10
//! down to 1e-10, then a barrier-free polish). The primal problem inverts
//! the budget map `y -> E_Q(y)[I(y dQ(y)/dP)]` by bisection with geometric
//! bracket expansion. Endowment-constrained maximization runs directly in
//! strategy space so attainability is structural.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{
    martingale_measure_constraints, ClaimVector, ConstraintSystem, MarketModel, Strategy,
};
use crate::preferences::{expectation_lower, ConjugateField, UtilityField};
use crate::prob_space::{density, Density, Measure};

/// Normalized KKT stationarity residual accepted for a converged dual.
pub const KKT_TOL: f64 = 1e-8;
/// Absolute budget residual accepted for a converged primal, per unit scale.
pub const BUDGET_TOL: f64 = 1e-9;
/// Atoms at or below this mass raise the dual boundary flag.
pub const BOUNDARY_ATOL: f64 = 1e-9;
/// Newton iteration cap per barrier stage.
const STAGE_ITER_CAP: usize = 200;
/// Relative width at which the budget bisection stops.
const BISECT_REL_TOL: f64 = 1e-12;

/// Optimal dual data at a given multiplier `y`.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub y: f64,
    /// Optimal martingale measure.
    pub q_hat: Measure,
    /// Its density with respect to the reference measure.
    pub z_hat: Density,
    /// Dual value `v(y) = E_P[V(y z_hat)]`.
    pub value: f64,
    /// True when some atom of `q_hat` sits numerically on the boundary.
    pub boundary_flag: bool,
    /// Normalized stationarity residual of the polished iterate.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Optimal primal data at initial capital `x`.
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub x: f64,
    /// Optimal terminal wealth per outcome.
    pub terminal_wealth: Vec<f64>,
    /// A generating strategy when the wealth is attainable within tolerance.
    pub strategy: Option<Strategy>,
    /// Primal value `u(x) = E_P[U(terminal_wealth)]`.
    pub value: f64,
    /// Multiplier with `u'(x) = y_star`.
    pub y_star: f64,
    pub budget_residual: f64,
    pub iterations: usize,
}

/// Endowment-constrained value `u(x, q)` and its certificate.
#[derive(Debug, Clone)]
pub struct EndowmentSolution {
    /// `sup E_P[U(X_T + q f)]`; minus infinity when no admissible strategy
    /// keeps gross wealth positive.
    pub value: f64,
    /// Optimal gross wealth `X_T + q f` per outcome, when feasible.
    pub gross_wealth: Option<Vec<f64>>,
    pub strategy: Option<Strategy>,
    pub iterations: usize,
}

fn validate_common(model: &MarketModel, u: &UtilityField, p: &Measure) -> Result<()> {
    p.require_space(model.space())?;
    if u.len() != model.space().outcome_count() {
        return Err(Error::Invalid(format!(
            "utility field covers {} outcomes, model has {}",
            u.len(),
            model.space().outcome_count()
        )));
    }
    if !p.is_strictly_positive() {
        return Err(Error::EquivalenceViolation(
            "reference measure must charge every outcome".into(),
        ));
    }
    Ok(())
}

/// Shared dual minimization core over a fixed constraint system.
struct DualCore<'a> {
    cs: &'a ConstraintSystem,
    v: &'a ConjugateField,
    /// Effective reference weights (a measure, or measure times density).
    w: &'a [f64],
}

struct DualIterate {
    q: Vec<f64>,
    kkt_residual: f64,
    iterations: usize,
}

impl<'a> DualCore<'a> {
    fn objective(&self, y: f64, q: &[f64], mu: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..q.len() {
            if q[i] <= 0.0 {
                return f64::INFINITY;
            }
            acc += self.w[i] * self.v.eval(i, y * q[i] / self.w[i]);
            if mu > 0.0 {
                acc -= mu * q[i].ln();
            }
        }
        acc
    }

    fn value(&self, y: f64, q: &[f64]) -> f64 {
        (0..q.len()).map(|i| self.w[i] * self.v.eval(i, y * q[i] / self.w[i])).sum()
    }

    /// Damped Newton with barrier continuation. `start` must be strictly
    /// positive and (near-)feasible; warm starts skip the wide stages.
    fn minimize(&self, y: f64, start: &[f64], warm: bool) -> Result<DualIterate> {
        let (a, b) = self.cs.reduced();
        let n = start.len();
        let mut q = start.to_vec();
        let mut iterations = 0usize;
        let mut stages: Vec<f64> = Vec::new();
        let mut mu = if warm { 1e-6 } else { 10.0 };
        while mu > 1e-10 {
            stages.push(mu);
            mu *= 0.1;
        }
        stages.push(1e-10);
        stages.push(0.0);
        for &mu in &stages {
            for _ in 0..STAGE_ITER_CAP {
                iterations += 1;
                let mut grad = DVector::<f64>::zeros(n);
                let mut h = vec![0.0; n];
                for i in 0..n {
                    let arg = y * q[i] / self.w[i];
                    grad[i] = y * self.v.derivative(i, arg);
                    h[i] = y * y / self.w[i] * self.v.second_derivative(i, arg);
                    if mu > 0.0 {
                        grad[i] -= mu / q[i];
                        h[i] += mu / (q[i] * q[i]);
                    }
                }
                let r2 = b - a * DVector::from_column_slice(&q);
                let rhs1 = -grad.clone();
                let Some((dq, _)) = linalg::solve_kkt(&h, a, &rhs1, &r2) else {
                    return Err(Error::SolverFailure(
                        "dual Newton system is singular".into(),
                    ));
                };
                let step_norm = dq.amax();
                let q_norm = q.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if step_norm <= 1e-13 * (1.0 + q_norm) {
                    break;
                }
                let mut t: f64 = 1.0;
                let boundary_frac = if mu > 0.0 { 0.99 } else { 0.95 };
                for i in 0..n {
                    if dq[i] < 0.0 {
                        t = t.min(boundary_frac * q[i] / -dq[i]);
                    }
                }
                let base = self.objective(y, &q, mu);
                let slope: f64 = grad.dot(&dq);
                // The squared Newton decrement bounds the attainable
                // improvement; once it is below the float resolution of the
                // objective, a line search can no longer certify progress.
                // The gradient is still computed exactly, so one safeguarded
                // full step keeps contracting the stationarity residual.
                if -slope <= 1e-14 * (1.0 + base.abs()) {
                    for (qi, di) in q.iter_mut().zip(dq.iter()) {
                        *qi += t * di;
                    }
                    break;
                }
                let mut accepted = false;
                for _ in 0..60 {
                    let trial: Vec<f64> =
                        q.iter().zip(dq.iter()).map(|(qi, di)| qi + t * di).collect();
                    if self.objective(y, &trial, mu) <= base + 0.25 * t * slope.min(0.0) {
                        q = trial;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
        }
        // Stationarity certificate: the barrier-free gradient must lie in
        // the row space of the constraints.
        let mut grad = DVector::<f64>::zeros(n);
        for i in 0..n {
            grad[i] = y * self.v.derivative(i, y * q[i] / self.w[i]);
        }
        let at = a.transpose();
        let lam = linalg::svd_solve(&at, &grad)
            .ok_or_else(|| Error::SolverFailure("multiplier recovery failed".into()))?;
        let kkt_residual = (&grad - at * lam).amax() / (1.0 + grad.amax());
        debug!("dual minimize: y={y:.6e} iters={iterations} kkt={kkt_residual:.3e}");
        if kkt_residual > KKT_TOL {
            return Err(Error::SolverFailure(format!(
                "dual KKT residual {kkt_residual:.3e} above {KKT_TOL:.0e} after {iterations} iterations"
            )));
        }
        Ok(DualIterate { q, kkt_residual, iterations })
    }
}

fn assemble_dual(
    model: &MarketModel,
    base: &Measure,
    core: &DualCore,
    y: f64,
    it: DualIterate,
) -> Result<DualSolution> {
    let sp = model.space();
    let q_hat = Measure::new(sp, it.q.clone())?;
    let z_vals: Vec<f64> = it.q.iter().zip(core.w).map(|(qi, wi)| qi / wi).collect();
    let z_hat = Density::new(sp, base, z_vals)?;
    let boundary_flag = it.q.iter().any(|&v| v <= BOUNDARY_ATOL);
    Ok(DualSolution {
        y,
        value: core.value(y, &it.q),
        q_hat,
        z_hat,
        boundary_flag,
        kkt_residual: it.kkt_residual,
        iterations: it.iterations,
    })
}

/// Minimizes `E_P[V(y dQ/dP)]` over the martingale measures of the model.
pub fn solve_dual(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    y: f64,
) -> Result<DualSolution> {
    let cs = martingale_measure_constraints(model)?;
    solve_dual_on(model, &cs, u, p, y, None)
}

/// As [`solve_dual`], but Newton starts from a caller-supplied strictly
/// positive feasible point (used by the optimizer-uniqueness property).
pub fn solve_dual_from(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    y: f64,
    start: &[f64],
) -> Result<DualSolution> {
    let cs = martingale_measure_constraints(model)?;
    if start.len() != model.space().outcome_count()
        || start.iter().any(|&v| !(v.is_finite() && v > 0.0))
    {
        return Err(Error::Invalid("start must be strictly positive".into()));
    }
    if cs.max_violation(start) > 1e-8 {
        return Err(Error::Invalid("start violates the martingale constraints".into()));
    }
    validate_common(model, u, p)?;
    if !(y.is_finite() && y > 0.0) {
        return Err(Error::DomainError(format!("dual scale must be positive, got {y}")));
    }
    let v = u.conjugate()?;
    let core = DualCore { cs: &cs, v: &v, w: p.weights() };
    let it = core.minimize(y, start, false)?;
    assemble_dual(model, p, &core, y, it)
}

fn solve_dual_on(
    model: &MarketModel,
    cs: &ConstraintSystem,
    u: &UtilityField,
    p: &Measure,
    y: f64,
    start: Option<&[f64]>,
) -> Result<DualSolution> {
    validate_common(model, u, p)?;
    if !(y.is_finite() && y > 0.0) {
        return Err(Error::DomainError(format!("dual scale must be positive, got {y}")));
    }
    let v = u.conjugate()?;
    let core = DualCore { cs, v: &v, w: p.weights() };
    let it = match start {
        Some(s) => core.minimize(y, s, true)?,
        None => core.minimize(y, cs.interior_point(), false)?,
    };
    assemble_dual(model, p, &core, y, it)
}

/// Dual-domain transfer: solves the dual "under the tilted measure" with the
/// objective written against the base measure and an explicit density, i.e.
/// weights `p_i z_i` instead of a pre-mixed measure. Up to assembly rounding
/// this is the same program, and the optimizers must coincide.
pub fn solve_dual_via_base(
    model: &MarketModel,
    u: &UtilityField,
    p_base: &Measure,
    z: &Density,
    y: f64,
) -> Result<DualSolution> {
    let tilted = p_base.tilt(z)?;
    if !tilted.is_strictly_positive() {
        return Err(Error::EquivalenceViolation(
            "tilted measure must charge every outcome".into(),
        ));
    }
    let cs = martingale_measure_constraints(model)?;
    solve_dual_on(model, &cs, u, &tilted, y, None)
}

/// Budget map at fixed dual solution: `E_Q[I(y z)]`.
fn budget_given(u: &UtilityField, y: f64, q: &[f64], z: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..q.len() {
        acc += q[i] * u.inverse_marginal(i, y * z[i])?;
    }
    Ok(acc)
}

/// Maximizes `E_P[U(X_T)]` over self-financing wealth with initial value `x`
/// by inverting the budget along the dual multiplier.
pub fn solve_primal(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
) -> Result<PrimalSolution> {
    validate_common(model, u, p)?;
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::DomainError(format!("initial capital must be positive, got {x}")));
    }
    let cs = martingale_measure_constraints(model)?;
    let v = u.conjugate()?;
    let core = DualCore { cs: &cs, v: &v, w: p.weights() };
    let uniform = u.has_uniform_exponent();
    let mut iterations = 0usize;
    // With a uniform exponent across outcomes the dual optimizer does not
    // depend on y, so one well-scaled dual solve serves the whole bisection.
    let mut cached: Option<Vec<f64>> = None;
    if uniform {
        let it = core.minimize(1.0, cs.interior_point(), false)?;
        iterations += it.iterations;
        cached = Some(it.q);
    }
    let mut eval = |y: f64, cache: &mut Option<Vec<f64>>| -> Result<f64> {
        let q = match cache {
            Some(q) if uniform => q.clone(),
            _ => {
                let warm = cache.is_some();
                let start = cache.clone().unwrap_or_else(|| cs.interior_point().to_vec());
                let it = core.minimize(y, &start, warm)?;
                iterations += it.iterations;
                *cache = Some(it.q.clone());
                it.q
            }
        };
        let z: Vec<f64> = q.iter().zip(p.weights()).map(|(qi, wi)| qi / wi).collect();
        budget_given(u, y, &q, &z)
    };

    let mut lo = 1e-8_f64;
    let mut hi = 1e8_f64;
    let mut expansions = 0;
    while eval(lo, &mut cached)? < x {
        lo /= 16.0;
        expansions += 1;
        if expansions > 16 {
            return Err(Error::SolverFailure("budget bracket exhausted below".into()));
        }
    }
    expansions = 0;
    while eval(hi, &mut cached)? > x {
        hi *= 16.0;
        expansions += 1;
        if expansions > 16 {
            return Err(Error::SolverFailure("budget bracket exhausted above".into()));
        }
    }
    while hi / lo - 1.0 > BISECT_REL_TOL {
        let mid = (lo * hi).sqrt();
        if eval(mid, &mut cached)? >= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y_star = (lo * hi).sqrt();
    // Final dual data at y_star, warm-started from the last iterate so the
    // reported stationarity residual belongs to y_star itself.
    let start = cached.clone().unwrap_or_else(|| cs.interior_point().to_vec());
    let it = core.minimize(y_star, &start, cached.is_some())?;
    iterations += it.iterations;
    let z: Vec<f64> = it.q.iter().zip(p.weights()).map(|(qi, wi)| qi / wi).collect();
    let terminal: Vec<f64> = (0..z.len())
        .map(|i| u.inverse_marginal(i, y_star * z[i]))
        .collect::<Result<Vec<_>>>()?;
    let budget: f64 = it.q.iter().zip(&terminal).map(|(qi, xi)| qi * xi).sum();
    let budget_residual = (budget - x).abs();
    if budget_residual > BUDGET_TOL * (1.0 + x.abs()) {
        return Err(Error::SolverFailure(format!(
            "budget residual {budget_residual:.3e} after bisection"
        )));
    }
    let utilities: Vec<f64> = (0..terminal.len()).map(|i| u.eval(i, terminal[i])).collect();
    let value = expectation_lower(p, &utilities)?;
    let strategy = recover_strategy(model, &it.q, &terminal, x);
    Ok(PrimalSolution {
        x,
        terminal_wealth: terminal,
        strategy,
        value,
        y_star,
        budget_residual,
        iterations,
    })
}

/// Backward induction of the optimal wealth under the pricing measure, then
/// node-wise least squares for the holdings. Returns `None` when any node
/// misses the replication tolerance.
fn recover_strategy(
    model: &MarketModel,
    q: &[f64],
    terminal: &[f64],
    x: f64,
) -> Option<Strategy> {
    let sp = model.space();
    let scale = 1.0 + terminal.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut wealth = vec![0.0; sp.node_count()];
    for node in 0..sp.node_count() {
        if let Some(o) = sp.outcome_of_leaf(node) {
            wealth[node] = terminal[o];
        } else {
            let mut mass = 0.0;
            let mut acc = 0.0;
            for &o in sp.outcomes_below(node) {
                mass += q[o];
                acc += q[o] * terminal[o];
            }
            if mass <= 1e-14 {
                return None;
            }
            wealth[node] = acc / mass;
        }
    }
    if (wealth[0] - x).abs() > 1e-9 * (1.0 + x.abs()) {
        return None;
    }
    let d = model.asset_count();
    let mut holdings: Vec<Vec<f64>> = (0..sp.node_count())
        .map(|n| if sp.is_terminal(n) { Vec::new() } else { vec![0.0; d] })
        .collect();
    for node in sp.nonterminal_nodes() {
        let kids = sp.children(node);
        let mut a = DMatrix::<f64>::zeros(kids.len(), d);
        let mut b = DVector::<f64>::zeros(kids.len());
        for (r, &c) in kids.iter().enumerate() {
            for asset in 0..d {
                a[(r, asset)] = model.price(asset, c) - model.price(asset, node);
            }
            b[r] = wealth[c] - wealth[node];
        }
        let h = linalg::svd_solve(&a, &b)?;
        let resid = (&a * &h - &b).amax();
        if resid > 1e-9 * scale {
            return None;
        }
        for asset in 0..d {
            holdings[node][asset] = h[asset];
        }
    }
    Strategy::new(model, holdings).ok()
}

/// Conjugacy gap `u(x) - min_y (v(y) + x y)` over `y_grid` extended by
/// `y_star = u'(x)`. The primal value is taken from the strategy-space
/// solver so the two sides come from independent code paths.
pub fn conjugacy_gap(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
    y_grid: &[f64],
) -> Result<f64> {
    let zero = ClaimVector::new(model.space(), vec![0.0; model.space().outcome_count()])?;
    let primal_value = primal_with_endowment(model, u, p, x, 0.0, &zero)?.value;
    let y_star = solve_primal(model, u, p, x)?.y_star;
    let cs = martingale_measure_constraints(model)?;
    let mut best = f64::INFINITY;
    for &y in y_grid.iter().chain(std::iter::once(&y_star)) {
        let dual = solve_dual_on(model, &cs, u, p, y, None)?;
        best = best.min(dual.value + x * y);
    }
    Ok(primal_value - best)
}

/// Strategy-space endowment solver: `u(x, q) = sup E_P[U(x + (H . S)_T + q f)]`
/// over self-financing strategies keeping gross wealth positive atom-wise.
/// Infeasibility returns value minus infinity rather than an error.
pub fn primal_with_endowment(
    model: &MarketModel,
    u: &UtilityField,
    p: &Measure,
    x: f64,
    q_units: f64,
    f: &ClaimVector,
) -> Result<EndowmentSolution> {
    validate_common(model, u, p)?;
    f.require_space(model.space())?;
    if !x.is_finite() || !q_units.is_finite() {
        return Err(Error::Invalid("capital and quantity must be finite".into()));
    }
    let sp = model.space();
    let m = sp.outcome_count();
    let d = model.asset_count();
    let nonterminal = sp.nonterminal_nodes();
    let dim = nonterminal.len() * d;
    let mut col_of = vec![usize::MAX; sp.node_count()];
    for (i, &n) in nonterminal.iter().enumerate() {
        col_of[n] = i * d;
    }
    let mut bmat = DMatrix::<f64>::zeros(m, dim);
    for o in 0..m {
        let path = sp.path_to_outcome(o);
        for step in 0..path.len() - 1 {
            let node = path[step];
            let child = path[step + 1];
            for a in 0..d {
                bmat[(o, col_of[node] + a)] = model.price(a, child) - model.price(a, node);
            }
        }
    }
    let base: Vec<f64> = (0..m).map(|o| x + q_units * f.value(o)).collect();
    let scale = 1.0 + x.abs() + q_units.abs() * f.sup_norm();
    let mut h = DVector::<f64>::zeros(dim);
    let mut iterations = 0usize;

    let wealth = |h: &DVector<f64>| -> Vec<f64> {
        let bh = &bmat * h;
        (0..m).map(|o| base[o] + bh[o]).collect()
    };

    // Phase 1: push the minimum wealth strictly positive by maximizing a
    // log-sum-exp softmin with an increasing sharpness schedule.
    let target = 1e-7 * scale;
    let min_w = |w: &[f64]| w.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_w(&wealth(&h)) < target {
        let mut beta = 1.0 / scale;
        'outer: for _ in 0..22 {
            for _ in 0..STAGE_ITER_CAP {
                iterations += 1;
                let w = wealth(&h);
                if min_w(&w) >= 10.0 * target {
                    break 'outer;
                }
                // Softmax weights of -beta * W, computed with a shift.
                let top = w.iter().fold(f64::NEG_INFINITY, |mx, &wi| mx.max(-beta * wi));
                let mut sig: Vec<f64> = w.iter().map(|&wi| (-beta * wi - top).exp()).collect();
                let total: f64 = sig.iter().sum();
                sig.iter_mut().for_each(|s| *s /= total);
                let sigv = DVector::from_column_slice(&sig);
                let grad = bmat.transpose() * &sigv;
                if grad.amax() <= 1e-14 {
                    break;
                }
                // Negative semidefinite Hessian of the softmin; ridge keeps
                // the solve well posed.
                let mut curv = DMatrix::<f64>::zeros(dim, dim);
                for o in 0..m {
                    let row = bmat.row(o);
                    curv += beta * sig[o] * row.transpose() * row;
                }
                let bs = bmat.transpose() * &sigv;
                curv -= beta * &bs * bs.transpose();
                for i in 0..dim {
                    curv[(i, i)] += 1e-10 * beta + 1e-14;
                }
                let Some(step) = curv.clone().lu().solve(&grad) else { break };
                if step.amax() <= 1e-13 * (1.0 + h.amax()) {
                    break;
                }
                let softmin = |hh: &DVector<f64>| -> f64 {
                    let w = wealth(hh);
                    let top = w.iter().fold(f64::NEG_INFINITY, |mx, &wi| mx.max(-beta * wi));
                    let lse: f64 = w.iter().map(|&wi| (-beta * wi - top).exp()).sum();
                    -(top + lse.ln()) / beta
                };
                let base_val = softmin(&h);
                let slope = grad.dot(&step);
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..50 {
                    let trial = &h + &step * t;
                    if softmin(&trial) >= base_val + 0.25 * t * slope.max(0.0) {
                        h = trial;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            beta *= 2.0;
        }
        let reached = min_w(&wealth(&h));
        if reached <= 0.0 {
            debug!("endowment solver: infeasible, best min wealth {reached:.3e}");
            return Ok(EndowmentSolution {
                value: f64::NEG_INFINITY,
                gross_wealth: None,
                strategy: None,
                iterations,
            });
        }
    }

    // Phase 2: barrier Newton on the concave objective in strategy space.
    let objective = |w: &[f64], mu: f64| -> f64 {
        let mut acc = 0.0;
        for o in 0..m {
            if w[o] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += p.weight(o) * u.eval(o, w[o]);
            if mu > 0.0 {
                acc += mu * w[o].ln();
            }
        }
        acc
    };
    for mu in [1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 0.0] {
        let mu = mu * scale.max(1.0);
        let mut converged = false;
        for _ in 0..STAGE_ITER_CAP {
            iterations += 1;
            let w = wealth(&h);
            let mut cg = DVector::<f64>::zeros(m);
            let mut ch = vec![0.0; m];
            for o in 0..m {
                cg[o] = p.weight(o) * u.marginal(o, w[o]) + mu / w[o];
                ch[o] = -p.weight(o) * u.marginal_derivative(o, w[o]) + mu / (w[o] * w[o]);
            }
            let grad = bmat.transpose() * &cg;
            // Positive definite curvature of the negated objective.
            let mut curv = DMatrix::<f64>::zeros(dim, dim);
            for o in 0..m {
                let row = bmat.row(o);
                curv += ch[o] * row.transpose() * row;
            }
            let mut ridge = 0.0;
            let step = loop {
                let mut k = curv.clone();
                if ridge > 0.0 {
                    for i in 0..dim {
                        k[(i, i)] += ridge;
                    }
                }
                match k.lu().solve(&grad) {
                    Some(s) if s.iter().all(|v| v.is_finite()) && grad.dot(&s) >= 0.0 => break s,
                    _ => {
                        ridge = if ridge == 0.0 { 1e-12 * (1.0 + curv.trace()) } else { ridge * 100.0 };
                        if ridge > 1e12 {
                            return Err(Error::SolverFailure(
                                "endowment Newton system unsolvable".into(),
                            ));
                        }
                    }
                }
            };
            let base_val = objective(&w, mu);
            let slope = grad.dot(&step);
            // The squared Newton decrement bounds the attainable objective
            // improvement; once it sinks below the float resolution of the
            // objective, a line search can no longer certify progress.
            if step.amax() <= 1e-12 * (1.0 + h.amax())
                || slope <= 1e-15 * (1.0 + base_val.abs())
            {
                converged = true;
                break;
            }
            let bstep = &bmat * &step;
            let mut t: f64 = 1.0;
            for o in 0..m {
                if bstep[o] < 0.0 {
                    t = t.min(0.99 * w[o] / -bstep[o]);
                }
            }
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &h + &step * t;
                if objective(&wealth(&trial), mu) >= base_val + 0.25 * t * slope.max(0.0) {
                    h = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::SolverFailure(format!(
                "endowment solver hit the iteration cap at barrier {mu:.1e}"
            )));
        }
    }
    let w = wealth(&h);
    let utilities: Vec<f64> = (0..m).map(|o| u.eval(o, w[o])).collect();
    let value = expectation_lower(p, &utilities)?;
    let mut holdings: Vec<Vec<f64>> = (0..sp.node_count())
        .map(|n| if sp.is_terminal(n) { Vec::new() } else { vec![0.0; d] })
        .collect();
    for (i, &n) in nonterminal.iter().enumerate() {
        for a in 0..d {
            holdings[n][a] = h[i * d + a];
        }
    }
    Ok(EndowmentSolution {
        value,
        gross_wealth: Some(w),
        strategy: Strategy::new(model, holdings).ok(),
        iterations,
    })
}

/// Convenience: density between two measures on the model's space, exposed
/// here so callers can feed [`solve_dual_via_base`] without reimporting.
pub fn reference_density(
    model: &MarketModel,
    p: &Measure,
    target: &Measure,
) -> Result<Density> {
    density(model.space(), p, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketModel;
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
    fn trinomial_log_dual_optimizer() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::log(3);
        let dual = solve_dual(&model, &u, &p, 1.0).unwrap();
        let want = [2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0];
        for (got, want) in dual.q_hat.weights().iter().zip(want) {
            assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        }
        assert!(dual.kkt_residual <= KKT_TOL);
        assert!(!dual.boundary_flag);
        // v(1) = E[V(z)] = E[-ln z - 1] = u(1) - 1 for log utility at x = 1.
        let v_expect = (9.0_f64 / 8.0).ln() / 3.0 - 1.0;
        assert!((dual.value - v_expect).abs() < 1e-10);
    }

    #[test]
    fn trinomial_sqrt_dual_optimizer() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        // 2 sqrt(x) is power p = 1/2 wrapped with slope 2... the wrap leaves
        // the optimizer untouched, so plain p = 1/2 shares the minimizer.
        let u = UtilityField::power(3, 0.5).unwrap();
        let dual = solve_dual(&model, &u, &p, 1.0).unwrap();
        let t = 1.0 / (1.5 + 0.5_f64.sqrt());
        let want = [0.5 * t, 1.0 - 1.5 * t, t];
        for (got, want) in dual.q_hat.weights().iter().zip(want) {
            assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        }
        let wrapped = UtilityField::power(3, 0.5).unwrap().wrap_affine(&[2.0; 3], &[0.0; 3]).unwrap();
        let dual2 = solve_dual(&model, &wrapped, &p, 1.0).unwrap();
        for (a, b) in dual2.q_hat.weights().iter().zip(dual.q_hat.weights()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn binomial_dual_is_the_unique_measure_for_any_utility() {
        let model = binomial();
        let p = Measure::new(model.space(), vec![0.7, 0.3]).unwrap();
        for u in [UtilityField::log(2), UtilityField::power(2, -1.0).unwrap()] {
            for y in [0.2, 1.0, 7.0] {
                let dual = solve_dual(&model, &u, &p, y).unwrap();
                assert!((dual.q_hat.weight(0) - 1.0 / 3.0).abs() < 1e-9);
                assert!((dual.q_hat.weight(1) - 2.0 / 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn trinomial_log_primal_closed_form() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::log(3);
        let primal = solve_primal(&model, &u, &p, 1.0).unwrap();
        assert!((primal.y_star - 1.0).abs() < 1e-9);
        let want = [1.5, 1.0, 0.75];
        for (got, want) in primal.terminal_wealth.iter().zip(want) {
            assert!((got - want).abs() < 1e-9);
        }
        let u_expect = (9.0_f64 / 8.0).ln() / 3.0;
        assert!((primal.value - u_expect).abs() < 1e-10);
        assert!(primal.budget_residual < 1e-9 * 2.0);
        assert!(primal.strategy.is_some());
        // Log homogeneity: u(2x) = u(x) + ln 2.
        let primal2 = solve_primal(&model, &u, &p, 2.0).unwrap();
        assert!((primal2.value - (u_expect + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn binomial_log_primal_closed_form() {
        let model = binomial();
        let p = Measure::new(model.space(), vec![0.5, 0.5]).unwrap();
        let u = UtilityField::log(2);
        let primal = solve_primal(&model, &u, &p, 1.0).unwrap();
        let want = [1.5, 0.75];
        for (got, want) in primal.terminal_wealth.iter().zip(want) {
            assert!((got - want).abs() < 1e-9);
        }
        let u_expect = 0.5 * (9.0_f64 / 8.0).ln();
        assert!((primal.value - u_expect).abs() < 1e-10);
    }

    #[test]
    fn primal_rejects_nonpositive_capital() {
        let model = binomial();
        let p = Measure::uniform(model.space());
        let u = UtilityField::log(2);
        assert!(matches!(
            solve_primal(&model, &u, &p, 0.0).unwrap_err(),
            Error::DomainError(_)
        ));
        assert!(matches!(
            solve_primal(&model, &u, &p, -1.0).unwrap_err(),
            Error::DomainError(_)
        ));
    }

    #[test]
    fn conjugacy_gap_brackets_zero_with_y_star_in_the_grid() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        for u in [UtilityField::log(3), UtilityField::power(3, 0.5).unwrap()] {
            let gap = conjugacy_gap(&model, &u, &p, 1.0, &[0.5, 1.0, 2.0]).unwrap();
            assert!(gap <= 1e-8, "gap {gap:.3e} must not exceed zero materially");
            assert!(gap >= -1e-8, "gap {gap:.3e} must be tight with y_star included");
        }
        // Without y_star the grid minimum only upper-bounds the true dual
        // value, so the gap stays nonpositive.
        let u = UtilityField::log(3);
        let gap = conjugacy_gap(&model, &u, &p, 2.0, &[5.0, 9.0]).unwrap();
        assert!(gap <= 1e-8);
    }

    #[test]
    fn endowment_value_matches_primal_at_zero_quantity() {
        let model = trinomial();
        let sp = model.space();
        let p = Measure::uniform(sp);
        let zero = ClaimVector::new(sp, vec![0.0; 3]).unwrap();
        for u in [UtilityField::log(3), UtilityField::power(3, 0.5).unwrap()] {
            for x in [0.5, 1.0, 2.0] {
                let direct = solve_primal(&model, &u, &p, x).unwrap().value;
                let endow = primal_with_endowment(&model, &u, &p, x, 0.0, &zero).unwrap();
                assert!(
                    (endow.value - direct).abs() < 1e-8 * (1.0 + direct.abs()),
                    "u(x,0) = {} vs u(x) = {}",
                    endow.value,
                    direct
                );
            }
        }
    }

    #[test]
    fn endowment_with_replicable_claim_shifts_capital() {
        let model = trinomial();
        let sp = model.space();
        let p = Measure::uniform(sp);
        let u = UtilityField::log(3);
        // f = 0.3 + 0.4 S_T is replicable at cost 0.3 + 0.4 = 0.7.
        let s_t = model.terminal_prices(0);
        let f = ClaimVector::new(sp, s_t.iter().map(|s| 0.3 + 0.4 * s).collect()).unwrap();
        let x0 = 0.7;
        let base = primal_with_endowment(&model, &u, &p, 2.0, 0.0, &f).unwrap().value;
        for q in [-1.0, 1.0] {
            let shifted = primal_with_endowment(&model, &u, &p, 2.0 - q * x0, q, &f).unwrap();
            assert!(
                (shifted.value - base).abs() < 1e-8 * (1.0 + base.abs()),
                "q={q}: {} vs {}",
                shifted.value,
                base
            );
        }
    }

    #[test]
    fn infeasible_endowment_maps_to_negative_infinity() {
        let model = trinomial();
        let sp = model.space();
        let p = Measure::uniform(sp);
        let u = UtilityField::log(3);
        // Short one unit of a claim dominating any wealth reachable from 0.1.
        let f = ClaimVector::new(sp, vec![5.0, 5.0, 5.0]).unwrap();
        let sol = primal_with_endowment(&model, &u, &p, 0.1, -1.0, &f).unwrap();
        assert_eq!(sol.value, f64::NEG_INFINITY);
        assert!(sol.gross_wealth.is_none());
    }

    #[test]
    fn dual_domain_transfer_produces_the_same_optimizer() {
        let model = trinomial();
        let sp = model.space();
        let p = Measure::uniform(sp);
        let pn = Measure::new(sp, vec![0.4, 0.35, 0.25]).unwrap();
        let u = UtilityField::log(3);
        let direct = solve_dual(&model, &u, &pn, 1.3).unwrap();
        let z = reference_density(&model, &p, &pn).unwrap();
        let composed = solve_dual_via_base(&model, &u, &p, &z, 1.3).unwrap();
        for (a, b) in direct.q_hat.weights().iter().zip(composed.q_hat.weights()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn optimizer_unique_across_starting_points() {
        let model = trinomial();
        let p = Measure::new(model.space(), vec![0.2, 0.5, 0.3]).unwrap();
        let u = UtilityField::power(3, 0.5).unwrap();
        let a = solve_dual(&model, &u, &p, 2.0).unwrap();
        // A different strictly feasible point of the polytope q(t) =
        // (t/2, 1 - 3t/2, t).
        let t = 0.6;
        let start = [0.5 * t, 1.0 - 1.5 * t, t];
        let b = solve_dual_from(&model, &u, &p, 2.0, &start).unwrap();
        for (x, y) in a.q_hat.weights().iter().zip(b.q_hat.weights()) {
            assert!((x - y).abs() <= 1e-8);
        }
    }
}
