//! Executable convergence checks for value functions, optimizers, and
//! prices under measure perturbations, truncated demonstrations of the
//! known blow-up mechanisms, and the two-factor invariance demo.

use crate::duality::{solve_dual, solve_primal};
use crate::error::{Error, Result};
use crate::market::{ClaimVector, MarketModel};
use crate::models::{two_factor, two_factor_measure};
use crate::preferences::UtilityField;
use crate::pricing::{indifference_price, DEFINITIONAL_TOL};
use crate::prob_space::{tv_distance, Measure};

/// Gap ceiling a convergence verdict requires over its final window.
pub const VALUE_GAP_TOL: f64 = 1e-6;
/// Spread ceiling for the two-factor price panel.
pub const TWO_FACTOR_SPREAD_TOL: f64 = 1e-7;
/// A truncation sweep counts as divergent past this final/initial ratio.
pub const DIVERGENCE_RATIO: f64 = 10.0;
/// Rows the verdict inspects at the end of a sweep.
pub const VERDICT_WINDOW: usize = 3;
/// Rows the tail-monotonicity check inspects.
pub const MONOTONE_WINDOW: usize = 5;
/// Slack allowed when testing non-increase near the solver floor.
const MONOTONE_SLACK: f64 = 1e-11;

/// A sequence of perturbed measures together with its limit.
#[derive(Debug, Clone)]
pub struct MeasureSequence {
    indices: Vec<usize>,
    terms: Vec<Measure>,
    limit: Measure,
}

impl MeasureSequence {
    /// Wraps an explicit sequence. Every term must be equivalent to the
    /// limit and the total variation must not grow from head to tail.
    pub fn new(terms: Vec<Measure>, limit: Measure) -> Result<Self> {
        let indices = (1..=terms.len()).collect();
        Self::with_indices(indices, terms, limit)
    }

    pub fn with_indices(
        indices: Vec<usize>,
        terms: Vec<Measure>,
        limit: Measure,
    ) -> Result<Self> {
        if terms.is_empty() || indices.len() != terms.len() {
            return Err(Error::Invalid("sequence needs one index per term".into()));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) || indices[0] == 0 {
            return Err(Error::Invalid("sequence indices must increase from 1".into()));
        }
        for t in &terms {
            if !t.is_equivalent_to(&limit) {
                return Err(Error::EquivalenceViolation(
                    "perturbed measure not equivalent to the limit".into(),
                ));
            }
        }
        let first = tv_distance(&terms[0], &limit)?;
        let last = tv_distance(terms.last().expect("nonempty"), &limit)?;
        if last > first + 1e-12 {
            return Err(Error::Invalid(format!(
                "sequence drifts away from its limit: tv {first:.3e} -> {last:.3e}"
            )));
        }
        Ok(Self { indices, terms, limit })
    }

    /// The standard perturbation `P_n = (1 - 1/n) limit + (1/n) start` for
    /// `n = 1..=n_max`.
    pub fn mixture(limit: &Measure, start: &Measure, n_max: usize) -> Result<Self> {
        Self::mixture_at(limit, start, &(1..=n_max).collect::<Vec<usize>>())
    }

    /// The same mixture evaluated only at the given indices, for sweeps
    /// that thin out large `n` geometrically.
    pub fn mixture_at(limit: &Measure, start: &Measure, ns: &[usize]) -> Result<Self> {
        let terms = ns
            .iter()
            .map(|&n| limit.mix(start, 1.0 / n as f64))
            .collect::<Result<Vec<Measure>>>()?;
        Self::with_indices(ns.to_vec(), terms, limit.clone())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Measure] {
        &self.terms
    }

    pub fn limit(&self) -> &Measure {
        &self.limit
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// One row of a convergence sweep; gaps are absent where the row's solve
/// failed or the quantity is not part of the run.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub n: usize,
    pub tv: f64,
    pub u_gap: Option<f64>,
    pub v_gap: Option<f64>,
    pub x_opt_gap: Option<f64>,
    pub y_opt_gap: Option<f64>,
    pub price_gap: Option<f64>,
    /// Worst definitional slack of the row's price, when priced.
    pub definitional: Option<f64>,
    pub error: Option<String>,
}

impl ConvergenceRow {
    fn blank(n: usize, tv: f64) -> Self {
        ConvergenceRow {
            n,
            tv,
            u_gap: None,
            v_gap: None,
            x_opt_gap: None,
            y_opt_gap: None,
            price_gap: None,
            definitional: None,
            error: None,
        }
    }

    /// The gap entries actually recorded for this row.
    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        [self.u_gap, self.v_gap, self.x_opt_gap, self.y_opt_gap, self.price_gap]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// True when the final window is error-free with every gap below
    /// tolerance and every priced row passing the definitional check.
    pub verdict: bool,
    /// True when each gap column is non-increasing over its tail window.
    pub eventually_monotone: bool,
}

fn assemble(rows: Vec<ConvergenceRow>) -> ConvergenceReport {
    let window = rows.len().min(VERDICT_WINDOW);
    let tail = &rows[rows.len() - window..];
    let mut verdict = !rows.is_empty();
    for row in tail {
        if row.error.is_some() || row.gaps().next().is_none() {
            verdict = false;
            break;
        }
        if row.gaps().any(|g| !(g < VALUE_GAP_TOL)) {
            verdict = false;
            break;
        }
    }
    if rows.iter().any(|r| matches!(r.definitional, Some(d) if d > DEFINITIONAL_TOL)) {
        verdict = false;
    }
    let columns: [fn(&ConvergenceRow) -> Option<f64>; 5] = [
        |r| r.u_gap,
        |r| r.v_gap,
        |r| r.x_opt_gap,
        |r| r.y_opt_gap,
        |r| r.price_gap,
    ];
    let mut eventually_monotone = true;
    for col in columns {
        let series: Vec<f64> = rows.iter().filter_map(col).collect();
        if series.len() < 2 {
            continue;
        }
        let tail = &series[series.len() - series.len().min(MONOTONE_WINDOW)..];
        if tail.windows(2).any(|w| w[1] > w[0] + MONOTONE_SLACK) {
            eventually_monotone = false;
        }
    }
    ConvergenceReport { rows, verdict, eventually_monotone }
}

/// Sweeps the primal and dual value functions along the measure sequence
/// and reports their pointwise gaps to the limit values.
pub fn run_value_convergence(
    model: &MarketModel,
    u: &UtilityField,
    seq: &MeasureSequence,
    x: f64,
    y: f64,
) -> Result<ConvergenceReport> {
    let u_inf = solve_primal(model, u, seq.limit(), x)?.value;
    let v_inf = solve_dual(model, u, seq.limit(), y)?.value;
    let mut rows = Vec::with_capacity(seq.len());
    for (i, pn) in seq.terms().iter().enumerate() {
        let mut row = ConvergenceRow::blank(seq.indices()[i], tv_distance(pn, seq.limit())?);
        let solved = solve_primal(model, u, pn, x)
            .and_then(|p| solve_dual(model, u, pn, y).map(|d| (p.value, d.value)));
        match solved {
            Ok((un, vn)) => {
                row.u_gap = Some((un - u_inf).abs());
                row.v_gap = Some((vn - v_inf).abs());
            }
            Err(Error::SolverFailure(msg)) => row.error = Some(msg),
            Err(e) => return Err(e),
        }
        rows.push(row);
    }
    Ok(assemble(rows))
}

/// Sweeps the primal and dual optimizers, comparing terminal wealths and
/// dual state-price deflators atom-wise in sup norm.
pub fn run_optimizer_convergence(
    model: &MarketModel,
    u: &UtilityField,
    seq: &MeasureSequence,
    xs: &[f64],
    x_limit: f64,
) -> Result<ConvergenceReport> {
    if xs.len() != seq.len() {
        return Err(Error::Invalid("one capital level per sequence term required".into()));
    }
    if !xs.iter().all(|&x| x.is_finite() && x > 0.0) || !(x_limit > 0.0) {
        return Err(Error::Invalid("capital levels must be positive".into()));
    }
    let optimizers = |p: &Measure, x: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let primal = solve_primal(model, u, p, x)?;
        let dual = solve_dual(model, u, p, primal.y_star)?;
        let y_process: Vec<f64> =
            dual.z_hat.values().iter().map(|z| primal.y_star * z).collect();
        Ok((primal.terminal_wealth, y_process))
    };
    let (x_inf, y_inf) = optimizers(seq.limit(), x_limit)?;
    let sup = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()))
    };
    let mut rows = Vec::with_capacity(seq.len());
    for (i, pn) in seq.terms().iter().enumerate() {
        let mut row = ConvergenceRow::blank(seq.indices()[i], tv_distance(pn, seq.limit())?);
        match optimizers(pn, xs[i]) {
            Ok((xn, yn)) => {
                row.x_opt_gap = Some(sup(&xn, &x_inf));
                row.y_opt_gap = Some(sup(&yn, &y_inf));
            }
            Err(Error::SolverFailure(msg)) => row.error = Some(msg),
            Err(e) => return Err(e),
        }
        rows.push(row);
    }
    Ok(assemble(rows))
}

/// Sweeps indifference prices of a claim along measure, utility, and
/// capital sequences, verifying the definitional property at every step.
pub fn run_price_convergence(
    model: &MarketModel,
    us: &[UtilityField],
    u_limit: &UtilityField,
    seq: &MeasureSequence,
    xs: &[f64],
    x_limit: f64,
    f: &ClaimVector,
) -> Result<ConvergenceReport> {
    if xs.len() != seq.len() || us.len() != seq.len() {
        return Err(Error::Invalid(
            "one capital level and one utility per sequence term required".into(),
        ));
    }
    if !xs.iter().all(|&x| x.is_finite() && x > 0.0) || !(x_limit > 0.0) {
        return Err(Error::Invalid("capital levels must be positive".into()));
    }
    let p_inf = indifference_price(model, u_limit, seq.limit(), x_limit, f)?.price;
    let mut rows = Vec::with_capacity(seq.len());
    for (i, pn) in seq.terms().iter().enumerate() {
        let mut row = ConvergenceRow::blank(seq.indices()[i], tv_distance(pn, seq.limit())?);
        match indifference_price(model, &us[i], pn, xs[i], f) {
            Ok(report) => {
                row.price_gap = Some((report.price - p_inf).abs());
                row.definitional = Some(report.definitional_check);
            }
            Err(Error::SolverFailure(msg)) | Err(Error::MartingalePropertyViolation(msg)) => {
                row.error = Some(msg)
            }
            Err(e) => return Err(e),
        }
        rows.push(row);
    }
    Ok(assemble(rows))
}

/// Which blow-up mechanism a truncation sweep demonstrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterexampleKind {
    /// A random-utility shift built from a Gaussian exponential series:
    /// the perturbed expectation of the shift diverges once the series
    /// keeps terms of order beyond the perturbation index plus two.
    UtilitySeries,
    /// A cubic-tilted perturbation whose dual moment explodes for power
    /// preferences with dual exponent above one.
    DualMoment,
}

/// Truncated-Gaussian quadrature grid: cutoffs (in standard deviations)
/// and the Simpson node count per cutoff.
#[derive(Debug, Clone)]
pub struct GaussianGridSpec {
    pub m_values: Vec<f64>,
    pub nodes: usize,
}

impl GaussianGridSpec {
    pub fn new(m_values: Vec<f64>, nodes: usize) -> Result<Self> {
        if m_values.is_empty()
            || m_values.iter().any(|m| !(m.is_finite() && *m > 0.0))
            || m_values.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Invalid("cutoffs must be positive and increasing".into()));
        }
        if nodes < 3 || nodes % 2 == 0 {
            return Err(Error::Invalid(format!(
                "Simpson rule needs an odd node count of at least 3, got {nodes}"
            )));
        }
        Ok(Self { m_values, nodes })
    }
}

/// Full description of one truncation sweep.
#[derive(Debug, Clone)]
pub struct TruncationSpec {
    pub kind: CounterexampleKind,
    /// Perturbation index of the measure change being integrated.
    pub n: usize,
    /// Series length for the utility-shift demo.
    pub series_terms: usize,
    /// Risk-aversion exponent for the dual-moment demo.
    pub power_p: f64,
    /// Market price of risk for the dual-moment demo.
    pub mu_over_sigma: f64,
    pub grid: GaussianGridSpec,
}

impl TruncationSpec {
    pub fn utility_series(n: usize, series_terms: usize, grid: GaussianGridSpec) -> Self {
        TruncationSpec {
            kind: CounterexampleKind::UtilitySeries,
            n,
            series_terms,
            power_p: 0.75,
            mu_over_sigma: 0.5,
            grid,
        }
    }

    pub fn dual_moment(power_p: f64, mu_over_sigma: f64, n: usize, grid: GaussianGridSpec) -> Self {
        TruncationSpec {
            kind: CounterexampleKind::DualMoment,
            n,
            series_terms: 8,
            power_p,
            mu_over_sigma,
            grid,
        }
    }
}

/// Result of a truncation sweep.
#[derive(Debug, Clone)]
pub struct TruncationDemo {
    pub m_values: Vec<f64>,
    /// Truncated expectation per cutoff; may saturate to infinity.
    pub values: Vec<f64>,
    pub strictly_increasing: bool,
    /// Final over initial value.
    pub divergence_ratio: f64,
    pub diverged: bool,
    pub overflowed: bool,
}

/// Composite Simpson rule; infinite or invalid samples saturate to
/// positive infinity, which the caller reports rather than fails on.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, nodes: usize) -> f64 {
    let h = (b - a) / (nodes - 1) as f64;
    let mut acc = 0.0;
    for i in 0..nodes {
        let w = if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let v = f(a + h * i as f64);
        if !v.is_finite() {
            return f64::INFINITY;
        }
        acc += w * v;
    }
    let total = acc * h / 3.0;
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Evaluates the truncated expectation behind each demo at cutoff `m`.
/// Exponents are fused with the Gaussian weight so only the net growth
/// rate reaches `exp`.
fn truncated_expectation(spec: &TruncationSpec, m: f64) -> f64 {
    match spec.kind {
        CounterexampleKind::UtilitySeries => {
            let n = spec.n as f64;
            let prefactor = (n / (n + 2.0)).sqrt() * INV_SQRT_2PI;
            let terms: Vec<(f64, f64)> = (1..=spec.series_terms)
                .map(|k| {
                    let kf = k as f64;
                    let coef = 0.5_f64.powi(k as i32) * (2.0 / kf).sqrt();
                    // Net exponent of exp(w^2/(n+2)) exp((1/2 - 1/k) w^2)
                    // against the Gaussian exp(-w^2/2): positive once k
                    // exceeds n + 2, which is the divergence mechanism.
                    let rate = 1.0 / (n + 2.0) - 1.0 / kf;
                    (coef, rate)
                })
                .collect();
            simpson(
                |w| {
                    let w2 = w * w;
                    let series: f64 =
                        terms.iter().map(|(c, r)| c * (r * w2).exp()).sum();
                    prefactor * series
                },
                -m,
                m,
                spec.grid.nodes,
            )
        }
        CounterexampleKind::DualMoment => {
            let q = spec.power_p / (1.0 - spec.power_p);
            let cubic = (q - 1.0) / spec.n as f64;
            let linear = q * spec.mu_over_sigma;
            simpson(
                |w| {
                    let tilt = if w >= 0.0 { cubic * w * w * w } else { 0.0 };
                    INV_SQRT_2PI * (tilt + linear * w - 0.5 * w * w).exp()
                },
                -m,
                m,
                spec.grid.nodes,
            )
        }
    }
}

/// Sweeps the truncated expectation over the cutoff grid and reports the
/// growth verdict. Divergence means the final value exceeds ten times the
/// first; saturated overflow is reported, not fatal.
pub fn counterexample_truncation(spec: &TruncationSpec) -> Result<TruncationDemo> {
    if spec.n == 0 {
        return Err(Error::Invalid("perturbation index must be at least 1".into()));
    }
    match spec.kind {
        CounterexampleKind::UtilitySeries => {
            if spec.series_terms == 0 {
                return Err(Error::Invalid("series needs at least one term".into()));
            }
        }
        CounterexampleKind::DualMoment => {
            if !(spec.power_p > 0.0 && spec.power_p < 1.0) {
                return Err(Error::Invalid(format!(
                    "dual-moment demo needs an exponent in (0, 1), got {}",
                    spec.power_p
                )));
            }
            if !spec.mu_over_sigma.is_finite() {
                return Err(Error::Invalid("market price of risk must be finite".into()));
            }
        }
    }
    let values: Vec<f64> = spec
        .grid
        .m_values
        .iter()
        .map(|&m| truncated_expectation(spec, m))
        .collect();
    let strictly_increasing = values.windows(2).all(|w| {
        // Saturated pairs cannot witness growth either way; they are
        // reported through the overflow flag instead.
        w[1] > w[0] || (w[0].is_infinite() && w[1].is_infinite())
    });
    let first = values[0];
    let last = *values.last().expect("grid validated nonempty");
    let overflowed = values.iter().any(|v| !v.is_finite());
    Ok(TruncationDemo {
        m_values: spec.grid.m_values.clone(),
        values,
        strictly_increasing,
        divergence_ratio: last / first,
        diverged: last > DIVERGENCE_RATIO * first,
        overflowed,
    })
}

/// Price panel over the two-factor market: the claim on the independent
/// factor keeps the same price across drifts and preferences.
#[derive(Debug, Clone)]
pub struct TwoFactorReport {
    pub p_w_values: Vec<f64>,
    pub utility_names: Vec<String>,
    /// Prices of the claim paying on the factor the asset ignores,
    /// indexed `[drift][utility]`. Expected constant at one half.
    pub demo_prices: Vec<Vec<f64>>,
    /// Prices of the claim paying on the asset's own factor; the
    /// martingale constraint pins these regardless of drift.
    pub control_prices: Vec<Vec<f64>>,
    pub demo_spread: f64,
    pub control_spread: f64,
    pub demo_target: f64,
    /// Mean control price; pinned at the martingale up-weight.
    pub control_level: f64,
    /// All demo prices within tolerance of the target.
    pub verdict: bool,
}

/// Runs the invariance demo over a drift sweep and a fixed panel of
/// deterministic preferences.
pub fn two_factor_invariance_demo(p_w_values: &[f64]) -> Result<TwoFactorReport> {
    if p_w_values.is_empty() {
        return Err(Error::Invalid("drift sweep must be nonempty".into()));
    }
    let model = two_factor();
    let sp = model.space();
    let utilities = [
        ("log".to_string(), UtilityField::log(4)),
        ("power 0.5".to_string(), UtilityField::power(4, 0.5)?),
        ("power -1".to_string(), UtilityField::power(4, -1.0)?),
    ];
    let demo_claim = ClaimVector::new(sp, vec![1.0, 0.0, 1.0, 0.0])?;
    let control_claim = ClaimVector::new(sp, vec![1.0, 1.0, 0.0, 0.0])?;
    let mut demo_prices = Vec::with_capacity(p_w_values.len());
    let mut control_prices = Vec::with_capacity(p_w_values.len());
    for &p_w in p_w_values {
        let p = two_factor_measure(&model, p_w)?;
        let mut demo_row = Vec::with_capacity(utilities.len());
        let mut control_row = Vec::with_capacity(utilities.len());
        for (_, u) in &utilities {
            demo_row.push(indifference_price(&model, u, &p, 1.0, &demo_claim)?.price);
            control_row.push(indifference_price(&model, u, &p, 1.0, &control_claim)?.price);
        }
        demo_prices.push(demo_row);
        control_prices.push(control_row);
    }
    let spread_and_mean = |rows: &Vec<Vec<f64>>| -> (f64, f64) {
        let all: Vec<f64> = rows.iter().flatten().copied().collect();
        let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo, all.iter().sum::<f64>() / all.len() as f64)
    };
    let (demo_spread, _) = spread_and_mean(&demo_prices);
    let (control_spread, control_level) = spread_and_mean(&control_prices);
    let target = 0.5;
    let worst_offset = demo_prices
        .iter()
        .flatten()
        .fold(0.0_f64, |m, p| m.max((p - target).abs()));
    let verdict = worst_offset <= TWO_FACTOR_SPREAD_TOL && demo_spread <= TWO_FACTOR_SPREAD_TOL;
    Ok(TwoFactorReport {
        p_w_values: p_w_values.to_vec(),
        utility_names: utilities.iter().map(|(n, _)| n.clone()).collect(),
        demo_prices,
        control_prices,
        demo_spread,
        control_spread,
        demo_target: target,
        control_level,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{binomial, trinomial};

    fn geometric(n_max_log2: u32) -> Vec<usize> {
        (0..=n_max_log2).map(|k| 1usize << k).collect()
    }

    #[test]
    fn constant_sequence_has_zero_gaps() {
        let model = trinomial();
        let p = Measure::uniform(model.space());
        let seq = MeasureSequence::new(vec![p.clone(); 5], p.clone()).unwrap();
        let u = UtilityField::log(3);
        let report = run_value_convergence(&model, &u, &seq, 1.0, 1.0).unwrap();
        assert!(report.verdict);
        assert!(report.eventually_monotone);
        for row in &report.rows {
            assert_eq!(row.tv, 0.0);
            assert_eq!(row.u_gap, Some(0.0));
            assert_eq!(row.v_gap, Some(0.0));
        }
        let xs = vec![1.0; 5];
        let report = run_optimizer_convergence(&model, &u, &seq, &xs, 1.0).unwrap();
        assert!(report.verdict);
        assert!(report.rows.iter().all(|r| r.x_opt_gap == Some(0.0)));
        let f = ClaimVector::new(model.space(), vec![1.0, 0.0, 0.0]).unwrap();
        let us = vec![u.clone(); 5];
        let report =
            run_price_convergence(&model, &us, &u, &seq, &xs, 1.0, &f).unwrap();
        assert!(report.verdict);
        assert!(report.rows.iter().all(|r| r.price_gap == Some(0.0)));
    }

    #[test]
    fn mixture_value_gaps_decay_like_one_over_n() {
        let model = trinomial();
        let limit = Measure::uniform(model.space());
        let start = Measure::new(model.space(), vec![0.5, 0.3, 0.2]).unwrap();
        let ns = geometric(19);
        let seq = MeasureSequence::mixture_at(&limit, &start, &ns).unwrap();
        let u = UtilityField::log(3);
        let report = run_value_convergence(&model, &u, &seq, 1.0, 1.0).unwrap();
        assert!(report.verdict, "last rows: {:?}", &report.rows[report.rows.len() - 3..]);
        assert!(report.eventually_monotone);
        // Log-log slope of the value gap against n comes out near -1.
        let pts: Vec<(f64, f64)> = report
            .rows
            .iter()
            .filter(|r| r.n >= 4 && r.u_gap.unwrap() > 0.0)
            .map(|r| ((r.n as f64).ln(), r.u_gap.unwrap().ln()))
            .collect();
        let n = pts.len() as f64;
        let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((slope + 1.0).abs() < 0.15, "slope {slope}");
        // The gap is bounded by a constant multiple of the TV distance.
        for row in &report.rows {
            assert!(row.u_gap.unwrap() <= 2.0 * row.tv + 1e-12);
        }
    }

    #[test]
    fn optimizer_gaps_track_the_perturbation_in_the_complete_model() {
        let model = binomial();
        let limit = Measure::new(model.space(), vec![0.5, 0.5]).unwrap();
        let start = Measure::new(model.space(), vec![0.8, 0.2]).unwrap();
        let ns = geometric(24);
        let seq = MeasureSequence::mixture_at(&limit, &start, &ns).unwrap();
        let xs: Vec<f64> = ns.iter().map(|&n| 1.0 + 1.0 / n as f64).collect();
        let u = UtilityField::log(2);
        let report = run_optimizer_convergence(&model, &u, &seq, &xs, 1.0).unwrap();
        assert!(report.verdict, "last rows: {:?}", &report.rows[report.rows.len() - 3..]);
        assert!(report.eventually_monotone);
        // In the complete model the optimizer moves linearly with the
        // perturbation, so gap over (tv + capital offset) stays bounded.
        for row in &report.rows[4..] {
            let drift = row.tv + 1.0 / row.n as f64;
            let ratio = row.x_opt_gap.unwrap() / drift;
            assert!(ratio > 0.1 && ratio < 10.0, "n {} ratio {ratio}", row.n);
        }
    }

    #[test]
    fn price_sweep_reaches_the_limit_price() {
        let model = trinomial();
        let limit = Measure::uniform(model.space());
        let start = Measure::new(model.space(), vec![0.5, 0.3, 0.2]).unwrap();
        let ns = geometric(19);
        let seq = MeasureSequence::mixture_at(&limit, &start, &ns).unwrap();
        let u = UtilityField::log(3);
        let us = vec![u.clone(); ns.len()];
        let xs = vec![1.0; ns.len()];
        let f = ClaimVector::new(model.space(), vec![1.0, 0.0, 0.0]).unwrap();
        let report = run_price_convergence(&model, &us, &u, &seq, &xs, 1.0, &f).unwrap();
        assert!(report.verdict, "last rows: {:?}", &report.rows[report.rows.len() - 3..]);
        // The limit price of the digital claim is the dual weight 2/9.
        let p_inf = indifference_price(&model, &u, &limit, 1.0, &f).unwrap().price;
        assert!((p_inf - 2.0 / 9.0).abs() < 1e-9);

        // A replicable claim prices at its cost along the whole sweep.
        let rep = ClaimVector::new(model.space(), vec![2.0, 1.0, 0.5]).unwrap();
        let report =
            run_price_convergence(&model, &us, &u, &seq, &xs, 1.0, &rep).unwrap();
        for row in &report.rows {
            assert!(row.price_gap.unwrap() < 1e-8, "n {} gap {:?}", row.n, row.price_gap);
        }

        // A constant claim prices at its face value along the whole sweep.
        let c = ClaimVector::new(model.space(), vec![0.4; 3]).unwrap();
        let report = run_price_convergence(&model, &us, &u, &seq, &xs, 1.0, &c).unwrap();
        for row in &report.rows {
            assert!(row.price_gap.unwrap() < 1e-9);
        }
    }

    #[test]
    fn drifting_sequences_are_rejected() {
        let model = trinomial();
        let limit = Measure::uniform(model.space());
        let near = limit.mix(&Measure::new(model.space(), vec![0.5, 0.3, 0.2]).unwrap(), 0.1)
            .unwrap();
        let far = limit.mix(&Measure::new(model.space(), vec![0.5, 0.3, 0.2]).unwrap(), 0.9)
            .unwrap();
        assert!(MeasureSequence::new(vec![near, far], limit).is_err());
    }

    #[test]
    fn series_demo_diverges_and_its_short_control_does_not() {
        let grid = GaussianGridSpec::new(vec![0.9, 2.0, 4.0, 6.0, 8.0], 4001).unwrap();
        let demo = counterexample_truncation(&TruncationSpec::utility_series(
            2,
            8,
            grid.clone(),
        ))
        .unwrap();
        assert!(demo.strictly_increasing);
        assert!(demo.diverged, "ratio {}", demo.divergence_ratio);
        assert!(!demo.overflowed);

        let control =
            counterexample_truncation(&TruncationSpec::utility_series(2, 1, grid)).unwrap();
        assert!(!control.diverged, "ratio {}", control.divergence_ratio);
        assert!(control.divergence_ratio < 1.5);
    }

    #[test]
    fn series_demo_diverges_for_every_index_the_series_outruns() {
        // Small net exponents (n = 5 keeps only 1/7 - 1/8 = 1/56) need wide
        // cutoffs before the growing term dominates the bounded ones.
        let grid = GaussianGridSpec::new(vec![0.9, 8.0, 16.0, 24.0], 32001).unwrap();
        for n in 1..=5 {
            let demo = counterexample_truncation(&TruncationSpec::utility_series(
                n,
                8,
                grid.clone(),
            ))
            .unwrap();
            assert!(demo.diverged, "index {n} ratio {}", demo.divergence_ratio);
            assert!(demo.strictly_increasing);
        }
    }

    #[test]
    fn dual_moment_demo_diverges_and_overflow_is_reported() {
        let grid = GaussianGridSpec::new(vec![2.0, 4.0, 6.0, 8.0], 4001).unwrap();
        let demo = counterexample_truncation(&TruncationSpec::dual_moment(
            0.75,
            0.5,
            3,
            grid.clone(),
        ))
        .unwrap();
        assert!(demo.diverged);
        assert!(demo.divergence_ratio > 1e100);
        assert!(!demo.overflowed);

        let control =
            counterexample_truncation(&TruncationSpec::dual_moment(0.5, 0.5, 3, grid)).unwrap();
        assert!(!control.diverged, "ratio {}", control.divergence_ratio);

        let wide = GaussianGridSpec::new(vec![2.0, 8.0, 14.0], 6001).unwrap();
        let saturated =
            counterexample_truncation(&TruncationSpec::dual_moment(0.75, 0.5, 3, wide)).unwrap();
        assert!(saturated.overflowed);
        assert!(saturated.diverged);
    }

    #[test]
    fn two_factor_panel_prices_the_independent_claim_at_one_half() {
        let report = two_factor_invariance_demo(&[0.3, 0.5, 0.7]).unwrap();
        assert!(report.verdict, "spread {}", report.demo_spread);
        for row in &report.demo_prices {
            for p in row {
                assert!((p - 0.5).abs() <= 1e-7, "demo price {p}");
            }
        }
        // The control claim is pinned by the martingale constraint: the
        // same price for every drift and utility, but away from one half.
        assert!(report.control_spread <= 1e-7, "control spread {}", report.control_spread);
        assert!((report.control_level - 1.0 / 3.0).abs() <= 1e-7);
    }
}
