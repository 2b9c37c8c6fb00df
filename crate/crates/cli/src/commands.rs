//! Subcommand implementations. Each command loads its inputs, runs the
//! library, writes every requested artifact, and only then decides the exit
//! status, so a falsified verdict still leaves full reports behind.

use std::path::Path;

use serde_json::{json, Value};
use weakinfo::duality::{solve_dual, solve_primal};
use weakinfo::market::{is_complete, martingale_measure_constraints};
use weakinfo::pricing::{
    indifference_price, invariance_check, sample_bounded_claims, sample_replicable_claims,
    Scenario, DEFINITIONAL_TOL,
};
use weakinfo::prob_space::tv_distance;
use weakinfo::stability::{
    counterexample_truncation, run_optimizer_convergence, run_price_convergence,
    run_value_convergence, ConvergenceReport, ConvergenceRow, MeasureSequence, VERDICT_WINDOW,
};
use weakinfo::weak_info::{minimal_measure, value_of_weak_information};

use crate::model_file::{self, BuiltModel, LoadedFile};
use crate::report;
use crate::{CliError, Command};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate { model, out } => validate(&model, out.as_deref()),
        Command::Solve { model, x, utility, dump_constraints, out } => {
            solve(&model, x, utility.as_deref(), dump_constraints, out.as_deref())
        }
        Command::Price { model, claim, x, utility, tolerance, out, csv } => price(
            &model,
            &claim,
            x,
            utility.as_deref(),
            tolerance,
            out.as_deref(),
            csv.as_deref(),
        ),
        Command::Invariance { model, claim, scenario_set, seed, out, csv } => invariance(
            &model,
            &claim,
            scenario_set.as_deref(),
            seed,
            out.as_deref(),
            csv.as_deref(),
        ),
        Command::Weakinfo { model, x, utility, out } => {
            weakinfo_cmd(&model, x, utility.as_deref(), out.as_deref())
        }
        Command::Stability {
            model,
            experiment,
            n_max,
            claim,
            x,
            utility,
            scenario_set,
            tolerance,
            out,
            csv,
            plot_data,
        } => stability(
            &model,
            &experiment,
            n_max,
            claim.as_deref(),
            x,
            utility.as_deref(),
            scenario_set.as_deref(),
            tolerance,
            out.as_deref(),
            csv.as_deref(),
            plot_data.as_deref(),
        ),
        Command::Counterexample { model, out, csv, plot_data } => {
            counterexample(&model, out.as_deref(), csv.as_deref(), plot_data.as_deref())
        }
    }
}

fn validate(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let loaded = model_file::load(path)?;
    let body = match &loaded {
        LoadedFile::Market(m) => {
            let sp = m.model.space();
            json!({
                "command": "validate",
                "valid": true,
                "kind": "market",
                "outcomes": sp.outcome_count(),
                "nodes": sp.node_count(),
                "horizon": sp.horizon(),
                "assets": m.model.asset_count(),
                "claims": m.claims.keys().collect::<Vec<_>>(),
                "scenarios": m.scenarios.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                "has_utility": m.utility.is_some(),
                "has_weak_info": m.weak_info.is_some(),
            })
        }
        LoadedFile::Counterexample(c) => json!({
            "command": "validate",
            "valid": true,
            "kind": "counterexample",
            "sweep": c.kind,
            "expect": if c.expect_divergence { "diverges" } else { "bounded" },
        }),
    };
    report::write_json(&body, out)
}

fn solve(
    path: &Path,
    x: f64,
    utility: Option<&str>,
    dump_constraints: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let built = model_file::load_market(path)?;
    let u = built.resolve_utility(utility)?;
    let primal = solve_primal(&built.model, &u, &built.base, x)?;
    let dual = solve_dual(&built.model, &u, &built.base, primal.y_star)?;
    let conjugacy_gap = primal.value - (dual.value + x * primal.y_star);
    let sp = built.model.space();
    let strategy: Value = match &primal.strategy {
        Some(s) => sp
            .nonterminal_nodes()
            .into_iter()
            .map(|n| {
                json!({
                    "node": sp.node_name(n),
                    "holdings": report::floats(s.holdings(n).iter().copied()),
                })
            })
            .collect::<Vec<_>>()
            .into(),
        None => Value::Null,
    };
    let mut body = json!({
        "command": "solve",
        "x": x,
        "primal": {
            "value": primal.value,
            "y_star": primal.y_star,
            "terminal_wealth": report::floats(primal.terminal_wealth.iter().copied()),
            "strategy": strategy,
            "budget_residual": primal.budget_residual,
            "iterations": primal.iterations,
        },
        "dual": {
            "y": dual.y,
            "value": dual.value,
            "q_hat": report::floats(dual.q_hat.weights().iter().copied()),
            "z_hat": report::floats(dual.z_hat.values().iter().copied()),
            "kkt_residual": dual.kkt_residual,
            "boundary_flag": dual.boundary_flag,
            "iterations": dual.iterations,
        },
        "conjugacy_gap": conjugacy_gap,
    });
    if dump_constraints {
        let cs = martingale_measure_constraints(&built.model)?;
        let rows: Vec<Value> = cs.a.iter().map(|r| report::floats(r.iter().copied())).collect();
        body["constraints"] = json!({
            "rows": rows,
            "rhs": report::floats(cs.b.iter().copied()),
            "labels": cs.row_labels,
        });
    }
    report::write_json(&body, out)
}

fn price(
    path: &Path,
    claim: &str,
    x: f64,
    utility: Option<&str>,
    tolerance: Option<f64>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let built = model_file::load_market(path)?;
    let u = built.resolve_utility(utility)?;
    let f = built.claim(claim)?;
    let tol = tolerance.unwrap_or(DEFINITIONAL_TOL);
    let rep = indifference_price(&built.model, &u, &built.base, x, f)?;
    let pass = rep.definitional_check <= tol;
    let slacks: Vec<Value> = rep
        .definitional_slacks
        .iter()
        .map(|(q, s)| json!({"q": q, "slack": s}))
        .collect();
    let body = json!({
        "command": "price",
        "claim": claim,
        "x": x,
        "price": rep.price,
        "y_star": rep.y_star,
        "pricing_density": report::floats(rep.pricing_density.iter().copied()),
        "martingale_certificate": rep.martingale_certificate,
        "definitional_check": rep.definitional_check,
        "definitional_slacks": slacks,
        "tolerance": tol,
        "definitional_pass": pass,
    });
    report::write_json(&body, out)?;
    if let Some(csv_path) = csv {
        let rows: Vec<Vec<String>> = rep
            .definitional_slacks
            .iter()
            .map(|(q, s)| vec![report::csv_cell(Some(*q)), report::csv_cell(Some(*s))])
            .collect();
        report::write_csv(csv_path, &["q", "slack"], &rows)?;
    }
    if !pass {
        return Err(CliError::Falsified(format!(
            "definitional check slack {:.3e} exceeds tolerance {tol:.3e}",
            rep.definitional_check
        )));
    }
    Ok(())
}

fn select_scenarios<'a>(
    built: &'a BuiltModel,
    scenario_set: Option<&str>,
) -> Result<Vec<&'a Scenario>, CliError> {
    if built.scenarios.is_empty() {
        return Err(CliError::Validation("the model file declares no scenarios".into()));
    }
    match scenario_set {
        None => Ok(built.scenarios.iter().collect()),
        Some(names) => names
            .split(',')
            .map(|name| built.scenario(name.trim()))
            .collect(),
    }
}

fn invariance(
    path: &Path,
    claim: &str,
    scenario_set: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let built = model_file::load_market(path)?;
    let selected = select_scenarios(&built, scenario_set)?;
    let scenarios: Vec<Scenario> = selected.into_iter().cloned().collect();
    let scenario_names: Vec<&str> = scenarios.iter().map(|s| s.name.as_str()).collect();

    if let Some(count_text) = claim.strip_prefix("random-bounded:") {
        let count: usize = count_text
            .parse()
            .map_err(|_| CliError::Validation(format!("bad claim count '{count_text}'")))?;
        let seed = seed.unwrap_or(7);
        let claims = sample_bounded_claims(&built.model, count, 0.0, 1.0, seed)?;
        let mut rows = Vec::new();
        let mut table = Vec::new();
        let mut worst = 0.0_f64;
        for (i, f) in claims.iter().enumerate() {
            let inv = invariance_check(&built.model, f, &scenarios)?;
            worst = worst.max(inv.spread);
            rows.push(json!({
                "claim": i,
                "spread": inv.spread,
                "invariant": inv.invariant,
            }));
            table.push(vec![i.to_string(), report::csv_cell(Some(inv.spread))]);
        }
        let body = json!({
            "command": "invariance",
            "claim": claim,
            "seed": seed,
            "scenarios": scenario_names,
            "per_claim": rows,
            "worst_spread": worst,
        });
        report::write_json(&body, out)?;
        if let Some(csv_path) = csv {
            report::write_csv(csv_path, &["claim", "spread"], &table)?;
        }
        return Ok(());
    }

    if let Some(count_text) = claim.strip_prefix("random-replicable:") {
        let count: usize = count_text
            .parse()
            .map_err(|_| CliError::Validation(format!("bad claim count '{count_text}'")))?;
        let seed = seed.unwrap_or(7);
        let claims = sample_replicable_claims(&built.model, count, seed)?;
        let mut rows = Vec::new();
        let mut table = Vec::new();
        let mut worst_spread = 0.0_f64;
        let mut worst_cost_error = 0.0_f64;
        for (i, (f, cost)) in claims.iter().enumerate() {
            let inv = invariance_check(&built.model, f, &scenarios)?;
            let cost_error = inv
                .prices
                .iter()
                .fold(0.0_f64, |m, p| m.max((p - cost).abs()));
            worst_spread = worst_spread.max(inv.spread);
            worst_cost_error = worst_cost_error.max(cost_error);
            rows.push(json!({
                "claim": i,
                "cost": cost,
                "spread": inv.spread,
                "cost_error": cost_error,
                "invariant": inv.invariant,
            }));
            table.push(vec![
                i.to_string(),
                report::csv_cell(Some(*cost)),
                report::csv_cell(Some(inv.spread)),
                report::csv_cell(Some(cost_error)),
            ]);
        }
        let body = json!({
            "command": "invariance",
            "claim": claim,
            "seed": seed,
            "scenarios": scenario_names,
            "per_claim": rows,
            "worst_spread": worst_spread,
            "worst_cost_error": worst_cost_error,
        });
        report::write_json(&body, out)?;
        if let Some(csv_path) = csv {
            report::write_csv(csv_path, &["claim", "cost", "spread", "cost_error"], &table)?;
        }
        return Ok(());
    }

    let f = built.claim(claim)?;
    let inv = invariance_check(&built.model, f, &scenarios)?;
    let body = json!({
        "command": "invariance",
        "claim": claim,
        "scenarios": scenario_names,
        "prices": report::floats(inv.prices.iter().copied()),
        "spread": inv.spread,
        "invariant": inv.invariant,
    });
    report::write_json(&body, out)?;
    if let Some(csv_path) = csv {
        let rows: Vec<Vec<String>> = scenario_names
            .iter()
            .zip(&inv.prices)
            .map(|(name, p)| vec![name.to_string(), report::csv_cell(Some(*p))])
            .collect();
        report::write_csv(csv_path, &["scenario", "price"], &rows)?;
    }
    Ok(())
}

fn weakinfo_cmd(
    path: &Path,
    x: f64,
    utility: Option<&str>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let built = model_file::load_market(path)?;
    let u = built.resolve_utility(utility)?;
    let (y, nu) = built.weak_info.as_ref().ok_or_else(|| {
        CliError::Validation("the model file has no weak_info block".into())
    })?;
    let sp = built.model.space();
    let p_nu = minimal_measure(sp, &built.base, y, nu)?;
    // The information value is defined for complete models only; the
    // minimal measure itself makes sense either way.
    let complete = is_complete(&built.model)?;
    let (with_info, without) = if complete {
        (
            Some(value_of_weak_information(&built.model, &u, x, y, nu, &built.base)?),
            Some(solve_primal(&built.model, &u, &built.base, x)?.value),
        )
    } else {
        (None, None)
    };
    let body = json!({
        "command": "weakinfo",
        "x": x,
        "complete": complete,
        "minimal_measure": report::floats(p_nu.weights().iter().copied()),
        "tv_from_base": tv_distance(&built.base, &p_nu)?,
        "value_with_information": report::opt_float(with_info),
        "value_without_information": report::opt_float(without),
        "information_value": report::opt_float(
            with_info.zip(without).map(|(a, b)| a - b)
        ),
    });
    report::write_json(&body, out)
}

fn row_json(row: &ConvergenceRow) -> Value {
    json!({
        "n": row.n,
        "tv": row.tv,
        "u_gap": report::opt_float(row.u_gap),
        "v_gap": report::opt_float(row.v_gap),
        "x_opt_gap": report::opt_float(row.x_opt_gap),
        "y_opt_gap": report::opt_float(row.y_opt_gap),
        "price_gap": report::opt_float(row.price_gap),
        "definitional": report::opt_float(row.definitional),
        "error": row.error.clone().map(Value::String).unwrap_or(Value::Null),
    })
}

/// Verdict under a caller-supplied tolerance: the trailing window must be
/// error-free with every recorded gap (and definitional slack) within it.
fn verdict_with_tolerance(rep: &ConvergenceReport, tol: f64) -> bool {
    if rep.rows.len() < VERDICT_WINDOW {
        return false;
    }
    rep.rows[rep.rows.len() - VERDICT_WINDOW..].iter().all(|row| {
        row.error.is_none()
            && row.gaps().all(|g| g < tol)
            && row.definitional.map(|d| d <= tol).unwrap_or(true)
    })
}

#[allow(clippy::too_many_arguments)]
fn stability(
    path: &Path,
    experiment: &str,
    n_max: usize,
    claim: Option<&str>,
    x: Option<f64>,
    utility: Option<&str>,
    scenario_set: Option<&str>,
    tolerance: Option<f64>,
    out: Option<&Path>,
    csv: Option<&Path>,
    plot_data: Option<&Path>,
) -> Result<(), CliError> {
    let built = model_file::load_market(path)?;
    let u = built.resolve_utility(utility)?;
    let x = x.unwrap_or(1.0);
    if n_max < 2 {
        return Err(CliError::Validation("--n-max must be at least 2".into()));
    }

    // The perturbation start is a scenario measure: the named one, or the
    // first scenario that actually moves away from the base measure.
    let start = match scenario_set {
        Some(name) => built.scenario(name)?,
        None => built
            .scenarios
            .iter()
            .find(|s| {
                tv_distance(&s.measure, &built.base).map(|d| d > 0.0).unwrap_or(false)
            })
            .ok_or_else(|| {
                CliError::Validation(
                    "no scenario with a measure different from the base measure; \
                     pass --scenario-set or add one"
                        .into(),
                )
            })?,
    };

    let mut ns: Vec<usize> = Vec::new();
    let mut k = 2usize;
    while k < n_max {
        ns.push(k);
        k = k.saturating_mul(2);
    }
    ns.push(n_max);
    let seq = MeasureSequence::mixture_at(&built.base, &start.measure, &ns)?;
    let xs = vec![x; ns.len()];

    let (rep, primary) = match experiment {
        "value" => {
            let y = solve_primal(&built.model, &u, &built.base, x)?.y_star;
            (run_value_convergence(&built.model, &u, &seq, x, y)?, "u_gap")
        }
        "optimizer" => {
            (run_optimizer_convergence(&built.model, &u, &seq, &xs, x)?, "x_opt_gap")
        }
        "price" => {
            let name = claim.ok_or_else(|| {
                CliError::Validation("--experiment price requires --claim".into())
            })?;
            let f = built.claim(name)?;
            let us = vec![u.clone(); ns.len()];
            (
                run_price_convergence(&built.model, &us, &u, &seq, &xs, x, f)?,
                "price_gap",
            )
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown experiment '{other}' (expected value, optimizer, or price)"
            )))
        }
    };

    let verdict = match tolerance {
        Some(tol) => verdict_with_tolerance(&rep, tol),
        None => rep.verdict,
    };
    let body = json!({
        "command": "stability",
        "experiment": experiment,
        "start_scenario": start.name,
        "x": x,
        "n_max": n_max,
        "rows": rep.rows.iter().map(row_json).collect::<Vec<_>>(),
        "verdict": verdict,
        "eventually_monotone": rep.eventually_monotone,
    });
    report::write_json(&body, out)?;

    if let Some(csv_path) = csv {
        let rows: Vec<Vec<String>> = rep
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    report::csv_cell(Some(r.tv)),
                    report::csv_cell(r.u_gap),
                    report::csv_cell(r.v_gap),
                    report::csv_cell(r.x_opt_gap),
                    report::csv_cell(r.y_opt_gap),
                    report::csv_cell(r.price_gap),
                ]
            })
            .collect();
        report::write_csv(
            csv_path,
            &["n", "tv", "u_gap", "v_gap", "x_opt_gap", "y_opt_gap", "price_gap"],
            &rows,
        )?;
    }
    if let Some(plot_path) = plot_data {
        let series: Vec<(f64, Option<f64>)> = rep
            .rows
            .iter()
            .map(|r| {
                let y = match primary {
                    "u_gap" => r.u_gap,
                    "x_opt_gap" => r.x_opt_gap,
                    _ => r.price_gap,
                };
                (r.n as f64, y)
            })
            .collect();
        report::write_plot(plot_path, &series)?;
    }

    if !verdict {
        return Err(CliError::Falsified(format!(
            "{experiment} sweep did not converge within tolerance by n = {n_max}"
        )));
    }
    Ok(())
}

fn counterexample(
    path: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
    plot_data: Option<&Path>,
) -> Result<(), CliError> {
    let built = model_file::load_counterexample(path)?;
    let demo = counterexample_truncation(&built.spec)?;
    let verdict = if built.expect_divergence {
        demo.diverged && demo.strictly_increasing
    } else {
        !demo.diverged
    };
    let body = json!({
        "command": "counterexample",
        "kind": built.kind,
        "expect": if built.expect_divergence { "diverges" } else { "bounded" },
        "m_values": report::floats(demo.m_values.iter().copied()),
        "values": report::floats(demo.values.iter().copied()),
        "strictly_increasing": demo.strictly_increasing,
        "divergence_ratio": report::float(demo.divergence_ratio),
        "diverged": demo.diverged,
        "overflowed": demo.overflowed,
        "verdict": verdict,
    });
    report::write_json(&body, out)?;
    if let Some(csv_path) = csv {
        let rows: Vec<Vec<String>> = demo
            .m_values
            .iter()
            .zip(&demo.values)
            .map(|(m, v)| vec![report::csv_cell(Some(*m)), report::csv_cell(Some(*v))])
            .collect();
        report::write_csv(csv_path, &["m", "value"], &rows)?;
    }
    if let Some(plot_path) = plot_data {
        let series: Vec<(f64, Option<f64>)> =
            demo.m_values.iter().zip(&demo.values).map(|(m, v)| (*m, Some(*v))).collect();
        report::write_plot(plot_path, &series)?;
    }
    if !verdict {
        let what = if built.expect_divergence {
            "expected divergence did not materialize"
        } else {
            "expected bounded sweep diverged"
        };
        return Err(CliError::Falsified(what.into()));
    }
    Ok(())
}
