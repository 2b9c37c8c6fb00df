//! JSON model files: schema structs, validation, and construction of the
//! library objects they describe. Everything is keyed by name (outcome
//! labels, node names, claim names) so a file is self-describing, and all
//! maps are BTreeMaps so ingestion order is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use weakinfo::market::{ClaimVector, MarketModel};
use weakinfo::preferences::{Family, OutcomeUtility, UtilityField};
use weakinfo::pricing::Scenario;
use weakinfo::prob_space::{FiniteFilteredSpace, Measure};
use weakinfo::stability::{GaussianGridSpec, TruncationSpec};
use weakinfo::weak_info::{Law, RandomElement};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceBlock {
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub edges: Option<Vec<(String, String)>>,
    pub horizon: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityBlock {
    pub family: String,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub a: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub b: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakInfoBlock {
    pub labels: BTreeMap<String, String>,
    pub nu: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    pub name: String,
    pub x: f64,
    #[serde(default)]
    pub utility: Option<UtilityBlock>,
    #[serde(default)]
    pub measure: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketFileRaw {
    pub space: SpaceBlock,
    pub base_measure: BTreeMap<String, f64>,
    pub assets: Vec<BTreeMap<String, f64>>,
    #[serde(default)]
    pub utility: Option<UtilityBlock>,
    #[serde(default)]
    pub claims: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub weak_info: Option<WeakInfoBlock>,
    #[serde(default)]
    pub scenarios: Vec<ScenarioBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleBlock {
    pub kind: String,
    pub n: usize,
    #[serde(default)]
    pub series_terms: Option<usize>,
    #[serde(default)]
    pub power_p: Option<f64>,
    #[serde(default)]
    pub mu_over_sigma: Option<f64>,
    pub m_values: Vec<f64>,
    pub nodes: usize,
    pub expect: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleFileRaw {
    pub counterexample: CounterexampleBlock,
}

/// A fully validated market file with every referenced object built.
pub struct BuiltModel {
    pub model: MarketModel,
    pub base: Measure,
    pub utility: Option<UtilityField>,
    pub claims: BTreeMap<String, ClaimVector>,
    pub weak_info: Option<(RandomElement, Law)>,
    pub scenarios: Vec<Scenario>,
}

/// A fully validated counterexample sweep file.
pub struct BuiltCounterexample {
    pub spec: TruncationSpec,
    pub kind: String,
    pub expect_divergence: bool,
}

pub enum LoadedFile {
    Market(Box<BuiltModel>),
    Counterexample(BuiltCounterexample),
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn load(path: &Path) -> Result<LoadedFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read '{}': {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("'{}' is not valid JSON: {e}", path.display())))?;
    if value.get("counterexample").is_some() {
        let raw: CounterexampleFileRaw = serde_json::from_value(value)
            .map_err(|e| invalid(format!("'{}': {e}", path.display())))?;
        Ok(LoadedFile::Counterexample(build_counterexample(raw.counterexample)?))
    } else {
        let raw: MarketFileRaw = serde_json::from_value(value)
            .map_err(|e| invalid(format!("'{}': {e}", path.display())))?;
        Ok(LoadedFile::Market(Box::new(build_market(raw)?)))
    }
}

/// Loads a market file, rejecting counterexample specs.
pub fn load_market(path: &Path) -> Result<BuiltModel, CliError> {
    match load(path)? {
        LoadedFile::Market(m) => Ok(*m),
        LoadedFile::Counterexample(_) => Err(invalid(format!(
            "'{}' is a counterexample spec, not a market model",
            path.display()
        ))),
    }
}

/// Loads a counterexample spec, rejecting market files.
pub fn load_counterexample(path: &Path) -> Result<BuiltCounterexample, CliError> {
    match load(path)? {
        LoadedFile::Counterexample(c) => Ok(c),
        LoadedFile::Market(_) => Err(invalid(format!(
            "'{}' is a market model, not a counterexample spec",
            path.display()
        ))),
    }
}

fn build_space(block: &SpaceBlock) -> Result<FiniteFilteredSpace, CliError> {
    let labels: Vec<&str> = block.outcomes.iter().map(|s| s.as_str()).collect();
    let space = match &block.edges {
        Some(edges) => {
            let refs: Vec<(&str, &str)> =
                edges.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
            FiniteFilteredSpace::from_edges(&labels, &refs)?
        }
        None => {
            if block.horizon != 1 {
                return Err(invalid(
                    "space without edges must have horizon 1 (one root over the outcomes)",
                ));
            }
            FiniteFilteredSpace::one_period(&labels)?
        }
    };
    if space.horizon() != block.horizon {
        return Err(invalid(format!(
            "declared horizon {} but the edges build a depth-{} tree",
            block.horizon,
            space.horizon()
        )));
    }
    Ok(space)
}

/// Reads a by-outcome map into outcome order, demanding an exact key set.
fn by_outcome(
    space: &FiniteFilteredSpace,
    map: &BTreeMap<String, f64>,
    what: &str,
) -> Result<Vec<f64>, CliError> {
    for key in map.keys() {
        if !space.labels().iter().any(|l| l == key) {
            return Err(invalid(format!("{what} references unknown outcome '{key}'")));
        }
    }
    space
        .labels()
        .iter()
        .map(|l| {
            map.get(l)
                .copied()
                .ok_or_else(|| invalid(format!("{what} is missing outcome '{l}'")))
        })
        .collect()
}

fn build_measure(
    space: &FiniteFilteredSpace,
    map: &BTreeMap<String, f64>,
    what: &str,
) -> Result<Measure, CliError> {
    let weights = by_outcome(space, map, what)?;
    Ok(Measure::new(space, weights)?)
}

fn build_utility(
    space: &FiniteFilteredSpace,
    block: &UtilityBlock,
    what: &str,
) -> Result<UtilityField, CliError> {
    let family = match block.family.as_str() {
        "log" => {
            if block.p.is_some() {
                return Err(invalid(format!("{what}: log utility takes no exponent p")));
            }
            Family::Log
        }
        "power" => {
            let p = block
                .p
                .ok_or_else(|| invalid(format!("{what}: power utility requires p")))?;
            Family::Power(p)
        }
        other => {
            return Err(invalid(format!(
                "{what}: unknown family '{other}' (expected 'log' or 'power')"
            )))
        }
    };
    let slopes = match &block.a {
        Some(map) => by_outcome(space, map, &format!("{what} slopes a"))?,
        None => vec![1.0; space.outcome_count()],
    };
    let shifts = match &block.b {
        Some(map) => by_outcome(space, map, &format!("{what} shifts b"))?,
        None => vec![0.0; space.outcome_count()],
    };
    let parts = slopes
        .iter()
        .zip(&shifts)
        .map(|(&a, &b)| OutcomeUtility::new(family, a, b))
        .collect::<weakinfo::Result<Vec<_>>>()?;
    Ok(UtilityField::from_parts(parts)?)
}

/// Parses a `--utility` flag value: `log`, or `power:<p>`.
pub fn utility_from_flag(spec: &str, space: &FiniteFilteredSpace) -> Result<UtilityField, CliError> {
    if spec == "log" {
        return Ok(UtilityField::log(space.outcome_count()));
    }
    if let Some(p_text) = spec.strip_prefix("power:") {
        let p: f64 = p_text
            .parse()
            .map_err(|_| invalid(format!("cannot parse power exponent '{p_text}'")))?;
        return Ok(UtilityField::power(space.outcome_count(), p)?);
    }
    Err(invalid(format!(
        "unknown utility '{spec}' (expected 'log' or 'power:<p>')"
    )))
}

fn build_market(raw: MarketFileRaw) -> Result<BuiltModel, CliError> {
    let space = build_space(&raw.space)?;
    let base = build_measure(&space, &raw.base_measure, "base_measure")?;

    if raw.assets.is_empty() {
        return Err(invalid("at least one asset price map is required"));
    }
    let node_names: BTreeSet<&str> =
        (0..space.node_count()).map(|n| space.node_name(n)).collect();
    let mut prices = Vec::with_capacity(raw.assets.len());
    for (a, map) in raw.assets.iter().enumerate() {
        for key in map.keys() {
            if !node_names.contains(key.as_str()) {
                return Err(invalid(format!("asset {a} references unknown node '{key}'")));
            }
        }
        let series = (0..space.node_count())
            .map(|n| {
                map.get(space.node_name(n)).copied().ok_or_else(|| {
                    invalid(format!("asset {a} is missing node '{}'", space.node_name(n)))
                })
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        prices.push(series);
    }
    let model = MarketModel::new(space.clone(), prices)?;

    let utility = raw
        .utility
        .as_ref()
        .map(|block| build_utility(&space, block, "utility"))
        .transpose()?;

    let mut claims = BTreeMap::new();
    for (name, payoff_map) in &raw.claims {
        let payoff = by_outcome(&space, payoff_map, &format!("claim '{name}'"))?;
        claims.insert(name.clone(), ClaimVector::new(&space, payoff)?);
    }

    let weak_info = match &raw.weak_info {
        Some(block) => {
            for key in block.labels.keys() {
                if !space.labels().iter().any(|l| l == key) {
                    return Err(invalid(format!(
                        "weak_info labels reference unknown outcome '{key}'"
                    )));
                }
            }
            let labels = space
                .labels()
                .iter()
                .map(|l| {
                    block.labels.get(l).cloned().ok_or_else(|| {
                        invalid(format!("weak_info labels are missing outcome '{l}'"))
                    })
                })
                .collect::<Result<Vec<String>, CliError>>()?;
            let used: BTreeSet<&str> = labels.iter().map(|s| s.as_str()).collect();
            for key in block.nu.keys() {
                if !used.contains(key.as_str()) {
                    return Err(invalid(format!(
                        "weak_info nu references label '{key}' that no outcome carries"
                    )));
                }
            }
            for label in &used {
                if !block.nu.contains_key(*label) {
                    return Err(invalid(format!(
                        "weak_info nu is missing a weight for label '{label}'"
                    )));
                }
            }
            let y = RandomElement::new(&space, labels)?;
            let pairs: Vec<(&str, f64)> =
                block.nu.iter().map(|(k, &v)| (k.as_str(), v)).collect();
            let nu = Law::from_pairs(&pairs)?;
            Some((y, nu))
        }
        None => None,
    };

    let mut scenarios = Vec::with_capacity(raw.scenarios.len());
    let mut seen = BTreeSet::new();
    for block in &raw.scenarios {
        if !seen.insert(block.name.as_str()) {
            return Err(invalid(format!("duplicate scenario name '{}'", block.name)));
        }
        if !(block.x.is_finite() && block.x > 0.0) {
            return Err(invalid(format!(
                "scenario '{}' has nonpositive capital x = {}",
                block.name, block.x
            )));
        }
        let scenario_utility = match &block.utility {
            Some(u) => build_utility(&space, u, &format!("scenario '{}' utility", block.name))?,
            None => utility.clone().ok_or_else(|| {
                invalid(format!(
                    "scenario '{}' has no utility and the file declares no default",
                    block.name
                ))
            })?,
        };
        let measure = match &block.measure {
            Some(m) => build_measure(&space, m, &format!("scenario '{}' measure", block.name))?,
            None => base.clone(),
        };
        scenarios.push(Scenario {
            name: block.name.clone(),
            x: block.x,
            utility: scenario_utility,
            measure,
        });
    }

    Ok(BuiltModel { model, base, utility, claims, weak_info, scenarios })
}

fn build_counterexample(block: CounterexampleBlock) -> Result<BuiltCounterexample, CliError> {
    let expect_divergence = match block.expect.as_str() {
        "diverges" => true,
        "bounded" => false,
        other => {
            return Err(invalid(format!(
                "unknown expectation '{other}' (expected 'diverges' or 'bounded')"
            )))
        }
    };
    let grid = GaussianGridSpec::new(block.m_values.clone(), block.nodes)?;
    let spec = match block.kind.as_str() {
        "utility-series" => {
            let terms = block.series_terms.ok_or_else(|| {
                invalid("utility-series counterexample requires series_terms")
            })?;
            if block.power_p.is_some() || block.mu_over_sigma.is_some() {
                return Err(invalid(
                    "utility-series counterexample takes no power_p or mu_over_sigma",
                ));
            }
            TruncationSpec::utility_series(block.n, terms, grid)
        }
        "dual-moment" => {
            let p = block
                .power_p
                .ok_or_else(|| invalid("dual-moment counterexample requires power_p"))?;
            let ratio = block.mu_over_sigma.ok_or_else(|| {
                invalid("dual-moment counterexample requires mu_over_sigma")
            })?;
            if block.series_terms.is_some() {
                return Err(invalid("dual-moment counterexample takes no series_terms"));
            }
            TruncationSpec::dual_moment(p, ratio, block.n, grid)
        }
        other => {
            return Err(invalid(format!(
                "unknown counterexample kind '{other}' (expected 'utility-series' or 'dual-moment')"
            )))
        }
    };
    Ok(BuiltCounterexample { spec, kind: block.kind, expect_divergence })
}

impl BuiltModel {
    pub fn claim(&self, name: &str) -> Result<&ClaimVector, CliError> {
        self.claims.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.claims.keys().map(|s| s.as_str()).collect();
            invalid(format!(
                "unknown claim '{name}' (model defines: {})",
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            ))
        })
    }

    pub fn scenario(&self, name: &str) -> Result<&Scenario, CliError> {
        self.scenarios.iter().find(|s| s.name == name).ok_or_else(|| {
            invalid(format!("unknown scenario '{name}'"))
        })
    }

    /// Utility for single-solve commands: the flag wins, then the file-level
    /// default.
    pub fn resolve_utility(&self, flag: Option<&str>) -> Result<UtilityField, CliError> {
        match flag {
            Some(spec) => utility_from_flag(spec, self.model.space()),
            None => self.utility.clone().ok_or_else(|| {
                invalid("no --utility given and the model file declares none")
            }),
        }
    }
}
