//! Finite filtered probability spaces: uniform-depth event trees carrying
//! outcome labels, probability measures on the leaves, densities between
//! equivalent measures, conditional expectations, and total variation.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a probability vector. Vectors
/// violating it are rejected, never renormalized.
pub const MASS_TOL: f64 = 1e-12;

/// Node handle inside a [`FiniteFilteredSpace`]. The root is always `0`.
pub type NodeId = usize;

/// A finite event tree with all leaves at the same depth. The leaves are the
/// outcomes; interior nodes are the observable events of the filtration.
#[derive(Debug, Clone)]
pub struct FiniteFilteredSpace {
    labels: Vec<String>,
    node_names: Vec<String>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    horizon: usize,
    /// Outcome index -> leaf node.
    outcome_leaf: Vec<NodeId>,
    /// Leaf node -> outcome index.
    leaf_outcome: Vec<Option<usize>>,
    /// Node -> outcome indices of the leaves below it (sorted).
    outcomes_below: Vec<Vec<usize>>,
    fingerprint: u64,
}

impl FiniteFilteredSpace {
    /// Builds a tree from parent->child edges. Node names are free-form; the
    /// leaf names must be exactly the outcome labels, every leaf at the same
    /// depth, a unique root, and one parent per non-root node.
    pub fn from_edges(labels: &[&str], edges: &[(&str, &str)]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("at least one outcome label required".into()));
        }
        let mut seen = HashMap::new();
        for l in labels {
            if seen.insert(l.to_string(), ()).is_some() {
                return Err(Error::Invalid(format!("duplicate outcome label '{l}'")));
            }
        }
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let intern = |n: &str, names: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            *index.entry(n.to_string()).or_insert_with(|| {
                names.push(n.to_string());
                names.len() - 1
            })
        };
        let mut raw_edges = Vec::new();
        for (p, c) in edges {
            let pi = intern(p, &mut names, &mut index);
            let ci = intern(c, &mut names, &mut index);
            raw_edges.push((pi, ci));
        }
        let n = names.len();
        let mut parent_raw: Vec<Option<usize>> = vec![None; n];
        let mut children_raw: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (p, c) in raw_edges {
            if parent_raw[c].is_some() {
                return Err(Error::Invalid(format!(
                    "node '{}' has more than one parent",
                    names[c]
                )));
            }
            if p == c {
                return Err(Error::Invalid(format!("self-loop at node '{}'", names[p])));
            }
            parent_raw[c] = Some(p);
            children_raw[p].push(c);
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parent_raw[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Invalid(format!(
                "tree must have exactly one root, found {}",
                roots.len()
            )));
        }
        // Breadth-first renumbering so the root is 0 and ids are level-ordered.
        let mut order = vec![roots[0]];
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            order.extend(children_raw[cur].iter().copied());
        }
        if order.len() != n {
            return Err(Error::Invalid("edge list contains a cycle or unreachable nodes".into()));
        }
        let mut new_id = vec![0usize; n];
        for (fresh, &old) in order.iter().enumerate() {
            new_id[old] = fresh;
        }
        let node_names: Vec<String> = order.iter().map(|&o| names[o].clone()).collect();
        let parent: Vec<Option<usize>> = order
            .iter()
            .map(|&o| parent_raw[o].map(|p| new_id[p]))
            .collect();
        let children: Vec<Vec<usize>> = order
            .iter()
            .map(|&o| children_raw[o].iter().map(|&c| new_id[c]).collect())
            .collect();
        let mut depth = vec![0usize; n];
        for i in 1..n {
            depth[i] = depth[parent[i].expect("non-root has parent")] + 1;
        }
        let leaves: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
        let horizon = depth[leaves[0]];
        if horizon == 0 {
            return Err(Error::Invalid("tree must have at least one period".into()));
        }
        if leaves.iter().any(|&l| depth[l] != horizon) {
            return Err(Error::Invalid("all leaves must sit at the same depth".into()));
        }
        if leaves.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} leaves but {} outcome labels",
                leaves.len(),
                labels.len()
            )));
        }
        let mut leaf_by_name: HashMap<&str, usize> = HashMap::new();
        for &l in &leaves {
            leaf_by_name.insert(node_names[l].as_str(), l);
        }
        let mut outcome_leaf = Vec::with_capacity(labels.len());
        for l in labels {
            match leaf_by_name.get(*l) {
                Some(&node) => outcome_leaf.push(node),
                None => {
                    return Err(Error::Invalid(format!(
                        "outcome label '{l}' does not name a leaf"
                    )))
                }
            }
        }
        let mut leaf_outcome = vec![None; n];
        for (o, &l) in outcome_leaf.iter().enumerate() {
            leaf_outcome[l] = Some(o);
        }
        let mut outcomes_below: Vec<Vec<usize>> = vec![Vec::new(); n];
        for node in (0..n).rev() {
            if let Some(o) = leaf_outcome[node] {
                outcomes_below[node].push(o);
            } else {
                let mut acc = Vec::new();
                for &c in &children[node] {
                    acc.extend(outcomes_below[c].iter().copied());
                }
                acc.sort_unstable();
                outcomes_below[node] = acc;
            }
        }
        let mut hasher = DefaultHasher::new();
        labels.hash(&mut hasher);
        node_names.hash(&mut hasher);
        parent.hash(&mut hasher);
        let fingerprint = hasher.finish();
        Ok(Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            node_names,
            parent,
            children,
            depth,
            horizon,
            outcome_leaf,
            leaf_outcome,
            outcomes_below,
            fingerprint,
        })
    }

    /// One-period space: a root directly over one leaf per label.
    pub fn one_period(labels: &[&str]) -> Result<Self> {
        let edges: Vec<(&str, &str)> = labels.iter().map(|&l| ("root", l)).collect();
        Self::from_edges(labels, &edges)
    }

    pub fn outcome_count(&self) -> usize {
        self.labels.len()
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn node_name(&self, node: NodeId) -> &str {
        &self.node_names[node]
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.node_names.iter().position(|n| n == name)
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node]
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    pub fn depth(&self, node: NodeId) -> usize {
        self.depth[node]
    }

    pub fn is_terminal(&self, node: NodeId) -> bool {
        self.children[node].is_empty()
    }

    /// Nodes with children, in level order.
    pub fn nonterminal_nodes(&self) -> Vec<NodeId> {
        (0..self.node_count()).filter(|&n| !self.is_terminal(n)).collect()
    }

    /// Leaf node carrying the given outcome.
    pub fn leaf_of_outcome(&self, outcome: usize) -> NodeId {
        self.outcome_leaf[outcome]
    }

    /// Outcome carried by a leaf node, if the node is a leaf.
    pub fn outcome_of_leaf(&self, node: NodeId) -> Option<usize> {
        self.leaf_outcome[node]
    }

    /// Outcome indices of all leaves below (or at) `node`, sorted.
    pub fn outcomes_below(&self, node: NodeId) -> &[usize] {
        &self.outcomes_below[node]
    }

    /// Path of nodes from the root to the leaf of `outcome`, inclusive.
    pub fn path_to_outcome(&self, outcome: usize) -> Vec<NodeId> {
        let mut path = Vec::with_capacity(self.horizon + 1);
        let mut cur = self.outcome_leaf[outcome];
        path.push(cur);
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub(crate) fn check_same(&self, fp: u64, what: &str) -> Result<()> {
        if self.fingerprint != fp {
            return Err(Error::SpaceMismatch(format!(
                "{what} was built on a different space"
            )));
        }
        Ok(())
    }
}

impl PartialEq for FiniteFilteredSpace {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
    }
}

/// Probability measure on the outcomes of a space. Weights are kept exactly
/// as given; vectors whose mass misses 1 beyond [`MASS_TOL`] are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: Vec<f64>,
    space_fp: u64,
}

impl Measure {
    pub fn new(space: &FiniteFilteredSpace, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != space.outcome_count() {
            return Err(Error::SpaceMismatch(format!(
                "measure has {} weights for {} outcomes",
                weights.len(),
                space.outcome_count()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("measure weights must be finite and nonnegative".into()));
        }
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Invalid(format!(
                "measure mass {mass:.16e} differs from 1 beyond tolerance"
            )));
        }
        Ok(Self { weights, space_fp: space.fingerprint() })
    }

    pub fn uniform(space: &FiniteFilteredSpace) -> Self {
        let m = space.outcome_count();
        Self {
            weights: vec![1.0 / m as f64; m],
            space_fp: space.fingerprint(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, outcome: usize) -> f64 {
        self.weights[outcome]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn space_fingerprint(&self) -> u64 {
        self.space_fp
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    /// Same null sets as `other`.
    pub fn is_equivalent_to(&self, other: &Measure) -> bool {
        self.space_fp == other.space_fp
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(&a, &b)| (a > 0.0) == (b > 0.0))
    }

    /// Plain expectation of a payoff vector. Infinite payoff entries follow
    /// IEEE arithmetic; use the convention helpers in `preferences` when a
    /// one-sided extended-real sum is needed.
    pub fn expectation(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.weights.len() {
            return Err(Error::SpaceMismatch(format!(
                "payoff has {} entries for {} outcomes",
                values.len(),
                self.weights.len()
            )));
        }
        Ok(self.weights.iter().zip(values).map(|(w, v)| w * v).sum())
    }

    /// Convex mixture `(1 - t) * self + t * other`.
    pub fn mix(&self, other: &Measure, t: f64) -> Result<Measure> {
        if self.space_fp != other.space_fp {
            return Err(Error::SpaceMismatch("mixing measures on different spaces".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("mixture weight {t} outside [0, 1]")));
        }
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(&a, &b)| (1.0 - t) * a + t * b)
            .collect();
        Ok(Measure { weights, space_fp: self.space_fp })
    }

    /// Reweights by a density: `dQ = Z dP`.
    pub fn tilt(&self, z: &Density) -> Result<Measure> {
        if self.space_fp != z.space_fp {
            return Err(Error::SpaceMismatch("density built on a different space".into()));
        }
        let weights: Vec<f64> = self
            .weights
            .iter()
            .zip(&z.values)
            .map(|(&p, &zv)| p * zv)
            .collect();
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Invalid(format!(
                "tilted mass {mass:.16e} differs from 1 beyond tolerance"
            )));
        }
        Ok(Measure { weights, space_fp: self.space_fp })
    }
}

/// Radon-Nikodym density dQ/dP between equivalent measures on one space.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    values: Vec<f64>,
    space_fp: u64,
}

impl Density {
    /// Per-outcome values, nonnegative, with unit mean under the base. The
    /// base weights must be supplied so the normalization can be certified.
    pub fn new(space: &FiniteFilteredSpace, base: &Measure, values: Vec<f64>) -> Result<Self> {
        base.require_space(space)?;
        if values.len() != space.outcome_count() {
            return Err(Error::SpaceMismatch("density length mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("density values must be finite and nonnegative".into()));
        }
        let mean: f64 = base.weights().iter().zip(&values).map(|(p, z)| p * z).sum();
        if (mean - 1.0).abs() > MASS_TOL {
            return Err(Error::Invalid(format!(
                "density mean {mean:.16e} under the base differs from 1"
            )));
        }
        Ok(Self { values, space_fp: space.fingerprint() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, outcome: usize) -> f64 {
        self.values[outcome]
    }

    pub fn space_fingerprint(&self) -> u64 {
        self.space_fp
    }
}

impl Measure {
    pub(crate) fn require_space(&self, space: &FiniteFilteredSpace) -> Result<()> {
        space.check_same(self.space_fp, "measure")
    }
}

/// dQ/dP for equivalent measures. Atoms that are null under both measures get
/// density 1 by convention; a support mismatch is an equivalence violation.
pub fn density(space: &FiniteFilteredSpace, p: &Measure, q: &Measure) -> Result<Density> {
    p.require_space(space)?;
    q.require_space(space)?;
    if !p.is_equivalent_to(q) {
        return Err(Error::EquivalenceViolation(
            "measures have different null sets".into(),
        ));
    }
    let values: Vec<f64> = p
        .weights
        .iter()
        .zip(&q.weights)
        .map(|(&pw, &qw)| if pw > 0.0 { qw / pw } else { 1.0 })
        .collect();
    Density::new(space, p, values)
}

/// Total variation distance `sup_A |P(A) - Q(A)| = (1/2) sum |p - q|`.
pub fn tv_distance(p: &Measure, q: &Measure) -> Result<f64> {
    if p.space_fp != q.space_fp {
        return Err(Error::SpaceMismatch("total variation across spaces".into()));
    }
    Ok(0.5 * p.weights.iter().zip(&q.weights).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Conditional expectation of a terminal payoff given the event at `node`.
/// Errors with `DegenerateConditioning` when the node carries no mass.
pub fn conditional_expectation(
    space: &FiniteFilteredSpace,
    p: &Measure,
    values: &[f64],
    node: NodeId,
) -> Result<f64> {
    p.require_space(space)?;
    if values.len() != space.outcome_count() {
        return Err(Error::SpaceMismatch("payoff length mismatch".into()));
    }
    if node >= space.node_count() {
        return Err(Error::Invalid(format!("node {node} out of range")));
    }
    let mut mass = 0.0;
    let mut acc = 0.0;
    for &o in space.outcomes_below(node) {
        mass += p.weight(o);
        acc += p.weight(o) * values[o];
    }
    if mass <= 0.0 {
        return Err(Error::DegenerateConditioning(format!(
            "node '{}' has zero probability",
            space.node_name(node)
        )));
    }
    Ok(acc / mass)
}
