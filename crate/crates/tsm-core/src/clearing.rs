//! Hierarchical clearing. Three routes produce the same [`ClearingOutcome`]
//! shape:
//!
//! * [`clear_monolithic`] solves one LP holding every level's interface row
//!   `Σ_children x_child,s ≥ x_parent,s`, so each aggregator's internal price
//!   is the dual of its own row.
//! * [`clear_sequential`] builds aggregate supply curves bottom-up by
//!   concatenating children's merit-order segments, clears the top, and
//!   cascades awards down with [`merit_order_clear`] at every aggregator.
//!   Box-only trees.
//! * [`clear_flat`] pools all leaves into one market under the root; used as
//!   the reference for efficiency and price checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{merit_order_clear, solve_lp, verify_kkt, KktReport, LpProblem, LpSolution, LpStatus};
use crate::model::{
    validate_tree, DiagnosticKind, LinearConstraint, LocalVar, MarketNode, MarketTree, NodeBody,
    ServiceId, ServiceSet, TopMarket,
};
use crate::settlement::num;

/// Tolerance used when attaching a KKT report to LP-based outcomes.
pub const KKT_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClearingMode {
    Monolithic,
    Sequential,
    Flat,
}

impl fmt::Display for ClearingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClearingMode::Monolithic => "monolithic",
            ClearingMode::Sequential => "sequential",
            ClearingMode::Flat => "flat",
        })
    }
}

impl std::str::FromStr for ClearingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolithic" => Ok(ClearingMode::Monolithic),
            "sequential" => Ok(ClearingMode::Sequential),
            "flat" => Ok(ClearingMode::Flat),
            _ => Err(Error::Config(format!("unknown clearing mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Root,
    Aggregator,
    Leaf,
}

/// Clearing result for one node of the tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeClearing {
    pub name: String,
    pub parent: Option<String>,
    pub depth: u32,
    pub role: NodeRole,
    /// Quantity sold to the parent market (for the root: the quantity the
    /// top market takes).
    pub award: BTreeMap<ServiceId, f64>,
    /// Prices of the market this node runs (aggregators and root only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prices: BTreeMap<ServiceId, f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub degenerate: BTreeSet<ServiceId>,
    /// Leaves: `c_s · x_s` per service.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub service_cost: BTreeMap<ServiceId, f64>,
    /// Leaves: cost carried by auxiliary variables.
    #[serde(default)]
    pub aux_cost: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, f64>,
}

impl NodeClearing {
    pub fn own_cost(&self) -> f64 {
        self.service_cost.values().sum::<f64>() + self.aux_cost
    }
}

/// Awards and prices of one market level `l`: the prices `λ^l` of every
/// market run at that level and the awards `x^{l-1}` of their participants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub level: u32,
    /// Participant → service → award.
    pub awards: BTreeMap<String, BTreeMap<ServiceId, f64>>,
    /// Market (aggregator) → service → price.
    pub prices: BTreeMap<String, BTreeMap<ServiceId, f64>>,
    pub degenerate: BTreeMap<String, BTreeSet<ServiceId>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClearingOutcome {
    pub mode: ClearingMode,
    pub levels: u32,
    pub price_taker: bool,
    /// Total leaf cost `Σ c x` over the hierarchy.
    pub objective: f64,
    /// Nodes in pre-order, root first.
    pub nodes: Vec<NodeClearing>,
    /// Levels from `L` down to 1.
    pub per_level: Vec<LevelOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt: Option<KktReport>,
}

impl ClearingOutcome {
    pub fn node(&self, name: &str) -> Option<&NodeClearing> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn root(&self) -> &NodeClearing {
        &self.nodes[0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &NodeClearing> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Leaf)
    }

    /// Quantity of `s` dispatched at leaf `name`.
    pub fn dispatch(&self, name: &str, s: ServiceId) -> f64 {
        self.node(name)
            .and_then(|n| n.award.get(&s))
            .copied()
            .unwrap_or(0.0)
    }

    /// Price a node is paid for `s`: the price of its parent's market.
    pub fn price_paid(&self, name: &str, s: ServiceId) -> Option<f64> {
        let parent = self.node(name)?.parent.as_deref()?;
        self.node(parent)?.prices.get(&s).copied()
    }

    /// Whether the price a node is paid for `s` is flagged non-unique.
    pub fn paid_price_degenerate(&self, name: &str, s: ServiceId) -> bool {
        self.node(name)
            .and_then(|n| n.parent.as_deref())
            .and_then(|p| self.node(p))
            .is_some_and(|p| p.degenerate.contains(&s))
    }

    pub fn top_prices(&self) -> &BTreeMap<ServiceId, f64> {
        &self.root().prices
    }

    pub fn is_degenerate(&self) -> bool {
        self.nodes.iter().any(|n| !n.degenerate.is_empty())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV, one row per (node, service):
    /// `level,market,node,service,award,price,degenerate`. The root's row has
    /// market `top` and level `L + 1`.
    pub fn to_csv(&self, services: &ServiceSet) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["level", "market", "node", "service", "award", "price", "degenerate"])?;
        for n in &self.nodes {
            let (level, market, market_node) = match n.parent.as_deref() {
                Some(p) => {
                    let parent = self.node(p).expect("parent is part of the outcome");
                    (self.levels.saturating_sub(parent.depth), p, parent)
                }
                None => (self.levels + 1, "top", n),
            };
            for (s, q) in &n.award {
                let price = market_node.prices.get(s).copied();
                w.write_record([
                    level.to_string(),
                    market.to_string(),
                    n.name.clone(),
                    services.label(*s).to_string(),
                    num(*q),
                    price.map(num).unwrap_or_default(),
                    market_node.degenerate.contains(s).to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// A clearing LP together with the map from tree entities to LP indices.
#[derive(Clone, Debug)]
pub struct ClearingLp {
    pub problem: LpProblem,
    pub row_labels: Vec<String>,
    /// `(node, service)` → award variable (leaves and aggregators).
    pub service_vars: BTreeMap<(String, ServiceId), usize>,
    pub aux_vars: BTreeMap<(String, String), usize>,
    /// `(market node, service)` → interface or demand row.
    pub market_rows: BTreeMap<(String, ServiceId), usize>,
    pub mode: ClearingMode,
}

impl ClearingLp {
    pub fn var(&self, node: &str, var: &LocalVar) -> Option<usize> {
        match var {
            LocalVar::Service(s) => self.service_vars.get(&(node.to_string(), *s)).copied(),
            LocalVar::Aux(a) => self.aux_vars.get(&(node.to_string(), a.clone())).copied(),
        }
    }
}

/// Builds the LP for `mode` (monolithic or flat).
pub fn build_clearing_lp(tree: &MarketTree, mode: ClearingMode) -> Result<ClearingLp> {
    let mut b = ClearingLp {
        problem: LpProblem::new(0),
        row_labels: Vec::new(),
        service_vars: BTreeMap::new(),
        aux_vars: BTreeMap::new(),
        market_rows: BTreeMap::new(),
        mode,
    };
    let top_price = |s: ServiceId| match &tree.top {
        TopMarket::PriceTaker(p) => p.get(&s).copied().unwrap_or(0.0),
        TopMarket::Demand(_) => 0.0,
    };

    // Leaf variables and private constraints.
    let flat = mode == ClearingMode::Flat;
    let root_children: BTreeSet<&str> = tree.root.children().iter().map(|c| c.name.as_str()).collect();
    for (name, r) in tree.leaves() {
        let direct = flat || root_children.contains(name);
        for s in r.services() {
            let mut cost = r.cost(s);
            if direct {
                cost -= top_price(s);
            }
            let j = b.problem.add_var(cost, r.floor(s), r.cap(s));
            b.service_vars.insert((name.to_string(), s), j);
        }
        for a in &r.aux {
            let j = b.problem.add_var(a.cost, a.lo, a.hi);
            b.aux_vars.insert((name.to_string(), a.name.clone()), j);
        }
        for c in &r.private_constraints {
            add_constraint(&mut b, c, Some(name), name)?;
        }
    }

    let root_services = || {
        let mut s = tree.root.offered_services();
        if let TopMarket::Demand(d) = &tree.top {
            s.extend(d.keys().copied());
        }
        s
    };
    if flat {
        let services = if tree.top.is_price_taker() {
            BTreeSet::new()
        } else {
            root_services()
        };
        add_market_rows(&mut b, tree, &tree.root.name, &tree.leaf_names(), &services)?;
        for c in tree.root.public_constraints() {
            add_constraint(&mut b, c, None, &tree.root.name)?;
        }
        return Ok(b);
    }

    // Aggregator award variables (non-root), post-order so children exist.
    fn add_awards(
        b: &mut ClearingLp,
        node: &MarketNode,
        is_root: bool,
        root_child: bool,
        top_price: &dyn Fn(ServiceId) -> f64,
    ) {
        for c in node.children() {
            add_awards(b, c, false, is_root, top_price);
        }
        if node.is_leaf() || is_root {
            return;
        }
        let floors = node.supply_floors();
        let caps = node.bid_caps().cloned().unwrap_or_default();
        for s in node.offered_services() {
            let cost = if root_child { -top_price(s) } else { 0.0 };
            let lo = floors.get(&s).copied().unwrap_or(0.0);
            let hi = caps.get(&s).copied().unwrap_or(f64::INFINITY).max(lo);
            let j = b.problem.add_var(cost, lo, hi);
            b.service_vars.insert((node.name.clone(), s), j);
        }
    }
    add_awards(&mut b, &tree.root, true, false, &top_price);

    for (node, _) in tree.root.walk(0) {
        if node.is_leaf() {
            continue;
        }
        let is_root = node.name == tree.root.name;
        if !(is_root && tree.top.is_price_taker()) {
            let children: Vec<&str> = node.children().iter().map(|c| c.name.as_str()).collect();
            let services = if is_root {
                root_services()
            } else {
                node.offered_services()
            };
            add_market_rows(&mut b, tree, &node.name, &children, &services)?;
        }
        for c in node.public_constraints() {
            add_constraint(&mut b, c, None, &node.name)?;
        }
    }
    Ok(b)
}

fn add_market_rows(
    b: &mut ClearingLp,
    tree: &MarketTree,
    market: &str,
    participants: &[&str],
    services: &BTreeSet<ServiceId>,
) -> Result<()> {
    let is_root = market == tree.root.name;
    for &s in services {
        let mut terms: Vec<(usize, f64)> = participants
            .iter()
            .filter_map(|p| b.service_vars.get(&(p.to_string(), s)).map(|&j| (j, 1.0)))
            .collect();
        let rhs = if is_root {
            tree.top.demand(s)
        } else {
            let own = b
                .service_vars
                .get(&(market.to_string(), s))
                .copied()
                .ok_or_else(|| Error::DanglingReference(format!("no award variable for `{market}`")))?;
            terms.push((own, -1.0));
            0.0
        };
        let row = b.problem.add_row(terms, crate::model::Sense::Ge, rhs);
        b.row_labels
            .push(format!("market {market} / {}", tree.services.label(s)));
        b.market_rows.insert((market.to_string(), s), row);
    }
    Ok(())
}

fn add_constraint(
    b: &mut ClearingLp,
    c: &LinearConstraint,
    owner: Option<&str>,
    declared_at: &str,
) -> Result<()> {
    let mut terms = Vec::with_capacity(c.terms.len());
    for t in &c.terms {
        let node = t
            .node
            .as_deref()
            .or(owner)
            .ok_or_else(|| Error::DanglingReference(format!("term without owner in `{}`", c.label)))?;
        let j = b.var(node, &t.var).ok_or_else(|| {
            Error::DanglingReference(format!(
                "constraint `{}` of `{declared_at}` references {:?} of `{node}`",
                c.label, t.var
            ))
        })?;
        terms.push((j, t.coef));
    }
    b.problem.add_row(terms, c.sense, c.rhs);
    b.row_labels.push(format!("{declared_at}: {}", c.label));
    Ok(())
}

pub fn clear_monolithic(tree: &MarketTree) -> Result<ClearingOutcome> {
    clear_lp(tree, ClearingMode::Monolithic)
}

pub fn clear_flat(tree: &MarketTree) -> Result<ClearingOutcome> {
    clear_lp(tree, ClearingMode::Flat)
}

pub fn clear(tree: &MarketTree, mode: ClearingMode) -> Result<ClearingOutcome> {
    match mode {
        ClearingMode::Sequential => clear_sequential(tree),
        m => clear_lp(tree, m),
    }
}

fn infeasible_error(tree: &MarketTree, lp: &ClearingLp, sol: &LpSolution) -> Error {
    let shortfalls: Vec<String> = validate_tree(tree)
        .into_iter()
        .filter(|d| d.kind == DiagnosticKind::InfeasibleDemand)
        .map(|d| d.message)
        .collect();
    if !shortfalls.is_empty() {
        return Error::Infeasible(format!("level {}: {}", tree.levels, shortfalls.join("; ")));
    }
    let mut rows: Vec<(usize, f64)> = sol
        .certificate
        .iter()
        .flatten()
        .enumerate()
        .filter(|(_, y)| y.abs() > 1e-9)
        .map(|(i, y)| (i, y.abs()))
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    let names: Vec<&str> = rows
        .iter()
        .take(4)
        .map(|(i, _)| lp.row_labels[*i].as_str())
        .collect();
    Error::Infeasible(format!("conflicting rows: {}", names.join(", ")))
}

fn clear_lp(tree: &MarketTree, mode: ClearingMode) -> Result<ClearingOutcome> {
    let lp = build_clearing_lp(tree, mode)?;
    let sol = solve_lp(&lp.problem)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(infeasible_error(tree, &lp, &sol)),
        LpStatus::Unbounded => {
            return Err(Error::Unbounded(
                "clearing objective is unbounded (negative top prices with free disposal?)".into(),
            ))
        }
    }
    debug!(
        "{mode} clearing: {} vars, {} rows, {} iterations",
        lp.problem.num_vars,
        lp.problem.constraints.len(),
        sol.iterations
    );
    let kkt = verify_kkt(&lp.problem, &sol, KKT_TOL);
    let value = |node: &str, s: ServiceId| {
        lp.service_vars
            .get(&(node.to_string(), s))
            .map(|&j| sol.primal[j])
    };

    let flat = mode == ClearingMode::Flat;
    let shape = if flat { flat_shape(tree) } else { tree.root.clone() };
    let mut nodes = Vec::new();
    let parents = parents_of(&shape);
    for (node, depth) in shape.walk(0) {
        let is_root = depth == 0;
        let mut nc = NodeClearing {
            name: node.name.clone(),
            parent: parents.get(node.name.as_str()).cloned(),
            depth,
            role: if is_root {
                NodeRole::Root
            } else if node.is_leaf() {
                NodeRole::Leaf
            } else {
                NodeRole::Aggregator
            },
            award: BTreeMap::new(),
            prices: BTreeMap::new(),
            degenerate: BTreeSet::new(),
            service_cost: BTreeMap::new(),
            aux_cost: 0.0,
            aux: BTreeMap::new(),
        };
        if let NodeBody::Leaf(r) = &node.body {
            for s in r.services() {
                let x = value(&node.name, s).unwrap_or(0.0);
                nc.award.insert(s, x);
                nc.service_cost.insert(s, r.cost(s) * x);
            }
            for a in &r.aux {
                let j = lp.aux_vars[&(node.name.clone(), a.name.clone())];
                nc.aux.insert(a.name.clone(), sol.primal[j]);
                nc.aux_cost += a.cost * sol.primal[j];
            }
        } else if !is_root {
            for s in node.offered_services() {
                nc.award.insert(s, value(&node.name, s).unwrap_or(0.0));
            }
        }
        if !node.is_leaf() {
            for ((market, s), &row) in lp.market_rows.range((node.name.clone(), ServiceId(0))..) {
                if market != &node.name {
                    break;
                }
                nc.prices.insert(*s, sol.duals[row]);
                if sol.degenerate_rows[row] {
                    nc.degenerate.insert(*s);
                }
            }
        }
        nodes.push(nc);
    }
    finish_root(tree, &mut nodes);
    let objective = nodes.iter().map(NodeClearing::own_cost).sum();
    Ok(assemble(tree, mode, nodes, objective, Some(kkt)))
}

/// Root node's award is what the top market takes; in price-taking mode the
/// root's prices are the exogenous ones.
fn finish_root(tree: &MarketTree, nodes: &mut [NodeClearing]) {
    let root_name = nodes[0].name.clone();
    let mut taken: BTreeMap<ServiceId, f64> = BTreeMap::new();
    for n in nodes.iter().filter(|n| n.parent.as_deref() == Some(root_name.as_str())) {
        for (s, q) in &n.award {
            *taken.entry(*s).or_insert(0.0) += q;
        }
    }
    let root = &mut nodes[0];
    match &tree.top {
        TopMarket::Demand(d) => {
            root.award = d.clone();
        }
        TopMarket::PriceTaker(p) => {
            root.award = taken;
            root.prices = root
                .award
                .keys()
                .map(|s| (*s, p.get(s).copied().unwrap_or(0.0)))
                .collect();
            root.degenerate.clear();
        }
    }
}

fn flat_shape(tree: &MarketTree) -> MarketNode {
    let leaves = tree
        .root
        .walk(0)
        .into_iter()
        .filter(|(n, _)| n.is_leaf())
        .map(|(n, _)| n.clone())
        .collect();
    MarketNode::aggregator(tree.root.name.clone(), leaves)
        .with_public_constraints(tree.root.public_constraints().to_vec())
}

fn parents_of(root: &MarketNode) -> BTreeMap<&str, String> {
    let mut out = BTreeMap::new();
    for (n, _) in root.walk(0) {
        for c in n.children() {
            out.insert(c.name.as_str(), n.name.clone());
        }
    }
    out
}

fn assemble(
    tree: &MarketTree,
    mode: ClearingMode,
    nodes: Vec<NodeClearing>,
    objective: f64,
    kkt: Option<KktReport>,
) -> ClearingOutcome {
    let levels = if mode == ClearingMode::Flat { 1 } else { tree.levels };
    let mut per_level: Vec<LevelOutcome> = (1..=levels)
        .rev()
        .map(|level| LevelOutcome {
            level,
            ..LevelOutcome::default()
        })
        .collect();
    let depth_of: BTreeMap<&str, u32> = nodes.iter().map(|n| (n.name.as_str(), n.depth)).collect();
    for n in &nodes {
        if n.role != NodeRole::Leaf {
            let level = levels.saturating_sub(n.depth);
            if let Some(lo) = per_level.iter_mut().find(|l| l.level == level) {
                lo.prices.insert(n.name.clone(), n.prices.clone());
                if !n.degenerate.is_empty() {
                    lo.degenerate.insert(n.name.clone(), n.degenerate.clone());
                }
            }
        }
        if let Some(p) = &n.parent {
            let level = levels.saturating_sub(depth_of[p.as_str()]);
            if let Some(lo) = per_level.iter_mut().find(|l| l.level == level) {
                lo.awards.insert(n.name.clone(), n.award.clone());
            }
        }
    }
    ClearingOutcome {
        mode,
        levels,
        price_taker: tree.top.is_price_taker(),
        objective,
        nodes,
        per_level,
        kkt,
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    cost: f64,
    cap: f64,
    /// Child of the clearing aggregator the segment belongs to.
    child: usize,
}

/// Requires every leaf to be a pure box and no aggregator to carry public
/// constraints or bid caps.
pub fn clear_sequential(tree: &MarketTree) -> Result<ClearingOutcome> {
    for (node, _) in tree.root.walk(0) {
        match &node.body {
            NodeBody::Leaf(r) if !r.is_box() => {
                return Err(Error::UnsupportedConstraints(format!(
                    "leaf `{}` has private constraints or auxiliary variables",
                    node.name
                )))
            }
            NodeBody::Aggregator {
                public_constraints,
                bid_caps,
                ..
            } if !public_constraints.is_empty() || !bid_caps.is_empty() => {
                return Err(Error::UnsupportedConstraints(format!(
                    "aggregator `{}` has public constraints or bid caps",
                    node.name
                )))
            }
            _ => {}
        }
    }

    let parents = parents_of(&tree.root);

    let mut nodes: Vec<NodeClearing> = tree
        .root
        .walk(0)
        .into_iter()
        .map(|(n, depth)| NodeClearing {
            name: n.name.clone(),
            parent: parents.get(n.name.as_str()).cloned(),
            depth,
            role: if depth == 0 {
                NodeRole::Root
            } else if n.is_leaf() {
                NodeRole::Leaf
            } else {
                NodeRole::Aggregator
            },
            award: BTreeMap::new(),
            prices: BTreeMap::new(),
            degenerate: BTreeSet::new(),
            service_cost: BTreeMap::new(),
            aux_cost: 0.0,
            aux: BTreeMap::new(),
        })
        .collect();
    let pos: BTreeMap<String, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.clone(), i))
        .collect();

    for s in tree.services.ids() {
        let offered = tree.root.offered_services().contains(&s);
        let demand = match &tree.top {
            TopMarket::Demand(d) => d.get(&s).copied(),
            TopMarket::PriceTaker(_) => None,
        };
        if !offered && demand.is_none() {
            continue;
        }
        let top_award = match &tree.top {
            TopMarket::Demand(_) => demand.unwrap_or(0.0),
            TopMarket::PriceTaker(p) => {
                let price = p.get(&s).copied().unwrap_or(0.0);
                curve(&tree.root, s)
                    .iter()
                    .filter(|seg| seg.cost < price)
                    .map(|seg| seg.cap)
                    .sum()
            }
        };
        let exogenous = match &tree.top {
            TopMarket::PriceTaker(p) => Some(p.get(&s).copied().unwrap_or(0.0)),
            TopMarket::Demand(_) => None,
        };
        cascade(&tree.root, s, top_award, exogenous, &pos, &mut nodes)?;
    }

    for (name, r) in tree.leaves() {
        let n = &mut nodes[pos[name]];
        for s in r.services() {
            let x = n.award.get(&s).copied().unwrap_or(0.0);
            n.award.insert(s, x);
            n.service_cost.insert(s, r.cost(s) * x);
        }
    }
    finish_root(tree, &mut nodes);
    let objective = nodes.iter().map(NodeClearing::own_cost).sum();
    Ok(assemble(tree, ClearingMode::Sequential, nodes, objective, None))
}

/// Aggregate supply curve of a subtree for `s`, segments in merit order.
fn curve(node: &MarketNode, s: ServiceId) -> Vec<Segment> {
    match &node.body {
        NodeBody::Leaf(r) => {
            let cap = r.cap(s);
            if cap > 0.0 && r.capacities.contains_key(&s) {
                vec![Segment {
                    cost: r.cost(s),
                    cap,
                    child: 0,
                }]
            } else {
                Vec::new()
            }
        }
        NodeBody::Aggregator { children, .. } => {
            let mut segs: Vec<Segment> = children
                .iter()
                .enumerate()
                .flat_map(|(k, c)| {
                    curve(c, s)
                        .into_iter()
                        .map(move |seg| Segment { child: k, ..seg })
                })
                .collect();
            segs.sort_by(|a, b| a.cost.total_cmp(&b.cost));
            segs
        }
    }
}

fn cascade(
    node: &MarketNode,
    s: ServiceId,
    award: f64,
    parent_price: Option<f64>,
    pos: &BTreeMap<String, usize>,
    nodes: &mut [NodeClearing],
) -> Result<()> {
    let idx = pos[&node.name];
    if node.is_leaf() {
        nodes[idx].award.insert(s, award);
        return Ok(());
    }
    let is_root = nodes[idx].role == NodeRole::Root;
    if !is_root {
        nodes[idx].award.insert(s, award);
    }
    let segs = curve(node, s);
    let costs: Vec<f64> = segs.iter().map(|g| g.cost).collect();
    let caps: Vec<f64> = segs.iter().map(|g| g.cap).collect();
    let mo = merit_order_clear(&costs, &caps, award).map_err(|e| match e {
        Error::InfeasibleDemand { demand, capacity } => Error::Infeasible(format!(
            "market `{}` cannot cover {demand} of service {s} (capacity {capacity})",
            node.name
        )),
        other => other,
    })?;

    // Any price in [lo, hi] clears this market; prefer the parent's price when
    // it is one of them.
    let filled: f64 = mo.dispatch.iter().sum();
    let (lo, hi) = if mo.degenerate {
        let next = segs
            .iter()
            .zip(&mo.dispatch)
            .find(|(g, x)| **x < g.cap)
            .map_or(f64::INFINITY, |(g, _)| g.cost);
        let last = if filled > 0.0 { mo.price } else { f64::NEG_INFINITY };
        (last, next)
    } else {
        (mo.price, mo.price)
    };
    match parent_price {
        Some(p) if (lo..=hi).contains(&p) => {
            nodes[idx].prices.insert(s, p);
        }
        _ => {
            nodes[idx].prices.insert(s, mo.price);
            if mo.degenerate && !(is_root && segs.is_empty()) {
                nodes[idx].degenerate.insert(s);
            }
        }
    }
    let price = nodes[idx].prices[&s];

    let mut child_award = vec![0.0; node.children().len()];
    for (g, x) in segs.iter().zip(&mo.dispatch) {
        child_award[g.child] += x;
    }
    for (c, &x) in node.children().iter().zip(&child_award) {
        if c.is_leaf() || c.offered_services().contains(&s) {
            cascade(c, s, x, Some(price), pos, nodes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{flatten_services, ResourceSpec, ServiceKind, Sense, Term};

    const S: ServiceId = ServiceId(0);

    fn leaf(name: &str, cost: f64, cap: f64) -> MarketNode {
        MarketNode::leaf(name, ResourceSpec::boxed([(S, cost, cap)]))
    }

    fn t2(demand: f64) -> MarketTree {
        MarketTree::new(
            flatten_services(&[ServiceKind::Energy], 1).unwrap(),
            MarketNode::aggregator(
                "ISO",
                vec![
                    MarketNode::aggregator("VPP1", vec![leaf("A", 10.0, 5.0)]),
                    MarketNode::aggregator("VPP2", vec![leaf("B", 20.0, 5.0)]),
                ],
            ),
            TopMarket::Demand([(S, demand)].into()),
        )
        .unwrap()
    }

    #[test]
    fn t2_monolithic_prices_match_at_every_level() {
        let out = clear_monolithic(&t2(7.0)).unwrap();
        assert_eq!(out.levels, 2);
        assert_eq!(out.dispatch("A", S), 5.0);
        assert_eq!(out.dispatch("B", S), 2.0);
        assert_eq!(out.node("VPP1").unwrap().award[&S], 5.0);
        assert_eq!(out.node("VPP2").unwrap().award[&S], 2.0);
        assert_eq!(out.top_prices()[&S], 20.0);
        assert_eq!(out.node("VPP1").unwrap().prices[&S], 20.0);
        assert_eq!(out.node("VPP2").unwrap().prices[&S], 20.0);
        assert_eq!(out.objective, 90.0);
        assert!(!out.is_degenerate());
        assert!(out.kkt.as_ref().unwrap().passed);
        assert_eq!(out.per_level[0].level, 2);
        assert_eq!(out.per_level[1].prices["VPP2"][&S], 20.0);
        let csv = out.to_csv(&t2(7.0).services).unwrap();
        assert!(csv.contains("2,ISO,VPP2,energy,2,20,false\n"), "{csv}");
        assert!(csv.contains("1,VPP1,A,energy,5,20,false\n"), "{csv}");
        assert!(csv.contains("3,top,ISO,energy,7,20,false\n"), "{csv}");
    }

    #[test]
    fn t2_sequential_matches_monolithic() {
        let mono = clear_monolithic(&t2(7.0)).unwrap();
        let seq = clear_sequential(&t2(7.0)).unwrap();
        for n in ["A", "B", "VPP1", "VPP2"] {
            assert_eq!(mono.node(n).unwrap().award, seq.node(n).unwrap().award, "{n}");
        }
        for n in ["ISO", "VPP1", "VPP2"] {
            assert_eq!(mono.node(n).unwrap().prices, seq.node(n).unwrap().prices, "{n}");
        }
        assert_eq!(mono.objective, seq.objective);
    }

    #[test]
    fn flat_clearing_of_t2() {
        let out = clear_flat(&t2(7.0)).unwrap();
        assert_eq!(out.levels, 1);
        assert_eq!(out.dispatch("A", S), 5.0);
        assert_eq!(out.dispatch("B", S), 2.0);
        assert_eq!(out.top_prices()[&S], 20.0);
        let full = clear_flat(&t2(10.0)).unwrap();
        assert_eq!(full.dispatch("A", S), 5.0);
        assert_eq!(full.dispatch("B", S), 5.0);
        assert_eq!(full.top_prices()[&S], 20.0);
        assert!(full.root().degenerate.contains(&S));
    }

    #[test]
    fn deeper_tree_keeps_dispatch_and_prices() {
        let root = MarketNode::aggregator(
            "ISO",
            vec![MarketNode::aggregator(
                "REGION",
                vec![
                    MarketNode::aggregator("VPP1", vec![leaf("A", 10.0, 5.0)]),
                    MarketNode::aggregator("VPP2", vec![leaf("B", 20.0, 5.0)]),
                ],
            )],
        );
        let tree = MarketTree::new(
            flatten_services(&[ServiceKind::Energy], 1).unwrap(),
            root,
            TopMarket::Demand([(S, 7.0)].into()),
        )
        .unwrap();
        assert_eq!(tree.levels, 3);
        let deep = clear_monolithic(&tree).unwrap();
        let flat = clear_flat(&tree).unwrap();
        assert_eq!(deep.dispatch("A", S), flat.dispatch("A", S));
        assert_eq!(deep.dispatch("B", S), flat.dispatch("B", S));
        for n in ["ISO", "REGION", "VPP1", "VPP2"] {
            assert_eq!(deep.node(n).unwrap().prices[&S], 20.0, "{n}");
        }
        assert_eq!(deep.per_level.len(), 3);
    }

    #[test]
    fn single_resource_at_capacity() {
        let tree = MarketTree::new(
            flatten_services(&[ServiceKind::Energy], 1).unwrap(),
            MarketNode::aggregator("ISO", vec![leaf("G", 30.0, 4.0)]),
            TopMarket::Demand([(S, 4.0)].into()),
        )
        .unwrap();
        let out = clear_monolithic(&tree).unwrap();
        assert_eq!(out.dispatch("G", S), 4.0);
        assert!(out.root().degenerate.contains(&S));
        let seq = clear_sequential(&tree).unwrap();
        assert_eq!(seq.top_prices()[&S], 30.0);
    }

    #[test]
    fn one_level_sequential_is_merit_order() {
        let tree = MarketTree::new(
            flatten_services(&[ServiceKind::Energy], 1).unwrap(),
            MarketNode::aggregator(
                "ISO",
                vec![leaf("A", 30.0, 2.0), leaf("B", 10.0, 2.0), leaf("C", 20.0, 2.0)],
            ),
            TopMarket::Demand([(S, 3.0)].into()),
        )
        .unwrap();
        let seq = clear_sequential(&tree).unwrap();
        let mo = merit_order_clear(&[30.0, 10.0, 20.0], &[2.0, 2.0, 2.0], 3.0).unwrap();
        for (name, x) in ["A", "B", "C"].iter().zip(&mo.dispatch) {
            assert_eq!(seq.dispatch(name, S), *x);
        }
        assert_eq!(seq.top_prices()[&S], mo.price);
    }

    #[test]
    fn sequential_rejects_coupled_resources() {
        let mut spec = ResourceSpec::boxed([(S, 1.0, 1.0)]);
        spec.private_constraints.push(LinearConstraint::new(
            "soc",
            vec![Term::own(LocalVar::Service(S), 1.0)],
            Sense::Le,
            0.5,
        ));
        let tree = MarketTree::new(
            flatten_services(&[ServiceKind::Energy], 1).unwrap(),
            MarketNode::aggregator("ISO", vec![MarketNode::leaf("ES", spec)]),
            TopMarket::Demand([(S, 0.2)].into()),
        )
        .unwrap();
        assert!(matches!(
            clear_sequential(&tree),
            Err(Error::UnsupportedConstraints(_))
        ));
        let out = clear_monolithic(&tree).unwrap();
        assert!((out.dispatch("ES", S) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn infeasible_demand_names_the_level() {
        let err = clear_monolithic(&t2(11.0)).unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref m) if m.contains("level 2")), "{err}");
    }

    #[test]
    fn price_taker_clearing_pays_top_prices_inside() {
        let mut tree = t2(0.0);
        tree.top = TopMarket::PriceTaker([(S, 15.0)].into());
        let out = clear_monolithic(&tree).unwrap();
        assert_eq!(out.dispatch("A", S), 5.0);
        assert_eq!(out.dispatch("B", S), 0.0);
        assert_eq!(out.top_prices()[&S], 15.0);
        assert_eq!(out.node("VPP1").unwrap().prices[&S], 15.0);
        let seq = clear_sequential(&tree).unwrap();
        assert_eq!(seq.dispatch("A", S), 5.0);
        assert_eq!(seq.dispatch("B", S), 0.0);
    }
}
