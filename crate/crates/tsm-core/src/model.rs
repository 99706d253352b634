//! Domain types for hierarchical markets: services, resources, aggregators
//! and the tree that ties them to a top-level market.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of a service in the scenario's flattened service list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub usize);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Energy,
    Regulation,
    Reserve,
    Other,
}

impl ServiceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceKind::Energy => "energy",
            ServiceKind::Regulation => "regulation",
            ServiceKind::Reserve => "reserve",
            ServiceKind::Other => "other",
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ServiceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(ServiceKind::Energy),
            "regulation" => Ok(ServiceKind::Regulation),
            "reserve" => Ok(ServiceKind::Reserve),
            "other" => Ok(ServiceKind::Other),
            _ => Err(Error::Config(format!("unknown service kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceIndex {
    pub id: ServiceId,
    pub label: String,
    pub kind: ServiceKind,
    pub hour: u32,
}

/// The scenario's service index set. Every `(kind, hour)` pair maps to exactly
/// one entry and ids are dense `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ServiceIndex>", into = "Vec<ServiceIndex>")]
pub struct ServiceSet {
    services: Vec<ServiceIndex>,
}

impl TryFrom<Vec<ServiceIndex>> for ServiceSet {
    type Error = Error;

    fn try_from(services: Vec<ServiceIndex>) -> Result<Self> {
        let mut labels = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for (i, s) in services.iter().enumerate() {
            if s.id != ServiceId(i) {
                return Err(Error::Config(format!("service `{}` has id {} at position {i}", s.label, s.id.0)));
            }
            if !labels.insert(s.label.as_str()) || !pairs.insert((s.kind, s.hour)) {
                return Err(Error::DuplicateName(s.label.clone()));
            }
        }
        if services.is_empty() {
            return Err(Error::EmptyKinds);
        }
        Ok(ServiceSet { services })
    }
}

impl From<ServiceSet> for Vec<ServiceIndex> {
    fn from(s: ServiceSet) -> Self {
        s.services
    }
}

impl ServiceSet {
    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ServiceIndex> {
        self.services.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ServiceId> + '_ {
        self.services.iter().map(|s| s.id)
    }

    pub fn get(&self, id: ServiceId) -> Option<&ServiceIndex> {
        self.services.get(id.0)
    }

    pub fn label(&self, id: ServiceId) -> &str {
        self.get(id).map(|s| s.label.as_str()).unwrap_or("?")
    }

    pub fn by_label(&self, label: &str) -> Option<ServiceId> {
        self.services.iter().find(|s| s.label == label).map(|s| s.id)
    }

    pub fn find(&self, kind: ServiceKind, hour: u32) -> Option<ServiceId> {
        self.services
            .iter()
            .find(|s| s.kind == kind && s.hour == hour)
            .map(|s| s.id)
    }

    pub fn horizon(&self) -> u32 {
        self.services.iter().map(|s| s.hour + 1).max().unwrap_or(0)
    }

    pub fn kinds(&self) -> BTreeSet<ServiceKind> {
        self.services.iter().map(|s| s.kind).collect()
    }
}

/// Expands service kinds over a horizon into one index per `(kind, hour)`,
/// ordered by kind then hour. Single-period sets use the bare kind name as
/// label, multi-period sets use `kind@hour`.
pub fn flatten_services(kinds: &[ServiceKind], horizon: u32) -> Result<ServiceSet> {
    if kinds.is_empty() {
        return Err(Error::EmptyKinds);
    }
    if horizon == 0 {
        return Err(Error::InvalidHorizon(horizon));
    }
    let kinds: BTreeSet<ServiceKind> = kinds.iter().copied().collect();
    let mut services = Vec::with_capacity(kinds.len() * horizon as usize);
    for kind in kinds {
        for hour in 0..horizon {
            let label = if horizon == 1 {
                kind.to_string()
            } else {
                format!("{kind}@{hour}")
            };
            services.push(ServiceIndex {
                id: ServiceId(services.len()),
                label,
                kind,
                hour,
            });
        }
    }
    Ok(ServiceSet { services })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sense::Le => "<=",
            Sense::Eq => "=",
            Sense::Ge => ">=",
        })
    }
}

/// A variable owned by a leaf: either its award for a service or one of its
/// auxiliary (internal) variables.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalVar {
    Service(ServiceId),
    Aux(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    /// Owning leaf. `None` inside a private constraint means the leaf itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    pub var: LocalVar,
    pub coef: f64,
}

impl Term {
    pub fn own(var: LocalVar, coef: f64) -> Self {
        Term {
            node: None,
            var,
            coef,
        }
    }

    pub fn of(node: impl Into<String>, var: LocalVar, coef: f64) -> Self {
        Term {
            node: Some(node.into()),
            var,
            coef,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub label: String,
    pub terms: Vec<Term>,
    pub sense: Sense,
    pub rhs: f64,
    /// The right-hand side is a power rating and scales with a reported
    /// capacity factor.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub scales_with_capacity: bool,
}

impl LinearConstraint {
    pub fn new(label: impl Into<String>, terms: Vec<Term>, sense: Sense, rhs: f64) -> Self {
        LinearConstraint {
            label: label.into(),
            terms,
            sense,
            rhs,
            scales_with_capacity: false,
        }
    }

    pub fn capacity_linked(mut self) -> Self {
        self.scales_with_capacity = true;
        self
    }
}

/// An internal variable of a leaf that the market never sees directly
/// (state of charge, charge/discharge split, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxVar {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub cost: f64,
}

/// Offer of a physical resource: linear costs and a box per service plus
/// optional private linear constraints over its own variables.
///
/// Service variables are bounded by `floor ≤ x ≤ cap`; the floor defaults to
/// zero and is only negative for bidirectional energy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub costs: BTreeMap<ServiceId, f64>,
    pub capacities: BTreeMap<ServiceId, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub floors: BTreeMap<ServiceId, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<AuxVar>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub private_constraints: Vec<LinearConstraint>,
}

impl ResourceSpec {
    /// Box-only offer with one `(cost, cap)` pair per service.
    pub fn boxed(offers: impl IntoIterator<Item = (ServiceId, f64, f64)>) -> Self {
        let mut spec = ResourceSpec::default();
        for (s, cost, cap) in offers {
            spec.costs.insert(s, cost);
            spec.capacities.insert(s, cap);
        }
        spec
    }

    pub fn services(&self) -> impl Iterator<Item = ServiceId> + '_ {
        self.capacities.keys().copied()
    }

    pub fn cost(&self, s: ServiceId) -> f64 {
        self.costs.get(&s).copied().unwrap_or(0.0)
    }

    pub fn cap(&self, s: ServiceId) -> f64 {
        self.capacities.get(&s).copied().unwrap_or(0.0)
    }

    pub fn floor(&self, s: ServiceId) -> f64 {
        self.floors.get(&s).copied().unwrap_or(0.0)
    }

    pub fn aux_var(&self, name: &str) -> Option<&AuxVar> {
        self.aux.iter().find(|a| a.name == name)
    }

    /// True when the feasible set is exactly `0 ≤ x ≤ cap` per service.
    pub fn is_box(&self) -> bool {
        self.private_constraints.is_empty()
            && self.aux.is_empty()
            && self.floors.values().all(|&f| f == 0.0)
    }

    /// The offer as it would be reported with costs scaled by `cost_factor`
    /// and power ratings scaled by `cap_factor`.
    pub fn scaled(&self, cost_factor: f64, cap_factor: f64) -> ResourceSpec {
        let mut out = self.clone();
        out.costs.values_mut().for_each(|c| *c *= cost_factor);
        out.capacities.values_mut().for_each(|c| *c *= cap_factor);
        out.floors.values_mut().for_each(|c| *c *= cap_factor);
        for a in &mut out.aux {
            a.cost *= cost_factor;
        }
        for c in &mut out.private_constraints {
            if c.scales_with_capacity {
                c.rhs *= cap_factor;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeBody {
    Leaf(ResourceSpec),
    Aggregator {
        children: Vec<MarketNode>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        public_constraints: Vec<LinearConstraint>,
        /// Declared upper bounds of the aggregate bid. Absent services are
        /// bounded only by what the children can supply.
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        bid_caps: BTreeMap<ServiceId, f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketNode {
    pub name: String,
    pub body: NodeBody,
}

impl MarketNode {
    pub fn leaf(name: impl Into<String>, spec: ResourceSpec) -> Self {
        MarketNode {
            name: name.into(),
            body: NodeBody::Leaf(spec),
        }
    }

    pub fn aggregator(name: impl Into<String>, children: Vec<MarketNode>) -> Self {
        MarketNode {
            name: name.into(),
            body: NodeBody::Aggregator {
                children,
                public_constraints: Vec::new(),
                bid_caps: BTreeMap::new(),
            },
        }
    }

    pub fn with_public_constraints(mut self, constraints: Vec<LinearConstraint>) -> Self {
        if let NodeBody::Aggregator {
            public_constraints, ..
        } = &mut self.body
        {
            *public_constraints = constraints;
        }
        self
    }

    pub fn with_bid_caps(mut self, caps: BTreeMap<ServiceId, f64>) -> Self {
        if let NodeBody::Aggregator { bid_caps, .. } = &mut self.body {
            *bid_caps = caps;
        }
        self
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.body, NodeBody::Leaf(_))
    }

    pub fn resource(&self) -> Option<&ResourceSpec> {
        match &self.body {
            NodeBody::Leaf(r) => Some(r),
            NodeBody::Aggregator { .. } => None,
        }
    }

    pub fn children(&self) -> &[MarketNode] {
        match &self.body {
            NodeBody::Leaf(_) => &[],
            NodeBody::Aggregator { children, .. } => children,
        }
    }

    pub fn public_constraints(&self) -> &[LinearConstraint] {
        match &self.body {
            NodeBody::Leaf(_) => &[],
            NodeBody::Aggregator {
                public_constraints, ..
            } => public_constraints,
        }
    }

    pub fn bid_caps(&self) -> Option<&BTreeMap<ServiceId, f64>> {
        match &self.body {
            NodeBody::Leaf(_) => None,
            NodeBody::Aggregator { bid_caps, .. } => Some(bid_caps),
        }
    }

    /// Pre-order walk yielding `(node, depth)` with `self` at `depth`.
    pub fn walk(&self, depth: u32) -> Vec<(&MarketNode, u32)> {
        let mut out = Vec::new();
        let mut stack = vec![(self, depth)];
        while let Some((node, d)) = stack.pop() {
            out.push((node, d));
            for child in node.children().iter().rev() {
                stack.push((child, d + 1));
            }
        }
        out
    }

    pub fn leaf_names(&self) -> Vec<&str> {
        self.walk(0)
            .into_iter()
            .filter(|(n, _)| n.is_leaf())
            .map(|(n, _)| n.name.as_str())
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<&MarketNode> {
        self.walk(0)
            .into_iter()
            .map(|(n, _)| n)
            .find(|n| n.name == name)
    }

    fn find_mut(&mut self, name: &str) -> Option<&mut MarketNode> {
        if self.name == name {
            return Some(self);
        }
        match &mut self.body {
            NodeBody::Leaf(_) => None,
            NodeBody::Aggregator { children, .. } => {
                children.iter_mut().find_map(|c| c.find_mut(name))
            }
        }
    }

    /// Per-service capacity the subtree can supply: leaf caps summed, clipped
    /// by any declared aggregate bid caps.
    pub fn supply_caps(&self) -> BTreeMap<ServiceId, f64> {
        match &self.body {
            NodeBody::Leaf(r) => r.capacities.clone(),
            NodeBody::Aggregator {
                children, bid_caps, ..
            } => {
                let mut total = BTreeMap::new();
                for c in children {
                    for (s, q) in c.supply_caps() {
                        *total.entry(s).or_insert(0.0) += q;
                    }
                }
                for (s, cap) in bid_caps {
                    let e = total.entry(*s).or_insert(0.0);
                    *e = e.min(*cap);
                }
                total
            }
        }
    }

    /// Per-service sum of leaf floors in the subtree.
    pub fn supply_floors(&self) -> BTreeMap<ServiceId, f64> {
        match &self.body {
            NodeBody::Leaf(r) => r
                .services()
                .map(|s| (s, r.floor(s)))
                .collect(),
            NodeBody::Aggregator { children, .. } => {
                let mut total = BTreeMap::new();
                for c in children {
                    for (s, q) in c.supply_floors() {
                        *total.entry(s).or_insert(0.0) += q;
                    }
                }
                total
            }
        }
    }

    /// Services offered anywhere in the subtree.
    pub fn offered_services(&self) -> BTreeSet<ServiceId> {
        self.walk(0)
            .into_iter()
            .filter_map(|(n, _)| n.resource())
            .flat_map(|r| r.services())
            .collect()
    }

    fn prune(&self, keep: &dyn Fn(&str) -> bool, removed: &mut BTreeSet<String>) -> Option<MarketNode> {
        match &self.body {
            NodeBody::Leaf(_) => {
                if keep(&self.name) {
                    Some(self.clone())
                } else {
                    removed.insert(self.name.clone());
                    None
                }
            }
            NodeBody::Aggregator {
                children,
                public_constraints,
                bid_caps,
            } => {
                let kept: Vec<MarketNode> = children
                    .iter()
                    .filter_map(|c| c.prune(keep, removed))
                    .collect();
                if kept.is_empty() {
                    removed.insert(self.name.clone());
                    return None;
                }
                Some(MarketNode {
                    name: self.name.clone(),
                    body: NodeBody::Aggregator {
                        children: kept,
                        public_constraints: public_constraints.clone(),
                        bid_caps: bid_caps.clone(),
                    },
                })
            }
        }
    }
}

/// How the root market meets the outside world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopMarket {
    /// Fixed service requirements `d_s`; the root price is the dual of the
    /// demand row.
    Demand(BTreeMap<ServiceId, f64>),
    /// The root sells at exogenous prices it cannot influence.
    PriceTaker(BTreeMap<ServiceId, f64>),
}

impl TopMarket {
    pub fn demand(&self, s: ServiceId) -> f64 {
        match self {
            TopMarket::Demand(d) => d.get(&s).copied().unwrap_or(0.0),
            TopMarket::PriceTaker(_) => 0.0,
        }
    }

    pub fn is_price_taker(&self) -> bool {
        matches!(self, TopMarket::PriceTaker(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr")]
pub struct MarketTree {
    pub services: ServiceSet,
    pub root: MarketNode,
    pub top: TopMarket,
    /// Number of market levels, i.e. the depth of the deepest leaf.
    pub levels: u32,
}

/// Serialized form; decoding re-runs the checks of [`MarketTree::new`].
#[derive(Deserialize)]
struct TreeRepr {
    services: ServiceSet,
    root: MarketNode,
    top: TopMarket,
    #[serde(default)]
    #[allow(dead_code)]
    levels: u32,
}

impl TryFrom<TreeRepr> for MarketTree {
    type Error = Error;

    fn try_from(r: TreeRepr) -> Result<Self> {
        MarketTree::new(r.services, r.root, r.top)
    }
}

impl MarketTree {
    /// Assembles a tree and computes its level count. Structural errors are
    /// reported eagerly; softer issues are left to [`validate_tree`].
    pub fn new(services: ServiceSet, root: MarketNode, top: TopMarket) -> Result<Self> {
        if root.is_leaf() {
            return Err(Error::Config(format!(
                "root `{}` must be an aggregator",
                root.name
            )));
        }
        let mut tree = MarketTree {
            services,
            root,
            top,
            levels: 0,
        };
        tree.levels = tree.max_leaf_depth();
        for d in validate_tree(&tree) {
            match d.kind {
                DiagnosticKind::DuplicateName => return Err(Error::DuplicateName(d.node)),
                DiagnosticKind::DanglingReference => {
                    return Err(Error::DanglingReference(d.message))
                }
                DiagnosticKind::NegativeCapacity => {
                    return Err(Error::NegativeCapacity {
                        node: d.node,
                        service: d.service.unwrap_or_default(),
                        value: d.value.unwrap_or(f64::NAN),
                    })
                }
                DiagnosticKind::InvalidValue => return Err(Error::InvalidParams(d.message)),
                _ => {}
            }
        }
        Ok(tree)
    }

    fn max_leaf_depth(&self) -> u32 {
        self.root
            .walk(0)
            .into_iter()
            .filter(|(n, _)| n.is_leaf())
            .map(|(_, d)| d)
            .max()
            .unwrap_or(0)
    }

    pub fn leaves(&self) -> Vec<(&str, &ResourceSpec)> {
        self.root
            .walk(0)
            .into_iter()
            .filter_map(|(n, _)| n.resource().map(|r| (n.name.as_str(), r)))
            .collect()
    }

    pub fn leaf_names(&self) -> Vec<&str> {
        self.root.leaf_names()
    }

    pub fn find(&self, name: &str) -> Option<&MarketNode> {
        self.root.find(name)
    }

    /// Depth of every node, root at 0.
    pub fn depths(&self) -> BTreeMap<&str, u32> {
        self.root
            .walk(0)
            .into_iter()
            .map(|(n, d)| (n.name.as_str(), d))
            .collect()
    }

    /// Parent name of every non-root node.
    pub fn parents(&self) -> BTreeMap<&str, &str> {
        let mut out = BTreeMap::new();
        for (n, _) in self.root.walk(0) {
            for c in n.children() {
                out.insert(c.name.as_str(), n.name.as_str());
            }
        }
        out
    }

    /// Market level run by an aggregator at `depth`; the root runs level `L`.
    pub fn level_of_depth(&self, depth: u32) -> u32 {
        self.levels.saturating_sub(depth)
    }

    /// Copy with `name`'s resource offer replaced.
    pub fn with_resource(&self, name: &str, spec: ResourceSpec) -> Result<MarketTree> {
        let mut out = self.clone();
        let node = out
            .root
            .find_mut(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))?;
        match &mut node.body {
            NodeBody::Leaf(r) => *r = spec,
            NodeBody::Aggregator { .. } => {
                return Err(Error::InvalidParams(format!("`{name}` is not a leaf")))
            }
        }
        Ok(out)
    }

    /// Copy containing only the leaves accepted by `keep`. Aggregators left
    /// without leaves disappear, and constraint terms on removed leaves are
    /// dropped (the removed resources contribute zero). Returns `None` when
    /// nothing remains.
    pub fn restricted_to(&self, keep: &dyn Fn(&str) -> bool) -> Option<MarketTree> {
        let mut removed = BTreeSet::new();
        let children: Vec<MarketNode> = self
            .root
            .children()
            .iter()
            .filter_map(|c| c.prune(keep, &mut removed))
            .collect();
        if children.is_empty() {
            return None;
        }
        let mut root = self.root.clone();
        if let NodeBody::Aggregator {
            children: ch,
            ..
        } = &mut root.body
        {
            *ch = children;
        }
        strip_removed_terms(&mut root, &removed);
        let mut tree = MarketTree {
            services: self.services.clone(),
            root,
            top: self.top.clone(),
            levels: 0,
        };
        tree.levels = tree.max_leaf_depth();
        Some(tree)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn strip_removed_terms(node: &mut MarketNode, removed: &BTreeSet<String>) {
    if let NodeBody::Aggregator {
        children,
        public_constraints,
        ..
    } = &mut node.body
    {
        for c in public_constraints.iter_mut() {
            c.terms
                .retain(|t| t.node.as_ref().is_none_or(|n| !removed.contains(n)));
        }
        public_constraints.retain(|c| !c.terms.is_empty());
        for ch in children {
            strip_removed_terms(ch, removed);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    DuplicateName,
    DanglingReference,
    NegativeCapacity,
    InvalidValue,
    InfeasibleDemand,
    ZeroCapacityLeaf,
    EmptyAggregator,
    EmptyConstraint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, node: &str, message: String) -> Self {
        Diagnostic {
            kind,
            node: node.to_string(),
            service: None,
            value: None,
            message,
        }
    }
}

/// Checks every tree invariant and reports violations without failing.
pub fn validate_tree(tree: &MarketTree) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let nodes = tree.root.walk(0);

    let mut seen = BTreeSet::new();
    for (n, _) in &nodes {
        if !seen.insert(n.name.as_str()) {
            out.push(Diagnostic::new(
                DiagnosticKind::DuplicateName,
                &n.name,
                format!("node name `{}` used more than once", n.name),
            ));
        }
    }

    let known_service = |s: &ServiceId| tree.services.get(*s).is_some();

    for (n, _) in &nodes {
        match &n.body {
            NodeBody::Leaf(r) => check_leaf(tree, &n.name, r, &known_service, &mut out),
            NodeBody::Aggregator {
                children,
                public_constraints,
                bid_caps,
            } => {
                if children.is_empty() {
                    out.push(Diagnostic::new(
                        DiagnosticKind::EmptyAggregator,
                        &n.name,
                        format!("aggregator `{}` has no children", n.name),
                    ));
                }
                for (s, cap) in bid_caps {
                    if !known_service(s) {
                        out.push(Diagnostic::new(
                            DiagnosticKind::DanglingReference,
                            &n.name,
                            format!("bid cap of `{}` references unknown service {s}", n.name),
                        ));
                    } else if *cap < 0.0 || !cap.is_finite() {
                        let mut d = Diagnostic::new(
                            DiagnosticKind::NegativeCapacity,
                            &n.name,
                            format!("bid cap {cap} of `{}` is not a non-negative number", n.name),
                        );
                        d.service = Some(tree.services.label(*s).to_string());
                        d.value = Some(*cap);
                        out.push(d);
                    }
                }
                let descendants: BTreeMap<&str, &ResourceSpec> = n
                    .walk(0)
                    .into_iter()
                    .skip(1)
                    .filter_map(|(d, _)| d.resource().map(|r| (d.name.as_str(), r)))
                    .collect();
                for c in public_constraints {
                    check_constraint(c, &n.name, &mut out, |t| match &t.node {
                        None => Err(format!(
                            "public constraint `{}` of `{}` has a term without an owner",
                            c.label, n.name
                        )),
                        Some(owner) => match descendants.get(owner.as_str()) {
                            None => Err(format!(
                                "public constraint `{}` of `{}` references non-descendant `{owner}`",
                                c.label, n.name
                            )),
                            Some(r) => var_exists(r, &t.var).then_some(()).ok_or_else(|| {
                                format!(
                                    "public constraint `{}` of `{}` references missing variable {:?} of `{owner}`",
                                    c.label, n.name, t.var
                                )
                            }),
                        },
                    });
                }
            }
        }
    }

    match &tree.top {
        TopMarket::Demand(demand) => {
            let caps = tree.root.supply_caps();
            for (s, d) in demand {
                if !known_service(s) {
                    out.push(Diagnostic::new(
                        DiagnosticKind::DanglingReference,
                        &tree.root.name,
                        format!("demand references unknown service {s}"),
                    ));
                    continue;
                }
                if !d.is_finite() || *d < 0.0 {
                    out.push(Diagnostic::new(
                        DiagnosticKind::InvalidValue,
                        &tree.root.name,
                        format!("demand {d} for `{}` is not a non-negative number", tree.services.label(*s)),
                    ));
                    continue;
                }
                let cap = caps.get(s).copied().unwrap_or(0.0);
                if *d > cap {
                    let mut diag = Diagnostic::new(
                        DiagnosticKind::InfeasibleDemand,
                        &tree.root.name,
                        format!(
                            "demand {d} for `{}` exceeds total capacity {cap}",
                            tree.services.label(*s)
                        ),
                    );
                    diag.service = Some(tree.services.label(*s).to_string());
                    diag.value = Some(*d);
                    out.push(diag);
                }
            }
        }
        TopMarket::PriceTaker(prices) => {
            for (s, p) in prices {
                if !known_service(s) {
                    out.push(Diagnostic::new(
                        DiagnosticKind::DanglingReference,
                        &tree.root.name,
                        format!("top price references unknown service {s}"),
                    ));
                } else if !p.is_finite() {
                    out.push(Diagnostic::new(
                        DiagnosticKind::InvalidValue,
                        &tree.root.name,
                        format!("top price for `{}` is not finite", tree.services.label(*s)),
                    ));
                }
            }
        }
    }
    out
}

fn var_exists(r: &ResourceSpec, var: &LocalVar) -> bool {
    match var {
        LocalVar::Service(s) => r.capacities.contains_key(s),
        LocalVar::Aux(a) => r.aux_var(a).is_some(),
    }
}

fn check_leaf(
    tree: &MarketTree,
    name: &str,
    r: &ResourceSpec,
    known_service: &dyn Fn(&ServiceId) -> bool,
    out: &mut Vec<Diagnostic>,
) {
    for s in r.costs.keys().chain(r.capacities.keys()).chain(r.floors.keys()) {
        if !known_service(s) {
            out.push(Diagnostic::new(
                DiagnosticKind::DanglingReference,
                name,
                format!("leaf `{name}` references unknown service {s}"),
            ));
        }
    }
    for (s, cap) in &r.capacities {
        if *cap < 0.0 || cap.is_nan() {
            let mut d = Diagnostic::new(
                DiagnosticKind::NegativeCapacity,
                name,
                format!("capacity {cap} of `{name}` for `{}` is negative", tree.services.label(*s)),
            );
            d.service = Some(tree.services.label(*s).to_string());
            d.value = Some(*cap);
            out.push(d);
        } else if !cap.is_finite() {
            out.push(Diagnostic::new(
                DiagnosticKind::InvalidValue,
                name,
                format!("capacity of `{name}` for `{}` is not finite", tree.services.label(*s)),
            ));
        }
        let floor = r.floor(*s);
        if !floor.is_finite() || floor > *cap {
            out.push(Diagnostic::new(
                DiagnosticKind::InvalidValue,
                name,
                format!("floor {floor} of `{name}` exceeds capacity {cap}"),
            ));
        }
    }
    for (s, c) in &r.costs {
        if !c.is_finite() {
            out.push(Diagnostic::new(
                DiagnosticKind::InvalidValue,
                name,
                format!("cost of `{name}` for `{}` is not finite", tree.services.label(*s)),
            ));
        }
    }
    let mut aux_names = BTreeSet::new();
    for a in &r.aux {
        if !aux_names.insert(a.name.as_str()) {
            out.push(Diagnostic::new(
                DiagnosticKind::DuplicateName,
                name,
                format!("auxiliary variable `{}` declared twice in `{name}`", a.name),
            ));
        }
        if a.lo.is_nan() || a.hi.is_nan() || a.lo > a.hi || !a.cost.is_finite() {
            out.push(Diagnostic::new(
                DiagnosticKind::InvalidValue,
                name,
                format!("auxiliary variable `{}` of `{name}` has invalid bounds or cost", a.name),
            ));
        }
    }
    if !r.capacities.values().any(|&c| c > 0.0) && !r.floors.values().any(|&f| f < 0.0) {
        out.push(Diagnostic::new(
            DiagnosticKind::ZeroCapacityLeaf,
            name,
            format!("leaf `{name}` offers no service with positive capacity"),
        ));
    }
    for c in &r.private_constraints {
        check_constraint(c, name, out, |t| {
            if t.node.as_deref().is_some_and(|n| n != name) {
                return Err(format!(
                    "private constraint `{}` of `{name}` references another node",
                    c.label
                ));
            }
            var_exists(r, &t.var).then_some(()).ok_or_else(|| {
                format!(
                    "private constraint `{}` of `{name}` references missing variable {:?}",
                    c.label, t.var
                )
            })
        });
    }
}

fn check_constraint(
    c: &LinearConstraint,
    node: &str,
    out: &mut Vec<Diagnostic>,
    resolve: impl Fn(&Term) -> std::result::Result<(), String>,
) {
    if c.terms.is_empty() {
        out.push(Diagnostic::new(
            DiagnosticKind::EmptyConstraint,
            node,
            format!("constraint `{}` of `{node}` has no terms", c.label),
        ));
    }
    if !c.rhs.is_finite() || c.terms.iter().any(|t| !t.coef.is_finite()) {
        out.push(Diagnostic::new(
            DiagnosticKind::InvalidValue,
            node,
            format!("constraint `{}` of `{node}` has a non-finite coefficient", c.label),
        ));
    }
    for t in &c.terms {
        if let Err(msg) = resolve(t) {
            out.push(Diagnostic::new(DiagnosticKind::DanglingReference, node, msg));
        }
    }
}
