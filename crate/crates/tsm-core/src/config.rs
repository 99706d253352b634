//! JSON scenario files.
//!
//! Services are addressed by label: the kind name (`energy`) when the
//! horizon is one hour, `kind@hour` (`energy@7`) otherwise. In maps of costs,
//! capacities, floors, bid caps and demand, `kind@*` expands to every hour.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::Mechanism;
use crate::clearing::ClearingMode;
use crate::error::{Error, Result};
use crate::model::{
    flatten_services, AuxVar, LinearConstraint, LocalVar, MarketNode, MarketTree, ResourceSpec,
    Sense, ServiceId, ServiceKind, ServiceSet, Term, TopMarket,
};
use crate::scenario::{
    build_ev_fleet_node, build_storage_node, build_tcl_node, bundled_prices, load_prices_csv,
    parse_prices_csv, EvFleetParams, PriceSeries, StorageParams, TclParams,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub services: ServicesConfig,
    pub tree: NodeConfig,
    /// Fixed requirements by service label. Exactly one of `demand` and
    /// `prices` must be given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices: Option<PricesConfig>,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServicesConfig {
    pub kinds: Vec<ServiceKind>,
    #[serde(default = "one_hour")]
    pub horizon: u32,
}

fn one_hour() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PricesConfig {
    /// Path to an `hour,energy,regulation,reserve` file, relative to the
    /// working directory.
    Csv(PathBuf),
    /// A fixture compiled into the library (`nyiso_synthetic_24h`).
    Bundled(String),
    /// Price per service label.
    Labels(BTreeMap<String, f64>),
    /// Hourly vectors per service kind.
    Series(PriceSeries),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub public_constraints: Vec<ConstraintConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bid_caps: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ev_fleet: Option<EvFleetParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcl: Option<TclParams>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConfig {
    #[serde(default)]
    pub costs: BTreeMap<String, f64>,
    pub capacities: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub floors: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<AuxVar>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub private_constraints: Vec<ConstraintConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub label: String,
    pub terms: Vec<TermConfig>,
    pub sense: Sense,
    pub rhs: f64,
    #[serde(default)]
    pub scales_with_capacity: bool,
}

/// A term references either a service award (`service`) or an auxiliary
/// variable (`aux`) of `node` (the enclosing leaf when omitted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<String>,
    pub coef: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Clear {
        #[serde(default = "default_mode")]
        mode: ClearingMode,
    },
    Allocate {
        #[serde(default = "all_mechanisms")]
        mechanisms: Vec<Mechanism>,
    },
    Sweep {
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost_factors: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap_factors: Option<Vec<f64>>,
    },
    Verify,
    Casestudy {
        sweep_target: String,
    },
}

fn default_mode() -> ClearingMode {
    ClearingMode::Monolithic
}

fn all_mechanisms() -> Vec<Mechanism> {
    Mechanism::ALL.to_vec()
}

/// A config resolved against a working directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub tree: MarketTree,
    pub seed: u64,
    pub prices: Option<PriceSeries>,
    pub experiments: Vec<Experiment>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the market tree. Relative price-file paths are taken from
    /// `workdir`.
    pub fn resolve(&self, workdir: &Path) -> Result<Scenario> {
        let services = flatten_services(&self.services.kinds, self.services.horizon)?;
        let root = build_node(&self.tree, &services)?;
        let (top, prices) = match (&self.demand, &self.prices) {
            (Some(d), None) => (TopMarket::Demand(label_map(d, &services)?), None),
            (None, Some(p)) => {
                let (map, series) = resolve_prices(p, &services, workdir)?;
                (TopMarket::PriceTaker(map), series)
            }
            _ => {
                return Err(Error::Config(
                    "exactly one of `demand` and `prices` must be given".into(),
                ))
            }
        };
        Ok(Scenario {
            tree: MarketTree::new(services, root, top)?,
            seed: self.seed,
            prices,
            experiments: self.experiments.clone(),
        })
    }
}

fn resolve_prices(
    p: &PricesConfig,
    services: &ServiceSet,
    workdir: &Path,
) -> Result<(BTreeMap<ServiceId, f64>, Option<PriceSeries>)> {
    let series = match p {
        PricesConfig::Labels(m) => return Ok((label_map(m, services)?, None)),
        PricesConfig::Csv(path) => load_prices_csv(&workdir.join(path))?,
        PricesConfig::Bundled(name) if name == "nyiso_synthetic_24h" => bundled_prices(),
        PricesConfig::Bundled(name) => {
            return Err(Error::Config(format!("unknown bundled price series `{name}`")))
        }
        PricesConfig::Series(s) => {
            // Round-trip through the CSV parser so inline series get the same
            // validation as files.
            parse_prices_csv(&s.to_csv())?
        }
    };
    Ok((series.top_prices(services)?, Some(series)))
}

/// Expands service labels (with `kind@*` wildcards) to ids.
pub fn resolve_label(label: &str, services: &ServiceSet) -> Result<Vec<ServiceId>> {
    if let Some(kind) = label.strip_suffix("@*") {
        let kind: ServiceKind = kind.parse()?;
        let ids: Vec<ServiceId> = services
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.id)
            .collect();
        if ids.is_empty() {
            return Err(Error::DanglingReference(format!("no service matches `{label}`")));
        }
        return Ok(ids);
    }
    services
        .by_label(label)
        .map(|s| vec![s])
        .ok_or_else(|| Error::DanglingReference(format!("unknown service `{label}`")))
}

fn label_map(m: &BTreeMap<String, f64>, services: &ServiceSet) -> Result<BTreeMap<ServiceId, f64>> {
    let mut out = BTreeMap::new();
    // Wildcards first so explicit hours override them.
    let (wild, exact): (Vec<_>, Vec<_>) = m.iter().partition(|(k, _)| k.ends_with("@*"));
    for (label, v) in wild.into_iter().chain(exact) {
        for s in resolve_label(label, services)? {
            out.insert(s, *v);
        }
    }
    Ok(out)
}

fn build_constraint(c: &ConstraintConfig, services: &ServiceSet) -> Result<LinearConstraint> {
    let terms = c
        .terms
        .iter()
        .map(|t| {
            let var = match (&t.service, &t.aux) {
                (Some(label), None) => {
                    let ids = resolve_label(label, services)?;
                    if ids.len() != 1 {
                        return Err(Error::Config(format!(
                            "constraint `{}`: wildcard `{label}` is not allowed in terms",
                            c.label
                        )));
                    }
                    LocalVar::Service(ids[0])
                }
                (None, Some(a)) => LocalVar::Aux(a.clone()),
                _ => {
                    return Err(Error::Config(format!(
                        "constraint `{}`: each term needs exactly one of `service` and `aux`",
                        c.label
                    )))
                }
            };
            Ok(Term {
                node: t.node.clone(),
                var,
                coef: t.coef,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearConstraint {
        label: c.label.clone(),
        terms,
        sense: c.sense,
        rhs: c.rhs,
        scales_with_capacity: c.scales_with_capacity,
    })
}

fn build_node(n: &NodeConfig, services: &ServiceSet) -> Result<MarketNode> {
    let kinds = [
        n.resource.is_some(),
        n.storage.is_some(),
        n.ev_fleet.is_some(),
        n.tcl.is_some(),
    ]
    .iter()
    .filter(|b| **b)
    .count();
    if kinds > 1 {
        return Err(Error::Config(format!(
            "node `{}` declares more than one resource model",
            n.name
        )));
    }
    if kinds == 1 && (!n.children.is_empty() || !n.public_constraints.is_empty() || !n.bid_caps.is_empty()) {
        return Err(Error::Config(format!(
            "leaf `{}` cannot have children, public constraints or bid caps",
            n.name
        )));
    }
    if let Some(r) = &n.resource {
        let mut spec = ResourceSpec {
            costs: label_map(&r.costs, services)?,
            capacities: label_map(&r.capacities, services)?,
            floors: label_map(&r.floors, services)?,
            aux: r.aux.clone(),
            private_constraints: Vec::new(),
        };
        for s in spec.costs.keys().chain(spec.floors.keys()) {
            if !spec.capacities.contains_key(s) {
                return Err(Error::Config(format!(
                    "leaf `{}` prices or floors `{}` without a capacity",
                    n.name,
                    services.label(*s)
                )));
            }
        }
        spec.private_constraints = r
            .private_constraints
            .iter()
            .map(|c| build_constraint(c, services))
            .collect::<Result<_>>()?;
        return Ok(MarketNode::leaf(n.name.clone(), spec));
    }
    if let Some(p) = &n.storage {
        return build_storage_node(&n.name, p, services);
    }
    if let Some(p) = &n.ev_fleet {
        return build_ev_fleet_node(&n.name, p, services);
    }
    if let Some(p) = &n.tcl {
        return build_tcl_node(&n.name, p, services);
    }
    let children = n
        .children
        .iter()
        .map(|c| build_node(c, services))
        .collect::<Result<Vec<_>>>()?;
    let constraints = n
        .public_constraints
        .iter()
        .map(|c| build_constraint(c, services))
        .collect::<Result<Vec<_>>>()?;
    Ok(MarketNode::aggregator(n.name.clone(), children)
        .with_public_constraints(constraints)
        .with_bid_caps(label_map(&n.bid_caps, services)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const T2: &str = r#"{
        "schema_version": 1,
        "seed": 7,
        "services": {"kinds": ["energy"]},
        "tree": {"name": "ISO", "children": [
            {"name": "VPP1", "children": [
                {"name": "A", "resource": {"costs": {"energy": 10}, "capacities": {"energy": 5}}}]},
            {"name": "VPP2", "children": [
                {"name": "B", "resource": {"costs": {"energy": 20}, "capacities": {"energy": 5}}}]}
        ]},
        "demand": {"energy": 7},
        "experiments": [{"kind": "clear", "mode": "sequential"}, {"kind": "verify"}]
    }"#;

    #[test]
    fn t2_resolves() {
        let cfg = ScenarioConfig::from_json(T2).unwrap();
        let sc = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!(sc.tree.levels, 2);
        assert_eq!(sc.tree.top.demand(ServiceId(0)), 7.0);
        assert_eq!(
            sc.experiments[0],
            Experiment::Clear {
                mode: ClearingMode::Sequential
            }
        );
        let again = ScenarioConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn wildcards_expand_per_hour() {
        let s = flatten_services(&[ServiceKind::Energy, ServiceKind::Reserve], 3).unwrap();
        let m = label_map(
            &[("energy@*".to_string(), 1.0), ("energy@2".to_string(), 5.0)].into(),
            &s,
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[&s.by_label("energy@2").unwrap()], 5.0);
        assert!(resolve_label("reserve", &s).is_err());
        assert!(resolve_label("other@*", &s).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            ScenarioConfig::from_json(&T2.replace("\"schema_version\": 1", "\"schema_version\": 9")),
            Err(Error::Config(_))
        ));
        assert!(ScenarioConfig::from_json(&T2.replace("\"seed\"", "\"sed\"")).is_err());
        let both = T2.replace(
            "\"demand\": {\"energy\": 7}",
            "\"demand\": {\"energy\": 7}, \"prices\": {\"labels\": {\"energy\": 3}}",
        );
        let cfg = ScenarioConfig::from_json(&both).unwrap();
        assert!(matches!(cfg.resolve(Path::new(".")), Err(Error::Config(_))));
        let dangling = T2.replace("\"demand\": {\"energy\": 7}", "\"demand\": {\"reserve\": 7}");
        assert!(matches!(
            ScenarioConfig::from_json(&dangling).unwrap().resolve(Path::new(".")),
            Err(Error::DanglingReference(_))
        ));
        let dup = T2.replace("\"name\": \"B\"", "\"name\": \"A\"");
        assert!(matches!(
            ScenarioConfig::from_json(&dup).unwrap().resolve(Path::new(".")),
            Err(Error::DuplicateName(_))
        ));
    }
}
