//! Profit allocation benchmarks over the leaves of a tree.
//!
//! The characteristic function `v(S)` is the optimal surplus (top-market
//! revenue minus production cost) of the tree restricted to coalition `S`,
//! cleared as a price taker. Trees with fixed demand are valued at the prices
//! the grand coalition clears at.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clearing::clear_monolithic;
use crate::error::{Error, Result};
use crate::model::{MarketTree, ServiceId, ServiceSet, TopMarket};
use crate::settlement::{num, settle};

/// Largest leaf count accepted by exact Shapley enumeration.
pub const MAX_SHAPLEY_LEAVES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Shapley,
    VcgMarginal,
    Marginal,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Shapley, Mechanism::VcgMarginal, Mechanism::Marginal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::Shapley => "shapley",
            Mechanism::VcgMarginal => "vcg_marginal",
            Mechanism::Marginal => "marginal",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str() == s || (s == "vcg" && *m == Mechanism::VcgMarginal))
            .ok_or_else(|| Error::Config(format!("unknown mechanism `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub mechanism: Mechanism,
    /// Leaf → share of surplus.
    pub shares: BTreeMap<String, f64>,
    /// Per-service split of each share, where the mechanism defines one.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_service: BTreeMap<String, BTreeMap<ServiceId, f64>>,
    /// `v(N)`.
    pub grand_value: f64,
    /// Coalitions that could not be cleared and were valued at zero.
    #[serde(default)]
    pub infeasible_coalitions: usize,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.shares.values().sum()
    }
}

/// Price-taking copy of `tree`. Demand trees take the prices of their own
/// clearing.
pub fn price_taking(tree: &MarketTree) -> Result<MarketTree> {
    if tree.top.is_price_taker() {
        return Ok(tree.clone());
    }
    let out = clear_monolithic(tree)?;
    let mut pt = tree.clone();
    pt.top = TopMarket::PriceTaker(out.top_prices().clone());
    Ok(pt)
}

/// `v(S)` for the leaves accepted by `member`, on a price-taking tree.
/// Empty and infeasible coalitions are worth zero; the flag reports the
/// latter.
fn value_of(tree: &MarketTree, member: &dyn Fn(&str) -> bool) -> Result<(f64, bool)> {
    let Some(sub) = tree.restricted_to(member) else {
        return Ok((0.0, false));
    };
    match clear_monolithic(&sub) {
        Ok(out) => {
            let root = out.root();
            let revenue: f64 = root
                .award
                .iter()
                .map(|(s, q)| root.prices.get(s).copied().unwrap_or(0.0) * q)
                .sum();
            Ok((revenue - out.objective, false))
        }
        Err(Error::Infeasible(msg)) => {
            debug!("coalition infeasible, valued at zero: {msg}");
            Ok((0.0, true))
        }
        Err(e) => Err(e),
    }
}

pub fn coalition_value(tree: &MarketTree, members: &BTreeSet<String>) -> Result<f64> {
    let pt = price_taking(tree)?;
    value_of(&pt, &|n| members.contains(n)).map(|(v, _)| v)
}

pub fn allocate_shapley(tree: &MarketTree) -> Result<Allocation> {
    let names: Vec<String> = tree.leaf_names().into_iter().map(String::from).collect();
    let n = names.len();
    if n > MAX_SHAPLEY_LEAVES {
        return Err(Error::TooManyLeaves {
            leaves: n,
            max: MAX_SHAPLEY_LEAVES,
        });
    }
    let pt = price_taking(tree)?;
    let values: Vec<(f64, bool)> = (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let member = |name: &str| {
                names
                    .iter()
                    .position(|x| x == name)
                    .is_some_and(|i| mask & (1 << i) != 0)
            };
            value_of(&pt, &member)
        })
        .collect::<Result<_>>()?;

    // weight[k] = k! (n-k-1)! / n!
    let mut weight = vec![0.0; n.max(1)];
    for (k, w) in weight.iter_mut().enumerate() {
        let mut x = 1.0 / n as f64;
        for j in 1..=k {
            x *= j as f64 / (n - j) as f64;
        }
        *w = x;
    }
    let mut shares = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        let bit = 1usize << i;
        let phi: f64 = (0..1usize << n)
            .filter(|m| m & bit == 0)
            .map(|m| weight[m.count_ones() as usize] * (values[m | bit].0 - values[m].0))
            .sum();
        shares.insert(name.clone(), phi);
    }
    Ok(Allocation {
        mechanism: Mechanism::Shapley,
        shares,
        by_service: BTreeMap::new(),
        grand_value: values[(1usize << n) - 1].0,
        infeasible_coalitions: values.iter().filter(|v| v.1).count(),
    })
}

/// Each leaf receives `v(N) − v(N ∖ {u})`.
pub fn allocate_vcg_marginal(tree: &MarketTree) -> Result<Allocation> {
    let pt = price_taking(tree)?;
    let (grand, grand_bad) = value_of(&pt, &|_| true)?;
    let names: Vec<&str> = pt.leaf_names();
    let without: Vec<(f64, bool)> = names
        .par_iter()
        .map(|u| value_of(&pt, &|n| n != *u))
        .collect::<Result<_>>()?;
    Ok(Allocation {
        mechanism: Mechanism::VcgMarginal,
        shares: names
            .iter()
            .zip(&without)
            .map(|(u, (v, _))| (u.to_string(), grand - v))
            .collect(),
        by_service: BTreeMap::new(),
        grand_value: grand,
        infeasible_coalitions: without.iter().filter(|v| v.1).count() + usize::from(grand_bad),
    })
}

/// Each leaf keeps the profit it earns under marginal pricing in the grand
/// clearing, split by service.
pub fn allocate_marginal(tree: &MarketTree) -> Result<Allocation> {
    let pt = price_taking(tree)?;
    let out = clear_monolithic(&pt)?;
    let st = settle(&out);
    let mut shares = BTreeMap::new();
    let mut by_service = BTreeMap::new();
    for leaf in st.leaves() {
        shares.insert(leaf.name.clone(), leaf.profit);
        by_service.insert(leaf.name.clone(), leaf.profit_by_service());
    }
    let grand_value = st.top_payment - out.objective;
    Ok(Allocation {
        mechanism: Mechanism::Marginal,
        shares,
        by_service,
        grand_value,
        infeasible_coalitions: 0,
    })
}

pub fn allocate(tree: &MarketTree, mechanism: Mechanism) -> Result<Allocation> {
    match mechanism {
        Mechanism::Shapley => allocate_shapley(tree),
        Mechanism::VcgMarginal => allocate_vcg_marginal(tree),
        Mechanism::Marginal => allocate_marginal(tree),
    }
}

/// `Σ_u |a_u − b_u|` over the union of leaves.
pub fn l1_distance(a: &Allocation, b: &Allocation) -> f64 {
    let keys: BTreeSet<&String> = a.shares.keys().chain(b.shares.keys()).collect();
    keys.into_iter()
        .map(|k| {
            (a.shares.get(k).copied().unwrap_or(0.0) - b.shares.get(k).copied().unwrap_or(0.0)).abs()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub a: Mechanism,
    pub b: Mechanism,
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub allocations: Vec<Allocation>,
    pub distances: Vec<Distance>,
}

impl AllocationReport {
    pub fn build(tree: &MarketTree, mechanisms: &[Mechanism]) -> Result<Self> {
        let allocations = mechanisms
            .iter()
            .map(|m| allocate(tree, *m))
            .collect::<Result<Vec<_>>>()?;
        let mut distances = Vec::new();
        for (i, a) in allocations.iter().enumerate() {
            for b in &allocations[i + 1..] {
                distances.push(Distance {
                    a: a.mechanism,
                    b: b.mechanism,
                    l1: l1_distance(a, b),
                });
            }
        }
        Ok(AllocationReport {
            allocations,
            distances,
        })
    }

    pub fn get(&self, m: Mechanism) -> Option<&Allocation> {
        self.allocations.iter().find(|a| a.mechanism == m)
    }

    /// Long-format CSV: `mechanism,leaf,service,share`; per-leaf totals use
    /// service `total`.
    pub fn to_csv(&self, services: &ServiceSet) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mechanism", "leaf", "service", "share"])?;
        for a in &self.allocations {
            for (leaf, share) in &a.shares {
                if let Some(split) = a.by_service.get(leaf) {
                    for (s, v) in split {
                        w.write_record([a.mechanism.as_str(), leaf, services.label(*s), &num(*v)])?;
                    }
                }
                w.write_record([a.mechanism.as_str(), leaf, "total", &num(*share)])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
