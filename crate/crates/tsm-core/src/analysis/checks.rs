use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clearing::{build_clearing_lp, clear_monolithic, ClearingLp, ClearingMode, ClearingOutcome, NodeRole};
use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpStatus};
use crate::model::{MarketNode, MarketTree, NodeBody, Sense, ServiceId, TopMarket};

/// Default number of sampled aggregate points for non-box nodes.
pub const DEFAULT_SAMPLES: usize = 200;
/// Seed used when callers do not supply one.
pub const DEFAULT_SEED: u64 = 0x7a5e_ed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceGap {
    pub node: String,
    pub parent: String,
    pub service: ServiceId,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceInvarianceReport {
    pub passed: bool,
    pub max_gap: f64,
    pub worst: Option<PriceGap>,
    /// Number of (market, service) pairs compared.
    pub compared: usize,
    /// `(market, service)` pairs left out because a price is non-unique.
    pub skipped: Vec<(String, ServiceId)>,
    pub tol: f64,
}

/// Compares every aggregator's internal price with its parent market's price.
pub fn check_price_invariance(outcome: &ClearingOutcome, tol: f64) -> PriceInvarianceReport {
    let mut report = PriceInvarianceReport {
        passed: true,
        max_gap: 0.0,
        worst: None,
        compared: 0,
        skipped: Vec::new(),
        tol,
    };
    for n in outcome.nodes.iter().filter(|n| n.role == NodeRole::Aggregator) {
        let Some(parent) = n.parent.as_deref().and_then(|p| outcome.node(p)) else {
            continue;
        };
        for (s, &own) in &n.prices {
            let Some(&upper) = parent.prices.get(s) else {
                continue;
            };
            if n.degenerate.contains(s) || parent.degenerate.contains(s) {
                report.skipped.push((n.name.clone(), *s));
                continue;
            }
            report.compared += 1;
            let gap = (own - upper).abs();
            if gap > report.max_gap || gap.is_nan() {
                report.max_gap = gap;
                report.worst = Some(PriceGap {
                    node: n.name.clone(),
                    parent: parent.name.clone(),
                    service: *s,
                    gap,
                });
            }
        }
    }
    report.passed = report.max_gap <= tol && !report.max_gap.is_nan();
    report
}

/// `(lo, hi)` per service.
pub type BoxBounds = BTreeMap<ServiceId, (f64, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxMismatch {
    pub service: ServiceId,
    pub parent: (f64, f64),
    pub children_sum: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    pub node: String,
    pub passed: bool,
    /// Set when the node is not box-constrained and was checked by sampling.
    pub sampled: Option<SampledFeasibility>,
    pub mismatches: Vec<BoxMismatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledFeasibility {
    pub samples: usize,
    pub feasible: usize,
    pub seed: u64,
}

/// The parent box must be the Minkowski sum of the children's boxes.
pub fn check_assumption1_boxes(parent: &BoxBounds, children: &[BoxBounds]) -> Vec<BoxMismatch> {
    let mut sum: BoxBounds = BTreeMap::new();
    for c in children {
        for (s, (lo, hi)) in c {
            let e = sum.entry(*s).or_insert((0.0, 0.0));
            e.0 += lo;
            e.1 += hi;
        }
    }
    let same = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    let mut out = Vec::new();
    let services: std::collections::BTreeSet<ServiceId> = parent.keys().chain(sum.keys()).copied().collect();
    for s in services {
        let p = parent.get(&s).copied().unwrap_or((0.0, 0.0));
        let c = sum.get(&s).copied().unwrap_or((0.0, 0.0));
        if !same(p.0, c.0) || !same(p.1, c.1) {
            out.push(BoxMismatch {
                service: s,
                parent: p,
                children_sum: c,
            });
        }
    }
    out
}

fn is_box_subtree(node: &MarketNode) -> bool {
    match &node.body {
        NodeBody::Leaf(r) => r.private_constraints.is_empty() && r.aux.is_empty(),
        NodeBody::Aggregator {
            children,
            public_constraints,
            ..
        } => public_constraints.is_empty() && children.iter().all(is_box_subtree),
    }
}

/// Box a node presents to its parent: declared bid caps where present,
/// otherwise the sum of what its children offer.
fn declared_box(node: &MarketNode) -> BoxBounds {
    match &node.body {
        NodeBody::Leaf(r) => r.services().map(|s| (s, (r.floor(s), r.cap(s)))).collect(),
        NodeBody::Aggregator { bid_caps, .. } => {
            let floors = node.supply_floors();
            node.supply_caps()
                .into_iter()
                .map(|(s, hi)| {
                    let lo = floors.get(&s).copied().unwrap_or(0.0);
                    (s, (lo, bid_caps.get(&s).copied().unwrap_or(hi)))
                })
                .collect()
        }
    }
}

/// Checks every aggregator of the tree. Box subtrees compare declared caps
/// with the children's sum; others sample aggregate points in the declared
/// box and test whether each can be split among the children.
pub fn check_assumption1(tree: &MarketTree, samples: usize, seed: u64) -> Result<Vec<Assumption1Report>> {
    let mut out = Vec::new();
    for (node, depth) in tree.root.walk(0) {
        if node.is_leaf() || depth == 0 {
            continue;
        }
        if is_box_subtree(node) {
            let children: Vec<BoxBounds> = node.children().iter().map(declared_box).collect();
            let mismatches = check_assumption1_boxes(&declared_box(node), &children);
            out.push(Assumption1Report {
                node: node.name.clone(),
                passed: mismatches.is_empty(),
                sampled: None,
                mismatches,
            });
        } else {
            let s = sampled_disaggregation(tree, node, samples, seed)?;
            out.push(Assumption1Report {
                node: node.name.clone(),
                passed: s.feasible == s.samples,
                sampled: Some(s),
                mismatches: Vec::new(),
            });
        }
    }
    Ok(out)
}

/// LP over one aggregator's subtree with every interface row an equality, so
/// the aggregate is exactly what the leaves produce.
fn subtree_lp(tree: &MarketTree, node: &MarketNode) -> Result<ClearingLp> {
    let sub = MarketTree::new(
        tree.services.clone(),
        MarketNode {
            name: node.name.clone(),
            body: node.body.clone(),
        },
        TopMarket::Demand(BTreeMap::new()),
    )?;
    let mut lp = build_clearing_lp(&sub, ClearingMode::Monolithic)?;
    for &row in lp.market_rows.values() {
        lp.problem.constraints[row].sense = Sense::Eq;
    }
    Ok(lp)
}

fn root_rows(lp: &ClearingLp, node: &str) -> Vec<(ServiceId, usize)> {
    lp.market_rows
        .iter()
        .filter(|((n, _), _)| n == node)
        .map(|((_, s), r)| (*s, *r))
        .collect()
}

fn sampled_disaggregation(
    tree: &MarketTree,
    node: &MarketNode,
    samples: usize,
    seed: u64,
) -> Result<SampledFeasibility> {
    let mut lp = subtree_lp(tree, node)?;
    lp.problem.objective.iter_mut().for_each(|c| *c = 0.0);
    let rows = root_rows(&lp, &node.name);
    let bounds = declared_box(node);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feasible = 0;
    for _ in 0..samples {
        for &(s, row) in &rows {
            let (lo, hi) = bounds.get(&s).copied().unwrap_or((0.0, 0.0));
            lp.problem.constraints[row].rhs = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
        if solve_lp(&lp.problem)?.status == LpStatus::Optimal {
            feasible += 1;
        }
    }
    Ok(SampledFeasibility {
        samples,
        feasible,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption2Report {
    pub node: String,
    pub passed: bool,
    pub samples: usize,
    /// `min over samples of (split cost − min-cost disaggregation)`; must not
    /// be negative.
    pub worst_margin: f64,
    /// `min over pairs of ((C(q1) + C(q2))/2 − C((q1+q2)/2))`.
    pub worst_convexity_margin: f64,
    pub tol: f64,
}

/// Draws random feasible splits among the aggregator's children and checks
/// that the min-cost disaggregation of the resulting aggregate is no more
/// expensive than the split itself, plus a midpoint convexity check on the
/// aggregate cost.
pub fn check_assumption2(
    tree: &MarketTree,
    aggregator: &str,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<Assumption2Report> {
    let node = tree
        .find(aggregator)
        .ok_or_else(|| Error::UnknownNode(aggregator.to_string()))?;
    if node.is_leaf() {
        return Err(Error::InvalidParams(format!("`{aggregator}` is not an aggregator")));
    }
    let base = subtree_lp(tree, node)?;
    let rows = root_rows(&base, &node.name);
    let true_cost = base.problem.objective.clone();

    // Random vertices: drop the aggregate rows and minimise a random objective.
    let mut free = base.problem.clone();
    for &(_, r) in &rows {
        free.constraints[r].sense = Sense::Ge;
        free.constraints[r].rhs = -1e12;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertex = |rng: &mut ChaCha8Rng| -> Result<Option<Vec<f64>>> {
        free.objective = (0..free.num_vars).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let sol = solve_lp(&free)?;
        Ok(sol.is_optimal().then_some(sol.primal))
    };
    let aggregate = |x: &[f64]| -> Vec<f64> {
        rows.iter()
            .map(|&(_, r)| {
                let row = &base.problem.constraints[r];
                row.activity(x) - row.rhs
            })
            .collect()
    };
    let min_cost = |q: &[f64]| -> Result<Option<f64>> {
        let mut p = base.problem.clone();
        for (&(_, r), v) in rows.iter().zip(q) {
            // Row is Σ children − rhs; solve with rhs = q.
            p.constraints[r].rhs = *v;
        }
        let sol = solve_lp(&p)?;
        Ok(sol.is_optimal().then_some(sol.objective_value))
    };
    let cost = |x: &[f64]| true_cost.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();

    let mut worst_margin = f64::INFINITY;
    let mut worst_convexity = f64::INFINITY;
    let mut done = 0;
    for _ in 0..samples {
        let (Some(x1), Some(x2)) = (vertex(&mut rng)?, vertex(&mut rng)?) else {
            continue;
        };
        let t: f64 = rng.gen_range(0.0..=1.0);
        let x: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let q = aggregate(&x);
        let Some(c) = min_cost(&q)? else { continue };
        worst_margin = worst_margin.min(cost(&x) - c);

        let (q1, q2) = (aggregate(&x1), aggregate(&x2));
        let mid: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| 0.5 * (a + b)).collect();
        if let (Some(c1), Some(c2), Some(cm)) = (min_cost(&q1)?, min_cost(&q2)?, min_cost(&mid)?) {
            worst_convexity = worst_convexity.min(0.5 * (c1 + c2) - cm);
        }
        done += 1;
    }
    if done == 0 {
        worst_margin = 0.0;
        worst_convexity = 0.0;
    }
    Ok(Assumption2Report {
        node: aggregator.to_string(),
        passed: worst_margin >= -tol && worst_convexity >= -tol,
        samples: done,
        worst_margin,
        worst_convexity_margin: worst_convexity,
        tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetitionReport {
    pub leaf: String,
    pub passed: bool,
    /// Exogenous top prices cannot move.
    pub by_construction: bool,
    pub max_change: f64,
    pub base: BTreeMap<ServiceId, f64>,
    pub removed: Option<BTreeMap<ServiceId, f64>>,
    pub doubled: Option<BTreeMap<ServiceId, f64>>,
    pub tol: f64,
}

/// Re-clears the tree without `leaf` and with its capacity doubled; the top
/// prices must not move.
pub fn check_competition(tree: &MarketTree, leaf: &str, tol: f64) -> Result<CompetitionReport> {
    let spec = tree
        .find(leaf)
        .ok_or_else(|| Error::UnknownNode(leaf.to_string()))?
        .resource()
        .ok_or_else(|| Error::InvalidParams(format!("`{leaf}` is not a leaf")))?
        .clone();
    if let TopMarket::PriceTaker(p) = &tree.top {
        return Ok(CompetitionReport {
            leaf: leaf.to_string(),
            passed: true,
            by_construction: true,
            max_change: 0.0,
            base: p.clone(),
            removed: None,
            doubled: None,
            tol,
        });
    }
    let top = |t: &MarketTree| -> Result<Option<BTreeMap<ServiceId, f64>>> {
        match clear_monolithic(t) {
            Ok(o) => Ok(Some(o.top_prices().clone())),
            Err(Error::Infeasible(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let base = clear_monolithic(tree)?.top_prices().clone();
    let removed = match tree.restricted_to(&|n| n != leaf) {
        Some(t) => top(&t)?,
        None => None,
    };
    let doubled = top(&tree.with_resource(leaf, spec.scaled(1.0, 2.0))?)?;
    let change = |other: &Option<BTreeMap<ServiceId, f64>>| match other {
        None => f64::INFINITY,
        Some(p) => base
            .iter()
            .map(|(s, v)| (p.get(s).copied().unwrap_or(0.0) - v).abs())
            .fold(0.0, f64::max),
    };
    let max_change = change(&removed).max(change(&doubled));
    Ok(CompetitionReport {
        leaf: leaf.to_string(),
        passed: max_change <= tol,
        by_construction: false,
        max_change,
        base,
        removed,
        doubled,
        tol,
    })
}
