//! Payments implied by a clearing outcome. Every node is paid its parent's
//! price for the quantity it was awarded; aggregators pass payments down to
//! their children and keep the difference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clearing::{ClearingOutcome, NodeRole};
use crate::error::Result;
use crate::model::{ServiceId, ServiceSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSettlement {
    pub name: String,
    pub role: NodeRole,
    pub revenue: f64,
    /// Payments made to children (aggregators and root).
    pub payout: f64,
    /// Production cost (leaves).
    pub cost: f64,
    pub profit: f64,
    pub revenue_by_service: BTreeMap<ServiceId, f64>,
    pub payout_by_service: BTreeMap<ServiceId, f64>,
    pub cost_by_service: BTreeMap<ServiceId, f64>,
    /// Leaf cost carried by auxiliary variables, not attributable to one
    /// service.
    pub aux_cost: f64,
}

impl NodeSettlement {
    /// Profit per service; auxiliary cost is left out.
    pub fn profit_by_service(&self) -> BTreeMap<ServiceId, f64> {
        let mut out = self.revenue_by_service.clone();
        for (s, v) in &self.payout_by_service {
            *out.entry(*s).or_insert(0.0) -= v;
        }
        for (s, v) in &self.cost_by_service {
            *out.entry(*s).or_insert(0.0) -= v;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    pub nodes: Vec<NodeSettlement>,
    /// What the top market pays the root (demand mode: `Σ λ d`; price-taking:
    /// `Σ λ x`).
    pub top_payment: f64,
    /// `top_payment − Σ profits − Σ leaf costs`.
    pub conservation_residual: f64,
}

impl Settlement {
    pub fn node(&self, name: &str) -> Option<&NodeSettlement> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn profit_of(&self, name: &str) -> Option<f64> {
        self.node(name).map(|n| n.profit)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &NodeSettlement> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Leaf)
    }

    /// Long-format CSV: `node,role,service,revenue,payout,cost,profit`.
    pub fn to_csv(&self, services: &ServiceSet) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["node", "role", "service", "revenue", "payout", "cost", "profit"])?;
        for n in &self.nodes {
            let role = match n.role {
                NodeRole::Root => "root",
                NodeRole::Aggregator => "aggregator",
                NodeRole::Leaf => "leaf",
            };
            let profit = n.profit_by_service();
            for s in profit.keys() {
                w.write_record([
                    n.name.as_str(),
                    role,
                    services.label(*s),
                    &fmt(n.revenue_by_service.get(s)),
                    &fmt(n.payout_by_service.get(s)),
                    &fmt(n.cost_by_service.get(s)),
                    &fmt(profit.get(s)),
                ])?;
            }
            w.write_record([
                n.name.as_str(),
                role,
                "total",
                &num(n.revenue),
                &num(n.payout),
                &num(n.cost),
                &num(n.profit),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn fmt(v: Option<&f64>) -> String {
    num(v.copied().unwrap_or(0.0))
}

/// Formats without a sign on zero.
pub(crate) fn num(v: f64) -> String {
    (v + 0.0).to_string()
}

pub fn settle(outcome: &ClearingOutcome) -> Settlement {
    let mut nodes: Vec<NodeSettlement> = outcome
        .nodes
        .iter()
        .map(|n| {
            let revenue_by_service: BTreeMap<ServiceId, f64> = if n.role == NodeRole::Root {
                n.award
                    .iter()
                    .map(|(s, q)| (*s, n.prices.get(s).copied().unwrap_or(0.0) * q))
                    .collect()
            } else {
                n.award
                    .iter()
                    .map(|(s, q)| (*s, outcome.price_paid(&n.name, *s).unwrap_or(0.0) * q))
                    .collect()
            };
            NodeSettlement {
                name: n.name.clone(),
                role: n.role,
                revenue: revenue_by_service.values().sum(),
                payout: 0.0,
                cost: n.own_cost(),
                profit: 0.0,
                revenue_by_service,
                payout_by_service: BTreeMap::new(),
                cost_by_service: n.service_cost.clone(),
                aux_cost: n.aux_cost,
            }
        })
        .collect();

    let index: BTreeMap<&str, usize> = outcome
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.as_str(), i))
        .collect();
    for (i, n) in outcome.nodes.iter().enumerate() {
        if let Some(p) = n.parent.as_deref() {
            let rev = nodes[i].revenue_by_service.clone();
            let parent = &mut nodes[index[p]];
            for (s, v) in rev {
                *parent.payout_by_service.entry(s).or_insert(0.0) += v;
            }
        }
    }
    for n in &mut nodes {
        n.payout = n.payout_by_service.values().sum();
        n.profit = n.revenue - n.payout - n.cost;
    }
    let top_payment = nodes[0].revenue;
    let accounted: f64 = nodes.iter().map(|n| n.profit + n.cost).sum();
    Settlement {
        nodes,
        top_payment,
        conservation_residual: top_payment - accounted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::clear_monolithic;
    use crate::model::{
        flatten_services, MarketNode, MarketTree, ResourceSpec, ServiceKind, TopMarket,
    };

    const S: ServiceId = ServiceId(0);

    fn t2() -> MarketTree {
        let leaf = |n: &str, c, k| MarketNode::leaf(n, ResourceSpec::boxed([(S, c, k)]));
        MarketTree::new(
            flatten_services(&[ServiceKind::Energy], 1).unwrap(),
            MarketNode::aggregator(
                "ISO",
                vec![
                    MarketNode::aggregator("VPP1", vec![leaf("A", 10.0, 5.0)]),
                    MarketNode::aggregator("VPP2", vec![leaf("B", 20.0, 5.0)]),
                ],
            ),
            TopMarket::Demand([(S, 7.0)].into()),
        )
        .unwrap()
    }

    #[test]
    fn t2_payments() {
        let st = settle(&clear_monolithic(&t2()).unwrap());
        let a = st.node("A").unwrap();
        assert_eq!((a.revenue, a.cost, a.profit), (100.0, 50.0, 50.0));
        let b = st.node("B").unwrap();
        assert_eq!((b.revenue, b.cost, b.profit), (40.0, 40.0, 0.0));
        assert_eq!(st.node("VPP1").unwrap().profit, 0.0);
        assert_eq!(st.top_payment, 140.0);
        assert_eq!(st.node("ISO").unwrap().profit, 0.0);
        assert_eq!(st.conservation_residual, 0.0);
    }

    #[test]
    fn csv_has_total_rows() {
        let tree = t2();
        let st = settle(&clear_monolithic(&tree).unwrap());
        let csv = st.to_csv(&tree.services).unwrap();
        assert!(csv.starts_with("node,role,service,revenue,payout,cost,profit\n"));
        assert!(csv.contains("A,leaf,energy,100,0,50,50\n"));
        assert!(csv.contains("A,leaf,total,100,0,50,50\n"), "{csv}");
    }
}
