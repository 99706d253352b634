use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationReport, Mechanism};
use crate::analysis::{
    check_ic, check_price_invariance, default_factors, misreport_sweep, IcVerdict, MisreportGrid,
    PriceInvarianceReport,
};
use crate::clearing::{clear_monolithic, ClearingOutcome, NodeRole};
use crate::error::{Error, Result};
use crate::model::{LocalVar, MarketTree, NodeBody, Sense};
use crate::settlement::{num, settle, Settlement};

/// Tolerance for the internal-versus-top price comparison.
pub const PRICE_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyOptions {
    pub sweep_target: String,
    pub cost_factors: Vec<f64>,
    pub cap_factors: Vec<f64>,
    pub mechanisms: Vec<Mechanism>,
}

impl CaseStudyOptions {
    pub fn new(sweep_target: impl Into<String>) -> Self {
        CaseStudyOptions {
            sweep_target: sweep_target.into(),
            cost_factors: default_factors(),
            cap_factors: default_factors(),
            mechanisms: Mechanism::ALL.to_vec(),
        }
    }
}

/// One aggregator's internal price next to the top-market price.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceComparison {
    pub node: String,
    pub service: String,
    pub hour: u32,
    pub top: f64,
    pub internal: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub outcome: ClearingOutcome,
    pub settlement: Settlement,
    pub allocations: AllocationReport,
    pub sweep: MisreportGrid,
    pub ic: IcVerdict,
    pub price_invariance: PriceInvarianceReport,
    pub prices: Vec<PriceComparison>,
    /// Largest violation of any leaf's private constraints.
    pub feasibility_residual: f64,
    /// Largest residual of the state-of-charge recursions.
    pub soc_residual: f64,
}

impl CaseStudyReport {
    /// Long-format CSV of the internal/top price comparison.
    pub fn prices_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["node", "service", "hour", "top", "internal", "degenerate"])?;
        for p in &self.prices {
            w.write_record([
                p.node.clone(),
                p.service.clone(),
                p.hour.to_string(),
                num(p.top),
                num(p.internal),
                p.degenerate.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Largest violation of the leaves' private constraints at the cleared
/// point, over constraints whose label starts with `prefix`.
pub fn private_residual(tree: &MarketTree, outcome: &ClearingOutcome, prefix: &str) -> f64 {
    let mut worst: f64 = 0.0;
    for (node, _) in tree.root.walk(0) {
        let NodeBody::Leaf(spec) = &node.body else { continue };
        let Some(cleared) = outcome.node(&node.name) else { continue };
        for c in spec.private_constraints.iter().filter(|c| c.label.starts_with(prefix)) {
            let lhs: f64 = c
                .terms
                .iter()
                .map(|t| {
                    let v = match &t.var {
                        LocalVar::Service(s) => cleared.award.get(s).copied().unwrap_or(0.0),
                        LocalVar::Aux(a) => cleared.aux.get(a).copied().unwrap_or(0.0),
                    };
                    t.coef * v
                })
                .sum();
            let r = lhs - c.rhs;
            let v = match c.sense {
                Sense::Le => r.max(0.0),
                Sense::Ge => (-r).max(0.0),
                Sense::Eq => r.abs(),
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// Clears a price-taking tree, settles it, runs the allocation benchmarks
/// and one misreport sweep, and compares internal prices with the top ones.
pub fn run_case_study(tree: &MarketTree, opts: &CaseStudyOptions) -> Result<CaseStudyReport> {
    if !tree.top.is_price_taker() {
        return Err(Error::Config("the case study needs exogenous top prices".into()));
    }
    let outcome = clear_monolithic(tree)?;
    let settlement = settle(&outcome);
    let allocations = AllocationReport::build(tree, &opts.mechanisms)?;
    let sweep = misreport_sweep(tree, &opts.sweep_target, &opts.cost_factors, &opts.cap_factors)?;
    let ic = check_ic(&sweep, crate::analysis::IC_TOL);
    let price_invariance = check_price_invariance(&outcome, PRICE_TOL);

    let root = outcome.root();
    let mut prices = Vec::new();
    for n in outcome.nodes.iter().filter(|n| n.role == NodeRole::Aggregator) {
        for (s, &internal) in &n.prices {
            let Some(&top) = root.prices.get(s) else { continue };
            let idx = tree.services.get(*s).expect("service of this scenario");
            prices.push(PriceComparison {
                node: n.name.clone(),
                service: idx.kind.as_str().to_string(),
                hour: idx.hour,
                top,
                internal,
                degenerate: n.degenerate.contains(s),
            });
        }
    }
    Ok(CaseStudyReport {
        feasibility_residual: private_residual(tree, &outcome, ""),
        soc_residual: private_residual(tree, &outcome, "soc@"),
        outcome,
        settlement,
        allocations,
        sweep,
        ic,
        price_invariance,
        prices,
    })
}
