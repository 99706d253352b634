use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clearing::clear_monolithic;
use crate::error::{Error, Result};
use crate::model::{MarketTree, ResourceSpec};
use crate::settlement::num;

/// Default IC tolerance on money values.
pub const IC_TOL: f64 = 1e-9;

/// Factors 0.50, 0.55, …, 1.50.
pub fn default_factors() -> Vec<f64> {
    (10..=30).map(|k| f64::from(k) * 5.0 / 100.0).collect()
}

/// Profit of one leaf for every reported `(cost factor, capacity factor)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr")]
pub struct MisreportGrid {
    pub target: String,
    pub cost_factors: Vec<f64>,
    pub cap_factors: Vec<f64>,
    /// `profit[i][j]` for `cost_factors[i]`, `cap_factors[j]`. Cells whose
    /// report cannot be cleared hold `-inf` (`null` in JSON).
    #[serde(with = "cells_serde")]
    pub profit: Vec<Vec<f64>>,
    pub truthful_cell: (usize, usize),
}

#[derive(Deserialize)]
struct GridRepr {
    target: String,
    cost_factors: Vec<f64>,
    cap_factors: Vec<f64>,
    #[serde(with = "cells_serde")]
    profit: Vec<Vec<f64>>,
    truthful_cell: (usize, usize),
}

impl TryFrom<GridRepr> for MisreportGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        let shape_ok = r.profit.len() == r.cost_factors.len()
            && r.profit.iter().all(|row| row.len() == r.cap_factors.len());
        let (i, j) = r.truthful_cell;
        let truthful_ok = r.cost_factors.get(i) == Some(&1.0) && r.cap_factors.get(j) == Some(&1.0);
        if !shape_ok || !truthful_ok {
            return Err(Error::InvalidParams(
                "grid cells do not match its factors or truthful cell".into(),
            ));
        }
        Ok(MisreportGrid {
            target: r.target,
            cost_factors: r.cost_factors,
            cap_factors: r.cap_factors,
            profit: r.profit,
            truthful_cell: r.truthful_cell,
        })
    }
}

impl MisreportGrid {
    pub fn truthful_profit(&self) -> f64 {
        self.profit[self.truthful_cell.0][self.truthful_cell.1]
    }

    /// Profit at the given factors, if they are on the grid.
    pub fn at(&self, cost_factor: f64, cap_factor: f64) -> Option<f64> {
        let i = position(&self.cost_factors, cost_factor)?;
        let j = position(&self.cap_factors, cap_factor)?;
        Some(self.profit[i][j])
    }

    /// Long-format CSV: `cost_factor,cap_factor,profit`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cost_factor", "cap_factor", "profit"])?;
        for (i, fc) in self.cost_factors.iter().enumerate() {
            for (j, fk) in self.cap_factors.iter().enumerate() {
                let p = self.profit[i][j];
                let cell = if p.is_finite() { num(p) } else { "-inf".to_string() };
                w.write_record([num(*fc), num(*fk), cell])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn position(factors: &[f64], f: f64) -> Option<usize> {
    factors.iter().position(|x| (x - f).abs() < 1e-12)
}

fn normalize(factors: &[f64], axis: &str) -> Result<Vec<f64>> {
    if let Some(f) = factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(Error::InvalidParams(format!("{axis} factor {f} is not positive")));
    }
    let mut out = factors.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if position(&out, 1.0).is_none() {
        return Err(Error::InvalidParams(format!("{axis} factors must include 1.0")));
    }
    Ok(out)
}

/// Profit credited to a resource with true offer `truth` that was dispatched
/// according to the report in `outcome`. Each quantity is capped at what the
/// resource can physically deliver, paid at its parent's price, and charged
/// at the true cost.
fn credited_profit(
    outcome: &crate::clearing::ClearingOutcome,
    target: &str,
    truth: &ResourceSpec,
) -> f64 {
    let node = outcome.node(target).expect("target is a leaf of the outcome");
    let mut profit = 0.0;
    for (s, &x) in &node.award {
        let delivered = x.clamp(truth.floor(*s), truth.cap(*s));
        let price = outcome.price_paid(target, *s).unwrap_or(0.0);
        profit += (price - truth.cost(*s)) * delivered;
    }
    for (name, &v) in &node.aux {
        profit -= truth.aux_var(name).map_or(0.0, |a| a.cost) * v;
    }
    profit
}

/// Re-clears the tree once per cell with `target` reporting scaled costs and
/// capacities. Cells are evaluated in parallel and assembled by index.
pub fn misreport_sweep(
    tree: &MarketTree,
    target: &str,
    cost_factors: &[f64],
    cap_factors: &[f64],
) -> Result<MisreportGrid> {
    let truth = tree
        .find(target)
        .ok_or_else(|| Error::UnknownNode(target.to_string()))?
        .resource()
        .ok_or_else(|| Error::InvalidParams(format!("`{target}` is not a leaf")))?
        .clone();
    let cost_factors = normalize(cost_factors, "cost")?;
    let cap_factors = normalize(cap_factors, "capacity")?;
    let cells: Vec<(usize, usize)> = (0..cost_factors.len())
        .flat_map(|i| (0..cap_factors.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let reported = truth.scaled(cost_factors[i], cap_factors[j]);
            let t = tree.with_resource(target, reported)?;
            match clear_monolithic(&t) {
                Ok(out) => Ok(credited_profit(&out, target, &truth)),
                Err(Error::Infeasible(_)) | Err(Error::Unbounded(_)) => Ok(f64::NEG_INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut profit = vec![vec![0.0; cap_factors.len()]; cost_factors.len()];
    for (&(i, j), v) in cells.iter().zip(values) {
        profit[i][j] = v;
    }
    let truthful_cell = (
        position(&cost_factors, 1.0).expect("checked above"),
        position(&cap_factors, 1.0).expect("checked above"),
    );
    Ok(MisreportGrid {
        target: target.to_string(),
        cost_factors,
        cap_factors,
        profit,
        truthful_cell,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcVerdict {
    pub ic: bool,
    pub truthful_profit: f64,
    pub best_profit: f64,
    /// Factors of the most profitable cell (first in row-major order on ties).
    pub best_cell: (f64, f64),
    pub gain: f64,
    pub tol: f64,
}

pub fn check_ic(grid: &MisreportGrid, tol: f64) -> IcVerdict {
    let truthful = grid.truthful_profit();
    let mut best = (truthful, grid.truthful_cell);
    for (i, row) in grid.profit.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > best.0 {
                best = (p, (i, j));
            }
        }
    }
    let gain = best.0 - truthful;
    IcVerdict {
        ic: !(gain > tol),
        truthful_profit: truthful,
        best_profit: best.0,
        best_cell: (grid.cost_factors[best.1 .0], grid.cap_factors[best.1 .1]),
        gain,
        tol,
    }
}

/// Convenience for the common cost-only sweep.
pub fn cost_only_sweep(tree: &MarketTree, target: &str, factors: &[f64]) -> Result<MisreportGrid> {
    misreport_sweep(tree, target, factors, &[1.0])
}

/// Sweeps every leaf's costs and reports verdicts by leaf name.
pub fn ic_by_leaf(tree: &MarketTree, factors: &[f64], tol: f64) -> Result<BTreeMap<String, IcVerdict>> {
    tree.leaf_names()
        .into_iter()
        .map(|leaf| Ok((leaf.to_string(), check_ic(&cost_only_sweep(tree, leaf, factors)?, tol))))
        .collect()
}

mod cells_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        rows.iter()
            .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let raw = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
            .collect())
    }
}
