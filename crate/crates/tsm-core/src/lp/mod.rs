//! Linear programming: a dense bounded-variable simplex with dual
//! extraction, the closed-form merit-order clearing for separable box
//! problems, and a KKT residual checker.

mod kkt;
mod merit;
mod simplex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::model::Sense;

pub use kkt::{verify_kkt, KktReport};
pub use merit::{merit_order_clear, MeritOrder};
pub use simplex::{set_trace_sink, solve_lp, solve_lp_with, SolverOptions};

/// Pivot elements smaller than this are treated as zero.
pub const PIVOT_TOL: f64 = 1e-9;
/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpRow {
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl LpRow {
    pub fn new(terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> Self {
        LpRow { terms, sense, rhs }
    }

    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let r = self.activity(x) - self.rhs;
        match self.sense {
            Sense::Le => r.max(0.0),
            Sense::Ge => (-r).max(0.0),
            Sense::Eq => r.abs(),
        }
    }
}

/// `min objective·x` subject to `constraints` and `lo ≤ x ≤ hi`. Infinite
/// bounds serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<LpRow>,
    #[serde(with = "bounds_serde")]
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    /// Problem with `num_vars` variables bounded below by zero.
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            num_vars,
            objective: vec![0.0; num_vars],
            constraints: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); num_vars],
        }
    }

    pub fn add_var(&mut self, cost: f64, lo: f64, hi: f64) -> usize {
        self.objective.push(cost);
        self.bounds.push((lo, hi));
        self.num_vars += 1;
        self.num_vars - 1
    }

    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> usize {
        self.constraints.push(LpRow::new(terms, sense, rhs));
        self.constraints.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.objective.len() != self.num_vars || self.bounds.len() != self.num_vars {
            return bad(format!(
                "objective/bounds length mismatch: {} vars, {} costs, {} bounds",
                self.num_vars,
                self.objective.len(),
                self.bounds.len()
            ));
        }
        if let Some(j) = self.objective.iter().position(|c| !c.is_finite()) {
            return bad(format!("objective coefficient {j} is not finite"));
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
            {
                return bad(format!("variable {j} has invalid bounds [{lo}, {hi}]"));
            }
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if !row.rhs.is_finite() {
                return bad(format!("row {i} has a non-finite right-hand side"));
            }
            for &(j, a) in &row.terms {
                if j >= self.num_vars {
                    return bad(format!("row {i} references variable {j} out of range"));
                }
                if !a.is_finite() {
                    return bad(format!("row {i} has a non-finite coefficient"));
                }
            }
        }
        Ok(())
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest row or bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self
            .constraints
            .iter()
            .map(|r| r.violation(x))
            .fold(0.0, f64::max);
        let bounds = self
            .bounds
            .iter()
            .zip(x)
            .map(|(&(lo, hi), &v)| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max);
        rows.max(bounds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Result of a solve. Row duals follow the price convention: `>=` rows have
/// non-negative duals, `<=` rows non-positive, so the dual of a demand row is
/// directly the clearing price.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub duals: Vec<f64>,
    /// `(lower, upper)` bound multipliers per variable, both non-negative.
    pub bound_duals: Vec<(f64, f64)>,
    pub objective_value: f64,
    /// Rows whose optimal dual is not unique (the basis sits on a
    /// breakpoint of the value function in that row's direction).
    pub degenerate_rows: Vec<bool>,
    /// Farkas multipliers (infeasible) or a recession direction (unbounded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Vec<f64>>,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    /// Objective of the dual problem implied by the reported multipliers.
    pub fn dual_objective(&self, problem: &LpProblem) -> f64 {
        let rows: f64 = self
            .duals
            .iter()
            .zip(&problem.constraints)
            .map(|(y, r)| y * r.rhs)
            .sum();
        let bounds: f64 = self
            .bound_duals
            .iter()
            .zip(&problem.bounds)
            .map(|(&(ml, mu), &(lo, hi))| {
                let l = if ml != 0.0 { ml * lo } else { 0.0 };
                let u = if mu != 0.0 { mu * hi } else { 0.0 };
                l - u
            })
            .sum();
        rows + bounds
    }
}

mod bounds_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &[(f64, f64)], s: S) -> Result<S::Ok, S::Error> {
        let finite = |v: f64| v.is_finite().then_some(v);
        b.iter()
            .map(|&(lo, hi)| (finite(lo), finite(hi)))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(f64, f64)>, D::Error> {
        let raw = Vec::<(Option<f64>, Option<f64>)>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|(lo, hi)| (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY)))
            .collect())
    }
}
