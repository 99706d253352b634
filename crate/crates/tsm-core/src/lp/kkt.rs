use serde::{Deserialize, Serialize};

use super::{LpProblem, LpSolution, Sense};

/// Largest residual of each family of optimality conditions for a candidate
/// primal/dual pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `max_j |c_j − Σ_i y_i a_ij − μ̲_j + μ̄_j|`.
    pub stationarity: f64,
    pub stationarity_at: Option<usize>,
    /// Largest wrong-signed multiplier (row duals by sense, bound duals ≥ 0,
    /// and multipliers on infinite bounds).
    pub dual_sign: f64,
    /// Largest `|y_i (a_i x − b_i)|`, `|μ̲ (x − lo)|`, `|μ̄ (hi − x)|`.
    pub complementarity: f64,
    pub primal_feasibility: f64,
    /// Some row dual is not unique.
    pub degenerate: bool,
    pub tol: f64,
    pub passed: bool,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.dual_sign)
            .max(self.complementarity)
            .max(self.primal_feasibility)
    }
}

pub fn verify_kkt(problem: &LpProblem, solution: &LpSolution, tol: f64) -> KktReport {
    let n = problem.num_vars;
    let x = &solution.primal;
    let y = &solution.duals;

    let mut grad = problem.objective.clone();
    for (row, &yi) in problem.constraints.iter().zip(y) {
        for &(j, a) in &row.terms {
            grad[j] -= yi * a;
        }
    }

    let mut report = KktReport {
        tol,
        degenerate: solution.degenerate_rows.iter().any(|&d| d),
        ..KktReport::default()
    };

    for j in 0..n {
        let (ml, mu) = solution.bound_duals[j];
        let r = (grad[j] - ml + mu).abs();
        if r > report.stationarity || (r.is_nan() && report.stationarity_at.is_none()) {
            report.stationarity = r;
            report.stationarity_at = Some(j);
        }
        let (lo, hi) = problem.bounds[j];
        let mut sign = (-ml).max(0.0).max((-mu).max(0.0));
        if !lo.is_finite() {
            sign = sign.max(ml.abs());
        }
        if !hi.is_finite() {
            sign = sign.max(mu.abs());
        }
        report.dual_sign = report.dual_sign.max(sign);
        if lo.is_finite() {
            report.complementarity = report.complementarity.max((ml * (x[j] - lo)).abs());
        }
        if hi.is_finite() {
            report.complementarity = report.complementarity.max((mu * (hi - x[j])).abs());
        }
    }

    for (row, &yi) in problem.constraints.iter().zip(y) {
        let sign = match row.sense {
            Sense::Ge => (-yi).max(0.0),
            Sense::Le => yi.max(0.0),
            Sense::Eq => 0.0,
        };
        report.dual_sign = report.dual_sign.max(sign);
        let slack = row.activity(x) - row.rhs;
        report.complementarity = report.complementarity.max((yi * slack).abs());
    }

    report.primal_feasibility = problem.max_violation(x);
    let r = report.max_residual();
    report.passed = r <= tol && !r.is_nan() && !report.stationarity.is_nan();
    report
}

#[cfg(test)]
mod tests {
    use super::super::{solve_lp, LpRow};
    use super::*;

    fn t1() -> LpProblem {
        LpProblem {
            num_vars: 2,
            objective: vec![10.0, 20.0],
            constraints: vec![LpRow::new(vec![(0, 1.0), (1, 1.0)], Sense::Ge, 7.0)],
            bounds: vec![(0.0, 5.0), (0.0, 5.0)],
        }
    }

    #[test]
    fn optimal_solution_has_zero_residuals() {
        let p = t1();
        let sol = solve_lp(&p).unwrap();
        let rep = verify_kkt(&p, &sol, 1e-12);
        assert!(rep.passed);
        assert_eq!(rep.stationarity, 0.0);
    }

    #[test]
    fn corrupted_price_is_caught() {
        let p = t1();
        let mut sol = solve_lp(&p).unwrap();
        sol.duals[0] += 1.0;
        let rep = verify_kkt(&p, &sol, 1e-7);
        assert!(!rep.passed);
        assert_eq!(rep.stationarity, 1.0);
    }

    #[test]
    fn wrong_sign_bound_multiplier_is_caught() {
        let p = t1();
        let mut sol = solve_lp(&p).unwrap();
        sol.bound_duals[1].0 = -0.5;
        sol.bound_duals[1].1 = -0.5;
        let rep = verify_kkt(&p, &sol, 1e-7);
        assert!(!rep.passed);
        assert_eq!(rep.dual_sign, 0.5);
    }
}
