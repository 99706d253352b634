//! Dense two-phase primal simplex over bounded variables.
//!
//! Every row `a·x (sense) b` becomes `a·x − s = 0` with a logical variable
//! `s` carrying the row bounds, so the whole problem is `[A −I] z = 0` with
//! `lo ≤ z ≤ hi`. Nonbasic variables sit at a bound (or at zero when free).
//! Rows whose logical cannot start inside its bounds get an artificial,
//! driven out in phase one. Pricing is Dantzig's rule with a switch to
//! Bland's rule after a run of degenerate pivots.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use log::debug;

use super::{LpProblem, LpSolution, LpStatus, Sense, FEAS_TOL, PIVOT_TOL};
use crate::error::{Error, Result};

const OPT_TOL: f64 = 1e-9;
const DEGENERATE_STEP: f64 = 1e-12;

static TRACE_ON: AtomicBool = AtomicBool::new(false);
static TRACE: Mutex<Option<Box<dyn Write + Send>>> = Mutex::new(None);

/// Routes a per-iteration text log of every solve to `sink`; `None` turns
/// tracing off.
pub fn set_trace_sink(sink: Option<Box<dyn Write + Send>>) {
    let mut guard = TRACE.lock().unwrap_or_else(|e| e.into_inner());
    TRACE_ON.store(sink.is_some(), Ordering::SeqCst);
    *guard = sink;
}

fn trace(line: std::fmt::Arguments<'_>) {
    if !TRACE_ON.load(Ordering::Relaxed) {
        return;
    }
    let mut guard = TRACE.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(w) = guard.as_mut() {
        let _ = writeln!(w, "{line}");
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Iteration cap across both phases; `None` derives one from the size.
    pub max_iterations: Option<usize>,
    /// Consecutive degenerate pivots tolerated before switching to Bland.
    pub degenerate_pivot_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: None,
            degenerate_pivot_limit: 50,
        }
    }
}

pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution> {
    solve_lp_with(problem, &SolverOptions::default())
}

pub fn solve_lp_with(problem: &LpProblem, opts: &SolverOptions) -> Result<LpSolution> {
    problem.validate()?;
    let mut tab = Tableau::new(problem);
    let limit = opts
        .max_iterations
        .unwrap_or(10_000 + 50 * (tab.m + tab.ncols));

    if tab.n_art > 0 {
        trace(format_args!(
            "phase 1: {} rows, {} columns, {} artificials",
            tab.m, tab.ncols, tab.n_art
        ));
        match tab.run(1, limit, opts)? {
            Outcome::Optimal => {}
            Outcome::Unbounded { .. } => {
                return Err(Error::NumericalFailure(
                    "phase one reported an unbounded direction".into(),
                ))
            }
        }
        let infeasibility: f64 = (tab.art_start..tab.ncols).map(|j| tab.x[j]).sum();
        let scale = 1.0
            + problem
                .constraints
                .iter()
                .map(|r| r.rhs.abs())
                .fold(0.0, f64::max);
        if infeasibility > FEAS_TOL * scale {
            debug!("LP infeasible: phase-one residual {infeasibility:e}");
            let binv = tab.basis_inverse();
            let farkas = tab.multipliers(&binv);
            return Ok(tab.terminal(problem, LpStatus::Infeasible, Some(farkas)));
        }
        tab.start_phase_two(problem);
    } else {
        tab.start_phase_two(problem);
    }

    trace(format_args!("phase 2"));
    match tab.run(2, limit, opts)? {
        Outcome::Optimal => Ok(tab.finish(problem)),
        Outcome::Unbounded { entering, dir } => {
            let ray = tab.ray(entering, dir);
            Ok(tab.terminal(problem, LpStatus::Unbounded, Some(ray)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable held at zero.
    Free,
}

enum Outcome {
    Optimal,
    Unbounded { entering: usize, dir: f64 },
}

struct Tableau {
    m: usize,
    n: usize,
    ncols: usize,
    art_start: usize,
    n_art: usize,
    /// Row-major `m × ncols` matrix `B⁻¹ [A −I Art]`.
    t: Vec<f64>,
    /// Original sparse columns of `[A −I Art]`.
    cols: Vec<Vec<(usize, f64)>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    status: Vec<VarStatus>,
    basis: Vec<usize>,
    d: Vec<f64>,
    /// Column that formed the initial (diagonal) basis of each row and its
    /// coefficient; `B⁻¹ e_i = t[:, init_col[i]] / init_coef[i]`.
    init_col: Vec<usize>,
    init_coef: Vec<f64>,
    iterations: usize,
}

impl Tableau {
    fn new(p: &LpProblem) -> Self {
        let m = p.constraints.len();
        let n = p.num_vars;

        let mut x0 = vec![0.0; n];
        let mut st0 = vec![VarStatus::Free; n];
        for j in 0..n {
            let (lo, hi) = p.bounds[j];
            if lo.is_finite() {
                x0[j] = lo;
                st0[j] = VarStatus::AtLower;
            } else if hi.is_finite() {
                x0[j] = hi;
                st0[j] = VarStatus::AtUpper;
            }
        }

        let mut need_art = Vec::new();
        let mut row_act = vec![0.0; m];
        let mut row_bounds = vec![(0.0, 0.0); m];
        for (i, row) in p.constraints.iter().enumerate() {
            let r = row.activity(&x0);
            row_act[i] = r;
            let b = row.rhs;
            row_bounds[i] = match row.sense {
                Sense::Ge => (b, f64::INFINITY),
                Sense::Le => (f64::NEG_INFINITY, b),
                Sense::Eq => (b, b),
            };
            let (lo, hi) = row_bounds[i];
            let inside = r >= lo - FEAS_TOL && r <= hi + FEAS_TOL;
            if row.sense == Sense::Eq || !inside {
                need_art.push(i);
            }
        }

        let n_art = need_art.len();
        let art_start = n + m;
        let ncols = n + m + n_art;
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for (i, row) in p.constraints.iter().enumerate() {
            for &(j, a) in &row.terms {
                match cols[j].iter_mut().find(|(r, _)| *r == i) {
                    Some(e) => e.1 += a,
                    None => cols[j].push((i, a)),
                }
            }
            cols[n + i].push((i, -1.0));
        }

        let mut lo = vec![0.0; ncols];
        let mut hi = vec![0.0; ncols];
        let mut x = vec![0.0; ncols];
        let mut status = vec![VarStatus::Basic; ncols];
        for j in 0..n {
            lo[j] = p.bounds[j].0;
            hi[j] = p.bounds[j].1;
            x[j] = x0[j];
            status[j] = st0[j];
        }
        let mut basis = vec![0; m];
        let mut init_col = vec![0; m];
        let mut init_coef = vec![0.0; m];
        for i in 0..m {
            let s = n + i;
            lo[s] = row_bounds[i].0;
            hi[s] = row_bounds[i].1;
            basis[i] = s;
            init_col[i] = s;
            init_coef[i] = -1.0;
            x[s] = row_act[i];
        }
        for (k, &i) in need_art.iter().enumerate() {
            let s = n + i;
            let a = art_start + k;
            let (slo, shi) = row_bounds[i];
            let r = row_act[i];
            let target = if r < slo {
                slo
            } else if r > shi {
                shi
            } else {
                r
            };
            x[s] = target;
            status[s] = if target == slo {
                VarStatus::AtLower
            } else {
                VarStatus::AtUpper
            };
            let sigma = if target - r >= 0.0 { 1.0 } else { -1.0 };
            cols[a].push((i, sigma));
            lo[a] = 0.0;
            hi[a] = f64::INFINITY;
            x[a] = (target - r) * sigma;
            basis[i] = a;
            init_col[i] = a;
            init_coef[i] = sigma;
        }

        let mut t = vec![0.0; m * ncols];
        for (j, col) in cols.iter().enumerate() {
            for &(i, a) in col {
                t[i * ncols + j] = a / init_coef[i];
            }
        }
        for i in 0..m {
            status[basis[i]] = VarStatus::Basic;
        }

        let mut cost = vec![0.0; ncols];
        for c in cost.iter_mut().skip(art_start) {
            *c = 1.0;
        }
        let mut tab = Tableau {
            m,
            n,
            ncols,
            art_start,
            n_art,
            t,
            cols,
            lo,
            hi,
            cost,
            x,
            status,
            basis,
            d: vec![0.0; ncols],
            init_col,
            init_coef,
            iterations: 0,
        };
        tab.recompute_reduced_costs();
        tab
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.t[i * self.ncols..(i + 1) * self.ncols]
    }

    fn recompute_reduced_costs(&mut self) {
        let mut d = self.cost.clone();
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb == 0.0 {
                continue;
            }
            for (dj, &tij) in d.iter_mut().zip(self.row(i)) {
                *dj -= cb * tij;
            }
        }
        for i in 0..self.m {
            d[self.basis[i]] = 0.0;
        }
        self.d = d;
    }

    fn start_phase_two(&mut self, p: &LpProblem) {
        for a in self.art_start..self.ncols {
            self.hi[a] = 0.0;
            self.x[a] = 0.0;
            if self.status[a] != VarStatus::Basic {
                self.status[a] = VarStatus::AtLower;
            }
        }
        // Drive zero-valued artificials out of the basis where possible.
        for r in 0..self.m {
            let b = self.basis[r];
            if b < self.art_start {
                continue;
            }
            let row = self.row(r);
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate().take(self.art_start) {
                if self.status[j] == VarStatus::Basic {
                    continue;
                }
                let mag = v.abs();
                if mag > 1e-7 && best.is_none_or(|(_, bm)| mag > bm) {
                    best = Some((j, mag));
                }
            }
            if let Some((j, _)) = best {
                self.pivot(r, j);
                self.status[b] = VarStatus::AtLower;
                self.x[b] = 0.0;
            }
        }
        self.cost = vec![0.0; self.ncols];
        self.cost[..self.n].copy_from_slice(&p.objective);
        self.recompute_reduced_costs();
    }

    fn choose_entering(&self, bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.ncols {
            let st = self.status[j];
            if st == VarStatus::Basic || self.lo[j] == self.hi[j] {
                continue;
            }
            let dj = self.d[j];
            let dir = match st {
                VarStatus::AtLower if dj < -OPT_TOL => 1.0,
                VarStatus::AtUpper if dj > OPT_TOL => -1.0,
                VarStatus::Free if dj < -OPT_TOL => 1.0,
                VarStatus::Free if dj > OPT_TOL => -1.0,
                _ => continue,
            };
            if bland {
                return Some((j, dir));
            }
            if best.is_none_or(|(_, _, m)| dj.abs() > m) {
                best = Some((j, dir, dj.abs()));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn run(&mut self, phase: u8, limit: usize, opts: &SolverOptions) -> Result<Outcome> {
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= limit {
                return Err(Error::NumericalFailure(format!(
                    "iteration limit {limit} reached in phase {phase}"
                )));
            }
            let bland = degenerate_run > opts.degenerate_pivot_limit;
            let Some((q, dir)) = self.choose_entering(bland) else {
                return Ok(Outcome::Optimal);
            };
            self.iterations += 1;

            // Ratio test: basic variables move by −dir·α·t.
            let mut step = f64::INFINITY;
            let mut leave: Option<(usize, f64)> = None;
            let mut leave_mag = 0.0;
            for i in 0..self.m {
                let alpha = self.t[i * self.ncols + q];
                if alpha.abs() <= PIVOT_TOL {
                    continue;
                }
                let delta = -dir * alpha;
                let b = self.basis[i];
                let (limit_t, bound) = if delta < 0.0 {
                    if !self.lo[b].is_finite() {
                        continue;
                    }
                    (((self.x[b] - self.lo[b]) / -delta).max(0.0), self.lo[b])
                } else {
                    if !self.hi[b].is_finite() {
                        continue;
                    }
                    (((self.hi[b] - self.x[b]) / delta).max(0.0), self.hi[b])
                };
                let better = match leave {
                    None => true,
                    Some((r, _)) => {
                        if limit_t < step - 1e-12 {
                            true
                        } else if limit_t <= step + 1e-12 {
                            if bland {
                                b < self.basis[r]
                            } else {
                                alpha.abs() > leave_mag
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    step = step.min(limit_t);
                    leave = Some((i, bound));
                    leave_mag = alpha.abs();
                }
            }

            let range = self.hi[q] - self.lo[q];
            let flip = range.is_finite() && range <= step;
            if !flip && leave.is_none() {
                return Ok(Outcome::Unbounded { entering: q, dir });
            }
            let t = if flip { range } else { step };
            if t <= DEGENERATE_STEP {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }

            self.x[q] += dir * t;
            for i in 0..self.m {
                let alpha = self.t[i * self.ncols + q];
                if alpha != 0.0 {
                    let b = self.basis[i];
                    self.x[b] -= dir * alpha * t;
                }
            }

            if flip {
                self.status[q] = if dir > 0.0 {
                    self.x[q] = self.hi[q];
                    VarStatus::AtUpper
                } else {
                    self.x[q] = self.lo[q];
                    VarStatus::AtLower
                };
                trace(format_args!(
                    "it {:>5} p{phase} flip x{q} step {t:.6e} obj {:.10e}",
                    self.iterations,
                    self.phase_objective()
                ));
                continue;
            }

            let (r, bound) = leave.expect("leaving row");
            let out = self.basis[r];
            self.pivot(r, q);
            self.x[out] = bound;
            self.status[out] = if bound == self.lo[out] {
                VarStatus::AtLower
            } else {
                VarStatus::AtUpper
            };
            trace(format_args!(
                "it {:>5} p{phase} in x{q} out x{out} row {r} step {t:.6e} obj {:.10e}{}",
                self.iterations,
                self.phase_objective(),
                if bland { " [bland]" } else { "" }
            ));
        }
    }

    fn phase_objective(&self) -> f64 {
        self.cost.iter().zip(&self.x).map(|(c, x)| c * x).sum()
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let nc = self.ncols;
        let piv = self.t[r * nc + q];
        {
            let row = &mut self.t[r * nc..(r + 1) * nc];
            for v in row.iter_mut() {
                *v /= piv;
            }
            row[q] = 1.0;
        }
        let pivot_row: Vec<f64> = self.t[r * nc..(r + 1) * nc].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * nc + q];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * nc..(i + 1) * nc];
            for (v, &p) in row.iter_mut().zip(&pivot_row) {
                if p != 0.0 {
                    *v -= f * p;
                }
            }
            row[q] = 0.0;
        }
        let f = self.d[q];
        if f != 0.0 {
            for (v, &p) in self.d.iter_mut().zip(&pivot_row) {
                if p != 0.0 {
                    *v -= f * p;
                }
            }
        }
        self.d[q] = 0.0;
        self.basis[r] = q;
        self.status[q] = VarStatus::Basic;
    }

    /// Dense `m × m` inverse of the current basis, row-major.
    fn basis_inverse(&self) -> Vec<f64> {
        let m = self.m;
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            let c = self.init_col[i];
            let coef = self.init_coef[i];
            for k in 0..m {
                binv[k * m + i] = self.t[k * self.ncols + c] / coef;
            }
        }
        binv
    }

    /// Simplex multipliers `y = c_B B⁻¹` for the current phase costs.
    fn multipliers(&self, binv: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for k in 0..m {
            let cb = self.cost[self.basis[k]];
            if cb == 0.0 {
                continue;
            }
            for i in 0..m {
                y[i] += cb * binv[k * m + i];
            }
        }
        y
    }

    /// Recomputes basic values from the nonbasic ones and the original
    /// columns, removing drift accumulated over the pivots.
    fn refine_primal(&mut self, binv: &[f64]) {
        let m = self.m;
        let mut v = vec![0.0; m];
        for j in 0..self.ncols {
            if self.status[j] == VarStatus::Basic || self.x[j] == 0.0 {
                continue;
            }
            for &(i, a) in &self.cols[j] {
                v[i] += a * self.x[j];
            }
        }
        for k in 0..m {
            let mut s = 0.0;
            for i in 0..m {
                s += binv[k * m + i] * v[i];
            }
            let b = self.basis[k];
            let mut val = -s;
            // Snap values within tolerance of a bound onto it.
            if self.lo[b].is_finite() && (val - self.lo[b]).abs() <= FEAS_TOL * 1e-2 {
                val = self.lo[b];
            }
            if self.hi[b].is_finite() && (val - self.hi[b]).abs() <= FEAS_TOL * 1e-2 {
                val = self.hi[b];
            }
            self.x[b] = val;
        }
    }

    fn ray(&self, q: usize, dir: f64) -> Vec<f64> {
        let mut ray = vec![0.0; self.n];
        if q < self.n {
            ray[q] = dir;
        }
        for i in 0..self.m {
            let b = self.basis[i];
            if b < self.n {
                ray[b] = -dir * self.t[i * self.ncols + q];
            }
        }
        ray
    }

    fn terminal(&self, p: &LpProblem, status: LpStatus, certificate: Option<Vec<f64>>) -> LpSolution {
        let primal = self.x[..self.n].to_vec();
        LpSolution {
            status,
            objective_value: p.objective_at(&primal),
            primal,
            duals: vec![0.0; self.m],
            bound_duals: vec![(0.0, 0.0); self.n],
            degenerate_rows: vec![false; self.m],
            certificate,
            iterations: self.iterations,
        }
    }

    fn finish(&mut self, p: &LpProblem) -> LpSolution {
        let binv = self.basis_inverse();
        self.refine_primal(&binv);
        let y = self.multipliers(&binv);

        let mut bound_duals = vec![(0.0, 0.0); self.n];
        for j in 0..self.n {
            let dj = p.objective[j] - self.cols[j].iter().map(|&(i, a)| y[i] * a).sum::<f64>();
            bound_duals[j] = match self.status[j] {
                VarStatus::Basic | VarStatus::Free => (0.0, 0.0),
                _ if self.lo[j] == self.hi[j] => (dj.max(0.0), (-dj).max(0.0)),
                VarStatus::AtLower => (dj, 0.0),
                VarStatus::AtUpper => (0.0, -dj),
            };
        }

        let m = self.m;
        let at_bound = |b: usize| {
            let v = self.x[b];
            let near = |bd: f64| bd.is_finite() && (v - bd).abs() <= 1e-9 * (1.0 + bd.abs());
            near(self.lo[b]) || near(self.hi[b])
        };
        let degenerate_basic: Vec<usize> = (0..m).filter(|&k| at_bound(self.basis[k])).collect();
        let degenerate_rows = (0..m)
            .map(|i| {
                degenerate_basic
                    .iter()
                    .any(|&k| binv[k * m + i].abs() > 1e-9)
            })
            .collect();

        let primal = self.x[..self.n].to_vec();
        LpSolution {
            status: LpStatus::Optimal,
            objective_value: p.objective_at(&primal),
            primal,
            duals: y,
            bound_duals,
            degenerate_rows,
            certificate: None,
            iterations: self.iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{verify_kkt, LpRow};
    use super::*;

    fn t1(demand: f64, cap_b: f64) -> LpProblem {
        LpProblem {
            num_vars: 2,
            objective: vec![10.0, 20.0],
            constraints: vec![LpRow::new(vec![(0, 1.0), (1, 1.0)], Sense::Ge, demand)],
            bounds: vec![(0.0, 5.0), (0.0, cap_b)],
        }
    }

    #[test]
    fn two_resource_merit_instance() {
        let sol = solve_lp(&t1(7.0, 5.0)).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_eq!(sol.primal, vec![5.0, 2.0]);
        assert_eq!(sol.duals, vec![20.0]);
        assert_eq!(sol.objective_value, 90.0);
        // A sits at its cap: c − λ + μ̄ = 10 − 20 + 10 = 0.
        assert_eq!(sol.bound_duals[0], (0.0, 10.0));
        assert!(!sol.degenerate_rows[0]);
        assert!(verify_kkt(&t1(7.0, 5.0), &sol, 1e-9).passed);
    }

    #[test]
    fn identity_problem() {
        let p = LpProblem {
            num_vars: 1,
            objective: vec![1.0],
            constraints: vec![LpRow::new(vec![(0, 1.0)], Sense::Ge, 0.0)],
            bounds: vec![(0.0, f64::INFINITY)],
        };
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_eq!(sol.primal, vec![0.0]);
        assert_eq!(sol.objective_value, 0.0);
    }

    #[test]
    fn capacity_shortfall_is_infeasible_with_certificate() {
        let p = LpProblem {
            num_vars: 2,
            objective: vec![10.0, 20.0],
            constraints: vec![LpRow::new(vec![(0, 1.0), (1, 1.0)], Sense::Ge, 7.0)],
            bounds: vec![(0.0, 3.0), (0.0, 3.0)],
        };
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
        let y = sol.certificate.unwrap();
        assert!(y[0] > 0.0);
    }

    #[test]
    fn unbounded_direction_is_reported() {
        let p = LpProblem {
            num_vars: 2,
            objective: vec![-1.0, 0.0],
            constraints: vec![LpRow::new(vec![(0, 1.0), (1, -1.0)], Sense::Le, 1.0)],
            bounds: vec![(0.0, f64::INFINITY), (0.0, f64::INFINITY)],
        };
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Unbounded);
        let ray = sol.certificate.unwrap();
        assert!(ray[0] > 0.0);
        assert!(ray[0] - ray[1] <= 1e-12);
    }

    #[test]
    fn demand_at_total_capacity_is_degenerate() {
        let sol = solve_lp(&t1(10.0, 5.0)).unwrap();
        assert_eq!(sol.primal, vec![5.0, 5.0]);
        assert!(sol.degenerate_rows[0]);
    }

    #[test]
    fn zero_demand_has_zero_price() {
        let sol = solve_lp(&t1(0.0, 5.0)).unwrap();
        assert_eq!(sol.primal, vec![0.0, 0.0]);
        assert_eq!(sol.duals, vec![0.0]);
        let report = verify_kkt(&t1(0.0, 5.0), &sol, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn equality_rows_and_free_variables() {
        // min x0 + 2 x1 s.t. x0 + x1 = 4, x0 - x1 <= 1, x free
        let p = LpProblem {
            num_vars: 2,
            objective: vec![1.0, 2.0],
            constraints: vec![
                LpRow::new(vec![(0, 1.0), (1, 1.0)], Sense::Eq, 4.0),
                LpRow::new(vec![(0, 1.0), (1, -1.0)], Sense::Le, 1.0),
            ],
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); 2],
        };
        let sol = solve_lp(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.primal[0] - 2.5).abs() < 1e-12);
        assert!((sol.primal[1] - 1.5).abs() < 1e-12);
        assert!((sol.objective_value - 5.5).abs() < 1e-12);
        assert!(sol.duals[1] <= 0.0);
        let report = verify_kkt(&p, &sol, 1e-9);
        assert!(report.passed, "{report:?}");
        assert!((sol.dual_objective(&p) - sol.objective_value).abs() < 1e-9);
    }

    #[test]
    fn degenerate_cycling_prone_problem_terminates() {
        // Beale's classic cycling example (in minimisation form).
        let p = LpProblem {
            num_vars: 4,
            objective: vec![-0.75, 150.0, -0.02, 6.0],
            constraints: vec![
                LpRow::new(vec![(0, 0.25), (1, -60.0), (2, -0.04), (3, 9.0)], Sense::Le, 0.0),
                LpRow::new(vec![(0, 0.5), (1, -90.0), (2, -0.02), (3, 3.0)], Sense::Le, 0.0),
                LpRow::new(vec![(2, 1.0)], Sense::Le, 1.0),
            ],
            bounds: vec![(0.0, f64::INFINITY); 4],
        };
        let sol = solve_lp_with(
            &p,
            &SolverOptions {
                degenerate_pivot_limit: 0,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.objective_value + 0.05).abs() < 1e-9);
    }

    #[test]
    fn malformed_problem_is_rejected() {
        let mut p = t1(1.0, 1.0);
        p.constraints[0].terms.push((9, 1.0));
        assert!(solve_lp(&p).is_err());
    }
}
