//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use tsm_core::allocation::{allocate_shapley, Mechanism};
use tsm_core::analysis::{
    check_competition, check_ic, check_price_invariance, cost_only_sweep, default_factors, IC_TOL,
};
use tsm_core::clearing::{build_clearing_lp, clear, ClearingMode, ClearingOutcome};
use tsm_core::lp::{merit_order_clear, solve_lp, verify_kkt, LpProblem, LpStatus, Sense};
use tsm_core::scenario::{run_case_study, CaseStudyOptions};

const PRICE_TOL: f64 = 1e-7;
const SEQUENTIAL_TOL: f64 = 1e-8;
const KKT_TOL: f64 = 1e-7;
const DUAL_PERTURBATION: f64 = 1e-3;
const SHAPLEY_TOL: f64 = 1e-9;
const CONSERVATION_TOL: f64 = 1e-6;
const INVARIANCE_BUDGET: Duration = Duration::from_secs(60);
const CASE_STUDY_BUDGET: Duration = Duration::from_secs(300);
const TREES: usize = 1000;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, ok: bool, label: &str, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} {label}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

/// Largest KKT residual seen over every optimal clearing.
#[derive(Default)]
struct KktTally {
    checked: usize,
    worst: f64,
    failed: usize,
}

impl KktTally {
    fn add(&mut self, out: &ClearingOutcome) {
        let Some(k) = &out.kkt else { return };
        self.checked += 1;
        self.worst = self.worst.max(k.max_residual());
        if !k.passed {
            self.failed += 1;
        }
    }
}

fn hierarchy_suite(rep: &mut Report, kkt: &mut KktTally) {
    let mut r = common::rng(1001);
    let mut max_gap: f64 = 0.0;
    let mut compared = 0;
    let mut invariance_failures = 0;
    let mut elapsed = Duration::ZERO;
    let mut exact_mismatch = 0;
    let mut seq_gap: f64 = 0.0;
    for _ in 0..TREES {
        let depth = r.gen_range(2..=4);
        let services = r.gen_range(1..=3);
        let tree = common::integer_box_tree(&mut r, depth, 12, services);
        let t = Instant::now();
        let mono = clear(&tree, ClearingMode::Monolithic).unwrap();
        let pi = check_price_invariance(&mono, PRICE_TOL);
        elapsed += t.elapsed();
        max_gap = max_gap.max(pi.max_gap);
        compared += pi.compared;
        invariance_failures += usize::from(!pi.passed);

        let flat = clear(&tree, ClearingMode::Flat).unwrap();
        let seq = clear(&tree, ClearingMode::Sequential).unwrap();
        kkt.add(&mono);
        kkt.add(&flat);
        exact_mismatch += usize::from(mono.objective != flat.objective);
        seq_gap = seq_gap.max((seq.objective - mono.objective).abs());
    }
    rep.line(
        invariance_failures == 0 && elapsed <= INVARIANCE_BUDGET,
        "internal prices equal parent prices on random box trees",
        format!(
            "{TREES} trees, {compared} non-degenerate comparisons, max gap {max_gap:e} (tol {PRICE_TOL:e}), {:.2} s (budget {} s)",
            elapsed.as_secs_f64(),
            INVARIANCE_BUDGET.as_secs()
        ),
    );
    rep.line(
        exact_mismatch == 0 && seq_gap <= SEQUENTIAL_TOL,
        "hierarchy neutrality (monolithic = flat, sequential agrees)",
        format!(
            "{TREES} trees, {exact_mismatch} inexact monolithic/flat objectives, max sequential gap {seq_gap:e} (tol {SEQUENTIAL_TOL:e})"
        ),
    );
}

fn top_level_ic(rep: &mut Report, kkt: &mut KktTally) {
    let mut r = common::rng(1002);
    let factors = default_factors();
    let (mut sweeps, mut violations, mut worst_gain) = (0, 0, f64::NEG_INFINITY);
    for _ in 0..TREES {
        let depth = r.gen_range(2..=4);
        let services = r.gen_range(1..=3);
        let tree = common::price_taking_tree(&mut r, depth, 6, services);
        kkt.add(&clear(&tree, ClearingMode::Monolithic).unwrap());
        for leaf in tree.leaf_names() {
            let v = check_ic(&cost_only_sweep(&tree, leaf, &factors).unwrap(), IC_TOL);
            sweeps += 1;
            violations += usize::from(!v.ic);
            worst_gain = worst_gain.max(v.gain);
        }
    }
    rep.line(
        violations == 0,
        "truthful costs maximise profit for price-taking leaves",
        format!(
            "{TREES} instances, {sweeps} cost-only sweeps of {} factors, {violations} violations, max gain {worst_gain:e} (tol {IC_TOL:e})",
            factors.len()
        ),
    );
}

fn deep_ic(rep: &mut Report) {
    let mut r = common::rng(1003);
    let factors = default_factors();
    let (mut checked, mut violations, mut skipped) = (0, 0, 0);
    for _ in 0..TREES {
        let services = r.gen_range(1..=3);
        let tree = common::integer_box_tree(&mut r, 3, 12, services);
        let out = clear(&tree, ClearingMode::Monolithic).unwrap();
        for leaf in common::leaves_at_depth(&tree, 3) {
            let spec = tree.find(&leaf).unwrap().resource().unwrap();
            if spec.services().any(|s| out.paid_price_degenerate(&leaf, s)) {
                skipped += 1;
                continue;
            }
            if !check_competition(&tree, &leaf, IC_TOL).unwrap().passed {
                continue;
            }
            let v = check_ic(&cost_only_sweep(&tree, &leaf, &factors).unwrap(), IC_TOL);
            checked += 1;
            violations += usize::from(!v.ic);
        }
    }
    rep.line(
        violations == 0 && checked > 0,
        "depth-3 leaves are truthful when the top market is competitive",
        format!("{checked} leaves swept, {violations} violations, {skipped} degenerate skipped (tol {IC_TOL:e})"),
    );
}

fn case_study(rep: &mut Report, kkt: &mut KktTally) {
    let sc = common::load_scenario("casestudy.json");
    let t = Instant::now();
    let report = run_case_study(&sc.tree, &CaseStudyOptions::new("EV1")).unwrap();
    let elapsed = t.elapsed();
    kkt.add(&report.outcome);

    let grid = &report.sweep;
    let truthful = grid.truthful_profit();
    let single: Vec<(f64, f64, f64)> = [(0.9, 1.0), (1.1, 1.0), (1.0, 0.9), (1.0, 1.1)]
        .iter()
        .map(|&(fc, fk)| (fc, fk, grid.at(fc, fk).unwrap()))
        .collect();
    let joint = grid.at(1.1, 1.1).unwrap();
    let single_ok = single.iter().all(|c| c.2 <= truthful + IC_TOL);
    rep.line(
        single_ok && joint > truthful,
        "EV1 gains only from a joint cost and capacity overstatement",
        format!(
            "truthful {truthful:.7}, single-axis max {:.7}, joint (1.1, 1.1) {joint:.7} ({} x {} grid)",
            single.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max),
            grid.cost_factors.len(),
            grid.cap_factors.len()
        ),
    );

    let pi = &report.price_invariance;
    let residual = report.settlement.conservation_residual.abs();
    rep.line(
        pi.passed && residual <= CONSERVATION_TOL && elapsed <= CASE_STUDY_BUDGET,
        "case study: VPP prices equal top prices and money is conserved",
        format!(
            "{} (service, hour) pairs compared, {} degenerate skipped, max gap {:e} (tol {PRICE_TOL:e}), conservation residual {residual:e} (tol {CONSERVATION_TOL:e}), {:.1} s for clear + {} allocations + one sweep (budget {} s)",
            pi.compared,
            pi.skipped.len(),
            pi.max_gap,
            elapsed.as_secs_f64(),
            Mechanism::ALL.len(),
            CASE_STUDY_BUDGET.as_secs()
        ),
    );
}

fn kkt_perturbation(rep: &mut Report, kkt: &mut KktTally) {
    let mut r = common::rng(1004);
    let (mut injected, mut detected) = (0, 0);
    for _ in 0..TREES {
        let depth = r.gen_range(2..=4);
        let services = r.gen_range(1..=3);
        let tree = common::integer_box_tree(&mut r, depth, 12, services);
        let lp = build_clearing_lp(&tree, ClearingMode::Monolithic).unwrap();
        let sol = solve_lp(&lp.problem).unwrap();
        let base = verify_kkt(&lp.problem, &sol, KKT_TOL);
        kkt.checked += 1;
        kkt.worst = kkt.worst.max(base.max_residual());
        kkt.failed += usize::from(!base.passed);
        let rows: Vec<usize> = (0..lp.problem.constraints.len())
            .filter(|&i| !lp.problem.constraints[i].terms.is_empty())
            .collect();
        let i = rows[r.gen_range(0..rows.len())];
        for sign in [1.0, -1.0] {
            let mut bad = sol.clone();
            bad.duals[i] += sign * DUAL_PERTURBATION;
            injected += 1;
            detected += usize::from(!verify_kkt(&lp.problem, &bad, KKT_TOL).passed);
        }
    }
    rep.line(
        kkt.failed == 0 && kkt.worst <= KKT_TOL && detected == injected,
        "KKT residuals vanish and perturbed duals are caught",
        format!(
            "{} optimal clearings, max residual {:e} (tol {KKT_TOL:e}), {detected}/{injected} perturbations of {DUAL_PERTURBATION:e} detected",
            kkt.checked, kkt.worst
        ),
    );
}

fn shapley_and_merit_order(rep: &mut Report) {
    let mut r = common::rng(1005);
    let (mut eff, mut sym, mut null): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let others = r.gen_range(1..=5);
        let tree = common::feeder_game(&mut r, others);
        assert!(tree.leaf_names().len() <= 8);
        let sh = allocate_shapley(&tree).unwrap();
        eff = eff.max((sh.total() - sh.grand_value).abs());
        sym = sym.max((sh.shares["L0"] - sh.shares["TWIN"]).abs());
        null = null.max(sh.shares["NULL"].abs());
    }

    let (mut obj_mismatch, mut dual_mismatch, mut duals) = (0, 0, 0);
    for _ in 0..TREES {
        let n = r.gen_range(1..=10);
        let costs: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..50u32))).collect();
        let caps: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..10u32))).collect();
        let demand = f64::from(r.gen_range(0..=caps.iter().sum::<f64>() as u32));
        let mo = merit_order_clear(&costs, &caps, demand).unwrap();
        let mut lp = LpProblem::new(0);
        let vars: Vec<usize> = costs.iter().zip(&caps).map(|(&c, &k)| lp.add_var(c, 0.0, k)).collect();
        lp.add_row(vars.iter().map(|&j| (j, 1.0)).collect(), Sense::Ge, demand);
        let sol = solve_lp(&lp).unwrap();
        let mo_obj: f64 = costs.iter().zip(&mo.dispatch).map(|(c, x)| c * x).sum();
        obj_mismatch += usize::from(sol.status != LpStatus::Optimal || sol.objective_value != mo_obj);
        if !mo.degenerate {
            duals += 1;
            dual_mismatch += usize::from(sol.duals[0] != mo.price);
        }
    }
    rep.line(
        eff <= SHAPLEY_TOL && sym <= SHAPLEY_TOL && null <= SHAPLEY_TOL,
        "Shapley efficiency, symmetry and null player",
        format!("100 games of 4-8 leaves, max errors {eff:e} / {sym:e} / {null:e} (tol {SHAPLEY_TOL:e})"),
    );
    rep.line(
        obj_mismatch == 0 && dual_mismatch == 0,
        "merit order agrees with the simplex solver",
        format!("{TREES} instances, {obj_mismatch} objective mismatches, {dual_mismatch}/{duals} non-degenerate dual mismatches"),
    );
}

fn main() {
    let mut rep = Report { failed: 0 };
    let mut kkt = KktTally::default();
    hierarchy_suite(&mut rep, &mut kkt);
    top_level_ic(&mut rep, &mut kkt);
    deep_ic(&mut rep);
    case_study(&mut rep, &mut kkt);
    kkt_perturbation(&mut rep, &mut kkt);
    shapley_and_merit_order(&mut rep);
    if rep.failed > 0 {
        println!("{} criteria failed", rep.failed);
        std::process::exit(1);
    }
}
