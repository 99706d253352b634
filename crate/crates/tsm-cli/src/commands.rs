use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use tsm_core::allocation::{AllocationReport, Mechanism};
use tsm_core::analysis::{
    check_assumption1, check_assumption2, check_competition, check_ic, check_price_invariance,
    cost_only_sweep, default_factors, misreport_sweep, Assumption1Report, Assumption2Report,
    IcVerdict, MisreportGrid, PriceInvarianceReport, IC_TOL,
};
use tsm_core::clearing::{clear, ClearingMode, ClearingOutcome};
use tsm_core::config::{Experiment, Scenario, ScenarioConfig};
use tsm_core::model::{validate_tree, Diagnostic, MarketTree};
use tsm_core::scenario::{run_case_study, CaseStudyOptions, PRICE_TOL};
use tsm_core::settlement::{settle, Settlement};

use crate::grid::{parse_grid, GridError};
use crate::output::Output;
use crate::{Command, Global};

const CONSERVATION_TOL: f64 = 1e-6;
const ASSUMPTION_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Passed,
    Failed,
}

/// The scenario file could not be used as given.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 for problems with the invocation or its inputs, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    use tsm_core::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<GridError>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::UnknownNode(_) | E::InvalidParams(_) | E::Config(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

struct Ctx<'a> {
    global: &'a Global,
    out: Output,
}

impl Ctx<'_> {
    fn strict(&self, passed: bool) -> Status {
        if passed || !self.global.strict {
            Status::Passed
        } else {
            Status::Failed
        }
    }
}

pub fn dispatch(global: &Global, command: Command) -> Result<Status> {
    if let Some(path) = &global.lp_trace {
        let path = global.workdir.join(path);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        tsm_core::lp::set_trace_sink(Some(Box::new(file)));
    }
    let config = match &command {
        Command::Clear { config, .. }
        | Command::Allocate { config, .. }
        | Command::Sweep { config, .. }
        | Command::Verify { config, .. }
        | Command::Casestudy { config, .. }
        | Command::Run { config } => config.clone(),
    };
    let scenario = load(&global.workdir, &config)?;
    let ctx = Ctx {
        global,
        out: Output::create(global.workdir.join(&global.out))?,
    };
    let status = match command {
        Command::Clear { mode, .. } => cmd_clear(&ctx, &scenario, mode),
        Command::Allocate { mechanisms, .. } => cmd_allocate(&ctx, &scenario, &mechanisms),
        Command::Sweep {
            target,
            grid,
            cap_grid,
            ..
        } => {
            let cost = parse_grid(&grid)?;
            let cap = match cap_grid {
                Some(g) => parse_grid(&g)?,
                None => cost.clone(),
            };
            cmd_sweep(&ctx, &scenario, &target, &cost, &cap)
        }
        Command::Verify { samples, .. } => cmd_verify(&ctx, &scenario, samples),
        Command::Casestudy { target, .. } => cmd_casestudy(&ctx, &scenario, &target),
        Command::Run { .. } => cmd_run(&ctx, &scenario),
    };
    tsm_core::lp::set_trace_sink(None);
    status
}

fn load(workdir: &Path, config: &Path) -> Result<Scenario> {
    let path = workdir.join(config);
    let cfg = ScenarioConfig::load(&path)
        .map_err(|e| UsageError(format!("cannot read scenario {}: {e}", path.display())))?;
    let scenario = cfg
        .resolve(workdir)
        .map_err(|e| UsageError(format!("invalid scenario {}: {e}", path.display())))?;
    log::info!(
        "loaded {} ({} leaves, {} services, seed {})",
        path.display(),
        scenario.tree.leaf_names().len(),
        scenario.tree.services.len(),
        scenario.seed
    );
    Ok(scenario)
}

fn cmd_run(ctx: &Ctx, scenario: &Scenario) -> Result<Status> {
    if scenario.experiments.is_empty() {
        return Err(UsageError("the scenario lists no experiments".into()).into());
    }
    let mut status = Status::Passed;
    for exp in &scenario.experiments {
        let s = match exp {
            Experiment::Clear { mode } => cmd_clear(ctx, scenario, *mode)?,
            Experiment::Allocate { mechanisms } => cmd_allocate(ctx, scenario, mechanisms)?,
            Experiment::Sweep {
                target,
                cost_factors,
                cap_factors,
            } => {
                let cost = cost_factors.clone().unwrap_or_else(default_factors);
                let cap = cap_factors.clone().unwrap_or_else(|| cost.clone());
                cmd_sweep(ctx, scenario, target, &cost, &cap)?
            }
            Experiment::Verify => cmd_verify(ctx, scenario, tsm_core::analysis::DEFAULT_SAMPLES)?,
            Experiment::Casestudy { sweep_target } => cmd_casestudy(ctx, scenario, sweep_target)?,
        };
        if s == Status::Failed {
            status = s;
        }
    }
    Ok(status)
}

#[derive(Serialize)]
struct ClearingFile<'a> {
    outcome: &'a ClearingOutcome,
    settlement: &'a Settlement,
}

fn write_clearing(ctx: &Ctx, tree: &MarketTree, out: &ClearingOutcome) -> Result<Settlement> {
    let st = settle(out);
    let mode = out.mode.to_string();
    ctx.out.json(
        &format!("clearing-{mode}.json"),
        &ClearingFile {
            outcome: out,
            settlement: &st,
        },
    )?;
    ctx.out.text(&format!("clearing-{mode}.csv"), &out.to_csv(&tree.services)?)?;
    ctx.out.text(&format!("settlement-{mode}.csv"), &st.to_csv(&tree.services)?)?;
    Ok(st)
}

fn cmd_clear(ctx: &Ctx, scenario: &Scenario, mode: ClearingMode) -> Result<Status> {
    let tree = &scenario.tree;
    let out = clear(tree, mode).with_context(|| format!("{mode} clearing failed"))?;
    let st = write_clearing(ctx, tree, &out)?;
    println!(
        "cleared ({mode}): {} levels, objective {}, top payment {}, conservation residual {:e}",
        out.levels, out.objective, st.top_payment, st.conservation_residual
    );
    for (s, p) in out.top_prices() {
        let flag = if out.root().degenerate.contains(s) { " (degenerate)" } else { "" };
        println!("  price {} = {p}{flag}", tree.services.label(*s));
    }
    let kkt_ok = out.kkt.as_ref().is_none_or(|k| k.passed);
    if !kkt_ok {
        println!("KKT check failed: {:?}", out.kkt);
    }
    Ok(ctx.strict(kkt_ok))
}

fn cmd_allocate(ctx: &Ctx, scenario: &Scenario, mechanisms: &[Mechanism]) -> Result<Status> {
    let tree = &scenario.tree;
    let report = AllocationReport::build(tree, mechanisms).context("allocation failed")?;
    ctx.out.text("allocation.json", &(report.to_json()? + "\n"))?;
    ctx.out.text("allocation.csv", &report.to_csv(&tree.services)?)?;
    for a in &report.allocations {
        println!("{} (grand value {}):", a.mechanism.as_str(), a.grand_value);
        for (leaf, share) in &a.shares {
            println!("  {leaf}: {share}");
        }
        if a.infeasible_coalitions > 0 {
            println!("  {} infeasible coalitions valued at zero", a.infeasible_coalitions);
        }
    }
    for d in &report.distances {
        println!("L1({}, {}) = {}", d.a.as_str(), d.b.as_str(), d.l1);
    }
    Ok(Status::Passed)
}

#[derive(Serialize)]
struct SweepFile<'a> {
    grid: &'a MisreportGrid,
    verdict: &'a IcVerdict,
}

fn write_sweep(ctx: &Ctx, grid: &MisreportGrid, verdict: &IcVerdict) -> Result<()> {
    ctx.out.json(&format!("sweep-{}.json", grid.target), &SweepFile { grid, verdict })?;
    ctx.out.text(&format!("sweep-{}.csv", grid.target), &grid.to_csv()?)
}

fn print_verdict(target: &str, v: &IcVerdict) {
    if v.ic {
        println!("{target}: truthful report is optimal on the grid (profit {})", v.truthful_profit);
    } else {
        println!(
            "{target}: NOT incentive compatible: cost x{} capacity x{} earns {} > truthful {} (gain {:e})",
            v.best_cell.0, v.best_cell.1, v.best_profit, v.truthful_profit, v.gain
        );
    }
}

fn cmd_sweep(ctx: &Ctx, scenario: &Scenario, target: &str, cost: &[f64], cap: &[f64]) -> Result<Status> {
    let grid = misreport_sweep(&scenario.tree, target, cost, cap)?;
    let verdict = check_ic(&grid, IC_TOL);
    write_sweep(ctx, &grid, &verdict)?;
    print_verdict(target, &verdict);
    Ok(ctx.strict(verdict.ic))
}

#[derive(Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

#[derive(Serialize)]
struct Check {
    name: String,
    status: CheckStatus,
    detail: String,
}

#[derive(Serialize)]
struct LeafIc {
    depth: u32,
    competitive: bool,
    verdict: Option<IcVerdict>,
}

#[derive(Serialize)]
struct VerifyFile {
    passed: bool,
    checks: Vec<Check>,
    diagnostics: Vec<Diagnostic>,
    price_invariance: PriceInvarianceReport,
    incentive_compatibility: BTreeMap<String, LeafIc>,
    assumption1: Vec<Assumption1Report>,
    assumption2: Vec<Assumption2Report>,
}

fn status(passed: bool) -> CheckStatus {
    if passed {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    }
}

fn cmd_verify(ctx: &Ctx, scenario: &Scenario, samples: usize) -> Result<Status> {
    let tree = &scenario.tree;
    let mut checks = Vec::new();
    let diagnostics = validate_tree(tree);
    checks.push(Check {
        name: "tree diagnostics".into(),
        status: CheckStatus::Pass,
        detail: if diagnostics.is_empty() {
            "none".into()
        } else {
            diagnostics.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; ")
        },
    });

    let out = clear(tree, ClearingMode::Monolithic).context("monolithic clearing failed")?;
    let kkt = out.kkt.as_ref().expect("monolithic clearing verifies KKT");
    checks.push(Check {
        name: "KKT conditions".into(),
        status: status(kkt.passed),
        detail: format!("max residual {:e} (tol {:e})", kkt.max_residual(), kkt.tol),
    });

    let pi = check_price_invariance(&out, PRICE_TOL);
    let skipped: Vec<String> = pi
        .skipped
        .iter()
        .map(|(n, s)| format!("{n}/{}", tree.services.label(*s)))
        .collect();
    checks.push(Check {
        name: "price invariance".into(),
        status: status(pi.passed),
        detail: format!(
            "{} compared, max gap {:e} (tol {PRICE_TOL:e}); skipped degenerate: {}",
            pi.compared,
            pi.max_gap,
            if skipped.is_empty() { "none".into() } else { skipped.join(", ") }
        ),
    });

    let depths = tree.depths();
    let factors = default_factors();
    let mut ic = BTreeMap::new();
    for leaf in tree.leaf_names() {
        let competitive = check_competition(tree, leaf, IC_TOL)?.passed;
        let verdict = if competitive {
            Some(check_ic(&cost_only_sweep(tree, leaf, &factors)?, IC_TOL))
        } else {
            None
        };
        ic.insert(
            leaf.to_string(),
            LeafIc {
                depth: depths[leaf],
                competitive,
                verdict,
            },
        );
    }
    for (name, top) in [("top-level incentive compatibility", true), ("inductive incentive compatibility", false)] {
        let group: Vec<(&String, &LeafIc)> = ic.iter().filter(|(_, l)| (l.depth == 1) == top).collect();
        let swept: Vec<_> = group.iter().filter_map(|(n, l)| l.verdict.as_ref().map(|v| (n, v))).collect();
        let bad: Vec<String> = swept.iter().filter(|(_, v)| !v.ic).map(|(n, _)| n.to_string()).collect();
        checks.push(Check {
            name: name.into(),
            status: if swept.is_empty() { CheckStatus::Skip } else { status(bad.is_empty()) },
            detail: format!(
                "{} leaves swept, {} price setters skipped{}",
                swept.len(),
                group.len() - swept.len(),
                if bad.is_empty() { String::new() } else { format!("; violated by {}", bad.join(", ")) }
            ),
        });
    }

    let assumption1 = check_assumption1(tree, samples, scenario.seed)?;
    let bad: Vec<&str> = assumption1.iter().filter(|r| !r.passed).map(|r| r.node.as_str()).collect();
    checks.push(Check {
        name: "aggregate feasibility of declared offers".into(),
        status: if assumption1.is_empty() { CheckStatus::Skip } else { status(bad.is_empty()) },
        detail: format!("{} aggregators checked{}", assumption1.len(), failing(&bad)),
    });

    let mut assumption2 = Vec::new();
    for (node, depth) in tree.root.walk(0) {
        if !node.is_leaf() && depth > 0 {
            assumption2.push(check_assumption2(tree, &node.name, samples, scenario.seed, ASSUMPTION_TOL)?);
        }
    }
    let bad: Vec<&str> = assumption2.iter().filter(|r| !r.passed).map(|r| r.node.as_str()).collect();
    checks.push(Check {
        name: "aggregate cost consistency".into(),
        status: if assumption2.is_empty() { CheckStatus::Skip } else { status(bad.is_empty()) },
        detail: format!("{} aggregators checked{}", assumption2.len(), failing(&bad)),
    });

    let passed = checks.iter().all(|c| c.status != CheckStatus::Fail);
    for c in &checks {
        let tag = match c.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skip => "SKIP",
        };
        println!("{tag} {}: {}", c.name, c.detail);
    }
    ctx.out.json(
        "verify.json",
        &VerifyFile {
            passed,
            checks,
            diagnostics,
            price_invariance: pi,
            incentive_compatibility: ic,
            assumption1,
            assumption2,
        },
    )?;
    Ok(ctx.strict(passed))
}

fn failing(nodes: &[&str]) -> String {
    if nodes.is_empty() {
        String::new()
    } else {
        format!("; failed at {}", nodes.join(", "))
    }
}

#[derive(Serialize)]
struct CaseStudySummary<'a> {
    target: &'a str,
    profits: BTreeMap<&'a str, f64>,
    top_payment: f64,
    conservation_residual: f64,
    feasibility_residual: f64,
    soc_residual: f64,
    price_invariance: &'a PriceInvarianceReport,
    ic: &'a IcVerdict,
}

fn cmd_casestudy(ctx: &Ctx, scenario: &Scenario, target: &str) -> Result<Status> {
    let tree = &scenario.tree;
    let report = run_case_study(tree, &CaseStudyOptions::new(target)).context("case study failed")?;
    write_clearing(ctx, tree, &report.outcome)?;
    ctx.out.text("allocation.json", &(report.allocations.to_json()? + "\n"))?;
    ctx.out.text("allocation.csv", &report.allocations.to_csv(&tree.services)?)?;
    write_sweep(ctx, &report.sweep, &report.ic)?;
    ctx.out.text("casestudy-prices.csv", &report.prices_csv()?)?;
    let st = &report.settlement;
    let summary = CaseStudySummary {
        target,
        profits: st.leaves().map(|l| (l.name.as_str(), l.profit)).collect(),
        top_payment: st.top_payment,
        conservation_residual: st.conservation_residual,
        feasibility_residual: report.feasibility_residual,
        soc_residual: report.soc_residual,
        price_invariance: &report.price_invariance,
        ic: &report.ic,
    };
    ctx.out.json("casestudy.json", &summary)?;

    for (leaf, p) in &summary.profits {
        println!("profit {leaf}: {p}");
    }
    let pi = &report.price_invariance;
    println!(
        "internal prices: {} compared, {} degenerate skipped, max gap {:e}",
        pi.compared,
        pi.skipped.len(),
        pi.max_gap
    );
    println!("conservation residual {:e}", st.conservation_residual);
    print_verdict(target, &report.ic);
    Ok(ctx.strict(pi.passed && st.conservation_residual.abs() <= CONSERVATION_TOL))
}
