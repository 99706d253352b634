//! Executable incentive and consistency checks: misreporting sweeps with
//! IC verdicts, price invariance across levels, aggregation consistency of
//! declared bids, aggregate cost dominance and price-taking competition.

mod checks;
mod sweep;

pub use checks::{
    check_assumption1, check_assumption1_boxes, check_assumption2, check_competition,
    check_price_invariance, Assumption1Report, Assumption2Report, BoxBounds, BoxMismatch,
    CompetitionReport, PriceGap, PriceInvarianceReport, SampledFeasibility, DEFAULT_SAMPLES,
    DEFAULT_SEED,
};
pub use sweep::{
    check_ic, cost_only_sweep, default_factors, ic_by_leaf, misreport_sweep, IcVerdict,
    MisreportGrid, IC_TOL,
};
