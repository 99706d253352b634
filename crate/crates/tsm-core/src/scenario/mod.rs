//! Case-study layer: hourly price series, linear models of storage, an EV
//! fleet and a thermostatic load, and the end-to-end case study run.

mod case_study;
mod prices;
mod resources;

pub use case_study::{
    private_residual, run_case_study, CaseStudyOptions, CaseStudyReport, PriceComparison,
    PRICE_TOL,
};
pub use prices::{
    bundled_prices, load_prices_csv, parse_prices_csv, PriceSeries, BUNDLED_SYNTHETIC_24H,
    PRICE_HEADER,
};
pub use resources::{
    build_ev_fleet_node, build_storage_node, build_tcl_node, ev_fleet_power, EvFleetParams,
    StorageParams, TclParams,
};
