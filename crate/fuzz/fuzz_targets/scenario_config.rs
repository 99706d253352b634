#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use tsm_core::clearing::{clear, ClearingMode};
use tsm_core::config::ScenarioConfig;
use tsm_core::model::validate_tree;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ScenarioConfig::from_json(text) else { return };
    if cfg.services.horizon > 48 {
        return;
    }
    let Ok(scenario) = cfg.resolve(Path::new("/nonexistent")) else { return };
    let _ = validate_tree(&scenario.tree);
    if scenario.tree.leaf_names().len() <= 8 && scenario.tree.services.len() <= 8 {
        for mode in [ClearingMode::Monolithic, ClearingMode::Flat, ClearingMode::Sequential] {
            let _ = clear(&scenario.tree, mode);
        }
    }
});
