#![no_main]

use libfuzzer_sys::fuzz_target;
use tsm_core::analysis::{check_ic, MisreportGrid, IC_TOL};

fuzz_target!(|data: &[u8]| {
    let Ok(grid) = serde_json::from_slice::<MisreportGrid>(data) else { return };
    let _ = check_ic(&grid, IC_TOL);
    let _ = grid.to_csv();
});
