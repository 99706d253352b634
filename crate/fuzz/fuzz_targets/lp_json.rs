#![no_main]

use libfuzzer_sys::fuzz_target;
use tsm_core::lp::{solve_lp, verify_kkt, LpProblem};

fuzz_target!(|data: &[u8]| {
    let Ok(lp) = serde_json::from_slice::<LpProblem>(data) else { return };
    if lp.num_vars > 32 || lp.constraints.len() > 32 {
        return;
    }
    if let Ok(sol) = solve_lp(&lp) {
        if sol.is_optimal() {
            let _ = verify_kkt(&lp, &sol, 1e-7);
        }
    }
});
