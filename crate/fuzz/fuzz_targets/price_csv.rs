#![no_main]

use libfuzzer_sys::fuzz_target;
use tsm_core::scenario::parse_prices_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(series) = parse_prices_csv(text) {
        let again = parse_prices_csv(&series.to_csv()).expect("canonical output parses");
        assert_eq!(again, series);
    }
});
