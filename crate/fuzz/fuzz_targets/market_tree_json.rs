#![no_main]

use libfuzzer_sys::fuzz_target;
use tsm_core::model::{validate_tree, MarketTree};

fuzz_target!(|data: &[u8]| {
    let Ok(tree) = serde_json::from_slice::<MarketTree>(data) else { return };
    let _ = validate_tree(&tree);
    let json = tree.to_json().expect("decoded trees serialize");
    let back: MarketTree = serde_json::from_str(&json).expect("round trip");
    assert_eq!(back.root, tree.root);
});
