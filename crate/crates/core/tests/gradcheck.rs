mod common;

use std::time::Instant;

#[test]
fn every_primitive_matches_finite_differences() {
    let start = Instant::now();
    let results = common::gradcheck::all_checks();
    for (name, err) in &results {
        assert!(*err < 1e-4, "{name}: relative error {err:e}");
    }
    assert!(results.len() >= 30);
    assert!(start.elapsed().as_secs() < 60);
}
