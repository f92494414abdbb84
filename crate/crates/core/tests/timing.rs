//! Wall-clock checks, kept in one test so nothing else competes for the cores.

use vbp_core::bench::{bench_latency, bench_pair, BenchOptions};
use vbp_core::model::{init_weights, InitKind, ModelSpec, WeightStore};

fn model(tokens: usize) -> (ModelSpec, WeightStore) {
    let spec = ModelSpec::transformer(2, 96, 384, 4, tokens, 10, None);
    let w = init_weights(&spec, InitKind::default(), 0).unwrap();
    (spec, w)
}

#[test]
fn latency_measurements_are_stable() {
    let (spec, w) = model(65);
    let opts = BenchOptions { batch_size: 4, runs: 15, ..BenchOptions::default() };

    let cold = bench_latency(&spec, &w, BenchOptions { warmup: 0, ..opts }).unwrap();
    let warm = bench_latency(&spec, &w, BenchOptions { warmup: 5, ..opts }).unwrap();
    let rel = (cold.median_ms - warm.median_ms).abs() / warm.median_ms;
    assert!(rel < 0.2, "cold {} ms vs warm {} ms", cold.median_ms, warm.median_ms);

    let (a, b) = bench_pair((&spec, &w), (&spec, &w), opts).unwrap();
    let s = a.median_ms / b.median_ms;
    assert!((0.9..=1.1).contains(&s), "self speedup {s}");

    let (narrow, wn) = model(17);
    assert!(bench_pair((&spec, &w), (&narrow, &wn), opts).is_err());
}
