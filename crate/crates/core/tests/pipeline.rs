use proptest::prelude::*;
use vbp_core::compensate::Mode;
use vbp_core::data::{generate, Dataset, SynthConfig};
use vbp_core::model::{count_macs, count_params, init_weights, model_fingerprint, InitKind, ModelSpec};
use vbp_core::pipeline::{plan, prune_model, PruneRequest};
use vbp_core::prune::Criterion;
use vbp_core::stats::{collect_both, CollectOptions, StatsReport};
use vbp_core::train::evaluate;

fn setup(seed: u64) -> (ModelSpec, vbp_core::model::WeightStore, Dataset, StatsReport) {
    let spec = ModelSpec::transformer(2, 8, 12, 2, 4, 3, None);
    let w = init_weights(&spec, InitKind::TruncatedNormal { std: 0.3 }, seed).unwrap();
    let data = generate(&SynthConfig { samples: 48, tokens: 4, dim: 8, classes: 3, seed, separation: 2.0, flip_signs: false })
        .unwrap();
    let (_, post) = collect_both(&spec, &w, &data, CollectOptions::default()).unwrap();
    (spec, w, data, post)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plans_nest_across_rates(seed in 0u64..1000, a in 0.05f64..0.95, b in 0.05f64..0.95, random in any::<bool>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (spec, w, _, post) = setup(seed);
        let criterion = if random { Criterion::Random } else { Criterion::Variance };
        let req = |rate| PruneRequest { seed, scoring: Some(&post), means: Some(&post), ..PruneRequest::new(criterion, rate, Mode::Shift) };
        let small = plan(&spec, &w, &req(lo)).unwrap();
        let large = plan(&spec, &w, &req(hi)).unwrap();
        prop_assume!(small.guard_skips == 0 && large.guard_skips == 0);
        for (s, l) in small.layers.iter().zip(&large.layers) {
            prop_assert!(s.pruned.iter().all(|i| l.pruned.contains(i)), "{:?} not within {:?}", s.pruned, l.pruned);
        }
    }
}

#[test]
fn stats_to_eval_is_deterministic_and_consistent() {
    let (spec, w, data, post) = setup(5);
    let req = PruneRequest { scoring: Some(&post), means: Some(&post), ..PruneRequest::new(Criterion::Variance, 0.5, Mode::Shift) };
    let a = prune_model(&spec, &w, &req).unwrap();
    let b = prune_model(&spec, &w, &req).unwrap();
    assert_eq!(a.plan.to_bytes().unwrap(), b.plan.to_bytes().unwrap());
    assert_eq!(model_fingerprint(&a.spec, &a.weights).unwrap(), model_fingerprint(&b.spec, &b.weights).unwrap());
    assert_eq!(a.plan.model_fingerprint, model_fingerprint(&spec, &w).unwrap());
    assert_eq!(a.plan.stats_fingerprint, post.fingerprint().unwrap());
    assert_eq!(a.plan.total_pruned(), 12);
    let removed: u64 = a.plan.layers.iter().map(|l| l.pruned.len() as u64).sum();
    assert_eq!(count_params(&spec) - count_params(&a.spec), removed * (8 + 8 + 1));
    assert_eq!(count_macs(&spec) - count_macs(&a.spec), 4 * removed * (8 + 8));
    let e = evaluate(&a.spec, &a.weights, &data).unwrap();
    assert!(e.loss.is_finite() && (0.0..=1.0).contains(&e.top1));
}
