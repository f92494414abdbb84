//! Score → select → compact in one call, shared by the CLI, sweeps and ablations.

use crate::compensate::{apply_plan, apply_plan_without_stats, CompensationRecord, Mode};
use crate::data::Dataset;
use crate::error::{Result, VbpError};
use crate::model::{model_fingerprint, ModelSpec, WeightStore};
use crate::prune::{
    global_select, score_magnitude, score_random, score_snip, score_variance, Criterion, NeuronScore, PlanMeta,
    PruningPlan,
};
use crate::stats::{StatsReport, Tap};

#[derive(Debug, Clone, Copy)]
pub struct PruneRequest<'a> {
    pub criterion: Criterion,
    pub rate: f64,
    pub min_keep: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Statistics scored by the variance criterion (either tap).
    pub scoring: Option<&'a StatsReport>,
    /// Post-activation statistics supplying the means for shift mode.
    pub means: Option<&'a StatsReport>,
    /// Labeled calibration data for SNIP.
    pub calibration: Option<&'a Dataset>,
    pub snip_batches: usize,
    pub batch_size: usize,
}

impl<'a> PruneRequest<'a> {
    pub fn new(criterion: Criterion, rate: f64, mode: Mode) -> Self {
        PruneRequest {
            criterion,
            rate,
            min_keep: 1,
            mode,
            seed: 0,
            scoring: None,
            means: None,
            calibration: None,
            snip_batches: 4,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pruned {
    pub spec: ModelSpec,
    pub weights: WeightStore,
    pub plan: PruningPlan,
    pub record: CompensationRecord,
}

pub fn score(spec: &ModelSpec, weights: &WeightStore, req: &PruneRequest<'_>) -> Result<Vec<NeuronScore>> {
    match req.criterion {
        Criterion::Variance => {
            let stats = req
                .scoring
                .ok_or_else(|| VbpError::Usage("variance criterion needs a statistics file".into()))?;
            score_variance(stats, spec)
        }
        Criterion::Magnitude => score_magnitude(spec, weights),
        Criterion::Snip => {
            let data = req
                .calibration
                .ok_or_else(|| VbpError::Usage("snip criterion needs a labeled dataset".into()))?;
            score_snip(spec, weights, data, req.snip_batches, req.batch_size)
        }
        Criterion::Random => Ok(score_random(spec, req.seed)),
    }
}

/// Builds the plan only, stamped with the model and statistics fingerprints.
pub fn plan(spec: &ModelSpec, weights: &WeightStore, req: &PruneRequest<'_>) -> Result<PruningPlan> {
    let fp = model_fingerprint(spec, weights)?;
    for s in [req.scoring, req.means].into_iter().flatten() {
        if s.model_fingerprint != fp {
            return Err(VbpError::Integrity(format!(
                "statistics were collected on model {}, but the model is {fp}",
                s.model_fingerprint
            )));
        }
    }
    let scores = score(spec, weights, req)?;
    let uses_stats = req.criterion == Criterion::Variance;
    let meta = PlanMeta {
        criterion: Some(req.criterion),
        tap: if uses_stats { req.scoring.map_or(Tap::Post, |s| s.tap) } else { Tap::Post },
        seed: (req.criterion == Criterion::Random).then_some(req.seed),
        stats_fingerprint: match req.scoring.filter(|_| uses_stats) {
            Some(s) => s.fingerprint()?,
            None => String::new(),
        },
        model_fingerprint: fp,
    };
    global_select(&scores, req.rate, req.min_keep, meta)
}

/// Plans and applies one pruning step.
pub fn prune_model(spec: &ModelSpec, weights: &WeightStore, req: &PruneRequest<'_>) -> Result<Pruned> {
    let plan = plan(spec, weights, req)?;
    let (spec, weights, record) = match (req.mode, req.means) {
        (Mode::Shift, None) => {
            return Err(VbpError::Integrity(
                "shift mode needs post-activation statistics for the means".into(),
            ))
        }
        (mode, Some(means)) => apply_plan(spec, weights, &plan, means, mode)?,
        (Mode::NoShift, None) => apply_plan_without_stats(spec, weights, &plan)?,
    };
    Ok(Pruned { spec, weights, plan, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::model::{count_params, init_weights, InitKind};
    use crate::stats::{collect_both, CollectOptions};

    #[test]
    fn every_criterion_runs_and_halves_hidden() {
        let spec = ModelSpec::toy();
        let w = init_weights(&spec, InitKind::TruncatedNormal { std: 0.1 }, 1).unwrap();
        let data = generate(&SynthConfig { samples: 64, tokens: 9, dim: 32, classes: 4, seed: 2, separation: 3.0, flip_signs: false }).unwrap();
        let (pre, post) = collect_both(&spec, &w, &data, CollectOptions::default()).unwrap();
        for c in [Criterion::Variance, Criterion::Magnitude, Criterion::Snip, Criterion::Random] {
            let req = PruneRequest {
                scoring: Some(&post),
                means: Some(&post),
                calibration: Some(&data),
                ..PruneRequest::new(c, 0.5, Mode::Shift)
            };
            let p = prune_model(&spec, &w, &req).unwrap();
            assert_eq!(p.spec.total_hidden(), 128);
            assert!(count_params(&p.spec) < count_params(&spec));
        }
        let req = PruneRequest { scoring: Some(&pre), ..PruneRequest::new(Criterion::Variance, 0.5, Mode::Shift) };
        assert!(matches!(prune_model(&spec, &w, &req), Err(VbpError::Integrity(_))));
        let req = PruneRequest { scoring: Some(&pre), means: Some(&pre), ..PruneRequest::new(Criterion::Variance, 0.5, Mode::Shift) };
        assert!(matches!(prune_model(&spec, &w, &req), Err(VbpError::Integrity(_))));
        let req = PruneRequest { scoring: Some(&pre), means: Some(&post), ..PruneRequest::new(Criterion::Variance, 0.5, Mode::Shift) };
        assert_eq!(prune_model(&spec, &w, &req).unwrap().plan.tap, Tap::Pre);
    }
}
