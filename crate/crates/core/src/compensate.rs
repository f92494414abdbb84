//! Mean-shift bias compensation and structural compaction.
//!
//! Removing hidden neuron `i` and folding its mean activation `μᵢ` into the
//! output bias gives `b₂' = b₂ + W₂·Δμ`, where `Δμ` equals `μ` on the pruned
//! indices and zero elsewhere. The compacted MLP then reproduces the dense
//! MLP with pruned activations replaced by their means exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result, VbpError};
use crate::fsutil;
use crate::model::{forward_model, mlp_layer_name, model_fingerprint, prune_shape, HiddenHook, ModelSpec, WeightStore};
use crate::prune::{check_indices, PruningPlan};
use crate::stats::{StatsReport, Tap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Shift,
    NoShift,
}

impl std::str::FromStr for Mode {
    type Err = VbpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(Mode::Shift),
            "no-shift" => Ok(Mode::NoShift),
            other => Err(VbpError::Usage(format!("mode must be shift|no-shift, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Shift => "shift",
            Mode::NoShift => "no-shift",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCompensation {
    pub layer: String,
    pub pruned: Vec<usize>,
    /// Full-width `Δμ`, zero outside `pruned`.
    pub delta_mu: Vec<f64>,
    /// `W₂·Δμ` as added to `b₂` (all zeros in no-shift mode).
    pub bias_shift: Vec<f64>,
}

/// Sidecar describing what [`apply_plan`] did to each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationRecord {
    pub mode: Mode,
    pub model_fingerprint: String,
    pub stats_fingerprint: String,
    pub layers: Vec<LayerCompensation>,
}

impl CompensationRecord {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| FormatError::Manifest(format!("compensation file: {e}")).into())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        fsutil::write_atomic(path.as_ref(), &bytes)?;
        Ok(fsutil::fingerprint(&bytes))
    }
}

/// `Δμ` for one layer: the post-activation mean on `pruned`, zero elsewhere.
pub fn build_delta_mu(pruned: &[usize], stats: &StatsReport, layer: usize) -> Result<Vec<f64>> {
    if stats.tap != Tap::Post {
        return Err(VbpError::Integrity(format!(
            "mean-shift compensation needs post-activation means, got {} statistics",
            stats.tap
        )));
    }
    let ls = stats
        .layers
        .get(layer)
        .ok_or_else(|| VbpError::Integrity(format!("statistics have no layer {layer}")))?;
    check_indices(pruned, ls.mean.len())?;
    let mut d = vec![0.0; ls.mean.len()];
    for &i in pruned {
        d[i] = ls.mean[i];
    }
    Ok(d)
}

/// `b₂ + W₂·Δμ`, accumulated in `f64`. Returns the new bias and the shift.
pub fn shift_bias(b2: &Tensor, w2: &Tensor, delta_mu: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    let [out, hid] = w2.shape() else {
        return Err(VbpError::dim("shift_bias W2", w2.shape(), &[b2.numel(), delta_mu.len()]));
    };
    if *hid != delta_mu.len() || *out != b2.numel() {
        return Err(VbpError::dim("shift_bias", w2.shape(), &[b2.numel(), delta_mu.len()]));
    }
    let shift: Vec<f64> = w2
        .rows()
        .map(|row| row.iter().zip(delta_mu).map(|(&w, &m)| w as f64 * m).sum())
        .collect();
    let data = b2.data().iter().zip(&shift).map(|(&b, &s)| (b as f64 + s) as f32).collect();
    Ok((Tensor::new(b2.shape().to_vec(), data)?, shift))
}

/// Drops rows `pruned` of `W₁`/`b₁` and the matching columns of `W₂`.
pub fn compact(w1: &Tensor, b1: &Tensor, w2: &Tensor, pruned: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let hid = w1.num_rows();
    if b1.numel() != hid || w2.last_dim() != hid || w1.shape().len() != 2 || w2.shape().len() != 2 {
        return Err(VbpError::dim("compact", w1.shape(), w2.shape()));
    }
    check_indices(pruned, hid)?;
    let keep = kept(hid, pruned);
    let b1 = Tensor::new(vec![keep.len()], keep.iter().map(|&i| b1.data()[i]).collect())?;
    Ok((w1.select_rows(&keep), b1, w2.select_cols(&keep)))
}

fn kept(width: usize, pruned: &[usize]) -> Vec<usize> {
    let mut it = pruned.iter().peekable();
    (0..width)
        .filter(|i| {
            if it.peek() == Some(&i) {
                it.next();
                false
            } else {
                true
            }
        })
        .collect()
}

/// Applies `plan` to the model: compacts every MLP and, in shift mode, folds
/// the pruned neurons' means into `b₂`.
///
/// `stats` must come from this exact model (fingerprint match), as must the
/// plan. Shift mode additionally requires post-activation statistics.
pub fn apply_plan(
    spec: &ModelSpec,
    weights: &WeightStore,
    plan: &PruningPlan,
    stats: &StatsReport,
    mode: Mode,
) -> Result<(ModelSpec, WeightStore, CompensationRecord)> {
    apply(spec, weights, plan, Some(stats), mode)
}

/// No-shift compaction, for plans whose criterion needed no statistics.
pub fn apply_plan_without_stats(
    spec: &ModelSpec,
    weights: &WeightStore,
    plan: &PruningPlan,
) -> Result<(ModelSpec, WeightStore, CompensationRecord)> {
    apply(spec, weights, plan, None, Mode::NoShift)
}

fn apply(
    spec: &ModelSpec,
    weights: &WeightStore,
    plan: &PruningPlan,
    stats: Option<&StatsReport>,
    mode: Mode,
) -> Result<(ModelSpec, WeightStore, CompensationRecord)> {
    let fp = model_fingerprint(spec, weights)?;
    if let Some(stats) = stats {
        if stats.model_fingerprint != fp {
            return Err(VbpError::Integrity(format!(
                "statistics were collected on model {}, but the model is {fp}",
                stats.model_fingerprint
            )));
        }
        stats.check_covers(spec)?;
    }
    if plan.model_fingerprint != fp {
        return Err(VbpError::Integrity(format!(
            "plan was built for model {}, but the model is {fp}",
            plan.model_fingerprint
        )));
    }
    let new_spec = prune_shape(spec, plan)?;
    let mut out = weights.clone();
    let mut layers = Vec::with_capacity(plan.layers.len());
    for (l, lp) in plan.layers.iter().enumerate() {
        let mw = weights.mlp(l)?;
        let (delta_mu, bias_shift, b2) = match mode {
            Mode::Shift => {
                let stats = stats.ok_or_else(|| {
                    VbpError::Integrity("mean-shift compensation needs post-activation statistics".into())
                })?;
                let dm = build_delta_mu(&lp.pruned, stats, l)?;
                let (b2, shift) = shift_bias(mw.b2, mw.w2, &dm)?;
                (dm, shift, b2)
            }
            Mode::NoShift => (vec![0.0; mw.b1.numel()], vec![0.0; mw.b2.numel()], mw.b2.clone()),
        };
        let (w1, b1, w2) = compact(mw.w1, mw.b1, mw.w2, &lp.pruned)?;
        let p = |s: &str| format!("{}.{s}", mlp_layer_name(l));
        out.insert(p("w1"), w1);
        out.insert(p("b1"), b1);
        out.insert(p("w2"), w2);
        out.insert(p("b2"), b2);
        layers.push(LayerCompensation { layer: lp.name.clone(), pruned: lp.pruned.clone(), delta_mu, bias_shift });
    }
    out.validate(&new_spec)?;
    let record = CompensationRecord {
        mode,
        model_fingerprint: fp,
        stats_fingerprint: stats.map(StatsReport::fingerprint).transpose()?.unwrap_or_default(),
        layers,
    };
    Ok((new_spec, out, record))
}

/// Hook that overwrites pruned post-activations with constants, turning the
/// dense model into the reference for a compensated pruned model.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanReplacement {
    /// Per layer: `(neuron, replacement value)`.
    pub layers: Vec<Vec<(usize, f32)>>,
}

impl MeanReplacement {
    /// Replacement by post-activation means; zeros in no-shift mode.
    pub fn new(plan: &PruningPlan, stats: &StatsReport, mode: Mode) -> Result<Self> {
        let layers = plan
            .layers
            .iter()
            .enumerate()
            .map(|(l, lp)| {
                let dm = match mode {
                    Mode::Shift => build_delta_mu(&lp.pruned, stats, l)?,
                    Mode::NoShift => vec![0.0; stats.layers.get(l).map_or(0, |s| s.mean.len())],
                };
                Ok(lp.pruned.iter().map(|&i| (i, dm.get(i).copied().unwrap_or(0.0) as f32)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(MeanReplacement { layers })
    }
}

impl HiddenHook for MeanReplacement {
    fn on_hidden(&mut self, layer: usize, _pre: &Tensor, post: &mut Tensor) {
        let Some(subs) = self.layers.get(layer) else { return };
        let w = post.last_dim();
        for row in post.data_mut().chunks_exact_mut(w) {
            for &(i, v) in subs {
                row[i] = v;
            }
        }
    }
}

/// Dense forward with the plan's neurons replaced by constants.
pub fn forward_mean_replaced(
    spec: &ModelSpec,
    weights: &WeightStore,
    plan: &PruningPlan,
    stats: &StatsReport,
    mode: Mode,
    batch: &Tensor,
) -> Result<Tensor> {
    plan.validate_against(spec)?;
    let mut hook = MeanReplacement::new(plan, stats, mode)?;
    forward_model(spec, weights, batch, Some(&mut hook))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::model::{forward_mlp, init_weights, InitKind, MlpShape, MlpWeights};
    use crate::prune::{global_select, score_random, score_variance, Criterion, PlanMeta};
    use crate::stats::{collect, LayerStats};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn post_report(means: Vec<Vec<f64>>) -> StatsReport {
        StatsReport {
            model_fingerprint: String::new(),
            tap: Tap::Post,
            layers: means
                .into_iter()
                .enumerate()
                .map(|(l, mean)| LayerStats {
                    name: mlp_layer_name(l),
                    count: 2,
                    variance: vec![1.0; mean.len()],
                    mean,
                })
                .collect(),
        }
    }

    #[test]
    fn single_neuron_shift() {
        let stats = post_report(vec![vec![0.0, 3.0]]);
        let dm = build_delta_mu(&[1], &stats, 0).unwrap();
        assert_eq!(dm, vec![0.0, 3.0]);
        let (b, _) = shift_bias(&t(&[2], &[1.0, 1.0]), &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &dm).unwrap();
        assert_eq!(b.data(), &[7.0, 13.0]);
    }

    #[test]
    fn empty_plan_and_zero_mean_leave_bias() {
        let b2 = t(&[2], &[0.5, -0.5]);
        let w2 = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let stats = post_report(vec![vec![1.0, 0.0, 2.0]]);
        let (b, _) = shift_bias(&b2, &w2, &build_delta_mu(&[], &stats, 0).unwrap()).unwrap();
        assert_eq!(b, b2);
        let (b, _) = shift_bias(&b2, &w2, &build_delta_mu(&[1], &stats, 0).unwrap()).unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn pre_activation_stats_rejected() {
        let mut stats = post_report(vec![vec![1.0, 2.0]]);
        stats.tap = Tap::Pre;
        assert!(matches!(build_delta_mu(&[0], &stats, 0), Err(VbpError::Integrity(_))));
    }

    #[test]
    fn compact_rejects_bad_indices() {
        let w1 = Tensor::zeros(&[3, 2]);
        let b1 = Tensor::zeros(&[3]);
        let w2 = Tensor::zeros(&[2, 3]);
        assert!(matches!(compact(&w1, &b1, &w2, &[3]), Err(VbpError::Plan(_))));
        assert!(matches!(compact(&w1, &b1, &w2, &[1, 1]), Err(VbpError::Plan(_))));
        let (a, b, c) = compact(&w1, &b1, &w2, &[0, 2]).unwrap();
        assert_eq!((a.shape(), b.shape(), c.shape()), (&[1, 2][..], &[1][..], &[2, 1][..]));
    }

    fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn compacted_mlp_equals_mean_replaced_dense(
            seed in 0u64..1000, d_in in 1usize..6, d_hid in 2usize..12, d_out in 1usize..6, mask in any::<u16>()
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (w1, b1) = (rand_t(&[d_hid, d_in], &mut r), rand_t(&[d_hid], &mut r));
            let (w2, b2) = (rand_t(&[d_out, d_hid], &mut r), rand_t(&[d_out], &mut r));
            let mu: Vec<f64> = (0..d_hid).map(|_| r.gen_range(-0.2..1.0)).collect();
            let mut pruned: Vec<usize> = (0..d_hid).filter(|i| mask >> i & 1 == 1).collect();
            pruned.truncate(d_hid - 1);
            let x = rand_t(&[7, d_in], &mut r);

            let stats = post_report(vec![mu]);
            let dm = build_delta_mu(&pruned, &stats, 0).unwrap();
            let (b2s, _) = shift_bias(&b2, &w2, &dm).unwrap();
            let (cw1, cb1, cw2) = compact(&w1, &b1, &w2, &pruned).unwrap();
            let small = MlpShape { d_in, d_hid: d_hid - pruned.len(), d_out };
            let got = forward_mlp(small, &MlpWeights { w1: &cw1, b1: &cb1, w2: &cw2, b2: &b2s }, &x, None).unwrap();

            let plan = PruningPlan::from_layers(
                Criterion::Random, 0.5, Tap::Post, 1, vec![pruned.clone()],
                &ModelSpec::mlp_only(MlpShape { d_in, d_hid, d_out }, 1, 2),
            ).unwrap();
            let mut hook = MeanReplacement::new(&plan, &stats, Mode::Shift).unwrap();
            let dense = MlpShape { d_in, d_hid, d_out };
            let want = forward_mlp(dense, &MlpWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 }, &x, Some(&mut hook)).unwrap();
            prop_assert!(got.max_abs_diff(&want) <= 1e-5, "{}", got.max_abs_diff(&want));
        }

        #[test]
        fn zero_weight_rows_make_pruning_exact(seed in 0u64..500, d_hid in 3usize..10) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (d_in, d_out) = (4, 3);
            let mut w1 = rand_t(&[d_hid, d_in], &mut r);
            let b1 = rand_t(&[d_hid], &mut r);
            let (w2, b2) = (rand_t(&[d_out, d_hid], &mut r), rand_t(&[d_out], &mut r));
            w1.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
            let x = rand_t(&[5, d_in], &mut r);
            let dense = forward_mlp(MlpShape { d_in, d_hid, d_out }, &MlpWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 }, &x, None).unwrap();
            // neuron 0 is constant gelu(b1[0]): its exact mean
            let mu0 = crate::tensor::gelu_scalar(b1.data()[0] as f64);
            let mut mean = vec![0.0; d_hid];
            mean[0] = mu0;
            let dm = build_delta_mu(&[0], &post_report(vec![mean]), 0).unwrap();
            let (b2s, _) = shift_bias(&b2, &w2, &dm).unwrap();
            let (cw1, cb1, cw2) = compact(&w1, &b1, &w2, &[0]).unwrap();
            let got = forward_mlp(MlpShape { d_in, d_hid: d_hid - 1, d_out }, &MlpWeights { w1: &cw1, b1: &cb1, w2: &cw2, b2: &b2s }, &x, None).unwrap();
            prop_assert!(got.max_abs_diff(&dense) <= 1e-5);
        }
    }

    #[test]
    fn shift_error_equals_weighted_deviation() {
        // y_dense - y_pruned = Σ_{i∈P} W₂[:,i]·(hᵢ − μᵢ) row by row
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (d_in, d_hid, d_out) = (5, 8, 4);
        let (w1, b1) = (rand_t(&[d_hid, d_in], &mut r), rand_t(&[d_hid], &mut r));
        let (w2, b2) = (rand_t(&[d_out, d_hid], &mut r), rand_t(&[d_out], &mut r));
        let x = rand_t(&[16, d_in], &mut r);
        let mu: Vec<f64> = (0..d_hid).map(|_| r.gen_range(0.0..0.5)).collect();
        let pruned = vec![1, 4, 6];
        let shape = MlpShape { d_in, d_hid, d_out };
        let dense = forward_mlp(shape, &MlpWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 }, &x, None).unwrap();
        let h = crate::tensor::gelu(&crate::tensor::linear(&x, &w1, Some(&b1)).unwrap());
        let dm = build_delta_mu(&pruned, &post_report(vec![mu.clone()]), 0).unwrap();
        let (b2s, _) = shift_bias(&b2, &w2, &dm).unwrap();
        let (cw1, cb1, cw2) = compact(&w1, &b1, &w2, &pruned).unwrap();
        let small = MlpShape { d_in, d_hid: d_hid - 3, d_out };
        let got = forward_mlp(small, &MlpWeights { w1: &cw1, b1: &cb1, w2: &cw2, b2: &b2s }, &x, None).unwrap();
        for row in 0..16 {
            for o in 0..d_out {
                let expect: f64 = pruned
                    .iter()
                    .map(|&i| w2.row(o)[i] as f64 * (h.row(row)[i] as f64 - mu[i]))
                    .sum();
                let diff = dense.row(row)[o] as f64 - got.row(row)[o] as f64;
                assert!((diff - expect).abs() < 1e-5, "{diff} vs {expect}");
            }
        }
    }

    fn stamped_plan(spec: &ModelSpec, weights: &WeightStore, stats: &StatsReport, rate: f64) -> PruningPlan {
        let meta = PlanMeta {
            criterion: Some(Criterion::Variance),
            tap: stats.tap,
            stats_fingerprint: stats.fingerprint().unwrap(),
            model_fingerprint: model_fingerprint(spec, weights).unwrap(),
            ..PlanMeta::default()
        };
        global_select(&score_variance(stats, spec).unwrap(), rate, 1, meta).unwrap()
    }

    #[test]
    fn apply_plan_matches_mean_replaced_model() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::TruncatedNormal { std: 0.1 }, 2).unwrap();
        let data = generate(&SynthConfig { samples: 96, tokens: 9, dim: 32, classes: 4, seed: 1, separation: 3.0, flip_signs: false }).unwrap();
        let stats = collect(&spec, &weights, &data, Tap::Post).unwrap();
        let plan = stamped_plan(&spec, &weights, &stats, 0.5);
        let (pspec, pw, rec) = apply_plan(&spec, &weights, &plan, &stats, Mode::Shift).unwrap();
        assert_eq!(pspec.total_hidden(), spec.total_hidden() / 2);
        assert_eq!(rec.layers.len(), 2);
        let batch = data.batch(&(0..32).collect::<Vec<_>>());
        let got = forward_model(&pspec, &pw, &batch, None).unwrap();
        let want = forward_mean_replaced(&spec, &weights, &plan, &stats, Mode::Shift, &batch).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-4, "{}", got.max_abs_diff(&want));

        let (_, nw, _) = apply_plan(&spec, &weights, &plan, &stats, Mode::NoShift).unwrap();
        let got = forward_model(&pspec, &nw, &batch, None).unwrap();
        let want = forward_mean_replaced(&spec, &weights, &plan, &stats, Mode::NoShift, &batch).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-4);
    }

    #[test]
    fn fingerprint_mismatch_is_integrity_error() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::default(), 2).unwrap();
        let other = init_weights(&spec, InitKind::default(), 3).unwrap();
        let data = generate(&SynthConfig { samples: 16, tokens: 9, dim: 32, classes: 4, seed: 1, separation: 1.0, flip_signs: false }).unwrap();
        let stats = collect(&spec, &other, &data, Tap::Post).unwrap();
        let mut plan = global_select(&score_random(&spec, 1), 0.5, 1, PlanMeta::default()).unwrap();
        plan.model_fingerprint = model_fingerprint(&spec, &weights).unwrap();
        let err = apply_plan(&spec, &weights, &plan, &stats, Mode::Shift).unwrap_err();
        assert!(matches!(err, VbpError::Integrity(_)));
    }

    #[test]
    fn low_variance_pruning_costs_less_than_high_variance() {
        let spec = ModelSpec::mlp_only(MlpShape { d_in: 8, d_hid: 32, d_out: 8 }, 4, 3);
        let weights = init_weights(&spec, InitKind::TruncatedNormal { std: 0.4 }, 5).unwrap();
        let data = generate(&SynthConfig { samples: 400, tokens: 4, dim: 8, classes: 3, seed: 2, separation: 2.0, flip_signs: false }).unwrap();
        let stats = collect(&spec, &weights, &data, Tap::Post).unwrap();
        let fp = model_fingerprint(&spec, &weights).unwrap();
        let var = &stats.layers[0].variance;
        let mut order: Vec<usize> = (0..32).collect();
        order.sort_by(|&a, &b| var[a].total_cmp(&var[b]));
        let mut low = order[..8].to_vec();
        let mut high = order[24..].to_vec();
        low.sort_unstable();
        high.sort_unstable();
        let batch = data.batch(&(0..400).collect::<Vec<_>>());
        let dense = forward_model(&spec, &weights, &batch, None).unwrap();
        let err = |pruned: Vec<usize>| {
            let mut plan = PruningPlan::from_layers(Criterion::Variance, 0.25, Tap::Post, 1, vec![pruned], &spec).unwrap();
            plan.model_fingerprint = fp.clone();
            let (ps, pw, _) = apply_plan(&spec, &weights, &plan, &stats, Mode::Shift).unwrap();
            let out = forward_model(&ps, &pw, &batch, None).unwrap();
            out.data().iter().zip(dense.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
        };
        assert!(err(low) < err(high));
    }

    #[test]
    fn record_roundtrips() {
        let rec = CompensationRecord {
            mode: Mode::Shift,
            model_fingerprint: "a".into(),
            stats_fingerprint: "b".into(),
            layers: vec![LayerCompensation { layer: "block.0.mlp".into(), pruned: vec![1], delta_mu: vec![0.0, 0.1], bias_shift: vec![0.3] }],
        };
        assert_eq!(CompensationRecord::from_bytes(&rec.to_bytes().unwrap()).unwrap(), rec);
    }
}
