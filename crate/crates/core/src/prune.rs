//! One-shot neuron scoring and global bottom-p% selection.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FormatError, Result, VbpError};
use crate::fsutil;
use crate::grad::{self, Params};
use crate::model::{mlp_layer_name, ModelSpec, WeightStore};
use crate::rng;
use crate::stats::{StatsReport, Tap};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Variance,
    Magnitude,
    Snip,
    Random,
}

impl std::str::FromStr for Criterion {
    type Err = VbpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Criterion::Variance),
            "magnitude" => Ok(Criterion::Magnitude),
            "snip" => Ok(Criterion::Snip),
            "random" => Ok(Criterion::Random),
            other => Err(VbpError::Usage(format!(
                "criterion must be variance|magnitude|snip|random, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Variance => "variance",
            Criterion::Magnitude => "magnitude",
            Criterion::Snip => "snip",
            Criterion::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronScore {
    pub layer: usize,
    pub neuron: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    /// Ascending, unique hidden-neuron indices to remove.
    pub pruned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub criterion: Criterion,
    pub rate: f64,
    pub tap: Tap,
    pub min_keep: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub stats_fingerprint: String,
    pub model_fingerprint: String,
    /// Candidates skipped because their layer had reached `min_keep`.
    #[serde(default)]
    pub guard_skips: usize,
    pub layers: Vec<LayerPlan>,
}

impl PruningPlan {
    /// Plan from explicit per-layer index lists (sorted on the way in).
    pub fn from_layers(
        criterion: Criterion,
        rate: f64,
        tap: Tap,
        min_keep: usize,
        layers: Vec<Vec<usize>>,
        spec: &ModelSpec,
    ) -> Result<PruningPlan> {
        let plan = PruningPlan {
            criterion,
            rate,
            tap,
            min_keep,
            seed: None,
            stats_fingerprint: String::new(),
            model_fingerprint: String::new(),
            guard_skips: 0,
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(l, mut pruned)| {
                    pruned.sort_unstable();
                    LayerPlan { name: mlp_layer_name(l), pruned }
                })
                .collect(),
        };
        plan.validate_against(spec)?;
        Ok(plan)
    }

    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_pruned() == 0
    }

    pub fn validate_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.blocks.len() {
            return Err(VbpError::Plan(format!(
                "plan has {} layers, model has {}",
                self.layers.len(),
                spec.blocks.len()
            )));
        }
        for (l, (layer, block)) in self.layers.iter().zip(&spec.blocks).enumerate() {
            if layer.name != mlp_layer_name(l) {
                return Err(VbpError::Plan(format!("layer {l} is named `{}`", layer.name)));
            }
            let width = block.mlp.d_hid;
            check_indices(&layer.pruned, width)?;
            if width - layer.pruned.len() < self.min_keep.max(1) {
                return Err(VbpError::Plan(format!(
                    "layer `{}` keeps {} of {width} neurons, below min_keep {}",
                    layer.name,
                    width - layer.pruned.len(),
                    self.min_keep.max(1)
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PruningPlan> {
        serde_json::from_slice(bytes).map_err(|e| FormatError::Manifest(format!("plan file: {e}")).into())
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(fsutil::fingerprint(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        fsutil::write_atomic(path.as_ref(), &bytes)?;
        Ok(fsutil::fingerprint(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(PruningPlan, String)> {
        let bytes = std::fs::read(path.as_ref())?;
        Ok((PruningPlan::from_bytes(&bytes)?, fsutil::fingerprint(&bytes)))
    }
}

/// Rejects duplicate, unsorted or out-of-range indices.
pub(crate) fn check_indices(pruned: &[usize], width: usize) -> Result<()> {
    if let Some(&bad) = pruned.iter().find(|&&i| i >= width) {
        return Err(VbpError::Plan(format!("index {bad} out of range for width {width}")));
    }
    if pruned.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VbpError::Plan("indices must be strictly ascending (no duplicates)".into()));
    }
    Ok(())
}

/// Scores are the reported variances.
pub fn score_variance(report: &StatsReport, spec: &ModelSpec) -> Result<Vec<NeuronScore>> {
    report.check_covers(spec)?;
    Ok(report
        .layers
        .iter()
        .enumerate()
        .flat_map(|(layer, ls)| {
            ls.variance
                .iter()
                .enumerate()
                .map(move |(neuron, &score)| NeuronScore { layer, neuron, score })
        })
        .collect())
}

/// Fan-in L1 norm: `Σⱼ |W₁[i,j]| + |b₁[i]|`.
pub fn score_magnitude(spec: &ModelSpec, weights: &WeightStore) -> Result<Vec<NeuronScore>> {
    let mut out = Vec::with_capacity(spec.total_hidden());
    for layer in 0..spec.blocks.len() {
        let mw = weights.mlp(layer)?;
        for (neuron, (row, &b)) in mw.w1.rows().zip(mw.b1.data()).enumerate() {
            let score = row.iter().map(|&w| (w as f64).abs()).sum::<f64>() + (b as f64).abs();
            out.push(NeuronScore { layer, neuron, score });
        }
    }
    Ok(out)
}

/// Structured SNIP saliency: per batch, `Σⱼ |W₁[i,j]·∂L/∂W₁[i,j]| + |b₁[i]·∂L/∂b₁[i]|`
/// under the cross-entropy loss, summed over the first `batches` batches.
pub fn score_snip(
    spec: &ModelSpec,
    weights: &WeightStore,
    dataset: &Dataset,
    batches: usize,
    batch_size: usize,
) -> Result<Vec<NeuronScore>> {
    let labels = dataset.require_labels()?;
    if batches == 0 {
        return Err(VbpError::Usage("snip needs at least one batch".into()));
    }
    let params = Params::from_weights(spec, weights)?;
    let mut scores: Vec<Vec<f64>> = spec.blocks.iter().map(|b| vec![0.0; b.mlp.d_hid]).collect();
    for idx in dataset.batches(batch_size).take(batches) {
        let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
        let batch = dataset.batch(&idx);
        let (logits, cache) = grad::forward(&params, &batch)?;
        let (_, dlogits) = grad::cross_entropy(&logits, &y, spec.num_classes);
        let grads = params.backward(&cache, &dlogits);
        for (l, acc) in scores.iter_mut().enumerate() {
            let w1 = params.get(&format!("block.{l}.mlp.w1"));
            let g1 = grads.get(&format!("block.{l}.mlp.w1"));
            let b1 = params.get(&format!("block.{l}.mlp.b1"));
            let gb = grads.get(&format!("block.{l}.mlp.b1"));
            let d_in = spec.blocks[l].mlp.d_in;
            for (i, s) in acc.iter_mut().enumerate() {
                let row = i * d_in..(i + 1) * d_in;
                *s += w1[row.clone()].iter().zip(&g1[row]).map(|(w, g)| (w * g).abs()).sum::<f64>()
                    + (b1[i] * gb[i]).abs();
            }
        }
    }
    Ok(flatten(scores))
}

/// Seeded uniform scores: the selection-free control.
pub fn score_random(spec: &ModelSpec, seed: u64) -> Vec<NeuronScore> {
    let mut r = rng::stream(seed, "prune.random");
    flatten(spec.blocks.iter().map(|b| (0..b.mlp.d_hid).map(|_| r.gen::<f64>()).collect()).collect())
}

fn flatten(per_layer: Vec<Vec<f64>>) -> Vec<NeuronScore> {
    per_layer
        .into_iter()
        .enumerate()
        .flat_map(|(layer, v)| {
            v.into_iter()
                .enumerate()
                .map(move |(neuron, score)| NeuronScore { layer, neuron, score })
        })
        .collect()
}

/// Metadata stamped onto a plan produced by [`global_select`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanMeta {
    pub criterion: Option<Criterion>,
    pub tap: Tap,
    pub seed: Option<u64>,
    pub stats_fingerprint: String,
    pub model_fingerprint: String,
}

/// Number of neurons to remove: `floor(rate · total)`.
pub fn budget(rate: f64, total: usize) -> usize {
    // the epsilon absorbs products such as 0.29 * 100 = 28.999999999999996
    ((rate * total as f64) + 1e-9).floor() as usize
}

/// Removes the `floor(rate·total)` smallest scores over all layers, ordered by
/// `(score, layer, neuron)`. A candidate whose layer is already down to
/// `min_keep` neurons is skipped and the next candidate takes its place.
pub fn global_select(scores: &[NeuronScore], rate: f64, min_keep: usize, meta: PlanMeta) -> Result<PruningPlan> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(VbpError::Usage(format!("pruning rate must lie in (0, 1), got {rate}")));
    }
    if min_keep == 0 {
        return Err(VbpError::Usage("min_keep must be >= 1".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(VbpError::Numeric(format!(
            "non-finite score {} for layer {} neuron {}",
            s.score, s.layer, s.neuron
        )));
    }
    let layers = scores.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    let mut width = vec![0usize; layers];
    for s in scores {
        width[s.layer] = width[s.layer].max(s.neuron + 1);
    }
    let k = budget(rate, scores.len());

    let mut order: Vec<&NeuronScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.neuron.cmp(&b.neuron))
    });
    let mut pruned: Vec<Vec<usize>> = vec![Vec::new(); layers];
    let mut guard_skips = 0;
    let mut taken = 0;
    for s in order {
        if taken == k {
            break;
        }
        if width[s.layer] - pruned[s.layer].len() > min_keep {
            pruned[s.layer].push(s.neuron);
            taken += 1;
        } else {
            guard_skips += 1;
        }
    }
    for p in &mut pruned {
        p.sort_unstable();
    }
    Ok(PruningPlan {
        criterion: meta.criterion.unwrap_or(Criterion::Variance),
        rate,
        tap: meta.tap,
        min_keep,
        seed: meta.seed,
        stats_fingerprint: meta.stats_fingerprint,
        model_fingerprint: meta.model_fingerprint,
        guard_skips,
        layers: pruned
            .into_iter()
            .enumerate()
            .map(|(l, pruned)| LayerPlan { name: mlp_layer_name(l), pruned })
            .collect(),
    })
}

/// Per-layer breakdown: `layer, d_hid, pruned, fraction`.
pub fn plan_summary(plan: &PruningPlan, spec: &ModelSpec) -> Result<Table> {
    plan.validate_against(spec)?;
    let mut t = Table::new(["layer", "d_hid", "pruned", "fraction"]);
    for (layer, block) in plan.layers.iter().zip(&spec.blocks) {
        let n = layer.pruned.len();
        t.push([
            layer.name.clone(),
            block.mlp.d_hid.to_string(),
            n.to_string(),
            format!("{}", n as f64 / block.mlp.d_hid as f64),
        ]);
    }
    Ok(t)
}
