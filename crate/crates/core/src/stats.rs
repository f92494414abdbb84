//! Streaming per-neuron activation statistics (Welford) and their exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, VbpError};
use crate::fsutil;
use crate::model::{forward_model, mlp_layer_name, model_fingerprint, HiddenHook, ModelSpec, WeightStore};
use crate::table::Table;
use crate::tensor::Tensor;

/// Where hidden activations are observed: before or after the nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Pre,
    #[default]
    Post,
}

impl std::str::FromStr for Tap {
    type Err = VbpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Tap::Pre),
            "post" => Ok(Tap::Post),
            other => Err(VbpError::Usage(format!("tap must be pre|post, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tap::Pre => "pre",
            Tap::Post => "post",
        })
    }
}

/// Running count, mean and sum of squared deviations (`m₂`) per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfordAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WelfordAccumulator {
    pub fn new(width: usize) -> Self {
        WelfordAccumulator {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    /// Observes one activation vector.
    ///
    /// `μ⁽ʲ⁾ = μ⁽ʲ⁻¹⁾ + (h − μ⁽ʲ⁻¹⁾)/j`, which equals `((j−1)/j)·μ⁽ʲ⁻¹⁾ + h/j`,
    /// and `m₂⁽ʲ⁾ = m₂⁽ʲ⁻¹⁾ + (h − μ⁽ʲ⁻¹⁾)⊙(h − μ⁽ʲ⁾)`.
    pub fn update<T: Copy + Into<f64>>(&mut self, h: &[T]) -> Result<()> {
        if h.len() != self.width() {
            return Err(VbpError::dim("WelfordAccumulator::update", &[self.width()], &[h.len()]));
        }
        self.count += 1;
        let j = self.count as f64;
        for ((mu, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(h) {
            let x: f64 = x.into();
            let before = x - *mu;
            *mu += before / j;
            *m2 = (*m2 + before * (x - *mu)).max(0.0);
        }
        Ok(())
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &WelfordAccumulator) -> Result<WelfordAccumulator> {
        if self.width() != other.width() {
            return Err(VbpError::dim("WelfordAccumulator::merge", &[self.width()], &[other.width()]));
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = WelfordAccumulator::new(self.width());
        out.count = self.count + other.count;
        for i in 0..self.width() {
            let delta = other.mean[i] - self.mean[i];
            out.mean[i] = self.mean[i] + delta * nb / n;
            out.m2[i] = (self.m2[i] + other.m2[i] + delta * delta * na * nb / n).max(0.0);
        }
        Ok(out)
    }

    /// `(μ, σ²)` with the sample variance `σ² = m₂ / (N − 1)`.
    pub fn finalize(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.count < 2 {
            return Err(VbpError::InsufficientSamples { needed: 2, got: self.count });
        }
        let denom = (self.count - 1) as f64;
        Ok((self.mean.clone(), self.m2.iter().map(|m| m / denom).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub count: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Finalized per-layer statistics for one tap location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub model_fingerprint: String,
    pub tap: Tap,
    pub layers: Vec<LayerStats>,
}

impl StatsReport {
    pub fn from_accumulators(
        model_fingerprint: String,
        tap: Tap,
        accs: &[WelfordAccumulator],
    ) -> Result<StatsReport> {
        let layers = accs
            .iter()
            .enumerate()
            .map(|(l, acc)| {
                let (mean, variance) = acc.finalize()?;
                Ok(LayerStats {
                    name: mlp_layer_name(l),
                    count: acc.count(),
                    mean,
                    variance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StatsReport { model_fingerprint, tap, layers })
    }

    /// Checks that the report has one layer per MLP with matching widths.
    pub fn check_covers(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.blocks.len() {
            return Err(VbpError::Integrity(format!(
                "stats cover {} layers, model has {}",
                self.layers.len(),
                spec.blocks.len()
            )));
        }
        for (l, (layer, block)) in self.layers.iter().zip(&spec.blocks).enumerate() {
            let w = block.mlp.d_hid;
            if layer.mean.len() != w || layer.variance.len() != w || layer.name != mlp_layer_name(l) {
                return Err(VbpError::Integrity(format!(
                    "stats layer `{}` does not match {} (width {w})",
                    layer.name,
                    mlp_layer_name(l)
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

    pub fn from_bytes(bytes: &[u8]) -> Result<StatsReport> {
        let r: StatsReport = serde_json::from_slice(bytes)
            .map_err(|e| crate::error::FormatError::Manifest(format!("stats file: {e}")))?;
        for l in &r.layers {
            if l.count < 2 || l.variance.iter().any(|&v| !(v >= 0.0)) || l.mean.len() != l.variance.len() {
                return Err(crate::error::FormatError::Manifest(format!("stats layer `{}` is malformed", l.name)).into());
            }
        }
        Ok(r)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(fsutil::fingerprint(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        fsutil::write_atomic(path.as_ref(), &bytes)?;
        Ok(fsutil::fingerprint(&bytes))
    }

    /// Loads a report and the fingerprint of its file bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(StatsReport, String)> {
        let bytes = std::fs::read(path.as_ref())?;
        Ok((StatsReport::from_bytes(&bytes)?, fsutil::fingerprint(&bytes)))
    }
}

/// Feeds every token row of every MLP's hidden activations into per-layer
/// accumulators, for both tap locations at once.
#[derive(Debug, Clone)]
pub struct StatsTap {
    pub pre: Vec<WelfordAccumulator>,
    pub post: Vec<WelfordAccumulator>,
}

impl StatsTap {
    pub fn new(spec: &ModelSpec) -> Self {
        let accs: Vec<_> = spec.blocks.iter().map(|b| WelfordAccumulator::new(b.mlp.d_hid)).collect();
        StatsTap { pre: accs.clone(), post: accs }
    }

    pub fn merge(&self, other: &StatsTap) -> Result<StatsTap> {
        let zip = |a: &[WelfordAccumulator], b: &[WelfordAccumulator]| {
            a.iter().zip(b).map(|(x, y)| x.merge(y)).collect::<Result<Vec<_>>>()
        };
        Ok(StatsTap {
            pre: zip(&self.pre, &other.pre)?,
            post: zip(&self.post, &other.post)?,
        })
    }
}

impl HiddenHook for StatsTap {
    fn on_hidden(&mut self, layer: usize, pre: &Tensor, post: &mut Tensor) {
        for (row_pre, row_post) in pre.rows().zip(post.rows()) {
            self.pre[layer].update(row_pre).expect("width fixed by spec");
            self.post[layer].update(row_post).expect("width fixed by spec");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectOptions {
    pub batch_size: usize,
    /// Number of disjoint contiguous shards collected on separate threads and
    /// merged in shard order.
    pub workers: usize,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions { batch_size: 64, workers: 1 }
    }
}

fn check_dataset(spec: &ModelSpec, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(VbpError::InsufficientSamples { needed: 1, got: 0 });
    }
    if dataset.tokens() != spec.input_tokens() || dataset.dim() != spec.input_features() {
        return Err(VbpError::dim(
            "dataset vs model input",
            &[dataset.tokens(), dataset.dim()],
            &[spec.input_tokens(), spec.input_features()],
        ));
    }
    Ok(())
}

/// Runs the model over the dataset in inference mode, tapping every MLP.
pub fn collect_taps(
    spec: &ModelSpec,
    weights: &WeightStore,
    dataset: &Dataset,
    opts: CollectOptions,
) -> Result<StatsTap> {
    check_dataset(spec, dataset)?;
    let n = dataset.len();
    let workers = opts.workers.clamp(1, n);
    let run = |lo: usize, hi: usize| -> Result<StatsTap> {
        let mut tap = StatsTap::new(spec);
        let mut start = lo;
        while start < hi {
            let end = (start + opts.batch_size.max(1)).min(hi);
            let idx: Vec<usize> = (start..end).collect();
            forward_model(spec, weights, &dataset.batch(&idx), Some(&mut tap))?;
            start = end;
        }
        Ok(tap)
    };
    if workers == 1 {
        return run(0, n);
    }
    let bounds: Vec<(usize, usize)> = (0..workers).map(|w| (w * n / workers, (w + 1) * n / workers)).collect();
    let shards: Vec<Result<StatsTap>> = std::thread::scope(|s| {
        let handles: Vec<_> = bounds.iter().map(|&(lo, hi)| s.spawn(move || run(lo, hi))).collect();
        handles.into_iter().map(|h| h.join().expect("stats worker panicked")).collect()
    });
    let mut shards = shards.into_iter();
    let mut acc = shards.next().expect("at least one shard")?;
    for shard in shards {
        acc = acc.merge(&shard?)?;
    }
    Ok(acc)
}

/// Pre- and post-nonlinearity reports from a single pass.
pub fn collect_both(
    spec: &ModelSpec,
    weights: &WeightStore,
    dataset: &Dataset,
    opts: CollectOptions,
) -> Result<(StatsReport, StatsReport)> {
    let fp = model_fingerprint(spec, weights)?;
    let taps = collect_taps(spec, weights, dataset, opts)?;
    Ok((
        StatsReport::from_accumulators(fp.clone(), Tap::Pre, &taps.pre)?,
        StatsReport::from_accumulators(fp, Tap::Post, &taps.post)?,
    ))
}

pub fn collect(spec: &ModelSpec, weights: &WeightStore, dataset: &Dataset, tap: Tap) -> Result<StatsReport> {
    let (pre, post) = collect_both(spec, weights, dataset, CollectOptions::default())?;
    Ok(match tap {
        Tap::Pre => pre,
        Tap::Post => post,
    })
}

/// Raw pre/post activations of selected neurons of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecorder {
    pub layer: usize,
    pub neurons: Vec<usize>,
    /// `pre[k]` holds every observation of `neurons[k]`.
    pub pre: Vec<Vec<f32>>,
    pub post: Vec<Vec<f32>>,
}

impl ActivationRecorder {
    pub fn new(layer: usize, neurons: Vec<usize>) -> Self {
        let k = neurons.len();
        ActivationRecorder { layer, neurons, pre: vec![Vec::new(); k], post: vec![Vec::new(); k] }
    }

    pub fn observe(&mut self, pre_row: &[f32], post_row: &[f32]) {
        for (k, &n) in self.neurons.iter().enumerate() {
            self.pre[k].push(pre_row[n]);
            self.post[k].push(post_row[n]);
        }
    }
}

impl HiddenHook for ActivationRecorder {
    fn on_hidden(&mut self, layer: usize, pre: &Tensor, post: &mut Tensor) {
        if layer == self.layer {
            for (a, b) in pre.rows().zip(post.rows()) {
                self.observe(a, b);
            }
        }
    }
}

pub fn record_activations(
    spec: &ModelSpec,
    weights: &WeightStore,
    dataset: &Dataset,
    layer: usize,
    neurons: &[usize],
) -> Result<ActivationRecorder> {
    check_dataset(spec, dataset)?;
    let width = spec
        .blocks
        .get(layer)
        .ok_or_else(|| VbpError::Usage(format!("layer {layer} out of range")))?
        .mlp
        .d_hid;
    if let Some(&bad) = neurons.iter().find(|&&n| n >= width) {
        return Err(VbpError::Usage(format!("neuron {bad} out of range for width {width}")));
    }
    let mut rec = ActivationRecorder::new(layer, neurons.to_vec());
    for idx in dataset.batches(64) {
        forward_model(spec, weights, &dataset.batch(&idx), Some(&mut rec))?;
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HistRange {
    /// Per neuron, `[min, max]` over its pre and post observations together.
    Auto,
    Fixed(f64, f64),
}

/// Pre/post histograms for each recorded neuron, sharing bin edges per
/// neuron. Out-of-range values land in the edge bins so counts always total
/// the number of observations.
///
/// Columns: `layer, neuron, stage, bin, lo, hi, count`.
pub fn export_histograms(rec: &ActivationRecorder, bins: usize, range: HistRange) -> Result<Table> {
    if rec.neurons.is_empty() {
        return Err(VbpError::Usage("histogram export needs at least one neuron".into()));
    }
    if bins == 0 {
        return Err(VbpError::Usage("bins must be >= 1".into()));
    }
    if let HistRange::Fixed(lo, hi) = range {
        if !(hi > lo) {
            return Err(VbpError::Usage(format!("histogram range [{lo}, {hi}] is empty")));
        }
    }
    let mut table = Table::new(["layer", "neuron", "stage", "bin", "lo", "hi", "count"]);
    for (k, &neuron) in rec.neurons.iter().enumerate() {
        let (lo, hi) = match range {
            HistRange::Fixed(lo, hi) => (lo, hi),
            HistRange::Auto => {
                let all = rec.pre[k].iter().chain(&rec.post[k]).map(|&v| v as f64);
                let (mn, mx) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                if !mn.is_finite() {
                    (0.0, 1.0)
                } else if mx > mn {
                    (mn, mx)
                } else {
                    (mn - 0.5, mn + 0.5)
                }
            }
        };
        let width = (hi - lo) / bins as f64;
        for (stage, values) in [("pre", &rec.pre[k]), ("post", &rec.post[k])] {
            let mut counts = vec![0u64; bins];
            for &v in values {
                let b = ((v as f64 - lo) / width).floor();
                let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let edge_lo = lo + width * b as f64;
                let edge_hi = if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 };
                table.push([
                    rec.layer.to_string(),
                    neuron.to_string(),
                    stage.to_string(),
                    b.to_string(),
                    format!("{edge_lo}"),
                    format!("{edge_hi}"),
                    c.to_string(),
                ]);
            }
        }
    }
    Ok(table)
}
