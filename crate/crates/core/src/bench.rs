//! Latency measurement and the sweep / variance-distribution exports.

use std::time::Instant;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Result, VbpError};
use crate::model::{count_macs, count_params, forward_model, ModelSpec, WeightStore};
use crate::pipeline::{prune_model, PruneRequest};
use crate::rng;
use crate::stats::StatsReport;
use crate::table::Table;
use crate::tensor::Tensor;
use crate::train::{evaluate, finetune, retention, FinetuneConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub batch_size: usize,
    pub warmup: usize,
    pub runs: usize,
    /// Worker threads splitting the batch; 1 keeps timing single-threaded.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { batch_size: 8, warmup: 1, runs: 5, threads: 1, seed: 0 }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn random_batch(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "bench.batch");
    let shape = vec![batch, spec.input_tokens(), spec.input_features()];
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).expect("non-empty")
}

fn timed_forward(spec: &ModelSpec, weights: &WeightStore, batch: &Tensor, threads: usize) -> Result<f64> {
    let start = Instant::now();
    if threads <= 1 {
        forward_model(spec, weights, batch, None)?;
    } else {
        let bs = batch.shape()[0];
        let per: usize = batch.shape()[1..].iter().product();
        let parts = threads.min(bs);
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = (0..parts)
                .map(|p| {
                    let (lo, hi) = (p * bs / parts, (p + 1) * bs / parts);
                    let mut shape = batch.shape().to_vec();
                    shape[0] = hi - lo;
                    let chunk = Tensor::new(shape, batch.data()[lo * per..hi * per].to_vec());
                    s.spawn(move || forward_model(spec, weights, &chunk?, None).map(|_| ()))
                })
                .collect();
            for h in handles {
                h.join().expect("bench worker panicked")?;
            }
            Ok(())
        })?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Median, p10 and p90 of `runs` timed forwards on one fixed random batch,
/// after `warmup` untimed forwards.
pub fn bench_latency(spec: &ModelSpec, weights: &WeightStore, opts: BenchOptions) -> Result<Latency> {
    if opts.runs < 5 {
        return Err(VbpError::Usage(format!("need at least 5 timed runs, got {}", opts.runs)));
    }
    if opts.batch_size == 0 {
        return Err(VbpError::Usage("batch size must be >= 1".into()));
    }
    weights.validate(spec)?;
    let batch = random_batch(spec, opts.batch_size, opts.seed);
    for _ in 0..opts.warmup {
        timed_forward(spec, weights, &batch, opts.threads)?;
    }
    let mut times = (0..opts.runs)
        .map(|_| timed_forward(spec, weights, &batch, opts.threads))
        .collect::<Result<Vec<_>>>()?;
    times.sort_by(f64::total_cmp);
    Ok(Latency {
        median_ms: quantile(&times, 0.5),
        p10_ms: quantile(&times, 0.1),
        p90_ms: quantile(&times, 0.9),
        threads: opts.threads.max(1),
    })
}

/// Times two models on the same batch with their runs interleaved, so that
/// machine drift affects both equally. Returns `(a, b)`.
pub fn bench_pair(
    a: (&ModelSpec, &WeightStore),
    b: (&ModelSpec, &WeightStore),
    opts: BenchOptions,
) -> Result<(Latency, Latency)> {
    if opts.runs < 5 {
        return Err(VbpError::Usage(format!("need at least 5 timed runs, got {}", opts.runs)));
    }
    if opts.batch_size == 0 {
        return Err(VbpError::Usage("batch size must be >= 1".into()));
    }
    if a.0.input_tokens() != b.0.input_tokens() || a.0.input_features() != b.0.input_features() {
        return Err(VbpError::dim(
            "bench pair input",
            &[a.0.input_tokens(), a.0.input_features()],
            &[b.0.input_tokens(), b.0.input_features()],
        ));
    }
    a.1.validate(a.0)?;
    b.1.validate(b.0)?;
    let batch = random_batch(a.0, opts.batch_size, opts.seed);
    for _ in 0..opts.warmup {
        timed_forward(a.0, a.1, &batch, opts.threads)?;
        timed_forward(b.0, b.1, &batch, opts.threads)?;
    }
    let (mut ta, mut tb) = (Vec::with_capacity(opts.runs), Vec::with_capacity(opts.runs));
    for i in 0..opts.runs {
        // alternate which model goes first so neither always runs on a warm cache
        if i % 2 == 0 {
            ta.push(timed_forward(a.0, a.1, &batch, opts.threads)?);
            tb.push(timed_forward(b.0, b.1, &batch, opts.threads)?);
        } else {
            tb.push(timed_forward(b.0, b.1, &batch, opts.threads)?);
            ta.push(timed_forward(a.0, a.1, &batch, opts.threads)?);
        }
    }
    let summarize = |mut times: Vec<f64>| {
        times.sort_by(f64::total_cmp);
        Latency {
            median_ms: quantile(&times, 0.5),
            p10_ms: quantile(&times, 0.1),
            p90_ms: quantile(&times, 0.9),
            threads: opts.threads.max(1),
        }
    };
    Ok((summarize(ta), summarize(tb)))
}

pub fn speedup(dense: &Latency, pruned: &Latency) -> f64 {
    dense.median_ms / pruned.median_ms
}

/// `model, batch, threads, median_ms, p10_ms, p90_ms, speedup`, one row per model,
/// with speedups relative to the first.
pub fn latency_table(rows: &[(String, usize, Latency)]) -> Table {
    let mut t = Table::new(["model", "batch", "threads", "median_ms", "p10_ms", "p90_ms", "speedup"]);
    let base = rows.first().map(|r| r.2);
    for (name, batch, l) in rows {
        t.push([
            name.clone(),
            batch.to_string(),
            l.threads.to_string(),
            format!("{:.3}", l.median_ms),
            format!("{:.3}", l.p10_ms),
            format!("{:.3}", l.p90_ms),
            format!("{:.4}", base.map_or(1.0, |b| speedup(&b, l))),
        ]);
    }
    t
}

/// Per layer: variances ascending with the running share of the layer total.
/// A layer whose variances are all zero gets a rank-linear share.
pub fn export_variance_distribution(report: &StatsReport) -> Table {
    let mut t = Table::new(["layer", "neuron_rank", "variance", "cumulative_fraction"]);
    for ls in &report.layers {
        let mut v = ls.variance.clone();
        v.sort_by(f64::total_cmp);
        let total: f64 = v.iter().sum();
        let n = v.len();
        let mut acc = 0.0;
        for (rank, &x) in v.iter().enumerate() {
            acc += x;
            let frac = if total > 0.0 {
                if rank + 1 == n {
                    1.0
                } else {
                    acc / total
                }
            } else {
                (rank + 1) as f64 / n as f64
            };
            t.push([ls.name.clone(), rank.to_string(), x.to_string(), frac.to_string()]);
        }
    }
    t
}

pub struct SweepConfig<'a> {
    pub rates: Vec<f64>,
    pub request: PruneRequest<'a>,
    /// Accuracy is measured here for both dense and pruned models.
    pub eval: &'a Dataset,
    /// Optional recovery step: `(config, train split, validation split)`.
    pub finetune: Option<(FinetuneConfig, &'a Dataset, &'a Dataset)>,
}

/// One pruning run per rate from the same statistics:
/// `rate, macs, params, retention, final` (`final` empty without fine-tuning).
pub fn sweep(spec: &ModelSpec, weights: &WeightStore, cfg: &SweepConfig<'_>) -> Result<Table> {
    if cfg.rates.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
        return Err(VbpError::Usage("sweep rates must lie in (0, 1)".into()));
    }
    if cfg.rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VbpError::Usage("sweep rates must be strictly ascending".into()));
    }
    let dense = evaluate(spec, weights, cfg.eval)?.top1;
    let mut t = Table::new(["rate", "macs", "params", "retention", "final"]);
    for &rate in &cfg.rates {
        let req = PruneRequest { rate, ..cfg.request };
        let p = prune_model(spec, weights, &req)?;
        let ret = retention(evaluate(&p.spec, &p.weights, cfg.eval)?.top1, dense);
        let fin = match &cfg.finetune {
            Some((fc, train, val)) => {
                let r = finetune(&p.spec, &p.weights, Some((spec, weights)), train, val, fc)?;
                format!("{:.6}", evaluate(&p.spec, &r.weights, cfg.eval)?.top1)
            }
            None => String::new(),
        };
        t.push([
            rate.to_string(),
            count_macs(&p.spec).to_string(),
            count_params(&p.spec).to_string(),
            format!("{ret:.6}"),
            fin,
        ]);
    }
    Ok(t)
}
