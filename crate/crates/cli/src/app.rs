//! Subcommand definitions and their handlers.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use vbp_core::bench::{bench_latency, bench_pair, export_variance_distribution, latency_table, sweep, BenchOptions, SweepConfig};
use vbp_core::compensate::{apply_plan, apply_plan_without_stats, Mode};
use vbp_core::data::{generate, Dataset, SynthConfig};
use vbp_core::fsutil::write_atomic;
use vbp_core::model::{count_macs, count_params, init_weights, load_model, save_model, InitKind, ModelSpec};
use vbp_core::pipeline::{prune_model, PruneRequest, Pruned};
use vbp_core::prune::{plan_summary, Criterion, PruningPlan};
use vbp_core::stats::{collect_both, export_histograms, record_activations, CollectOptions, HistRange, StatsReport, Tap};
use vbp_core::table::{Delimiter, Table};
use vbp_core::train::{evaluate, finetune, AdamWConfig, FinetuneConfig, KdConfig, PAPER_LR, TOY_LR};
use vbp_core::{Result, VbpError};

use crate::ablate::{ablate, per_seed_table, summarize, AblationConfig};
use crate::report::{build_report, ReportInputs};

#[derive(Debug, Parser)]
#[command(name = "vbp", version, about = "Variance-based pruning of transformer MLP blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic token dataset.
    GenData(GenDataArgs),
    /// Write a randomly initialized (or shape-only) model.
    Init(InitArgs),
    /// Collect per-neuron activation statistics.
    Stats(StatsArgs),
    /// Score, select and remove hidden neurons.
    Prune(PruneArgs),
    /// Top-1 accuracy and loss of a model on a dataset.
    Eval(EvalArgs),
    /// Fine-tune a (pruned) model, optionally distilling from a teacher.
    Finetune(FinetuneArgs),
    /// Forward-pass latency of one or more models.
    Bench(BenchArgs),
    /// Prune at several rates from one set of statistics.
    Sweep(SweepArgs),
    /// Criterion × compensation × tap ablation over several seeds.
    Ablate(AblateArgs),
    /// Join eval files, epoch logs and sweeps into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Tsv,
}

impl From<Format> for Delimiter {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => Delimiter::Comma,
            Format::Tsv => Delimiter::Tab,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TapArg {
    Pre,
    Post,
}

impl From<TapArg> for Tap {
    fn from(t: TapArg) -> Self {
        match t {
            TapArg::Pre => Tap::Pre,
            TapArg::Post => Tap::Post,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Variance,
    Magnitude,
    Snip,
    Random,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Variance => Criterion::Variance,
            CriterionArg::Magnitude => Criterion::Magnitude,
            CriterionArg::Snip => Criterion::Snip,
            CriterionArg::Random => Criterion::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Shift,
    NoShift,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Shift => Mode::Shift,
            ModeArg::NoShift => Mode::NoShift,
        }
    }
}

/// Where a table goes and how it is delimited.
#[derive(Debug, Args)]
pub struct Output {
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

impl Output {
    fn emit(&self, table: &Table) -> Result<()> {
        emit_table(table, self.out.as_deref(), self.format)
    }
}

fn emit_table(table: &Table, out: Option<&Path>, format: Format) -> Result<()> {
    let text = table.render(format.into());
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    #[arg(long, default_value_t = 9)]
    pub tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Norm of each class template per token, in noise standard deviations.
    #[arg(long, default_value_t = 2.0)]
    pub separation: f32,
    /// Multiply each sample by a random sign, so classes are only
    /// separable through an even nonlinearity.
    #[arg(long)]
    pub flip_signs: bool,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_parser = ["deit-tiny", "deit-small", "deit-base", "toy"])]
    pub preset: Option<String>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub hid: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Raw features per patch; adds a patch embedding and class token.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub std: f32,
    /// All-zero weights, for parameter and MAC accounting.
    #[arg(long)]
    pub shape_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "post")]
    pub tap: TapArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Also write the per-layer sorted variance distribution.
    #[arg(long)]
    pub distribution: Option<PathBuf>,
    /// Also write pre/post activation histograms of `--neurons` in `--layer`.
    #[arg(long, requires = "neurons")]
    pub histograms: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_delimiter = ',')]
    pub neurons: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Statistics scored by the variance criterion.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Post-activation statistics for the mean shift; defaults to `--stats`
    /// when that file was collected post-activation.
    #[arg(long)]
    pub means: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "variance")]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 0.5)]
    pub rate: f64,
    #[arg(long, value_enum, default_value = "shift")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub min_keep: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Labeled calibration data for the snip criterion.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub snip_batches: usize,
    /// Apply an existing plan instead of selecting a new one.
    #[arg(long, conflicts_with_all = ["criterion", "rate", "min_keep", "data"])]
    pub apply: Option<PathBuf>,
    /// Output model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Compensation record (per-layer Δμ and bias shifts).
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Per-layer plan summary table.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint-selection split; defaults to the training data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Dense model to distill from.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Plan that produced `--model`; its source fingerprint must match the teacher.
    #[arg(long, requires = "teacher")]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TOY_LR, conflicts_with = "paper_lr")]
    pub lr: f64,
    /// Use the ImageNet-scale learning rate 1.5e-5.
    #[arg(long)]
    pub paper_lr: bool,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub temperature: f64,
    /// Train on hard labels only even when a teacher is given.
    #[arg(long)]
    pub no_kd: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log table.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Models to time; speedups are relative to the first.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub means: Option<PathBuf>,
    /// Evaluation data for dense and pruned accuracy.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7")]
    pub rates: Vec<f64>,
    #[arg(long, value_enum, default_value = "variance")]
    pub criterion: CriterionArg,
    #[arg(long, value_enum, default_value = "shift")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub min_keep: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fine-tune every pruned model on this data with distillation.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = TOY_LR)]
    pub lr: f64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub train_epochs: Option<usize>,
    /// Recovery epochs per setting; 0 reports retention only.
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Per-seed retention table.
    #[arg(long)]
    pub per_seed: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Eval tables; the first is the dense reference.
    #[arg(long, required = true)]
    pub eval: Vec<PathBuf>,
    /// `NAME=PATH` epoch log of the model evaluated as NAME.
    #[arg(long)]
    pub log: Vec<String>,
    #[arg(long)]
    pub sweep: Vec<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

/// Process exit code for an error: 1 usage, 2 format/io, 3 integrity, 4 numeric.
pub fn exit_code(e: &VbpError) -> i32 {
    match e {
        VbpError::Usage(_) | VbpError::InsufficientSamples { .. } => 1,
        VbpError::Format(_) | VbpError::Io(_) | VbpError::Json(_) => 2,
        VbpError::Integrity(_) | VbpError::Dimension { .. } | VbpError::Plan(_) => 3,
        VbpError::Numeric(_) => 4,
    }
}

/// Parallelism cap from `VBP_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("VBP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(VbpError::Usage(format!("VBP_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Init(a) => init(a),
        Command::Stats(a) => stats(a),
        Command::Prune(a) => prune(a),
        Command::Eval(a) => eval(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let data = generate(&SynthConfig {
        samples: a.samples,
        tokens: a.tokens,
        dim: a.dim,
        classes: a.classes,
        seed: a.seed,
        separation: a.separation,
        flip_signs: a.flip_signs,
    })?;
    let fp = data.save(&a.out)?;
    eprintln!("wrote {} ({} samples, fingerprint {fp})", a.out.display(), data.len());
    Ok(())
}

fn init_spec(a: &InitArgs) -> Result<ModelSpec> {
    let manual = [a.blocks, a.dim, a.hid, a.heads, a.tokens, a.classes, a.patch];
    match &a.preset {
        Some(name) => {
            if manual.iter().any(Option::is_some) {
                return Err(VbpError::Usage("--preset conflicts with explicit shape flags".into()));
            }
            ModelSpec::preset(name)
        }
        None => match (a.blocks, a.dim, a.hid, a.heads, a.tokens, a.classes) {
            (Some(b), Some(d), Some(h), Some(heads), Some(t), Some(c)) => {
                let spec = ModelSpec::transformer(b, d, h, heads, t, c, a.patch);
                spec.validate()?;
                Ok(spec)
            }
            _ => Err(VbpError::Usage(
                "give --preset or all of --blocks --dim --hid --heads --tokens --classes".into(),
            )),
        },
    }
}

fn init(a: InitArgs) -> Result<()> {
    let spec = init_spec(&a)?;
    let kind = if a.shape_only { InitKind::Zeros } else { InitKind::TruncatedNormal { std: a.std } };
    let weights = init_weights(&spec, kind, a.seed)?;
    let fp = save_model(&spec, &weights, &a.out)?;
    eprintln!(
        "wrote {} ({} params, {} MACs, fingerprint {fp})",
        a.out.display(),
        count_params(&spec),
        count_macs(&spec)
    );
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

fn stats(a: StatsArgs) -> Result<()> {
    let (spec, weights, _) = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let opts = CollectOptions { batch_size: a.batch_size.max(1), workers: thread_cap()?.unwrap_or(1) };
    let (pre, post) = collect_both(&spec, &weights, &data, opts)?;
    let report = match Tap::from(a.tap) {
        Tap::Pre => pre,
        Tap::Post => post,
    };
    let fp = report.save(&a.out)?;
    eprintln!("wrote {} ({} tap, fingerprint {fp})", a.out.display(), report.tap);
    if let Some(path) = &a.distribution {
        emit_table(&export_variance_distribution(&report), Some(path), a.format)?;
    }
    if let Some(path) = &a.histograms {
        let rec = record_activations(&spec, &weights, &data, a.layer, &a.neurons)?;
        emit_table(&export_histograms(&rec, a.bins, HistRange::Auto)?, Some(path), a.format)?;
    }
    Ok(())
}

fn load_stats(path: &Path) -> Result<StatsReport> {
    Ok(StatsReport::load(path)?.0)
}

/// Scoring stats plus the post-activation means, loaded per the prune/sweep flags.
fn load_stat_pair(stats: Option<&Path>, means: Option<&Path>) -> Result<(Option<StatsReport>, Option<StatsReport>)> {
    let scoring = stats.map(load_stats).transpose()?;
    let means = match means {
        Some(p) => Some(load_stats(p)?),
        None => scoring.clone().filter(|s| s.tap == Tap::Post),
    };
    if let Some(m) = &means {
        if m.tap != Tap::Post {
            return Err(VbpError::Usage("--means must be post-activation statistics".into()));
        }
    }
    Ok((scoring, means))
}

fn prune(a: PruneArgs) -> Result<()> {
    let (spec, weights, model_fp) = load_model(&a.model)?;
    let (scoring, means) = load_stat_pair(a.stats.as_deref(), a.means.as_deref())?;
    let mode = Mode::from(a.mode);
    let pruned = match &a.apply {
        Some(path) => {
            let (plan, _) = PruningPlan::load(path)?;
            if plan.model_fingerprint != model_fp {
                return Err(VbpError::Integrity(format!(
                    "plan was built for model {}, but {} is {model_fp}",
                    plan.model_fingerprint,
                    a.model.display()
                )));
            }
            if let Some(s) = scoring.as_ref().filter(|s| s.tap == plan.tap && !plan.stats_fingerprint.is_empty()) {
                let fp = s.fingerprint()?;
                if fp != plan.stats_fingerprint {
                    return Err(VbpError::Integrity(format!(
                        "plan was built from statistics {}, but the given statistics are {fp}",
                        plan.stats_fingerprint
                    )));
                }
            }
            let (spec2, weights2, record) = match (mode, &means) {
                (Mode::Shift, None) => {
                    return Err(VbpError::Integrity("shift mode needs post-activation statistics for the means".into()))
                }
                (_, Some(m)) => apply_plan(&spec, &weights, &plan, m, mode)?,
                (Mode::NoShift, None) => apply_plan_without_stats(&spec, &weights, &plan)?,
            };
            Pruned { spec: spec2, weights: weights2, plan, record }
        }
        None => {
            let calibration = a.data.as_deref().map(load_data).transpose()?;
            let req = PruneRequest {
                min_keep: a.min_keep,
                seed: a.seed,
                scoring: scoring.as_ref(),
                means: means.as_ref(),
                calibration: calibration.as_ref(),
                snip_batches: a.snip_batches,
                ..PruneRequest::new(a.criterion.into(), a.rate, mode)
            };
            prune_model(&spec, &weights, &req)?
        }
    };
    let fp = save_model(&pruned.spec, &pruned.weights, &a.out)?;
    if let Some(path) = &a.plan {
        pruned.plan.save(path)?;
    }
    if let Some(path) = &a.record {
        pruned.record.save(path)?;
    }
    let summary = plan_summary(&pruned.plan, &spec)?;
    if let Some(path) = &a.summary {
        emit_table(&summary, Some(path), a.format)?;
    }
    if pruned.plan.guard_skips > 0 {
        eprintln!("min_keep guard skipped {} candidates", pruned.plan.guard_skips);
    }
    eprintln!(
        "pruned {} of {} hidden neurons; wrote {} (fingerprint {fp})",
        pruned.plan.total_pruned(),
        spec.total_hidden(),
        a.out.display()
    );
    Ok(())
}

/// `model, fingerprint, samples, macs, params, top1, loss`.
pub fn eval_table(name: &str, fingerprint: &str, spec: &ModelSpec, samples: usize, top1: f64, loss: f64) -> Table {
    let mut t = Table::new(["model", "fingerprint", "samples", "macs", "params", "top1", "loss"]);
    t.push([
        name.to_string(),
        fingerprint.to_string(),
        samples.to_string(),
        count_macs(spec).to_string(),
        count_params(spec).to_string(),
        format!("{top1:.6}"),
        format!("{loss:.6}"),
    ]);
    t
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (spec, weights, fp) = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let e = evaluate(&spec, &weights, &data)?;
    a.output.emit(&eval_table(&stem(&a.model), &fp, &spec, data.len(), e.top1, e.loss))
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let (spec, weights, _) = load_model(&a.model)?;
    let train = load_data(&a.data)?;
    let val = a.val.as_deref().map(load_data).transpose()?;
    let teacher = a.teacher.as_deref().map(load_model).transpose()?;
    if let (Some(plan_path), Some((_, _, tfp))) = (&a.plan, &teacher) {
        let (plan, _) = PruningPlan::load(plan_path)?;
        if &plan.model_fingerprint != tfp {
            return Err(VbpError::Integrity(format!(
                "plan was built from model {}, but the teacher is {tfp}",
                plan.model_fingerprint
            )));
        }
    }
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: AdamWConfig {
            lr: if a.paper_lr { PAPER_LR } else { a.lr },
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        kd: KdConfig { enabled: teacher.is_some() && !a.no_kd, alpha: a.alpha, temperature: a.temperature },
        seed: a.seed,
    };
    let t = teacher.as_ref().map(|(s, w, _)| (s, w));
    let res = finetune(&spec, &weights, t, &train, val.as_ref().unwrap_or(&train), &cfg)?;
    let fp = save_model(&spec, &res.weights, &a.out)?;
    if let Some(path) = &a.log {
        emit_table(&res.log_table(), Some(path), a.format)?;
    }
    eprintln!("best epoch {}; wrote {} (fingerprint {fp})", res.best_epoch, a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let threads = a.threads.max(1).min(thread_cap()?.unwrap_or(usize::MAX));
    let opts = BenchOptions { batch_size: a.batch_size, warmup: a.warmup, runs: a.runs, threads, seed: a.seed };
    let models = a.model.iter().map(load_model).collect::<Result<Vec<_>>>()?;
    let rows = if let [(sa, wa, _), (sb, wb, _)] = models.as_slice() {
        let (la, lb) = bench_pair((sa, wa), (sb, wb), opts)?;
        vec![(stem(&a.model[0]), a.batch_size, la), (stem(&a.model[1]), a.batch_size, lb)]
    } else {
        models
            .iter()
            .zip(&a.model)
            .map(|((s, w, _), p)| Ok((stem(p), a.batch_size, bench_latency(s, w, opts)?)))
            .collect::<Result<Vec<_>>>()?
    };
    a.output.emit(&latency_table(&rows))
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let (spec, weights, _) = load_model(&a.model)?;
    let (scoring, means) = load_stat_pair(a.stats.as_deref(), a.means.as_deref())?;
    let data = load_data(&a.data)?;
    let train = a.train.as_deref().map(load_data).transpose()?;
    let request = PruneRequest {
        min_keep: a.min_keep,
        seed: a.seed,
        scoring: scoring.as_ref(),
        means: means.as_ref(),
        calibration: Some(&data),
        ..PruneRequest::new(a.criterion.into(), 0.5, a.mode.into())
    };
    let fcfg = FinetuneConfig {
        epochs: a.finetune_epochs,
        optimizer: AdamWConfig { lr: a.lr, ..AdamWConfig::default() },
        seed: a.seed,
        ..FinetuneConfig::default()
    };
    let cfg = SweepConfig {
        rates: a.rates.clone(),
        request,
        eval: &data,
        finetune: train.as_ref().map(|t| (fcfg, t, t)),
    };
    a.output.emit(&sweep(&spec, &weights, &cfg)?)
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut cfg = AblationConfig { seeds: (0..a.seeds).collect(), ..AblationConfig::default() };
    if let Some(r) = a.rate {
        cfg.rate = r;
    }
    if let Some(e) = a.train_epochs {
        cfg.train_epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        cfg.finetune_epochs = e;
    }
    let trials = ablate(&cfg)?;
    if let Some(path) = &a.per_seed {
        emit_table(&per_seed_table(&trials), Some(path), a.output.format)?;
    }
    a.output.emit(&summarize(&trials))
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    Table::parse(&text).ok_or_else(|| {
        VbpError::Format(vbp_core::FormatError::Manifest(format!("{} is not a CSV/TSV table", path.display())))
    })
}

fn report(a: ReportArgs) -> Result<()> {
    let evals = a.eval.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    let logs = a
        .log
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| VbpError::Usage(format!("--log expects NAME=PATH, got `{s}`")))?;
            Ok((name.to_string(), read_table(Path::new(path))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let sweeps = a
        .sweep
        .iter()
        .map(|p| Ok((stem(p), read_table(p)?)))
        .collect::<Result<Vec<_>>>()?;
    a.output.emit(&build_report(&ReportInputs { evals, logs, sweeps })?)
}
