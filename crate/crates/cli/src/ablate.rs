//! Criterion × compensation × tap ablation on freshly trained toy transformers.

use vbp_core::compensate::Mode;
use vbp_core::data::{generate, Dataset, SynthConfig};
use vbp_core::model::{init_weights, InitKind, ModelSpec, WeightStore};
use vbp_core::pipeline::{prune_model, PruneRequest};
use vbp_core::prune::Criterion;
use vbp_core::stats::{collect_both, CollectOptions, Tap};
use vbp_core::table::Table;
use vbp_core::train::{evaluate, finetune, retention, AdamWConfig, FinetuneConfig, KdConfig};
use vbp_core::{Result, VbpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Setting {
    pub criterion: Criterion,
    pub mode: Mode,
    pub tap: Tap,
}

impl Setting {
    pub fn label(&self) -> String {
        format!("{}+{}@{}", self.criterion, self.mode, self.tap)
    }
}

/// The 2×2 criterion × mode grid plus the pre-activation variant.
pub const SETTINGS: [Setting; 5] = [
    Setting { criterion: Criterion::Variance, mode: Mode::Shift, tap: Tap::Post },
    Setting { criterion: Criterion::Variance, mode: Mode::NoShift, tap: Tap::Post },
    Setting { criterion: Criterion::Random, mode: Mode::Shift, tap: Tap::Post },
    Setting { criterion: Criterion::Random, mode: Mode::NoShift, tap: Tap::Post },
    Setting { criterion: Criterion::Variance, mode: Mode::Shift, tap: Tap::Pre },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub spec: ModelSpec,
    pub seeds: Vec<u64>,
    pub rate: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub separation: f32,
    pub flip_signs: bool,
    pub train_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Recovery epochs after pruning; 0 skips fine-tuning.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub kd: KdConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            spec: ModelSpec::toy(),
            seeds: (0..5).collect(),
            rate: 0.5,
            train_samples: 2048,
            test_samples: 2048,
            separation: 2.5,
            flip_signs: true,
            train_epochs: 30,
            lr: 2e-3,
            weight_decay: 0.01,
            batch_size: 32,
            finetune_epochs: 0,
            finetune_lr: 1e-3,
            kd: KdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub setting: Setting,
    pub retention: f64,
    pub final_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub seed: u64,
    pub train_top1: f64,
    pub dense_top1: f64,
    pub outcomes: Vec<Outcome>,
}

impl Trial {
    pub fn retention(&self, setting: Setting) -> Option<f64> {
        self.outcomes.iter().find(|o| o.setting == setting).map(|o| o.retention)
    }
}

/// A freshly trained dense model with its data splits.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weights: WeightStore,
    pub train: Dataset,
    pub test: Dataset,
    pub train_top1: f64,
    pub test_top1: f64,
}

/// Generates data for `seed` and trains the configured model on it from scratch.
pub fn train_dense(cfg: &AblationConfig, seed: u64) -> Result<Dense> {
    let spec = &cfg.spec;
    let data = generate(&SynthConfig {
        samples: cfg.train_samples + cfg.test_samples,
        tokens: spec.input_tokens(),
        dim: spec.input_features(),
        classes: spec.num_classes,
        seed,
        separation: cfg.separation,
        flip_signs: cfg.flip_signs,
    })?;
    let (train, test) = data.split_at(cfg.train_samples);
    let init = init_weights(spec, InitKind::default(), seed)?;
    let tcfg = FinetuneConfig {
        epochs: cfg.train_epochs,
        batch_size: cfg.batch_size,
        optimizer: AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        kd: KdConfig { enabled: false, ..cfg.kd },
        seed,
    };
    let weights = finetune(spec, &init, None, &train, &train, &tcfg)?.weights;
    let train_top1 = evaluate(spec, &weights, &train)?.top1;
    let test_top1 = evaluate(spec, &weights, &test)?.top1;
    Ok(Dense { weights, train, test, train_top1, test_top1 })
}

/// Trains a dense model for `seed`, then prunes it once per setting.
pub fn run_seed(cfg: &AblationConfig, seed: u64) -> Result<Trial> {
    let spec = &cfg.spec;
    let Dense { weights, train, test, train_top1, test_top1: dense_top1 } = train_dense(cfg, seed)?;
    let (pre, post) = collect_both(spec, &weights, &train, CollectOptions::default())?;

    let mut outcomes = Vec::with_capacity(SETTINGS.len());
    for setting in SETTINGS {
        let req = PruneRequest {
            seed,
            scoring: Some(match setting.tap {
                Tap::Pre => &pre,
                Tap::Post => &post,
            }),
            means: Some(&post),
            ..PruneRequest::new(setting.criterion, cfg.rate, setting.mode)
        };
        let pruned = prune_model(spec, &weights, &req)?;
        let ret = retention(evaluate(&pruned.spec, &pruned.weights, &test)?.top1, dense_top1);
        let final_top1 = if cfg.finetune_epochs > 0 {
            let fcfg = FinetuneConfig {
                epochs: cfg.finetune_epochs,
                batch_size: cfg.batch_size,
                optimizer: AdamWConfig { lr: cfg.finetune_lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
                kd: cfg.kd,
                seed,
            };
            let teacher = cfg.kd.enabled.then_some((spec, &weights));
            let tuned = finetune(&pruned.spec, &pruned.weights, teacher, &train, &train, &fcfg)?;
            Some(evaluate(&pruned.spec, &tuned.weights, &test)?.top1)
        } else {
            None
        };
        outcomes.push(Outcome { setting, retention: ret, final_top1 });
    }
    Ok(Trial { seed, train_top1, dense_top1, outcomes })
}

pub fn ablate(cfg: &AblationConfig) -> Result<Vec<Trial>> {
    if cfg.seeds.is_empty() {
        return Err(VbpError::Usage("ablation needs at least one seed".into()));
    }
    cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Mean of a setting's retention over all trials.
pub fn mean_retention(trials: &[Trial], setting: Setting) -> f64 {
    let v: Vec<f64> = trials.iter().filter_map(|t| t.retention(setting)).collect();
    mean_std(&v).0
}

/// `setting, criterion, mode, tap, seeds, retention_mean, retention_std, final_mean, final_std`.
pub fn summarize(trials: &[Trial]) -> Table {
    let mut t = Table::new([
        "setting",
        "criterion",
        "mode",
        "tap",
        "seeds",
        "retention_mean",
        "retention_std",
        "final_mean",
        "final_std",
    ]);
    for setting in SETTINGS {
        let outs: Vec<&Outcome> = trials.iter().flat_map(|t| &t.outcomes).filter(|o| o.setting == setting).collect();
        let (rm, rs) = mean_std(&outs.iter().map(|o| o.retention).collect::<Vec<_>>());
        let finals: Vec<f64> = outs.iter().filter_map(|o| o.final_top1).collect();
        let (fm, fs) = if finals.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_std(&finals);
            (format!("{m:.6}"), format!("{s:.6}"))
        };
        t.push([
            setting.label(),
            setting.criterion.to_string(),
            setting.mode.to_string(),
            setting.tap.to_string(),
            outs.len().to_string(),
            format!("{rm:.6}"),
            format!("{rs:.6}"),
            fm,
            fs,
        ]);
    }
    t
}

/// `seed, train_top1, dense_top1` followed by one retention column per setting.
pub fn per_seed_table(trials: &[Trial]) -> Table {
    let mut header = vec!["seed".to_string(), "train_top1".into(), "dense_top1".into()];
    header.extend(SETTINGS.iter().map(Setting::label));
    let mut t = Table::new(header);
    for trial in trials {
        let mut row = vec![trial.seed.to_string(), format!("{:.6}", trial.train_top1), format!("{:.6}", trial.dense_top1)];
        row.extend(SETTINGS.iter().map(|&s| format!("{:.6}", trial.retention(s).unwrap_or(f64::NAN))));
        t.push(row);
    }
    t
}
