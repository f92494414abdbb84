//! Token datasets and the VBPD container.
//!
//! ```text
//! "VBPD1\n" | u64 LE manifest length | {"samples","tokens","dim","classes"}
//! | per sample: tokens·dim f32 LE, then u32 LE label
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result, VbpError};
use crate::fsutil;
use crate::rng;
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 6] = b"VBPD1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    tokens: usize,
    dim: usize,
    classes: usize,
    features: Vec<f32>,
    labels: Option<Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    samples: usize,
    tokens: usize,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(
        tokens: usize,
        dim: usize,
        classes: usize,
        features: Vec<f32>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(VbpError::Usage("dataset tokens and dim must be >= 1".into()));
        }
        if features.len() % (tokens * dim) != 0 {
            return Err(VbpError::dim("Dataset::new", &[features.len()], &[tokens, dim]));
        }
        let n = features.len() / (tokens * dim);
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(VbpError::dim("Dataset::new labels", &[l.len()], &[n]));
            }
            if let Some(&bad) = l.iter().find(|&&c| c as usize >= classes) {
                return Err(VbpError::Usage(format!("label {bad} out of range for {classes} classes")));
            }
        }
        Ok(Dataset { tokens, dim, classes, features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len() / (self.tokens * self.dim)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels()
            .ok_or_else(|| VbpError::Usage("operation requires a labeled dataset".into()))
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.tokens * self.dim;
        &self.features[i * w..(i + 1) * w]
    }

    /// `[indices.len(), tokens, dim]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.tokens * self.dim);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(vec![indices.len(), self.tokens, self.dim], data).expect("non-empty batch")
    }

    /// Contiguous batches of up to `size` samples in dataset order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |s| (s..(s + size).min(n)).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.tokens * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            tokens: self.tokens,
            dim: self.dim,
            classes: self.classes,
            features,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// First `n` samples and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Multiplies every feature by `alpha`.
    pub fn scaled(&self, alpha: f32) -> Dataset {
        let mut out = self.clone();
        out.features.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let labels = self.require_labels()?;
        let manifest = serde_json::to_vec(&Manifest {
            samples: self.len(),
            tokens: self.tokens,
            dim: self.dim,
            classes: self.classes,
        })?;
        let mut out = Vec::with_capacity(14 + manifest.len() + self.features.len() * 4 + labels.len() * 4);
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (i, &label) in labels.iter().enumerate() {
            for v in self.sample(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&label.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let head = &bytes[..bytes.len().min(6)];
        if head != DATA_MAGIC {
            return Err(FormatError::Magic {
                expected: String::from_utf8_lossy(DATA_MAGIC).into(),
                found: String::from_utf8_lossy(head).into(),
            }
            .into());
        }
        let truncated = |needed: usize| FormatError::Truncated {
            needed: needed as u64,
            available: bytes.len() as u64,
        };
        if bytes.len() < 14 {
            return Err(truncated(14).into());
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let body = 14usize
            .checked_add(len)
            .ok_or_else(|| FormatError::Manifest("manifest length overflows".into()))?;
        if bytes.len() < body {
            return Err(truncated(body).into());
        }
        let m: Manifest =
            serde_json::from_slice(&bytes[14..body]).map_err(|e| FormatError::Manifest(e.to_string()))?;
        if m.tokens == 0 || m.dim == 0 || m.classes == 0 {
            return Err(FormatError::Manifest("tokens, dim and classes must be >= 1".into()).into());
        }
        let per = m.tokens * m.dim;
        let need = body + m.samples * (per * 4 + 4);
        if bytes.len() < need {
            return Err(truncated(need).into());
        }
        if bytes.len() > need {
            return Err(FormatError::Manifest(format!("{} trailing bytes", bytes.len() - need)).into());
        }
        let mut features = Vec::with_capacity(m.samples * per);
        let mut labels = Vec::with_capacity(m.samples);
        for rec in bytes[body..].chunks_exact(per * 4 + 4) {
            features.extend(rec[..per * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            labels.push(u32::from_le_bytes(rec[per * 4..].try_into().unwrap()));
        }
        Dataset::new(m.tokens, m.dim, m.classes, features, Some(labels))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.encode()?;
        fsutil::write_atomic(path.as_ref(), &bytes)?;
        Ok(fsutil::fingerprint(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::decode(&std::fs::read(path.as_ref())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub tokens: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    /// Norm of each class's per-token template, in units of the per-feature
    /// noise standard deviation.
    pub separation: f32,
    /// Multiply each token's template by an independent random sign, making
    /// every class mean zero so that no linear readout of pooled features can
    /// separate the classes.
    pub flip_signs: bool,
}

/// Gaussian token templates per class plus unit isotropic noise.
///
/// Template `(c, t)` is a standard-normal vector rescaled to norm
/// `separation`; sample `i` has label `i % classes` and features
/// `template(label, t) + N(0, I)` for each token `t`, or
/// `±template(label, t) + N(0, I)` with [`SynthConfig::flip_signs`].
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.tokens == 0 || cfg.dim == 0 || cfg.classes == 0 {
        return Err(VbpError::Usage("samples, tokens, dim and classes must be >= 1".into()));
    }
    if !(cfg.separation >= 0.0) {
        return Err(VbpError::Usage("separation must be >= 0".into()));
    }
    let per = cfg.tokens * cfg.dim;
    let mut trng = rng::stream(cfg.seed, "data.templates");
    let mut templates = vec![0.0f64; cfg.classes * per];
    for chunk in templates.chunks_exact_mut(cfg.dim) {
        let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut trng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (o, x) in chunk.iter_mut().zip(v) {
            *o = x / norm * cfg.separation as f64;
        }
    }
    let mut nrng = rng::stream(cfg.seed, "data.noise");
    let mut srng = rng::stream(cfg.seed, "data.signs");
    let mut features = Vec::with_capacity(cfg.samples * per);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let c = i % cfg.classes;
        labels.push(c as u32);
        let tpl = &templates[c * per..(c + 1) * per];
        let sign = if cfg.flip_signs && srng.gen::<bool>() { -1.0 } else { 1.0 };
        for token in tpl.chunks_exact(cfg.dim) {
            features.extend(token.iter().map(|&m| {
                let z: f64 = StandardNormal.sample(&mut nrng);
                (sign * m + z) as f32
            }));
        }
    }
    Dataset::new(cfg.tokens, cfg.dim, cfg.classes, features, Some(labels))
}

/// Deterministic Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut rng = rng::stream(seed, label);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
