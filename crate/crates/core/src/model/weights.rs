use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelSpec, MlpWeights};
use crate::error::{Result, VbpError};
use crate::rng;
use crate::tensor::Tensor;

/// Named parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| VbpError::Integrity(format!("missing weight `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| VbpError::Integrity(format!("missing weight `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    /// The four MLP tensors of block `layer`.
    pub fn mlp(&self, layer: usize) -> Result<MlpWeights<'_>> {
        let p = |s: &str| format!("block.{layer}.mlp.{s}");
        Ok(MlpWeights {
            w1: self.get(&p("w1"))?,
            b1: self.get(&p("b1"))?,
            w2: self.get(&p("w2"))?,
            b2: self.get(&p("b2"))?,
        })
    }

    /// Checks that names and shapes match the spec exactly.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let layout = spec.param_layout();
        let missing: Vec<&str> = layout
            .iter()
            .filter(|(n, _)| !self.tensors.contains_key(n))
            .map(|(n, _)| n.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(VbpError::Integrity(format!("missing weights: {}", missing.join(", "))));
        }
        for (name, shape) in &layout {
            let t = &self.tensors[name];
            if t.shape() != shape.as_slice() {
                return Err(VbpError::Integrity(format!(
                    "weight `{name}` has shape {:?}, spec requires {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.tensors.len() != layout.len() {
            let orphans: Vec<&str> = self
                .tensors
                .keys()
                .filter(|k| !layout.iter().any(|(n, _)| n == *k))
                .map(|k| k.as_str())
                .collect();
            return Err(VbpError::Integrity(format!("orphan weights: {}", orphans.join(", "))));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Normal(0, std) truncated at ±2·std for matrices and embeddings; zero
    /// biases; unit LayerNorm gains.
    TruncatedNormal { std: f32 },
    /// All-zero tensors, for shape-only accounting files.
    Zeros,
}

impl Default for InitKind {
    fn default() -> Self {
        InitKind::TruncatedNormal { std: 0.02 }
    }
}

pub fn init_weights(spec: &ModelSpec, kind: InitKind, seed: u64) -> Result<WeightStore> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "init");
    let mut store = WeightStore::new();
    for (name, shape) in spec.param_layout() {
        let mut t = Tensor::zeros(&shape);
        if let InitKind::TruncatedNormal { std } = kind {
            if name.ends_with(".gain") {
                t.data_mut().fill(1.0);
            } else if !is_bias(&name) {
                for v in t.data_mut() {
                    *v = truncated_normal(&mut rng) * std;
                }
            }
        }
        store.insert(name, t);
    }
    Ok(store)
}

fn is_bias(name: &str) -> bool {
    [".b", ".b1", ".b2", ".bias"].iter().any(|s| name.ends_with(s))
}

fn truncated_normal(rng: &mut impl Rng) -> f32 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z as f32;
        }
    }
}
