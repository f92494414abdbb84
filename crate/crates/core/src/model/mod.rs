//! Architecture shapes, parameter layout and MAC/parameter accounting.
//!
//! A model is a stack of blocks, each containing exactly one two-layer MLP.
//! Blocks with `num_heads > 0` are pre-norm transformer blocks
//! (LN → MHSA → residual → LN → MLP → residual); blocks with `num_heads == 0`
//! are bare MLPs with no normalization or residual path.

mod forward;
mod io;
mod weights;

pub use forward::{forward_mlp, forward_model, HiddenHook, MlpWeights};
pub use io::{decode_model, encode_model, load_model, model_fingerprint, save_model};
pub use weights::{init_weights, InitKind, WeightStore};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VbpError};
use crate::prune::PruningPlan;

/// LayerNorm epsilon used by every norm in the model.
pub const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub d_in: usize,
    pub d_hid: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub embed_dim: usize,
    /// 0 means an MLP-only block without attention.
    pub num_heads: usize,
    pub mlp: MlpShape,
}

impl BlockShape {
    pub fn has_attention(&self) -> bool {
        self.num_heads > 0
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub blocks: Vec<BlockShape>,
    pub num_tokens: usize,
    pub num_classes: usize,
    /// Raw feature width per patch. When set, inputs carry `num_tokens - 1`
    /// patches that are linearly embedded, prefixed with a learned class
    /// token and offset by learned position embeddings; the class token is
    /// read out. Otherwise inputs are already tokens and are mean-pooled.
    #[serde(default)]
    pub patch_embed: Option<usize>,
}

/// Named presets accepted by [`ModelSpec::preset`].
pub const PRESETS: &[&str] = &["deit-tiny", "deit-small", "deit-base", "toy"];

impl ModelSpec {
    /// Plain ViT shapes: 16×16×3 patches, 196 patches + class token.
    pub fn deit(embed_dim: usize, num_heads: usize) -> ModelSpec {
        Self::transformer(12, embed_dim, 4 * embed_dim, num_heads, 197, 1000, Some(16 * 16 * 3))
    }

    pub fn deit_tiny() -> ModelSpec {
        Self::deit(192, 3)
    }

    pub fn deit_small() -> ModelSpec {
        Self::deit(384, 6)
    }

    pub fn deit_base() -> ModelSpec {
        Self::deit(768, 12)
    }

    /// 2 blocks, dim 32, hidden 128, 4 heads, 9 pre-tokenized tokens, 4 classes.
    pub fn toy() -> ModelSpec {
        Self::transformer(2, 32, 128, 4, 9, 4, None)
    }

    pub fn transformer(
        blocks: usize,
        dim: usize,
        hid: usize,
        heads: usize,
        tokens: usize,
        classes: usize,
        patch_embed: Option<usize>,
    ) -> ModelSpec {
        let block = BlockShape {
            embed_dim: dim,
            num_heads: heads,
            mlp: MlpShape {
                d_in: dim,
                d_hid: hid,
                d_out: dim,
            },
        };
        ModelSpec {
            blocks: vec![block; blocks],
            num_tokens: tokens,
            num_classes: classes,
            patch_embed,
        }
    }

    /// A single MLP block followed by the classifier head.
    pub fn mlp_only(mlp: MlpShape, num_tokens: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            blocks: vec![BlockShape {
                embed_dim: mlp.d_in,
                num_heads: 0,
                mlp,
            }],
            num_tokens,
            num_classes,
            patch_embed: None,
        }
    }

    pub fn preset(name: &str) -> Result<ModelSpec> {
        match name {
            "deit-tiny" => Ok(Self::deit_tiny()),
            "deit-small" => Ok(Self::deit_small()),
            "deit-base" => Ok(Self::deit_base()),
            "toy" => Ok(Self::toy()),
            other => Err(VbpError::Usage(format!(
                "unknown preset `{other}`; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VbpError::Usage(format!("invalid model spec: {msg}")));
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.num_tokens == 0 || self.num_classes == 0 {
            return bad("num_tokens and num_classes must be >= 1".into());
        }
        if self.patch_embed == Some(0) {
            return bad("patch_embed width must be >= 1".into());
        }
        if self.patch_embed.is_some() && self.num_tokens < 2 {
            return bad("patch embedding needs at least one patch plus the class token".into());
        }
        let embed = self.blocks[0].embed_dim;
        for (i, b) in self.blocks.iter().enumerate() {
            let m = b.mlp;
            if b.embed_dim == 0 || m.d_in == 0 || m.d_hid == 0 || m.d_out == 0 {
                return bad(format!("block {i} has a zero dimension"));
            }
            if b.embed_dim != embed {
                return bad(format!("block {i} embed_dim {} != {embed}", b.embed_dim));
            }
            if b.has_attention() {
                if b.embed_dim % b.num_heads != 0 {
                    return bad(format!("block {i}: embed_dim not divisible by num_heads"));
                }
                if m.d_in != embed || m.d_out != embed {
                    return bad(format!("block {i}: transformer MLP must map embed_dim to embed_dim"));
                }
            } else if m.d_in != embed {
                return bad(format!("block {i}: MLP d_in must equal embed_dim"));
            }
            if i > 0 && self.blocks[i - 1].mlp.d_out != m.d_in {
                return bad(format!("block {i}: input width does not match previous block output"));
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks[0].embed_dim
    }

    pub fn has_attention(&self) -> bool {
        self.blocks.iter().any(|b| b.has_attention())
    }

    /// Tokens per input sample (patches when a patch embedding is present).
    pub fn input_tokens(&self) -> usize {
        match self.patch_embed {
            Some(_) => self.num_tokens - 1,
            None => self.num_tokens,
        }
    }

    pub fn input_features(&self) -> usize {
        self.patch_embed.unwrap_or_else(|| self.embed_dim())
    }

    pub fn output_features(&self) -> usize {
        self.blocks.last().expect("validated spec").mlp.d_out
    }

    pub fn total_hidden(&self) -> usize {
        self.blocks.iter().map(|b| b.mlp.d_hid).sum()
    }

    /// Canonical `(name, shape)` list of every parameter, in serialization order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim();
        let mut out = Vec::new();
        if let Some(f) = self.patch_embed {
            out.push(("patch_embed.w".to_string(), vec![d, f]));
            out.push(("patch_embed.b".to_string(), vec![d]));
            out.push(("cls_token".to_string(), vec![d]));
            out.push(("pos_embed".to_string(), vec![self.num_tokens, d]));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block.{i}.{s}");
            if b.has_attention() {
                out.push((p("norm1.gain"), vec![d]));
                out.push((p("norm1.bias"), vec![d]));
                out.push((p("attn.qkv.w"), vec![3 * d, d]));
                out.push((p("attn.qkv.b"), vec![3 * d]));
                out.push((p("attn.proj.w"), vec![d, d]));
                out.push((p("attn.proj.b"), vec![d]));
                out.push((p("norm2.gain"), vec![d]));
                out.push((p("norm2.bias"), vec![d]));
            }
            let m = b.mlp;
            out.push((p("mlp.w1"), vec![m.d_hid, m.d_in]));
            out.push((p("mlp.b1"), vec![m.d_hid]));
            out.push((p("mlp.w2"), vec![m.d_out, m.d_hid]));
            out.push((p("mlp.b2"), vec![m.d_out]));
        }
        let f = self.output_features();
        if self.has_attention() {
            out.push(("norm.gain".to_string(), vec![f]));
            out.push(("norm.bias".to_string(), vec![f]));
        }
        out.push(("head.w".to_string(), vec![self.num_classes, f]));
        out.push(("head.b".to_string(), vec![self.num_classes]));
        out
    }
}

pub fn mlp_layer_name(block: usize) -> String {
    format!("block.{block}.mlp")
}

/// Total number of scalar parameters implied by the spec.
pub fn count_params(spec: &ModelSpec) -> u64 {
    spec.param_layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

/// Multiply-accumulates of one forward pass for a single sample, by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub patch_embed: u64,
    pub attention: u64,
    pub mlp: u64,
    pub head: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.attention + self.mlp + self.head
    }
}

/// LayerNorm, softmax, GELU and residual adds are not counted.
pub fn mac_breakdown(spec: &ModelSpec) -> MacBreakdown {
    let t = spec.num_tokens as u64;
    let mut macs = MacBreakdown::default();
    if let Some(f) = spec.patch_embed {
        macs.patch_embed = spec.input_tokens() as u64 * f as u64 * spec.embed_dim() as u64;
    }
    for b in &spec.blocks {
        let d = b.embed_dim as u64;
        if b.has_attention() {
            // qkv + output projection + (QKᵀ, PV) products
            macs.attention += t * (3 * d * d + d * d + 2 * t * d);
        }
        let m = b.mlp;
        macs.mlp += t * (m.d_in as u64 * m.d_hid as u64 + m.d_hid as u64 * m.d_out as u64);
    }
    macs.head = spec.output_features() as u64 * spec.num_classes as u64;
    macs
}

pub fn count_macs(spec: &ModelSpec) -> u64 {
    mac_breakdown(spec).total()
}

/// Shape of the model after removing the plan's hidden neurons.
pub fn prune_shape(spec: &ModelSpec, plan: &PruningPlan) -> Result<ModelSpec> {
    plan.validate_against(spec)?;
    let mut out = spec.clone();
    for (block, layer) in out.blocks.iter_mut().zip(&plan.layers) {
        block.mlp.d_hid -= layer.pruned.len();
    }
    Ok(out)
}
