use super::{MlpShape, ModelSpec, WeightStore, LN_EPS};
use crate::error::{Result, VbpError};
use crate::tensor::{self, gelu, layer_norm, linear, Tensor};

/// Borrowed view of one MLP's parameters: `W₁ [hid, in]`, `b₁ [hid]`,
/// `W₂ [out, hid]`, `b₂ [out]`.
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

impl MlpWeights<'_> {
    fn check(&self, shape: MlpShape) -> Result<()> {
        let MlpShape { d_in, d_hid, d_out } = shape;
        let expect: [(&Tensor, &[usize]); 4] = [
            (self.w1, &[d_hid, d_in]),
            (self.b1, &[d_hid]),
            (self.w2, &[d_out, d_hid]),
            (self.b2, &[d_out]),
        ];
        for (t, s) in expect {
            if t.shape() != s {
                return Err(VbpError::dim("forward_mlp weights", t.shape(), s));
            }
        }
        Ok(())
    }
}

/// Observer (and optionally editor) of MLP hidden activations.
///
/// Called once per MLP and forward pass with `[rows, d_hid]` matrices, one
/// row per token. `pre` is `W₁x + b₁`; `post` is its GELU and is what feeds
/// `W₂`, so writing to it changes the rest of the forward pass.
pub trait HiddenHook {
    fn on_hidden(&mut self, layer: usize, pre: &Tensor, post: &mut Tensor);
}

/// `y = W₂·gelu(W₁x + b₁) + b₂` for every row of `x: [n, d_in]`.
pub fn forward_mlp(
    shape: MlpShape,
    weights: &MlpWeights<'_>,
    x: &Tensor,
    tap: Option<&mut dyn HiddenHook>,
) -> Result<Tensor> {
    let mut tap = tap;
    mlp(0, shape, weights, x, &mut tap)
}

fn mlp(
    layer: usize,
    shape: MlpShape,
    w: &MlpWeights<'_>,
    x: &Tensor,
    hook: &mut Option<&mut dyn HiddenHook>,
) -> Result<Tensor> {
    w.check(shape)?;
    if x.last_dim() != shape.d_in {
        return Err(VbpError::dim("forward_mlp input", x.shape(), &[shape.d_in]));
    }
    let pre = linear(x, w.w1, Some(w.b1))?;
    let mut post = gelu(&pre);
    if let Some(h) = hook.as_deref_mut() {
        h.on_hidden(layer, &pre, &mut post);
    }
    linear(&post, w.w2, Some(w.b2))
}

/// Logits `[batch, num_classes]` for inputs `[batch, input_tokens, input_features]`.
pub fn forward_model(
    spec: &ModelSpec,
    weights: &WeightStore,
    batch: &Tensor,
    hook: Option<&mut dyn HiddenHook>,
) -> Result<Tensor> {
    weights.validate(spec)?;
    let mut hook = hook;
    let (bs, tin, feat) = match batch.shape() {
        [b, t, f] => (*b, *t, *f),
        other => {
            return Err(VbpError::dim(
                "forward_model input",
                other,
                &[0, spec.input_tokens(), spec.input_features()],
            ))
        }
    };
    if tin != spec.input_tokens() || feat != spec.input_features() {
        return Err(VbpError::dim(
            "forward_model input",
            batch.shape(),
            &[bs, spec.input_tokens(), spec.input_features()],
        ));
    }
    let t = spec.num_tokens;
    let d = spec.embed_dim();

    let mut z = match spec.patch_embed {
        Some(_) => {
            let patches = batch.clone().reshape(&[bs * tin, feat])?;
            let e = linear(&patches, weights.get("patch_embed.w")?, Some(weights.get("patch_embed.b")?))?;
            let cls = weights.get("cls_token")?.data();
            let pos = weights.get("pos_embed")?;
            let mut z = Tensor::zeros(&[bs * t, d]);
            for s in 0..bs {
                for tok in 0..t {
                    let src = if tok == 0 { cls } else { e.row(s * tin + tok - 1) };
                    let row = z.row_mut(s * t + tok);
                    for ((o, &v), &p) in row.iter_mut().zip(src).zip(pos.row(tok)) {
                        *o = v + p;
                    }
                }
            }
            z
        }
        None => batch.clone().reshape(&[bs * t, feat])?,
    };

    for (l, block) in spec.blocks.iter().enumerate() {
        let p = |s: &str| format!("block.{l}.{s}");
        let mw = weights.mlp(l)?;
        if block.has_attention() {
            let a = layer_norm(&z, weights.get(&p("norm1.gain"))?, weights.get(&p("norm1.bias"))?, LN_EPS)?;
            let attn = attention(
                &a,
                weights.get(&p("attn.qkv.w"))?,
                weights.get(&p("attn.qkv.b"))?,
                weights.get(&p("attn.proj.w"))?,
                weights.get(&p("attn.proj.b"))?,
                bs,
                t,
                block.num_heads,
            )?;
            add_in_place(&mut z, &attn);
            let m = layer_norm(&z, weights.get(&p("norm2.gain"))?, weights.get(&p("norm2.bias"))?, LN_EPS)?;
            let y = mlp(l, block.mlp, &mw, &m, &mut hook)?;
            add_in_place(&mut z, &y);
        } else {
            z = mlp(l, block.mlp, &mw, &z, &mut hook)?;
        }
    }

    if spec.has_attention() {
        z = layer_norm(&z, weights.get("norm.gain")?, weights.get("norm.bias")?, LN_EPS)?;
    }

    let width = z.last_dim();
    let mut pooled = Tensor::zeros(&[bs, width]);
    for s in 0..bs {
        let out = pooled.row_mut(s);
        if spec.patch_embed.is_some() {
            out.copy_from_slice(z.row(s * t));
        } else {
            let mut acc = vec![0.0f64; width];
            for tok in 0..t {
                for (a, &v) in acc.iter_mut().zip(z.row(s * t + tok)) {
                    *a += v as f64;
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = (a / t as f64) as f32;
            }
        }
    }
    linear(&pooled, weights.get("head.w")?, Some(weights.get("head.b")?))
}

fn add_in_place(z: &mut Tensor, y: &Tensor) {
    for (a, &b) in z.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention(
    x: &Tensor,
    qkv_w: &Tensor,
    qkv_b: &Tensor,
    proj_w: &Tensor,
    proj_b: &Tensor,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<Tensor> {
    let d = x.last_dim();
    let dh = d / heads;
    let qkv = tensor::widen(linear(x, qkv_w, Some(qkv_b))?.data());
    let mut out = vec![0.0f64; batch * tokens * d];
    let mut scores = vec![0.0f64; tokens * tokens];
    let scale = 1.0 / (dh as f64).sqrt();
    let (t, w3) = (tokens as isize, (3 * d) as isize);
    for s in 0..batch {
        let base = s * tokens * 3 * d;
        for h in 0..heads {
            let q = base + h * dh;
            let k = q + d;
            let v = q + 2 * d;
            #[rustfmt::skip]
            tensor::gemm(
                tokens, dh, tokens, scale,
                &qkv[q..], w3, 1,
                &qkv[k..], 1, w3,
                0.0, &mut scores, t, 1,
            );
            for row in scores.chunks_exact_mut(tokens) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let o = s * tokens * d + h * dh;
            #[rustfmt::skip]
            tensor::gemm(
                tokens, tokens, dh, 1.0,
                &scores, t, 1,
                &qkv[v..], w3, 1,
                0.0, &mut out[o..], d as isize, 1,
            );
        }
    }
    let heads_out = Tensor::new(vec![batch * tokens, d], tensor::narrow(&out))?;
    linear(&heads_out, proj_w, Some(proj_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, InitKind};
    use crate::tensor::gelu_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn identity_mlp_is_gelu() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let w = MlpWeights { w1: &eye, b1: &zero, w2: &eye, b2: &zero };
        let x = Tensor::from_rows(&[vec![2.0, -2.0]]).unwrap();
        let shape = MlpShape { d_in: 2, d_hid: 2, d_out: 2 };
        let y = forward_mlp(shape, &w, &x, None).unwrap();
        assert_eq!(y, gelu(&x));
    }

    #[test]
    fn zero_fan_in_gives_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = MlpShape { d_in: 3, d_hid: 4, d_out: 2 };
        let w1 = Tensor::zeros(&[4, 3]);
        let b1 = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
        let w2 = rand_tensor(&[2, 4], &mut rng, 1.0);
        let b2 = rand_tensor(&[2], &mut rng, 1.0);
        let w = MlpWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 };
        let y = forward_mlp(shape, &w, &rand_tensor(&[10, 3], &mut rng, 5.0), None).unwrap();
        for row in y.rows() {
            assert_eq!(row, y.row(0));
        }
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = MlpShape { d_in: 4, d_hid: 3, d_out: 5 };
        let w1 = rand_tensor(&[3, 4], &mut rng, 1.0);
        let b1 = rand_tensor(&[3], &mut rng, 1.0);
        let w2 = rand_tensor(&[5, 3], &mut rng, 1.0);
        let b2 = rand_tensor(&[5], &mut rng, 1.0);
        let x = rand_tensor(&[10, 4], &mut rng, 2.0);
        let w = MlpWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 };
        let y = forward_mlp(shape, &w, &x, None).unwrap();
        for n in 0..10 {
            let xr = x.row(n);
            let mut h = [0.0f64; 3];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = b1.data()[j] as f64;
                for i in 0..4 {
                    acc += w1.data()[j * 4 + i] as f64 * xr[i] as f64;
                }
                *hj = gelu_scalar(acc);
            }
            for o in 0..5 {
                let mut acc = b2.data()[o] as f64;
                for (j, hj) in h.iter().enumerate() {
                    acc += w2.data()[o * 3 + j] as f64 * hj;
                }
                assert!((y.row(n)[o] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mlp_only_model_is_mlp_plus_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = MlpShape { d_in: 3, d_hid: 6, d_out: 4 };
        let spec = ModelSpec::mlp_only(shape, 1, 2);
        let weights = init_weights(&spec, InitKind::TruncatedNormal { std: 0.5 }, 9).unwrap();
        let x = rand_tensor(&[7, 1, 3], &mut rng, 1.0);
        let logits = forward_model(&spec, &weights, &x, None).unwrap();
        let y = forward_mlp(shape, &weights.mlp(0).unwrap(), &x.clone().reshape(&[7, 3]).unwrap(), None).unwrap();
        let expect = linear(&y, weights.get("head.w").unwrap(), Some(weights.get("head.b").unwrap())).unwrap();
        assert!(logits.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn hidden_permutation_leaves_logits_unchanged() {
        let spec = ModelSpec::transformer(2, 8, 12, 2, 5, 3, Some(6));
        let weights = init_weights(&spec, InitKind::TruncatedNormal { std: 0.3 }, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 4, 6], &mut rng, 1.0);
        let base = forward_model(&spec, &weights, &x, None).unwrap();

        let perm: Vec<usize> = (0..12).rev().collect();
        let mut permuted = weights.clone();
        let mw = weights.mlp(1).unwrap();
        permuted.insert("block.1.mlp.w1", mw.w1.select_rows(&perm));
        permuted.insert("block.1.mlp.b1", mw.b1.select_rows(&perm));
        permuted.insert("block.1.mlp.w2", mw.w2.select_cols(&perm));
        let out = forward_model(&spec, &permuted, &x, None).unwrap();
        assert!(out.max_abs_diff(&base) <= 1e-5);
    }

    #[test]
    fn missing_weight_is_integrity_error() {
        let spec = ModelSpec::toy();
        let mut weights = init_weights(&spec, InitKind::default(), 0).unwrap();
        weights.remove("block.1.attn.qkv.w");
        let x = Tensor::zeros(&[1, 9, 32]);
        let err = forward_model(&spec, &weights, &x, None).unwrap_err();
        assert!(matches!(err, VbpError::Integrity(ref m) if m.contains("block.1.attn.qkv.w")));
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::default(), 0).unwrap();
        let x = Tensor::zeros(&[1, 8, 32]);
        assert!(matches!(
            forward_model(&spec, &weights, &x, None),
            Err(VbpError::Dimension { .. })
        ));
    }

    struct Recorder(Vec<(usize, usize)>);
    impl HiddenHook for Recorder {
        fn on_hidden(&mut self, layer: usize, pre: &Tensor, post: &mut Tensor) {
            assert_eq!(pre.shape(), post.shape());
            self.0.push((layer, pre.num_rows()));
        }
    }

    #[test]
    fn hook_sees_every_token_of_every_block() {
        let spec = ModelSpec::toy();
        let weights = init_weights(&spec, InitKind::default(), 0).unwrap();
        let x = Tensor::zeros(&[3, 9, 32]);
        let mut rec = Recorder(vec![]);
        forward_model(&spec, &weights, &x, Some(&mut rec)).unwrap();
        assert_eq!(rec.0, vec![(0, 27), (1, 27)]);
    }
}
