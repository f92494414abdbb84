//! Double-precision forward and reverse-mode gradients for the whole model.
//!
//! Mirrors [`crate::model::forward_model`] operation for operation so the
//! two agree to rounding; used by SNIP scoring and fine-tuning.

use std::collections::BTreeMap;

use crate::error::{Result, VbpError};
use crate::model::{ModelSpec, WeightStore, LN_EPS};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, gemm, narrow, widen, Tensor};

/// Every parameter of a model in one flat `f64` buffer, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    spec: ModelSpec,
    index: BTreeMap<String, (usize, usize)>,
    shapes: Vec<(String, Vec<usize>)>,
    pub data: Vec<f64>,
}

impl Params {
    pub fn from_weights(spec: &ModelSpec, weights: &WeightStore) -> Result<Params> {
        weights.validate(spec)?;
        let mut p = Params::zeros(spec)?;
        for (name, _) in spec.param_layout() {
            let src = weights.get(&name)?.data();
            p.get_mut(&name).iter_mut().zip(src).for_each(|(o, &v)| *o = v as f64);
        }
        Ok(p)
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Params> {
        spec.validate()?;
        let shapes = spec.param_layout();
        let mut index = BTreeMap::new();
        let mut off = 0;
        for (name, shape) in &shapes {
            let n: usize = shape.iter().product();
            index.insert(name.clone(), (off, n));
            off += n;
        }
        Ok(Params { spec: spec.clone(), index, shapes, data: vec![0.0; off] })
    }

    pub fn zeros_like(&self) -> Params {
        Params { data: vec![0.0; self.data.len()], ..self.clone() }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.shapes.iter().map(|(n, _)| n.as_str())
    }

    /// Panics on an unknown name; names come from the spec's own layout.
    pub fn get(&self, name: &str) -> &[f64] {
        let (o, n) = self.index[name];
        &self.data[o..o + n]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let (o, n) = self.index[name];
        &mut self.data[o..o + n]
    }

    /// Offset range of `name` inside [`Params::data`].
    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let (o, n) = self.index[name];
        o..o + n
    }

    pub fn to_weights(&self) -> WeightStore {
        let mut w = WeightStore::new();
        for (name, shape) in &self.shapes {
            let t = Tensor::new(shape.clone(), narrow(self.get(name))).expect("layout shape");
            w.insert(name.clone(), t);
        }
        w
    }

    pub fn backward(&self, cache: &Cache, dlogits: &[f64]) -> Params {
        backward(self, cache, dlogits)
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
}

#[derive(Debug, Clone)]
struct BlockCache {
    attn: Option<AttnCache>,
    mlp_in: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
}

/// Activations saved by [`forward`] for [`Params::backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    batch: usize,
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_ln: Option<LnCache>,
    pooled: Vec<f64>,
}

fn lin_fwd(x: &[f64], rows: usize, inp: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    #[rustfmt::skip]
    gemm(
        rows, inp, out, 1.0,
        x, inp as isize, 1,
        w, 1, inp as isize,
        1.0, &mut y, out as isize, 1,
    );
    y
}

/// Accumulates `gw += dyᵀx`, `gb += Σ dy` and returns `dx = dy·w`.
fn lin_bwd(x: &[f64], dy: &[f64], rows: usize, inp: usize, w: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let out = gb.len();
    #[rustfmt::skip]
    gemm(
        out, rows, inp, 1.0,
        dy, 1, out as isize,
        x, inp as isize, 1,
        1.0, gw, inp as isize, 1,
    );
    for row in dy.chunks_exact(out) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; rows * inp];
    #[rustfmt::skip]
    gemm(
        rows, out, inp, 1.0,
        dy, out as isize, 1,
        w, inp as isize, 1,
        0.0, &mut dx, inp as isize, 1,
    );
    dx
}

fn ln_fwd(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let eps = LN_EPS as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d);
    for ((row, yr), xr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(xhat.chunks_exact_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            xr[i] = (row[i] - mean) * r;
            yr[i] = xr[i] * gain[i] + bias[i];
        }
        rstd.push(r);
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd(c: &LnCache, dy: &[f64], d: usize, gain: &[f64], gg: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let rows = dy.chunks_exact(d).zip(c.xhat.chunks_exact(d)).zip(dx.chunks_exact_mut(d));
    for (((dyr, xr), dxr), &r) in rows.zip(&c.rstd) {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            gg[i] += dyr[i] * xr[i];
            gb[i] += dyr[i];
            let g = dyr[i] * gain[i];
            m1 += g;
            m2 += g * xr[i];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for i in 0..d {
            dxr[i] = r * (dyr[i] * gain[i] - m1 - xr[i] * m2);
        }
    }
    dx
}

/// Logits `[batch · num_classes]` plus the cache needed for gradients.
pub fn forward(params: &Params, batch: &Tensor) -> Result<(Vec<f64>, Cache)> {
    let spec = &params.spec;
    let (bs, tin, feat) = match batch.shape() {
        [b, t, f] if *t == spec.input_tokens() && *f == spec.input_features() => (*b, *t, *f),
        other => {
            return Err(VbpError::dim(
                "grad::forward input",
                other,
                &[0, spec.input_tokens(), spec.input_features()],
            ))
        }
    };
    let t = spec.num_tokens;
    let d = spec.embed_dim();
    let n = bs * t;
    let input = widen(batch.data());
    let g = |s: &str| params.get(s);

    let mut z = match spec.patch_embed {
        Some(_) => {
            let e = lin_fwd(&input, bs * tin, feat, g("patch_embed.w"), g("patch_embed.b"));
            let cls = g("cls_token");
            let pos = g("pos_embed");
            let mut z = vec![0.0; n * d];
            for s in 0..bs {
                for tok in 0..t {
                    let src = if tok == 0 { cls } else { &e[(s * tin + tok - 1) * d..][..d] };
                    let row = &mut z[(s * t + tok) * d..][..d];
                    for i in 0..d {
                        row[i] = src[i] + pos[tok * d + i];
                    }
                }
            }
            z
        }
        None => input.clone(),
    };

    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (l, block) in spec.blocks.iter().enumerate() {
        let p = |s: &str| format!("block.{l}.{s}");
        let m = block.mlp;
        let attn = if block.has_attention() {
            let (a, ln1) = ln_fwd(&z, d, g(&p("norm1.gain")), g(&p("norm1.bias")));
            let qkv = lin_fwd(&a, n, d, g(&p("attn.qkv.w")), g(&p("attn.qkv.b")));
            let (o, probs) = attn_fwd(&qkv, bs, t, d, block.num_heads);
            let y = lin_fwd(&o, n, d, g(&p("attn.proj.w")), g(&p("attn.proj.b")));
            z.iter_mut().zip(&y).for_each(|(z, y)| *z += y);
            let (mlp_in, ln2) = ln_fwd(&z, d, g(&p("norm2.gain")), g(&p("norm2.bias")));
            Some((AttnCache { ln1, a, qkv, probs, o, ln2 }, mlp_in))
        } else {
            None
        };
        let (attn, mlp_in) = match attn {
            Some((c, mi)) => (Some(c), mi),
            None => (None, z.clone()),
        };
        let u = lin_fwd(&mlp_in, n, m.d_in, g(&p("mlp.w1")), g(&p("mlp.b1")));
        let h: Vec<f64> = u.iter().map(|&v| gelu_scalar(v)).collect();
        let y = lin_fwd(&h, n, m.d_hid, g(&p("mlp.w2")), g(&p("mlp.b2")));
        if attn.is_some() {
            z.iter_mut().zip(&y).for_each(|(z, y)| *z += y);
        } else {
            z = y;
        }
        blocks.push(BlockCache { attn, mlp_in, u, h });
    }

    let f = spec.output_features();
    let final_ln = if spec.has_attention() {
        let (y, c) = ln_fwd(&z, f, g("norm.gain"), g("norm.bias"));
        z = y;
        Some(c)
    } else {
        None
    };

    let mut pooled = vec![0.0; bs * f];
    for s in 0..bs {
        let out = &mut pooled[s * f..][..f];
        if spec.patch_embed.is_some() {
            out.copy_from_slice(&z[s * t * f..][..f]);
        } else {
            for tok in 0..t {
                for (o, v) in out.iter_mut().zip(&z[(s * t + tok) * f..][..f]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= t as f64);
        }
    }
    let logits = lin_fwd(&pooled, bs, f, g("head.w"), g("head.b"));
    Ok((logits, Cache { batch: bs, input, blocks, final_ln, pooled }))
}

fn attn_fwd(qkv: &[f64], bs: usize, t: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = vec![0.0; bs * t * d];
    let mut probs = vec![0.0; bs * heads * t * t];
    let (ti, w3) = (t as isize, (3 * d) as isize);
    for s in 0..bs {
        for h in 0..heads {
            let q = s * t * 3 * d + h * dh;
            let (k, v) = (q + d, q + 2 * d);
            let p = &mut probs[(s * heads + h) * t * t..][..t * t];
            #[rustfmt::skip]
            gemm(
                t, dh, t, scale,
                &qkv[q..], w3, 1,
                &qkv[k..], 1, w3,
                0.0, p, ti, 1,
            );
            for row in p.chunks_exact_mut(t) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            #[rustfmt::skip]
            gemm(
                t, t, dh, 1.0,
                p, ti, 1,
                &qkv[v..], w3, 1,
                0.0, &mut o[s * t * d + h * dh..], d as isize, 1,
            );
        }
    }
    (o, probs)
}

fn attn_bwd(c: &AttnCache, d_o: &[f64], bs: usize, t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; bs * t * 3 * d];
    let mut dp = vec![0.0; t * t];
    let (ti, w3, di) = (t as isize, (3 * d) as isize, d as isize);
    for s in 0..bs {
        for h in 0..heads {
            let q = s * t * 3 * d + h * dh;
            let (k, v) = (q + d, q + 2 * d);
            let oh = s * t * d + h * dh;
            let p = &c.probs[(s * heads + h) * t * t..][..t * t];
            #[rustfmt::skip]
            gemm(
                t, dh, t, 1.0,
                &d_o[oh..], di, 1,
                &c.qkv[v..], 1, w3,
                0.0, &mut dp, ti, 1,
            );
            #[rustfmt::skip]
            gemm(
                t, t, dh, 1.0,
                p, 1, ti,
                &d_o[oh..], di, 1,
                1.0, &mut dqkv[v..], w3, 1,
            );
            for (dpr, pr) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pv) in dpr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            #[rustfmt::skip]
            gemm(
                t, t, dh, scale,
                &dp, ti, 1,
                &c.qkv[k..], w3, 1,
                1.0, &mut dqkv[q..], w3, 1,
            );
            #[rustfmt::skip]
            gemm(
                t, t, dh, scale,
                &dp, 1, ti,
                &c.qkv[q..], w3, 1,
                1.0, &mut dqkv[k..], w3, 1,
            );
        }
    }
    dqkv
}

/// Split borrow: the parameter slice and its gradient slice.
struct Grad<'a> {
    p: &'a Params,
    g: &'a mut Params,
}

impl Grad<'_> {
    fn lin(&mut self, w: &str, b: &str, x: &[f64], dy: &[f64], rows: usize, inp: usize) -> Vec<f64> {
        let (wr, br) = (self.g.range(w), self.g.range(b));
        let (gw, gb) = split_two(&mut self.g.data, wr, br);
        lin_bwd(x, dy, rows, inp, self.p.get(w), gw, gb)
    }

    fn ln(&mut self, gain: &str, bias: &str, c: &LnCache, dy: &[f64], d: usize) -> Vec<f64> {
        let (gr, br) = (self.g.range(gain), self.g.range(bias));
        let (gg, gb) = split_two(&mut self.g.data, gr, br);
        ln_bwd(c, dy, d, self.p.get(gain), gg, gb)
    }
}

fn split_two(
    data: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start, "layout order puts weights before biases");
    let (lo, hi) = data.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

fn backward(params: &Params, cache: &Cache, dlogits: &[f64]) -> Params {
    let spec = &params.spec;
    let mut grads = params.zeros_like();
    let mut gr = Grad { p: params, g: &mut grads };
    let bs = cache.batch;
    let t = spec.num_tokens;
    let d = spec.embed_dim();
    let n = bs * t;
    let f = spec.output_features();

    let dpooled = gr.lin("head.w", "head.b", &cache.pooled, dlogits, bs, f);
    let mut dz = vec![0.0; n * f];
    for s in 0..bs {
        let src = &dpooled[s * f..][..f];
        if spec.patch_embed.is_some() {
            dz[s * t * f..][..f].copy_from_slice(src);
        } else {
            for tok in 0..t {
                for (o, v) in dz[(s * t + tok) * f..][..f].iter_mut().zip(src) {
                    *o = v / t as f64;
                }
            }
        }
    }
    if let Some(c) = &cache.final_ln {
        dz = gr.ln("norm.gain", "norm.bias", c, &dz, f);
    }

    for (l, block) in spec.blocks.iter().enumerate().rev() {
        let p = |s: &str| format!("block.{l}.{s}");
        let bc = &cache.blocks[l];
        let m = block.mlp;
        let dh: Vec<f64> = gr.lin(&p("mlp.w2"), &p("mlp.b2"), &bc.h, &dz, n, m.d_hid);
        let du: Vec<f64> = dh.iter().zip(&bc.u).map(|(g, &u)| g * gelu_grad_scalar(u)).collect();
        let dmlp_in = gr.lin(&p("mlp.w1"), &p("mlp.b1"), &bc.mlp_in, &du, n, m.d_in);
        match &bc.attn {
            None => dz = dmlp_in,
            Some(ac) => {
                let back = gr.ln(&p("norm2.gain"), &p("norm2.bias"), &ac.ln2, &dmlp_in, d);
                dz.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                let d_o = gr.lin(&p("attn.proj.w"), &p("attn.proj.b"), &ac.o, &dz, n, d);
                let dqkv = attn_bwd(ac, &d_o, bs, t, d, block.num_heads);
                let da = gr.lin(&p("attn.qkv.w"), &p("attn.qkv.b"), &ac.a, &dqkv, n, d);
                let back = gr.ln(&p("norm1.gain"), &p("norm1.bias"), &ac.ln1, &da, d);
                dz.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }
    }

    if let Some(feat) = spec.patch_embed {
        let tin = t - 1;
        let mut de = vec![0.0; bs * tin * d];
        {
            let pos = gr.g.range("pos_embed");
            let cls = gr.g.range("cls_token");
            for s in 0..bs {
                for tok in 0..t {
                    let row = &dz[(s * t + tok) * d..][..d];
                    for i in 0..d {
                        gr.g.data[pos.start + tok * d + i] += row[i];
                    }
                    if tok == 0 {
                        for i in 0..d {
                            gr.g.data[cls.start + i] += row[i];
                        }
                    } else {
                        de[(s * tin + tok - 1) * d..][..d].copy_from_slice(row);
                    }
                }
            }
        }
        gr.lin("patch_embed.w", "patch_embed.b", &cache.input, &de, bs * tin, feat);
    }
    grads
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], labels: &[u32], classes: usize) -> (f64, Vec<f64>) {
    let bs = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &y) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let ls = log_softmax(row);
        loss -= ls[y as usize];
        for (gi, l) in g.iter_mut().zip(&ls) {
            *gi = l.exp() / bs as f64;
        }
        g[y as usize] -= 1.0 / bs as f64;
    }
    (loss / bs as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_model, init_weights, InitKind, MlpShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(shape: [usize; 3], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.5f32..1.5)).collect()).unwrap()
    }

    fn micro_vit() -> ModelSpec {
        ModelSpec::transformer(2, 4, 6, 2, 3, 3, Some(5))
    }

    /// Per-parameter central differences of the CE loss against the analytic gradient.
    fn grad_check(spec: &ModelSpec, std: f32) {
        let weights = init_weights(spec, InitKind::TruncatedNormal { std }, 11).unwrap();
        let mut params = Params::from_weights(spec, &weights).unwrap();
        let batch = rand_batch([3, spec.input_tokens(), spec.input_features()], 2);
        let labels = [0u32, 2, 1];
        let loss = |p: &Params| {
            let (lg, _) = forward(p, &batch).unwrap();
            cross_entropy(&lg, &labels, spec.num_classes).0
        };
        let (lg, cache) = forward(&params, &batch).unwrap();
        let (_, dl) = cross_entropy(&lg, &labels, spec.num_classes);
        let g = params.backward(&cache, &dl);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.data.len() {
            let orig = params.data[i];
            params.data[i] = orig + h;
            let up = loss(&params);
            params.data[i] = orig - h;
            let down = loss(&params);
            params.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / (fd.abs() + g.data[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_vit() {
        grad_check(&micro_vit(), 0.5);
    }

    #[test]
    fn gradients_match_finite_differences_pooled() {
        grad_check(&ModelSpec::transformer(2, 4, 6, 2, 4, 3, None), 0.5);
    }

    #[test]
    fn gradients_match_finite_differences_mlp_only() {
        grad_check(&ModelSpec::mlp_only(MlpShape { d_in: 3, d_hid: 7, d_out: 4 }, 2, 3), 0.8);
    }

    #[test]
    fn f64_forward_matches_inference_forward() {
        for spec in [micro_vit(), ModelSpec::toy()] {
            let weights = init_weights(&spec, InitKind::TruncatedNormal { std: 0.3 }, 4).unwrap();
            let batch = rand_batch([4, spec.input_tokens(), spec.input_features()], 9);
            let reference = forward_model(&spec, &weights, &batch, None).unwrap();
            let params = Params::from_weights(&spec, &weights).unwrap();
            let (lg, _) = forward(&params, &batch).unwrap();
            for (a, b) in reference.data().iter().zip(&lg) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn weights_roundtrip_through_params() {
        let spec = micro_vit();
        let weights = init_weights(&spec, InitKind::default(), 1).unwrap();
        let back = Params::from_weights(&spec, &weights).unwrap().to_weights();
        assert_eq!(back, weights);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, g) = cross_entropy(&[0.0; 8], &[1, 3], 4);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((g[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }
}
