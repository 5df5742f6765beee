//! Transformer building blocks shared by the encoder and the denoising decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, ParamVars, Real, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

pub(crate) fn normal_tensor<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

pub(crate) fn add_layer_norm<T: Real>(p: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    p.insert(format!("{prefix}.g"), Tensor::full(&[d], T::one()))?;
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

pub(crate) fn add_attention<T: Real, R: Rng>(p: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.w{w}"), normal_tensor(&[d, d], 0.02, rng))?;
        p.insert(format!("{prefix}.b{w}"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

pub(crate) fn add_ffn<T: Real, R: Rng>(p: &mut ParamStore<T>, prefix: &str, d: usize, d_ffn: usize, rng: &mut R) -> Result<()> {
    p.insert(format!("{prefix}.w1"), normal_tensor(&[d, d_ffn], 0.02, rng))?;
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_ffn]))?;
    p.insert(format!("{prefix}.w2"), normal_tensor(&[d_ffn, d], 0.02, rng))?;
    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]))
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, T::of(LN_EPS))
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &ParamVars, w: &str, b: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(w)?, false)?;
    g.add_bias(y, p.get(b)?)
}

pub(crate) fn ffn<T: Real>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)?;
    let h = g.relu(h);
    linear(g, p, &format!("{prefix}.w2"), &format!("{prefix}.b2"), h)
}

/// Geometry of one multi-head attention call.
pub(crate) struct AttnShape {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    pub d_model: usize,
}

/// Additive score mask `[batch·heads, queries, keys]` hiding padded keys and,
/// when `causal`, future positions.
pub(crate) fn attention_mask<T: Real>(s: &AttnShape, key_mask: Option<&[bool]>, causal: bool) -> Option<Tensor<T>> {
    if key_mask.is_none() && !causal {
        return None;
    }
    let (q, k) = (s.queries, s.keys);
    let masked = T::of(MASKED);
    let mut data = Vec::with_capacity(s.batch * s.heads * q * k);
    for b in 0..s.batch {
        for _ in 0..s.heads {
            for qi in 0..q {
                for ki in 0..k {
                    let hidden = key_mask.is_some_and(|m| !m[b * k + ki]) || (causal && ki > qi);
                    data.push(if hidden { masked } else { T::zero() });
                }
            }
        }
    }
    Some(Tensor::new(vec![s.batch * s.heads, q, k], data).expect("mask shape"))
}

/// `[B·L, d]` → `[B·H, L, d/H]`
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, batch: usize, len: usize, heads: usize, d: usize) -> Result<Var> {
    let dh = d / heads;
    let x = g.reshape(x, &[batch, len, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, len, dh])
}

/// Multi-head scaled dot-product attention of `q_in [B·Q, d]` over `kv_in [B·K, d]`.
pub(crate) fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    s: &AttnShape,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let lin = |g: &mut Graph<T>, w: &str, x: Var| linear(g, p, &format!("{prefix}.w{w}"), &format!("{prefix}.b{w}"), x);
    let q = lin(g, "q", q_in)?;
    let k = lin(g, "k", kv_in)?;
    let v = lin(g, "v", kv_in)?;
    let q = split_heads(g, q, s.batch, s.queries, s.heads, s.d_model)?;
    let k = split_heads(g, k, s.batch, s.keys, s.heads, s.d_model)?;
    let v = split_heads(g, v, s.batch, s.keys, s.heads, s.d_model)?;
    let dh = s.d_model / s.heads;
    let scores = g.batch_matmul(q, k, true)?;
    let mut scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        scores = g.add(scores, m)?;
    }
    let probs = g.softmax(scores, 2)?;
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = g.reshape(ctx, &[s.batch, s.heads, s.queries, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[s.batch * s.queries, s.d_model])?;
    lin(g, "o", ctx)
}
