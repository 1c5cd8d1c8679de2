//! Attention, layer normalization and position-wise feed-forward primitives
//! shared by the semantic and spatio-temporal blocks.
//!
//! Each primitive exists in two forms: a graph form operating on tape
//! variables (used inside the denoiser, differentiable) and a tensor form for
//! direct evaluation. The tensor form builds a throwaway tape and calls the
//! graph form, so both share one implementation.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{glorot_normal, Graph, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor used by every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Default hidden expansion of feed-forward layers.
pub const FFN_EXPANSION: usize = 4;

/// Batch of token sequences, shape (B, N, d).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    tokens: Tensor,
}

impl TokenBlock {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 3 || tokens.dim(1) == 0 {
            return Err(shape_err!(
                "token block must be (B, N>=1, d), got {:?}",
                tokens.shape()
            ));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite {
                layer: "token block".into(),
            });
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }

    pub fn width(&self) -> usize {
        self.tokens.dim(2)
    }
}

/// Projection weights for one attention layer. `w_q` is (d_model, d_attn),
/// `w_k`/`w_v` are (d_ctx, d_attn), `w_out` is (d_attn, d_model).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_out: Tensor, heads: usize) -> Result<Self> {
        let p = Self {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d_attn = self.d_attn();
        let ok = self.w_q.rank() == 2
            && self.w_k.rank() == 2
            && self.w_v.rank() == 2
            && self.w_out.rank() == 2
            && self.w_k.dim(1) == d_attn
            && self.w_v.dim(1) == d_attn
            && self.w_k.dim(0) == self.w_v.dim(0)
            && self.w_out.dim(0) == d_attn
            && self.w_out.dim(1) == self.w_q.dim(0);
        if !ok {
            return Err(shape_err!(
                "inconsistent attention weights q {:?} k {:?} v {:?} out {:?}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape(),
                self.w_out.shape()
            ));
        }
        if self.heads == 0 || d_attn % self.heads != 0 {
            return Err(invalid!("{d_attn} attention width not divisible by {} heads", self.heads));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_out] {
            if !w.all_finite() {
                return Err(Error::NonFinite {
                    layer: "attention weights".into(),
                });
            }
        }
        Ok(())
    }

    /// Glorot-initialized projections; the output projection is zeroed when
    /// `zero_out` is set so a residual block starts as the identity.
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        d_ctx: usize,
        d_attn: usize,
        heads: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w_q = glorot_normal(&[d_model, d_attn], d_model, d_attn, rng);
        let w_k = glorot_normal(&[d_ctx, d_attn], d_ctx, d_attn, rng);
        let w_v = glorot_normal(&[d_ctx, d_attn], d_ctx, d_attn, rng);
        let w_out = if zero_out {
            Tensor::zeros(&[d_attn, d_model])
        } else {
            glorot_normal(&[d_attn, d_model], d_attn, d_model, rng)
        };
        Self::new(w_q, w_k, w_v, w_out, heads)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.dim(0)
    }

    pub fn d_ctx(&self) -> usize {
        self.w_k.dim(0)
    }

    pub fn d_attn(&self) -> usize {
        self.w_q.dim(1)
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.w_q"), self.w_q.clone());
        store.insert(format!("{prefix}.w_k"), self.w_k.clone());
        store.insert(format!("{prefix}.w_v"), self.w_v.clone());
        store.insert(format!("{prefix}.w_out"), self.w_out.clone());
    }

    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_out.len()
    }
}

/// Tape handles for an attention layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
}

impl AttnVars {
    pub fn bind(g: &mut Graph<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: g.p(&format!("{prefix}.w_q"))?,
            w_k: g.p(&format!("{prefix}.w_k"))?,
            w_v: g.p(&format!("{prefix}.w_v"))?,
            w_out: g.p(&format!("{prefix}.w_out"))?,
        })
    }

    fn constants(t: &mut Tape, p: &AttentionParams) -> Self {
        Self {
            w_q: t.constant(p.w_q.clone()),
            w_k: t.constant(p.w_k.clone()),
            w_v: t.constant(p.w_v.clone()),
            w_out: t.constant(p.w_out.clone()),
        }
    }
}

/// Multi-head `softmax(Q K^T / sqrt(d_head)) V` followed by the output
/// projection. `q_src` is (B, Nq, d_model), `kv_src` is (B, Nk, d_ctx).
/// Returns the projected output and the attention weights (B*heads, Nq, Nk).
pub fn attend(
    t: &mut Tape,
    q_src: Var,
    kv_src: Var,
    w: &AttnVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = t.shape(q_src).to_vec();
    let ks = t.shape(kv_src).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || ks[1] == 0 {
        return Err(shape_err!("attention query {:?} vs context {:?}", qs, ks));
    }
    for (v, what) in [(q_src, "attention query"), (kv_src, "attention context")] {
        if !t.value(v).all_finite() {
            return Err(Error::NonFinite { layer: what.into() });
        }
    }
    let (b, nq, nk) = (qs[0], qs[1], ks[1]);
    let d_attn = t.shape(w.w_q)[1];
    if heads == 0 || d_attn % heads != 0 {
        return Err(invalid!("{d_attn} attention width not divisible by {heads} heads"));
    }
    let dh = d_attn / heads;
    let q = t.matmul(q_src, w.w_q)?;
    let k = t.matmul(kv_src, w.w_k)?;
    let v = t.matmul(kv_src, w.w_v)?;
    let q = split_heads(t, q, b, nq, heads, dh)?;
    let k = split_heads(t, k, b, nk, heads, dh)?;
    let v = split_heads(t, v, b, nk, heads, dh)?;
    let logits = t.bmm(q, k, true)?;
    let logits = t.scale(logits, 1.0 / (dh as f64).sqrt());
    let weights = t.softmax(logits)?;
    let mixed = t.bmm(weights, v, false)?;
    let mixed = merge_heads(t, mixed, b, nq, heads, dh)?;
    let out = t.matmul(mixed, w.w_out)?;
    Ok((out, weights))
}

fn split_heads(t: &mut Tape, x: Var, b: usize, n: usize, heads: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let x = t.reshape(x, &[b, n, heads, dh])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    t.reshape(x, &[b * heads, n, dh])
}

fn merge_heads(t: &mut Tape, x: Var, b: usize, n: usize, heads: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let x = t.reshape(x, &[b, heads, n, dh])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    t.reshape(x, &[b, n, heads * dh])
}

/// Evaluates [`attend`] on concrete tensors.
pub fn scaled_dot_attention(
    q_src: &TokenBlock,
    kv_src: &TokenBlock,
    p: &AttentionParams,
) -> Result<TokenBlock> {
    let (out, _) = attention_eval(q_src, kv_src, p)?;
    TokenBlock::new(out)
}

/// Attention weights (B * heads, Nq, Nk) for inspection; each row sums to 1.
pub fn attention_weights(
    q_src: &TokenBlock,
    kv_src: &TokenBlock,
    p: &AttentionParams,
) -> Result<Tensor> {
    attention_eval(q_src, kv_src, p).map(|(_, w)| w)
}

fn attention_eval(
    q_src: &TokenBlock,
    kv_src: &TokenBlock,
    p: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    if q_src.width() != p.d_model() || kv_src.width() != p.d_ctx() {
        return Err(shape_err!(
            "attention widths: query {} (expects {}), context {} (expects {})",
            q_src.width(),
            p.d_model(),
            kv_src.width(),
            p.d_ctx()
        ));
    }
    let mut t = Tape::new();
    let q = t.constant(q_src.tokens().clone());
    let kv = t.constant(kv_src.tokens().clone());
    let w = AttnVars::constants(&mut t, p);
    let (out, weights) = attend(&mut t, q, kv, &w, p.heads)?;
    Ok((t.value(out).clone(), t.value(weights).clone()))
}

/// Layer-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.gain"), self.gain.clone());
        store.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}

pub fn layer_norm_graph(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.p(&format!("{prefix}.gain"))?;
    let bias = g.p(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Per-token normalization to zero mean, unit variance, then `gain * x + bias`.
pub fn layer_normalize(x: &TokenBlock, gain: &Tensor, bias: &Tensor) -> Result<TokenBlock> {
    let mut t = Tape::new();
    let xv = t.constant(x.tokens().clone());
    let g = t.constant(gain.clone());
    let b = t.constant(bias.clone());
    let y = t.layer_norm(xv, g, b, LN_EPS)?;
    TokenBlock::new(t.value(y).clone())
}

/// Two-layer position-wise map `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForwardParams {
    pub fn init<R: Rng + ?Sized>(d: usize, expansion: usize, zero_out: bool, rng: &mut R) -> Self {
        let hidden = d * expansion;
        Self {
            w1: glorot_normal(&[d, hidden], d, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: if zero_out {
                Tensor::zeros(&[hidden, d])
            } else {
                glorot_normal(&[hidden, d], hidden, d, rng)
            },
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.fc1.weight"), self.w1.clone());
        store.insert(format!("{prefix}.fc1.bias"), self.b1.clone());
        store.insert(format!("{prefix}.fc2.weight"), self.w2.clone());
        store.insert(format!("{prefix}.fc2.bias"), self.b2.clone());
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn bind(g: &mut Graph<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: g.p(&format!("{prefix}.fc1.weight"))?,
            b1: g.p(&format!("{prefix}.fc1.bias"))?,
            w2: g.p(&format!("{prefix}.fc2.weight"))?,
            b2: g.p(&format!("{prefix}.fc2.bias"))?,
        })
    }
}

pub fn feed_forward_graph(t: &mut Tape, x: Var, w: &FfnVars) -> Result<Var> {
    let h = t.linear(x, w.w1, Some(w.b1))?;
    let h = t.gelu(h);
    t.linear(h, w.w2, Some(w.b2))
}

pub fn feed_forward(x: &TokenBlock, p: &FeedForwardParams) -> Result<TokenBlock> {
    if p.w1.rank() != 2 || p.w1.dim(0) != x.width() || p.w2.rank() != 2 || p.w2.dim(1) != x.width()
    {
        return Err(shape_err!(
            "feed-forward weights {:?}/{:?} for width {}",
            p.w1.shape(),
            p.w2.shape(),
            x.width()
        ));
    }
    let mut t = Tape::new();
    let xv = t.constant(x.tokens().clone());
    let w = FfnVars {
        w1: t.constant(p.w1.clone()),
        b1: t.constant(p.b1.clone()),
        w2: t.constant(p.w2.clone()),
        b2: t.constant(p.b2.clone()),
    };
    let y = feed_forward_graph(&mut t, xv, &w)?;
    TokenBlock::new(t.value(y).clone())
}

/// Writes a pre-norm residual attention sub-layer's parameters under `prefix`
/// (`prefix.norm`, `prefix.attn`).
pub(crate) fn init_attention_sublayer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    d_ctx: usize,
    heads: usize,
    zero_out: bool,
    rng: &mut R,
) -> Result<()> {
    LayerNormParams::identity(d_model).write_to(store, &format!("{prefix}.norm"));
    AttentionParams::init(d_model, d_ctx, d_model, heads, zero_out, rng)?
        .write_to(store, &format!("{prefix}.attn"));
    Ok(())
}

pub(crate) fn init_ffn_sublayer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    expansion: usize,
    zero_out: bool,
    rng: &mut R,
) {
    LayerNormParams::identity(d).write_to(store, &format!("{prefix}.norm"));
    FeedForwardParams::init(d, expansion, zero_out, rng).write_to(store, &format!("{prefix}.ffn"));
}

/// `x + Attn(Norm(x), ctx)`; with `ctx = None` the normalized tokens attend
/// to themselves.
pub(crate) fn attention_sublayer(
    g: &mut Graph<'_>,
    x: Var,
    ctx: Option<Var>,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm_graph(g, x, &format!("{prefix}.norm"))?;
    let w = AttnVars::bind(g, &format!("{prefix}.attn"))?;
    let kv = ctx.unwrap_or(h);
    let (a, _) = attend(g, h, kv, &w, heads)?;
    g.add(x, a)
}

/// `x + FFN(Norm(x))`.
pub(crate) fn ffn_sublayer(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = layer_norm_graph(g, x, &format!("{prefix}.norm"))?;
    let w = FfnVars::bind(g, &format!("{prefix}.ffn"))?;
    let f = feed_forward_graph(g, h, &w)?;
    g.add(x, f)
}
