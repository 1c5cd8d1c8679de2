//! Semantic alignment: per-frame semantic tokens from a frozen encoder are
//! injected into denoiser features through cross-attention.
//!
//! Frame `i`'s spatial positions only ever attend to frame `i`'s tokens.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::{
    attend, attention_sublayer, ffn_sublayer, init_attention_sublayer, init_ffn_sublayer,
    AttentionParams, AttnVars,
};
use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Graph, ParamStore, Trainable};
use crate::tensor::Tensor;
use crate::video::{derive_rng, FeatureMap, VideoSegment};

/// Per-frame semantic tokens, shape (L, N_s, d_s).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    tokens: Tensor,
}

impl SemanticEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 3 || tokens.dim(0) == 0 || tokens.dim(1) == 0 {
            return Err(shape_err!(
                "semantic embedding must be (L, N_s>=1, d_s), got {:?}",
                tokens.shape()
            ));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite {
                layer: "semantic embedding".into(),
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

    pub fn frames(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn width(&self) -> usize {
        self.tokens.dim(2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderDescriptor {
    pub id: String,
    pub width: usize,
    /// Encoder-specific settings, rendered deterministically.
    pub settings: String,
}

/// A frozen per-frame feature extractor. Implementations take `&self`, so
/// nothing reachable from the training loop can mutate them.
pub trait SemanticEncoder: Send + Sync {
    fn descriptor(&self) -> EncoderDescriptor;
    fn encode(&self, frames: &VideoSegment) -> Result<SemanticEmbedding>;
}

/// Fixed seed of the stub encoder's random projection.
pub const STUB_SEED: u64 = 0x5e3a_11c0_de00_0001;

/// Average-pools non-overlapping `patch x patch` cells per channel and maps
/// each pooled RGB vector through a fixed random projection to `width`.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    patch: usize,
    width: usize,
    projection: Tensor,
}

impl StubEncoder {
    pub fn new(patch: usize, width: usize) -> Result<Self> {
        if patch == 0 || width == 0 {
            return Err(invalid!("stub encoder needs patch >= 1 and width >= 1"));
        }
        let mut rng = derive_rng(STUB_SEED, "stub-projection");
        let projection = Tensor::randn(&[3, width], 1.0 / 3f64.sqrt(), &mut rng);
        Ok(Self {
            patch,
            width,
            projection,
        })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    /// Pooled cell means, shape (L, cells, 3).
    pub fn pool(&self, frames: &VideoSegment) -> Result<Tensor> {
        let (l, h, w) = (frames.len(), frames.height(), frames.width());
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(invalid!("frame {h}x{w} not divisible by patch {p}"));
        }
        let (ch, cw) = (h / p, w / p);
        let d = frames.frames().data();
        let mut out = vec![0.0; l * ch * cw * 3];
        let norm = 1.0 / (p * p) as f64;
        for f in 0..l {
            for c in 0..3 {
                let plane = &d[(f * 3 + c) * h * w..(f * 3 + c + 1) * h * w];
                for cy in 0..ch {
                    for cx in 0..cw {
                        let mut s = 0.0;
                        for y in cy * p..(cy + 1) * p {
                            s += plane[y * w + cx * p..y * w + (cx + 1) * p].iter().sum::<f64>();
                        }
                        out[((f * ch + cy) * cw + cx) * 3 + c] = s * norm;
                    }
                }
            }
        }
        Tensor::from_vec(&[l, ch * cw, 3], out)
    }
}

impl SemanticEncoder for StubEncoder {
    fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor {
            id: "stub".into(),
            width: self.width,
            settings: format!("patch={};seed={:#x}", self.patch, STUB_SEED),
        }
    }

    fn encode(&self, frames: &VideoSegment) -> Result<SemanticEmbedding> {
        let pooled = self.pool(frames)?;
        let mut t = Tape::new();
        let x = t.constant(pooled);
        let w = t.constant(self.projection.clone());
        let y = t.matmul(x, w)?;
        SemanticEmbedding::new(t.value(y).clone())
    }
}

pub fn stub_encode(frames: &VideoSegment, patch: usize, width: usize) -> Result<SemanticEmbedding> {
    StubEncoder::new(patch, width)?.encode(frames)
}

/// Options passed to encoder factories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderOptions {
    pub patch: usize,
    pub width: usize,
}

type Factory = Box<dyn Fn(&EncoderOptions) -> Result<Box<dyn SemanticEncoder>> + Send + Sync>;

/// Encoders selectable by identifier. `"stub"` is always registered; an
/// adapter around an external model can be added with [`register`].
///
/// [`register`]: EncoderRegistry::register
pub struct EncoderRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("stub", |o| {
            Ok(Box::new(StubEncoder::new(o.patch, o.width)?) as Box<dyn SemanticEncoder>)
        });
        r
    }
}

impl EncoderRegistry {
    pub fn register<F>(&mut self, id: &str, factory: F)
    where
        F: Fn(&EncoderOptions) -> Result<Box<dyn SemanticEncoder>> + Send + Sync + 'static,
    {
        self.factories.insert(id.to_string(), Box::new(factory));
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.factories.keys()
    }

    pub fn create(&self, id: &str, options: &EncoderOptions) -> Result<Box<dyn SemanticEncoder>> {
        let f = self.factories.get(id).ok_or_else(|| {
            Error::Config(format!(
                "unknown semantic encoder `{id}` (known: {})",
                self.factories.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        f(options)
    }
}

/// (N, C, H, W) -> (N, H*W, C).
pub fn to_tokens(t: &mut Tape, x: Var) -> Result<Var> {
    let s = t.shape(x).to_vec();
    let r = t.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    t.permute(r, &[0, 2, 1])
}

/// (N, H*W, C) -> (N, C, H, W).
pub fn from_tokens(t: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = t.shape(x).to_vec();
    let p = t.permute(x, &[0, 2, 1])?;
    t.reshape(p, &[s[0], s[2], h, w])
}

fn check_alignment(t: &Tape, x: Var, sem: Var) -> Result<()> {
    let (xs, ss) = (t.shape(x), t.shape(sem));
    if xs.len() != 4 || ss.len() != 3 || xs[0] != ss[0] {
        return Err(shape_err!(
            "features {:?} and semantic tokens {:?} are not frame-aligned",
            xs,
            ss
        ));
    }
    Ok(())
}

/// `x + W_out Attention(W_q x, W_k f, W_v f)` per frame, x (N, C, H, W),
/// sem (N, N_s, d_s). Parameters live under `prefix`.
pub fn semantic_cross_attention_graph(
    g: &mut Graph<'_>,
    x: Var,
    sem: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    check_alignment(g, x, sem)?;
    let s = g.shape(x).to_vec();
    let tokens = to_tokens(g, x)?;
    let w = AttnVars::bind(g, prefix)?;
    let (a, _) = attend(g, tokens, sem, &w, heads)?;
    let a = from_tokens(g, a, s[2], s[3])?;
    g.add(x, a)
}

/// Writes a semantic spatial transformer's parameters under `prefix`.
/// Every residual branch's output projection starts at zero.
#[allow(clippy::too_many_arguments)]
pub fn init_semantic_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    semantic_width: usize,
    heads: usize,
    self_attention: bool,
    ffn_expansion: usize,
    rng: &mut R,
) -> Result<()> {
    if self_attention {
        init_attention_sublayer(store, &format!("{prefix}.self"), channels, channels, heads, true, rng)?;
    }
    init_attention_sublayer(
        store,
        &format!("{prefix}.cross"),
        channels,
        semantic_width,
        heads,
        true,
        rng,
    )?;
    init_ffn_sublayer(store, &format!("{prefix}.ff"), channels, ffn_expansion, true, rng);
    Ok(())
}

/// Pre-norm residual stack: spatial self-attention (optional), semantic
/// cross-attention, feed-forward.
pub fn semantic_block_graph(
    g: &mut Graph<'_>,
    x: Var,
    sem: Var,
    prefix: &str,
    heads: usize,
    self_attention: bool,
) -> Result<Var> {
    check_alignment(g, x, sem)?;
    let s = g.shape(x).to_vec();
    let mut h = to_tokens(g, x)?;
    if self_attention {
        h = attention_sublayer(g, h, None, &format!("{prefix}.self"), heads)?;
    }
    h = attention_sublayer(g, h, Some(sem), &format!("{prefix}.cross"), heads)?;
    h = ffn_sublayer(g, h, &format!("{prefix}.ff"))?;
    from_tokens(g, h, s[2], s[3])
}

fn check_frames(f: &FeatureMap, sem: &SemanticEmbedding) -> Result<()> {
    if f.frames() != sem.frames() {
        return Err(shape_err!(
            "{} feature frames vs {} semantic frames",
            f.frames(),
            sem.frames()
        ));
    }
    Ok(())
}

/// Evaluates [`semantic_cross_attention_graph`] on one segment.
pub fn semantic_cross_attention(
    f: &FeatureMap,
    sem: &SemanticEmbedding,
    p: &AttentionParams,
) -> Result<FeatureMap> {
    check_frames(f, sem)?;
    p.validate()?;
    if p.d_model() != f.channels() || p.d_ctx() != sem.width() {
        return Err(shape_err!(
            "attention expects width {} / context {}, got {} / {}",
            p.d_model(),
            p.d_ctx(),
            f.channels(),
            sem.width()
        ));
    }
    let mut store = ParamStore::new();
    p.write_to(&mut store, "cross");
    let mut g = Graph::frozen(&store);
    let x = g.constant(f.data().clone());
    let s = g.constant(sem.tokens().clone());
    let y = semantic_cross_attention_graph(&mut g, x, s, "cross", p.heads)?;
    FeatureMap::new(g.value(y).clone(), f.level)
}

/// Parameters of a standalone semantic spatial transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBlockParams {
    pub store: ParamStore,
    pub heads: usize,
    pub self_attention: bool,
}

impl SemanticBlockParams {
    pub const PREFIX: &'static str = "semantic";

    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        semantic_width: usize,
        heads: usize,
        self_attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        init_semantic_block(
            &mut store,
            Self::PREFIX,
            channels,
            semantic_width,
            heads,
            self_attention,
            crate::attention::FFN_EXPANSION,
            rng,
        )?;
        Ok(Self {
            store,
            heads,
            self_attention,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, x: Var, sem: Var) -> Result<Var> {
        semantic_block_graph(g, x, sem, Self::PREFIX, self.heads, self.self_attention)
    }

    /// Graph over this block's parameters with every parameter trainable.
    pub fn trainable_graph(&self) -> Graph<'_> {
        Graph::new(&self.store, Trainable::Everything)
    }
}

pub fn semantic_spatial_transformer_block(
    f: &FeatureMap,
    sem: &SemanticEmbedding,
    p: &SemanticBlockParams,
) -> Result<FeatureMap> {
    check_frames(f, sem)?;
    let mut g = Graph::frozen(&p.store);
    let x = g.constant(f.data().clone());
    let s = g.constant(sem.tokens().clone());
    let y = p.forward_graph(&mut g, x, s)?;
    FeatureMap::new(g.value(y).clone(), f.level)
}
