//! Channel-split spatio-temporal attention.
//!
//! The input is split in half along channels. The first half attends over
//! the spatial positions of each frame, the second half over the frames at
//! each spatial position; both halves go through a pre-norm attention
//! sub-layer and a pre-norm feed-forward sub-layer, each with a residual.
//! The halves are re-joined (spatial first), mixed by a position-wise MLP
//! and added back onto the block input.

use rand::Rng;

use crate::attention::{
    attend, attention_sublayer, ffn_sublayer, init_attention_sublayer, init_ffn_sublayer,
    layer_norm_graph, AttnVars, FFN_EXPANSION,
};
use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{he_normal, Graph, ParamStore, Trainable};
use crate::seam::{from_tokens, to_tokens};
use crate::tensor::Tensor;
use crate::video::FeatureMap;

pub fn split_channels(f: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    let c = f.channels();
    if c % 2 != 0 {
        return Err(invalid!("cannot split {c} channels in half"));
    }
    Ok((
        FeatureMap::new(f.data().narrow(1, 0, c / 2)?, f.level)?,
        FeatureMap::new(f.data().narrow(1, c / 2, c / 2)?, f.level)?,
    ))
}

pub fn concat_channels(spatial: &FeatureMap, temporal: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(
        Tensor::concat(&[spatial.data(), temporal.data()], 1)?,
        spatial.level,
    )
}

pub fn init_spatial_branch<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    heads: usize,
    ffn_expansion: usize,
    rng: &mut R,
) -> Result<()> {
    init_attention_sublayer(store, &format!("{prefix}.attn"), channels, channels, heads, true, rng)?;
    init_ffn_sublayer(store, &format!("{prefix}.ff"), channels, ffn_expansion, true, rng);
    Ok(())
}

/// Spatial self-attention within each frame, x (N, C, H, W).
pub fn spatial_branch_graph(g: &mut Graph<'_>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("spatial branch input {:?}", s));
    }
    let h = to_tokens(g, x)?;
    let h = attention_sublayer(g, h, None, &format!("{prefix}.attn"), heads)?;
    let h = ffn_sublayer(g, h, &format!("{prefix}.ff"))?;
    from_tokens(g, h, s[2], s[3])
}

/// Also writes a zero-initialized `(max_frames, channels)` positional table
/// at `prefix.pos`.
pub fn init_temporal_branch<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    max_frames: usize,
    heads: usize,
    ffn_expansion: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.pos"), Tensor::zeros(&[max_frames, channels]));
    init_attention_sublayer(store, &format!("{prefix}.attn"), channels, channels, heads, true, rng)?;
    init_ffn_sublayer(store, &format!("{prefix}.ff"), channels, ffn_expansion, true, rng);
    Ok(())
}

/// Self-attention across the `frames` frames of each segment at every
/// spatial position, x (B * frames, C, H, W). The positional table is added
/// to the normalized attention input only, so the residual stream is
/// untouched.
pub fn temporal_branch_graph(
    g: &mut Graph<'_>,
    x: Var,
    frames: usize,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || frames == 0 || s[0] % frames != 0 {
        return Err(shape_err!("temporal branch input {:?} with {} frames", s, frames));
    }
    let (b, c, hw) = (s[0] / frames, s[1], s[2] * s[3]);
    let pos = g.p(&format!("{prefix}.pos"))?;
    let max_frames = g.shape(pos)[0];
    if frames > max_frames {
        return Err(invalid!(
            "segment of {frames} frames exceeds positional table of {max_frames}"
        ));
    }
    let pos = if frames < max_frames {
        g.narrow(pos, 0, 0, frames)?
    } else {
        pos
    };
    let r = g.reshape(x, &[b, frames, c, hw])?;
    let r = g.permute(r, &[0, 3, 1, 2])?;
    let tokens = g.reshape(r, &[b * hw, frames, c])?;

    let normed = layer_norm_graph(g, tokens, &format!("{prefix}.attn.norm"))?;
    let normed = g.add_broadcast(normed, pos)?;
    let w = AttnVars::bind(g, &format!("{prefix}.attn.attn"))?;
    let (a, _) = attend(g, normed, normed, &w, heads)?;
    let h = g.add(tokens, a)?;
    let h = ffn_sublayer(g, h, &format!("{prefix}.ff"))?;

    let r = g.reshape(h, &[b, hw, frames, c])?;
    let r = g.permute(r, &[0, 2, 3, 1])?;
    g.reshape(r, &[b * frames, c, s[2], s[3]])
}

/// Position-wise MLP as `depth` 1x1 convolutions (GELU between layers),
/// the last one zero-initialized.
pub fn init_fuse<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    depth: usize,
    rng: &mut R,
) -> Result<()> {
    if depth == 0 {
        return Err(invalid!("fusion MLP needs at least one layer"));
    }
    for i in 0..depth {
        let w = if i + 1 == depth {
            Tensor::zeros(&[channels, channels, 1, 1])
        } else {
            he_normal(&[channels, channels, 1, 1], channels, rng)
        };
        store.insert(format!("{prefix}.mlp.{i}.weight"), w);
        store.insert(format!("{prefix}.mlp.{i}.bias"), Tensor::zeros(&[channels]));
    }
    Ok(())
}

/// `MLP(Concat(spatial, temporal)) + residual`.
pub fn fuse_graph(
    g: &mut Graph<'_>,
    spatial: Var,
    temporal: Var,
    residual: Var,
    prefix: &str,
    depth: usize,
) -> Result<Var> {
    let (ss, ts, rs) = (g.shape(spatial), g.shape(temporal), g.shape(residual));
    if ss.len() != 4 || ss != ts || rs.len() != 4 || rs[1] != ss[1] + ts[1] || rs[0] != ss[0] {
        return Err(shape_err!(
            "fuse spatial {:?} temporal {:?} residual {:?}",
            ss,
            ts,
            rs
        ));
    }
    let mut h = g.concat(&[spatial, temporal], 1)?;
    for i in 0..depth {
        let w = g.p(&format!("{prefix}.mlp.{i}.weight"))?;
        let b = g.p(&format!("{prefix}.mlp.{i}.bias"))?;
        h = g.conv2d(h, w, Some(b), 1, 0)?;
        if i + 1 < depth {
            h = g.gelu(h);
        }
    }
    g.add(h, residual)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TsamShape {
    pub channels: usize,
    pub max_frames: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub mlp_depth: usize,
}

pub fn init_tsam<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    shape: &TsamShape,
    rng: &mut R,
) -> Result<()> {
    if shape.channels % 2 != 0 {
        return Err(invalid!("TSAM needs an even channel count, got {}", shape.channels));
    }
    let half = shape.channels / 2;
    init_spatial_branch(
        store,
        &format!("{prefix}.spatial_branch"),
        half,
        shape.heads,
        shape.ffn_expansion,
        rng,
    )?;
    init_temporal_branch(
        store,
        &format!("{prefix}.temporal_branch"),
        half,
        shape.max_frames,
        shape.heads,
        shape.ffn_expansion,
        rng,
    )?;
    init_fuse(store, &format!("{prefix}.fuse"), shape.channels, shape.mlp_depth, rng)
}

pub fn tsam_graph(
    g: &mut Graph<'_>,
    x: Var,
    frames: usize,
    prefix: &str,
    heads: usize,
    mlp_depth: usize,
) -> Result<Var> {
    let c = g.shape(x)[1];
    if c % 2 != 0 {
        return Err(invalid!("cannot split {c} channels in half"));
    }
    let fs = g.narrow(x, 1, 0, c / 2)?;
    let ft = g.narrow(x, 1, c / 2, c / 2)?;
    let fs = spatial_branch_graph(g, fs, &format!("{prefix}.spatial_branch"), heads)?;
    let ft = temporal_branch_graph(g, ft, frames, &format!("{prefix}.temporal_branch"), heads)?;
    fuse_graph(g, fs, ft, x, &format!("{prefix}.fuse"), mlp_depth)
}

/// Parameters for one standalone spatial or temporal branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub store: ParamStore,
    pub heads: usize,
}

impl BranchParams {
    pub const PREFIX: &'static str = "branch";

    pub fn init_spatial<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        init_spatial_branch(&mut store, Self::PREFIX, channels, heads, FFN_EXPANSION, rng)?;
        Ok(Self { store, heads })
    }

    pub fn init_temporal<R: Rng + ?Sized>(
        channels: usize,
        max_frames: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        init_temporal_branch(&mut store, Self::PREFIX, channels, max_frames, heads, FFN_EXPANSION, rng)?;
        Ok(Self { store, heads })
    }

    pub fn trainable_graph(&self) -> Graph<'_> {
        Graph::new(&self.store, Trainable::Everything)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseParams {
    pub store: ParamStore,
    pub depth: usize,
}

impl FuseParams {
    pub const PREFIX: &'static str = "fuse";

    pub fn init<R: Rng + ?Sized>(channels: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        init_fuse(&mut store, Self::PREFIX, channels, depth, rng)?;
        Ok(Self { store, depth })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsamParams {
    pub store: ParamStore,
    pub heads: usize,
    pub mlp_depth: usize,
}

impl TsamParams {
    pub const PREFIX: &'static str = "tsam";

    pub fn init<R: Rng + ?Sized>(shape: &TsamShape, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        init_tsam(&mut store, Self::PREFIX, shape, rng)?;
        Ok(Self {
            store,
            heads: shape.heads,
            mlp_depth: shape.mlp_depth,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, x: Var, frames: usize) -> Result<Var> {
        tsam_graph(g, x, frames, Self::PREFIX, self.heads, self.mlp_depth)
    }

    pub fn trainable_graph(&self) -> Graph<'_> {
        Graph::new(&self.store, Trainable::Everything)
    }

    /// Spatial-branch parameters as a standalone [`BranchParams`].
    pub fn spatial(&self) -> BranchParams {
        self.branch("spatial_branch")
    }

    pub fn temporal(&self) -> BranchParams {
        self.branch("temporal_branch")
    }

    pub fn fuse(&self) -> FuseParams {
        let mut store = ParamStore::new();
        store.graft(FuseParams::PREFIX, &self.store.subtree(&format!("{}.fuse", Self::PREFIX)));
        FuseParams {
            store,
            depth: self.mlp_depth,
        }
    }

    fn branch(&self, name: &str) -> BranchParams {
        let mut store = ParamStore::new();
        store.graft(
            BranchParams::PREFIX,
            &self.store.subtree(&format!("{}.{name}", Self::PREFIX)),
        );
        BranchParams {
            store,
            heads: self.heads,
        }
    }
}

fn eval(store: &ParamStore, f: &FeatureMap, body: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>) -> Result<FeatureMap> {
    let mut g = Graph::frozen(store);
    let x = g.constant(f.data().clone());
    let y = body(&mut g, x)?;
    FeatureMap::new(g.value(y).clone(), f.level)
}

pub fn spatial_branch(f: &FeatureMap, p: &BranchParams) -> Result<FeatureMap> {
    eval(&p.store, f, |g, x| spatial_branch_graph(g, x, BranchParams::PREFIX, p.heads))
}

pub fn temporal_branch(f: &FeatureMap, p: &BranchParams) -> Result<FeatureMap> {
    let frames = f.frames();
    eval(&p.store, f, |g, x| {
        temporal_branch_graph(g, x, frames, BranchParams::PREFIX, p.heads)
    })
}

pub fn fuse(
    spatial: &FeatureMap,
    temporal: &FeatureMap,
    residual: &FeatureMap,
    p: &FuseParams,
) -> Result<FeatureMap> {
    let mut g = Graph::frozen(&p.store);
    let s = g.constant(spatial.data().clone());
    let t = g.constant(temporal.data().clone());
    let r = g.constant(residual.data().clone());
    let y = fuse_graph(&mut g, s, t, r, FuseParams::PREFIX, p.depth)?;
    FeatureMap::new(g.value(y).clone(), residual.level)
}

pub fn tsam_block(f: &FeatureMap, p: &TsamParams) -> Result<FeatureMap> {
    let frames = f.frames();
    eval(&p.store, f, |g, x| p.forward_graph(g, x, frames))
}
