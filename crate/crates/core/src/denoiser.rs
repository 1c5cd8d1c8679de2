//! Toy noise-prediction U-Net.
//!
//! Each resolution level runs a residual conv block followed, at attention
//! levels, by the semantic spatial transformer, the temporal transformer and
//! the channel-split spatio-temporal block (each individually switchable).
//! The noisy latent and the encoded low-resolution input are concatenated
//! along channels at the input.

use serde::{Deserialize, Serialize};

use crate::attention::FFN_EXPANSION;
use crate::autograd::Var;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{he_normal, glorot_normal, Graph, ParamStore, Trainable};
use crate::schedule::LatentSequence;
use crate::seam::{init_semantic_block, semantic_block_graph, SemanticEmbedding};
use crate::tensor::Tensor;
use crate::tsam::{init_temporal_branch, init_tsam, temporal_branch_graph, tsam_graph, TsamShape};
use crate::video::derive_rng;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub level_multipliers: Vec<usize>,
    /// Residual blocks per level on each side of the U.
    pub res_blocks: usize,
    /// Levels that carry the attention stack; `None` means the lowest level.
    pub attention_levels: Option<Vec<usize>>,
    pub timestep_embed_dim: usize,
    pub semantic_enabled: bool,
    pub temporal_enabled: bool,
    pub tsam_enabled: bool,
    pub semantic_width: usize,
    pub semantic_self_attention: bool,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Longest segment the temporal positional tables support.
    pub max_frames: usize,
    pub norm_groups: usize,
    pub tsam_mlp_depth: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            level_multipliers: vec![1, 2],
            res_blocks: 2,
            attention_levels: None,
            timestep_embed_dim: 32,
            semantic_enabled: true,
            temporal_enabled: true,
            tsam_enabled: true,
            semantic_width: 16,
            semantic_self_attention: true,
            heads: 1,
            ffn_expansion: FFN_EXPANSION,
            max_frames: 4,
            norm_groups: 8,
            tsam_mlp_depth: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.level_multipliers.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.level_multipliers[level]
    }

    pub fn attention_levels(&self) -> Vec<usize> {
        match &self.attention_levels {
            Some(l) => l.clone(),
            None => vec![self.levels().saturating_sub(1)],
        }
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels().contains(&level)
    }

    /// Latent side lengths must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    /// Stage-1 shape of this config: temporal modules switched off.
    pub fn spatial_only(&self) -> Self {
        Self {
            temporal_enabled: false,
            tsam_enabled: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_channels == 0 {
            return bad("latent_channels must be positive".into());
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be positive and even, got {}", self.base_channels));
        }
        if self.level_multipliers.is_empty() || self.level_multipliers.contains(&0) {
            return bad("level_multipliers must be non-empty and positive".into());
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return bad("timestep_embed_dim must be even and >= 2".into());
        }
        if self.res_blocks == 0 {
            return bad("res_blocks must be positive".into());
        }
        if self.heads == 0 || self.ffn_expansion == 0 || self.max_frames == 0 {
            return bad("heads, ffn_expansion and max_frames must be positive".into());
        }
        if self.semantic_width == 0 || self.tsam_mlp_depth == 0 {
            return bad("semantic_width and tsam_mlp_depth must be positive".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        for l in self.attention_levels() {
            if l >= self.levels() {
                return bad(format!("attention level {l} out of range"));
            }
            let c = self.channels_at(l);
            if c % 2 != 0 {
                return bad(format!("level {l} has odd channel count {c}"));
            }
            if c % self.heads != 0 || (self.tsam_enabled && (c / 2) % self.heads != 0) {
                return bad(format!("level {l} width {c} not divisible across {} heads", self.heads));
            }
        }
        for c in self.norm_widths() {
            if c % self.norm_groups != 0 {
                return bad(format!(
                    "group norm over {c} channels not divisible into {} groups",
                    self.norm_groups
                ));
            }
        }
        Ok(())
    }

    fn norm_widths(&self) -> Vec<usize> {
        let mut widths = vec![];
        for op in self.layout() {
            if let LayoutOp::Res { cin, cout, .. } = op {
                widths.extend([cin, cout]);
            }
        }
        widths
    }

    /// The U-Net as a flat sequence of blocks, shared by initialization and
    /// the forward pass.
    fn layout(&self) -> Vec<LayoutOp> {
        let mut ops = vec![];
        let mut ch = self.base_channels;
        let mut skips = vec![];
        for l in 0..self.levels() {
            let out = self.channels_at(l);
            for j in 0..self.res_blocks {
                ops.push(LayoutOp::Res {
                    name: format!("down.{l}.{j}.res"),
                    cin: ch,
                    cout: out,
                    concat_skip: false,
                });
                ch = out;
                if self.has_attention(l) {
                    ops.push(LayoutOp::Attention {
                        prefix: format!("down.{l}.{j}"),
                        ch,
                    });
                }
                ops.push(LayoutOp::PushSkip);
                skips.push(ch);
            }
            if l + 1 < self.levels() {
                ops.push(LayoutOp::Downsample {
                    name: format!("down.{l}.downsample"),
                    ch,
                });
            }
        }
        ops.push(LayoutOp::Res {
            name: "mid.res".into(),
            cin: ch,
            cout: ch,
            concat_skip: false,
        });
        for l in (0..self.levels()).rev() {
            let out = self.channels_at(l);
            for j in 0..self.res_blocks {
                let skip = skips.pop().expect("one skip per down block");
                ops.push(LayoutOp::Res {
                    name: format!("up.{l}.{j}.res"),
                    cin: ch + skip,
                    cout: out,
                    concat_skip: true,
                });
                ch = out;
                if self.has_attention(l) {
                    ops.push(LayoutOp::Attention {
                        prefix: format!("up.{l}.{j}"),
                        ch,
                    });
                }
            }
            if l > 0 {
                ops.push(LayoutOp::Upsample {
                    name: format!("up.{l}.upsample"),
                    ch,
                });
            }
        }
        ops
    }
}

enum LayoutOp {
    Res {
        name: String,
        cin: usize,
        cout: usize,
        concat_skip: bool,
    },
    Attention {
        prefix: String,
        ch: usize,
    },
    PushSkip,
    Downsample {
        name: String,
        ch: usize,
    },
    Upsample {
        name: String,
        ch: usize,
    },
}

/// Conditioning for one segment: encoded low-resolution frames, optional
/// semantic tokens and the diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub lr_latents: LatentSequence,
    pub semantic: Option<SemanticEmbedding>,
    pub timestep: usize,
}

/// Channel-wise concatenation `[z_t, lr]`, shape (L, 2 C, h, w).
pub fn condition_on_lr(z_t: &LatentSequence, lr: &LatentSequence) -> Result<Tensor> {
    let (a, b) = (z_t.shape(), lr.shape());
    if a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
        return Err(shape_err!("noisy latents {:?} vs LR latents {:?}", a, b));
    }
    Tensor::concat(&[z_t.data(), lr.data()], 1)
}

/// Sinusoidal embedding of each timestep, shape (N, dim).
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t)
            .collect();
        out.extend(freqs.iter().map(|f| f.sin()));
        out.extend(freqs.iter().map(|f| f.cos()));
    }
    Tensor::from_vec(&[timesteps.len(), dim], out).expect("embedding length")
}

/// Which mechanism a parameter belongs to, from its hierarchical name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Semantic,
    Temporal,
    Tsam,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        for seg in name.split('.') {
            match seg {
                "semantic" => return ParamGroup::Semantic,
                "temporal" => return ParamGroup::Temporal,
                "tsam" => return ParamGroup::Tsam,
                _ => {}
            }
        }
        ParamGroup::Backbone
    }
}

/// Parameters introduced in the second training stage.
pub fn is_stage2_param(name: &str) -> bool {
    matches!(ParamGroup::of(name), ParamGroup::Temporal | ParamGroup::Tsam)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNetwork {
    cfg: DenoiserConfig,
    params: ParamStore,
}

pub fn build_denoiser(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserNetwork> {
    DenoiserNetwork::build(cfg, seed)
}

impl DenoiserNetwork {
    /// Every block draws from its own stream derived from `(seed, block
    /// name)`, so toggling a mechanism never changes the others' weights.
    pub fn build(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let ted = cfg.timestep_embed_dim;
        {
            let mut rng = derive_rng(seed, "time_embed");
            p.insert("time_embed.fc1.weight", glorot_normal(&[ted, ted], ted, ted, &mut rng));
            p.insert("time_embed.fc1.bias", Tensor::zeros(&[ted]));
            p.insert("time_embed.fc2.weight", glorot_normal(&[ted, ted], ted, ted, &mut rng));
            p.insert("time_embed.fc2.bias", Tensor::zeros(&[ted]));
        }
        let in_ch = 2 * cfg.latent_channels;
        conv_params(&mut p, "conv_in", in_ch, cfg.base_channels, 3, false, seed);

        for op in cfg.layout() {
            match op {
                LayoutOp::Res { name, cin, cout, .. } => res_params(&mut p, &name, cin, cout, ted, seed),
                LayoutOp::Attention { prefix, ch } => attention_stack_params(&mut p, cfg, &prefix, ch, seed)?,
                LayoutOp::Downsample { name, ch } | LayoutOp::Upsample { name, ch } => {
                    conv_params(&mut p, &name, ch, ch, 3, false, seed)
                }
                LayoutOp::PushSkip => {}
            }
        }
        let ch = cfg.base_channels * cfg.level_multipliers[0];
        norm_params(&mut p, "out.norm", ch);
        conv_params(&mut p, "out.conv", ch, cfg.latent_channels, 3, true, seed);
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
        })
    }

    pub fn from_parts(cfg: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::build(&cfg, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(shape_err!(
                        "parameter `{name}` is {:?}, config expects {:?}",
                        v.shape(),
                        t.shape()
                    ))
                }
                None => return Err(invalid!("checkpoint lacks parameter `{name}`")),
            }
        }
        if let Some((extra, _)) = params.iter().find(|(k, _)| !reference.params.contains(k)) {
            return Err(invalid!("unexpected parameter `{extra}` for this config"));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.params.count_where(|n| ParamGroup::of(n) == group)
    }

    /// Same weights with mechanisms switched off; their parameters are dropped.
    pub fn with_toggles(&self, semantic: bool, temporal: bool, tsam: bool) -> Result<Self> {
        let cfg = DenoiserConfig {
            semantic_enabled: self.cfg.semantic_enabled && semantic,
            temporal_enabled: self.cfg.temporal_enabled && temporal,
            tsam_enabled: self.cfg.tsam_enabled && tsam,
            ..self.cfg.clone()
        };
        let mut params = ParamStore::new();
        for (k, v) in self.params.iter() {
            let keep = match ParamGroup::of(k) {
                ParamGroup::Backbone => true,
                ParamGroup::Semantic => cfg.semantic_enabled,
                ParamGroup::Temporal => cfg.temporal_enabled,
                ParamGroup::Tsam => cfg.tsam_enabled,
            };
            if keep {
                params.insert(k.clone(), v.clone());
            }
        }
        Self::from_parts(cfg, params)
    }

    /// Expands a stage-1 network into `target` (same config apart from the
    /// temporal switches): stage-1 weights are copied, new temporal modules
    /// are freshly initialized.
    pub fn extend_to(&self, target: &DenoiserConfig, seed: u64) -> Result<Self> {
        if self.cfg.temporal_enabled || self.cfg.tsam_enabled {
            return Err(invalid!("only a network without temporal modules can be extended"));
        }
        if target.spatial_only() != self.cfg {
            return Err(Error::Config(
                "target config differs from the stage-1 network beyond the temporal switches".into(),
            ));
        }
        let mut full = Self::build(target, seed)?;
        let copied = full.params.load_matching(&self.params)?;
        if copied != self.params.len() {
            return Err(invalid!("stage-1 parameters do not fit the temporal model"));
        }
        Ok(full)
    }

    /// Noise prediction for a batch of `B` segments of `frames` frames each,
    /// laid out frame-major as (B * frames, C, h, w). `timesteps` holds one
    /// entry per frame.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        z_t: Var,
        lr: Var,
        semantic: Option<Var>,
        timesteps: &[usize],
        frames: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 || zs[1] != cfg.latent_channels || g.shape(lr) != zs.as_slice() {
            return Err(shape_err!(
                "latents {:?} / LR {:?} for {} latent channels",
                zs,
                g.shape(lr),
                cfg.latent_channels
            ));
        }
        if frames == 0 || zs[0] % frames != 0 || timesteps.len() != zs[0] {
            return Err(shape_err!(
                "{} frames with segment length {} and {} timesteps",
                zs[0],
                frames,
                timesteps.len()
            ));
        }
        let div = cfg.spatial_divisor();
        if zs[2] % div != 0 || zs[3] % div != 0 {
            return Err(shape_err!("latent {}x{} not divisible by {}", zs[2], zs[3], div));
        }
        if semantic.is_some() != cfg.semantic_enabled {
            return Err(invalid!(
                "semantic tokens {} but semantic_enabled = {}",
                if semantic.is_some() { "given" } else { "missing" },
                cfg.semantic_enabled
            ));
        }
        if let Some(s) = semantic {
            let ss = g.shape(s);
            if ss.len() != 3 || ss[0] != zs[0] || ss[2] != cfg.semantic_width {
                return Err(shape_err!("semantic tokens {:?} for latents {:?}", ss, zs));
            }
        }

        let emb = g.constant(timestep_embedding(timesteps, cfg.timestep_embed_dim));
        let temb = {
            let (w1, b1) = (g.p("time_embed.fc1.weight")?, g.p("time_embed.fc1.bias")?);
            let (w2, b2) = (g.p("time_embed.fc2.weight")?, g.p("time_embed.fc2.bias")?);
            let h = g.linear(emb, w1, Some(b1))?;
            let h = g.silu(h);
            let h = g.linear(h, w2, Some(b2))?;
            g.silu(h)
        };

        let x = g.concat(&[z_t, lr], 1)?;
        let mut h = conv(g, x, "conv_in", 1, 1)?;
        let mut skips = vec![];
        for op in cfg.layout() {
            match op {
                LayoutOp::Res { name, concat_skip, .. } => {
                    if concat_skip {
                        let s = skips.pop().ok_or_else(|| invalid!("skip stack underflow"))?;
                        h = g.concat(&[h, s], 1)?;
                    }
                    h = res_block(g, h, temb, &name, cfg.norm_groups)?;
                }
                LayoutOp::Attention { prefix, .. } => {
                    h = self.attention_stack(g, h, semantic, frames, &prefix)?;
                }
                LayoutOp::PushSkip => skips.push(h),
                LayoutOp::Downsample { name, .. } => h = conv(g, h, &name, 2, 1)?,
                LayoutOp::Upsample { name, .. } => {
                    h = g.upsample_nearest(h, 2)?;
                    h = conv(g, h, &name, 1, 1)?;
                }
            }
        }
        h = group_norm(g, h, "out.norm", cfg.norm_groups)?;
        h = g.silu(h);
        let out = conv(g, h, "out.conv", 1, 1)?;
        g.ensure_finite(out, "out.conv")?;
        Ok(out)
    }

    fn attention_stack(
        &self,
        g: &mut Graph<'_>,
        mut h: Var,
        semantic: Option<Var>,
        frames: usize,
        prefix: &str,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if let Some(sem) = semantic {
            let name = format!("{prefix}.semantic");
            h = semantic_block_graph(g, h, sem, &name, cfg.heads, cfg.semantic_self_attention)?;
            g.ensure_finite(h, &name)?;
        }
        if cfg.temporal_enabled {
            let name = format!("{prefix}.temporal");
            h = temporal_branch_graph(g, h, frames, &name, cfg.heads)?;
            g.ensure_finite(h, &name)?;
        }
        if cfg.tsam_enabled {
            let name = format!("{prefix}.tsam");
            h = tsam_graph(g, h, frames, &name, cfg.heads, cfg.tsam_mlp_depth)?;
            g.ensure_finite(h, &name)?;
        }
        Ok(h)
    }

    /// Batched inference: `z_t`, `lr` are (B * frames, C, h, w).
    pub fn predict_batch(
        &self,
        z_t: &Tensor,
        lr: &Tensor,
        semantic: Option<&Tensor>,
        timesteps: &[usize],
        frames: usize,
    ) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, Trainable::Nothing);
        let z = g.constant(z_t.clone());
        let l = g.constant(lr.clone());
        let s = semantic.map(|s| g.constant(s.clone()));
        let out = self.forward_graph(&mut g, z, l, s, timesteps, frames)?;
        Ok(g.value(out).clone())
    }

    pub fn predict_noise(&self, z_t: &LatentSequence, cond: &ConditioningBundle) -> Result<LatentSequence> {
        let frames = z_t.frames();
        if cond.lr_latents.shape() != z_t.shape() {
            return Err(shape_err!(
                "LR latents {:?} vs noisy latents {:?}",
                cond.lr_latents.shape(),
                z_t.shape()
            ));
        }
        if let Some(s) = &cond.semantic {
            if s.frames() != frames {
                return Err(shape_err!("{} semantic frames for {} latent frames", s.frames(), frames));
            }
        }
        let ts = vec![cond.timestep; frames];
        let out = self.predict_batch(
            z_t.data(),
            cond.lr_latents.data(),
            cond.semantic.as_ref().map(|s| s.tokens()),
            &ts,
            frames,
        )?;
        LatentSequence::new(out)
    }
}

pub(crate) fn conv_params(
    p: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    zero: bool,
    seed: u64,
) {
    let mut rng = derive_rng(seed, prefix);
    let w = if zero {
        Tensor::zeros(&[cout, cin, k, k])
    } else {
        he_normal(&[cout, cin, k, k], cin * k * k, &mut rng)
    };
    p.insert(format!("{prefix}.weight"), w);
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
}

fn norm_params(p: &mut ParamStore, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.gain"), Tensor::full(&[c], 1.0));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
}

fn res_params(p: &mut ParamStore, prefix: &str, cin: usize, cout: usize, ted: usize, seed: u64) {
    norm_params(p, &format!("{prefix}.norm1"), cin);
    conv_params(p, &format!("{prefix}.conv1"), cin, cout, 3, false, seed);
    let mut rng = derive_rng(seed, &format!("{prefix}.temb"));
    p.insert(format!("{prefix}.temb.weight"), glorot_normal(&[ted, cout], ted, cout, &mut rng));
    p.insert(format!("{prefix}.temb.bias"), Tensor::zeros(&[cout]));
    norm_params(p, &format!("{prefix}.norm2"), cout);
    // Zero second conv: each residual block starts as its skip path.
    conv_params(p, &format!("{prefix}.conv2"), cout, cout, 3, true, seed);
    if cin != cout {
        conv_params(p, &format!("{prefix}.skip"), cin, cout, 1, false, seed);
    }
}

fn attention_stack_params(
    p: &mut ParamStore,
    cfg: &DenoiserConfig,
    prefix: &str,
    ch: usize,
    seed: u64,
) -> Result<()> {
    if cfg.semantic_enabled {
        let name = format!("{prefix}.semantic");
        let mut rng = derive_rng(seed, &name);
        init_semantic_block(
            p,
            &name,
            ch,
            cfg.semantic_width,
            cfg.heads,
            cfg.semantic_self_attention,
            cfg.ffn_expansion,
            &mut rng,
        )?;
    }
    if cfg.temporal_enabled {
        let name = format!("{prefix}.temporal");
        let mut rng = derive_rng(seed, &name);
        init_temporal_branch(p, &name, ch, cfg.max_frames, cfg.heads, cfg.ffn_expansion, &mut rng)?;
    }
    if cfg.tsam_enabled {
        let name = format!("{prefix}.tsam");
        let mut rng = derive_rng(seed, &name);
        let shape = TsamShape {
            channels: ch,
            max_frames: cfg.max_frames,
            heads: cfg.heads,
            ffn_expansion: cfg.ffn_expansion,
            mlp_depth: cfg.tsam_mlp_depth,
        };
        init_tsam(p, &name, &shape, &mut rng)?;
    }
    Ok(())
}

fn conv(g: &mut Graph<'_>, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = g.p(&format!("{prefix}.weight"))?;
    let b = g.p(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn group_norm(g: &mut Graph<'_>, x: Var, prefix: &str, groups: usize) -> Result<Var> {
    let gain = g.p(&format!("{prefix}.gain"))?;
    let bias = g.p(&format!("{prefix}.bias"))?;
    g.group_norm(x, groups, gain, bias, GN_EPS)
}

fn res_block(g: &mut Graph<'_>, x: Var, temb: Var, prefix: &str, groups: usize) -> Result<Var> {
    let h = group_norm(g, x, &format!("{prefix}.norm1"), groups)?;
    let h = g.silu(h);
    let h = conv(g, h, &format!("{prefix}.conv1"), 1, 1)?;
    let (tw, tb) = (g.p(&format!("{prefix}.temb.weight"))?, g.p(&format!("{prefix}.temb.bias"))?);
    let t = g.linear(temb, tw, Some(tb))?;
    let h = g.add_channel(h, t)?;
    let h = group_norm(g, h, &format!("{prefix}.norm2"), groups)?;
    let h = g.silu(h);
    let h = conv(g, h, &format!("{prefix}.conv2"), 1, 1)?;
    let skip_name = format!("{prefix}.skip.weight");
    let skip = if g.has_param(&skip_name) {
        conv(g, x, &format!("{prefix}.skip"), 1, 0)?
    } else {
        x
    };
    let out = g.add(skip, h)?;
    g.ensure_finite(out, prefix)?;
    Ok(out)
}
