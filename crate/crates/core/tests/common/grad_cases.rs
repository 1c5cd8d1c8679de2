//! Finite-difference cases shared by the gradient tests and the acceptance suite.

use latent_vsr::attention::{attend, feed_forward_graph, AttentionParams, AttnVars, FeedForwardParams, FfnVars};
use latent_vsr::denoiser::{DenoiserConfig, DenoiserNetwork};
use latent_vsr::nn::ParamStore;
use latent_vsr::seam::SemanticBlockParams;
use latent_vsr::tsam::{BranchParams, FuseParams, TsamParams, TsamShape};

use super::{grad_check, jitter, probe_loss, randn, rng, GradReport};

pub const COORDS: usize = 120;
pub const BLOCK_TOL: f64 = 1e-4;
pub const UNET_TOL: f64 = 1e-3;

pub fn attention() -> GradReport {
    let p = AttentionParams::init(6, 5, 6, 2, false, &mut rng(1)).unwrap();
    let mut store = ParamStore::new();
    p.write_to(&mut store, "attn");
    let (q, kv) = (randn(&[2, 3, 6], 2), randn(&[2, 4, 5], 3));
    grad_check(&store, COORDS, 4, |g| {
        let w = AttnVars::bind(g, "attn")?;
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let (y, _) = attend(g, qv, kvv, &w, 2)?;
        probe_loss(g, y, 5)
    })
    .unwrap()
}

pub fn feed_forward() -> GradReport {
    let p = FeedForwardParams::init(4, 4, false, &mut rng(6));
    let mut store = ParamStore::new();
    p.write_to(&mut store, "ff");
    let store = jitter(&store, 0.1, 7);
    let x = randn(&[2, 3, 4], 8);
    grad_check(&store, COORDS, 9, |g| {
        let w = FfnVars::bind(g, "ff")?;
        let xv = g.constant(x.clone());
        let y = feed_forward_graph(g, xv, &w)?;
        probe_loss(g, y, 10)
    })
    .unwrap()
}

pub fn semantic_block() -> GradReport {
    let p = SemanticBlockParams::init(4, 3, 1, true, &mut rng(11)).unwrap();
    let store = jitter(&p.store, 0.3, 12);
    let (x, sem) = (randn(&[2, 4, 2, 2], 13), randn(&[2, 3, 3], 14));
    grad_check(&store, COORDS, 15, |g| {
        let (xv, sv) = (g.constant(x.clone()), g.constant(sem.clone()));
        let y = p.forward_graph(g, xv, sv)?;
        probe_loss(g, y, 16)
    })
    .unwrap()
}

fn tsam_shape() -> TsamShape {
    TsamShape {
        channels: 4,
        max_frames: 2,
        heads: 1,
        ffn_expansion: 4,
        mlp_depth: 1,
    }
}

pub fn tsam_block() -> GradReport {
    let p = TsamParams::init(&tsam_shape(), &mut rng(17)).unwrap();
    let store = jitter(&p.store, 0.3, 18);
    let x = randn(&[2, 4, 2, 2], 19);
    grad_check(&store, COORDS, 20, |g| {
        let xv = g.constant(x.clone());
        let y = p.forward_graph(g, xv, 2)?;
        probe_loss(g, y, 21)
    })
    .unwrap()
}

pub fn spatial_branch() -> GradReport {
    let sp = BranchParams::init_spatial(4, 1, &mut rng(22)).unwrap();
    let store = jitter(&sp.store, 0.3, 23);
    let x = randn(&[2, 4, 2, 2], 24);
    grad_check(&store, COORDS, 25, |g| {
        let xv = g.constant(x.clone());
        let y = latent_vsr::tsam::spatial_branch_graph(g, xv, BranchParams::PREFIX, 1)?;
        probe_loss(g, y, 26)
    })
    .unwrap()
}

pub fn temporal_branch() -> GradReport {
    let tp = BranchParams::init_temporal(4, 3, 1, &mut rng(27)).unwrap();
    let store = jitter(&tp.store, 0.3, 28);
    let x = randn(&[3, 4, 2, 2], 29);
    grad_check(&store, COORDS, 30, |g| {
        let xv = g.constant(x.clone());
        let y = latent_vsr::tsam::temporal_branch_graph(g, xv, 3, BranchParams::PREFIX, 1)?;
        probe_loss(g, y, 31)
    })
    .unwrap()
}

pub fn fuse() -> GradReport {
    let fp = FuseParams::init(12, 2, &mut rng(32)).unwrap();
    let store = jitter(&fp.store, 0.3, 33);
    let (s, t, res) = (randn(&[2, 6, 2, 2], 34), randn(&[2, 6, 2, 2], 35), randn(&[2, 12, 2, 2], 36));
    grad_check(&store, COORDS, 37, |g| {
        let (sv, tv, rv) = (g.constant(s.clone()), g.constant(t.clone()), g.constant(res.clone()));
        let y = latent_vsr::tsam::fuse_graph(g, sv, tv, rv, FuseParams::PREFIX, 2)?;
        probe_loss(g, y, 38)
    })
    .unwrap()
}

pub fn micro_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        base_channels: 8,
        level_multipliers: vec![1, 2],
        timestep_embed_dim: 8,
        semantic_width: 4,
        norm_groups: 2,
        max_frames: 2,
        ..DenoiserConfig::default()
    }
}

pub fn micro_unet() -> GradReport {
    let cfg = micro_config();
    let net = DenoiserNetwork::build(&cfg, 40).unwrap();
    let store = jitter(net.params(), 0.2, 41);
    let (z, lr, sem) = (randn(&[2, 2, 4, 4], 42), randn(&[2, 2, 4, 4], 43), randn(&[2, 3, 4], 44));
    grad_check(&store, 200, 45, |g| {
        let (zv, lv, sv) = (g.constant(z.clone()), g.constant(lr.clone()), g.constant(sem.clone()));
        let y = net.forward_graph(g, zv, lv, Some(sv), &[10, 500], 2)?;
        probe_loss(g, y, 46)
    })
    .unwrap()
}

/// Every case with its name and tolerance.
pub fn all() -> Vec<(&'static str, fn() -> GradReport, f64)> {
    vec![
        ("attention", attention as fn() -> GradReport, BLOCK_TOL),
        ("feed-forward", feed_forward, BLOCK_TOL),
        ("semantic block", semantic_block, BLOCK_TOL),
        ("tsam block", tsam_block, BLOCK_TOL),
        ("spatial branch", spatial_branch, BLOCK_TOL),
        ("temporal branch", temporal_branch, BLOCK_TOL),
        ("fuse", fuse, BLOCK_TOL),
        ("micro U-Net", micro_unet, UNET_TOL),
    ]
}
