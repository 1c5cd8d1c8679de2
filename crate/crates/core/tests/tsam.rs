//! Channel-split spatio-temporal block against loop oracles.

mod common;

use common::{
    add, attention, ffn_sublayer, frame_tokens, jitter, layer_norm, max_abs_diff, position_tokens,
    randn, rng, Tokens,
};
use latent_vsr::nn::ParamStore;
use latent_vsr::tsam::{
    concat_channels, fuse, spatial_branch, split_channels, temporal_branch, tsam_block, BranchParams,
    FuseParams, TsamParams, TsamShape,
};
use latent_vsr::video::FeatureMap;
use latent_vsr::Tensor;
use proptest::prelude::*;

fn fm(shape: &[usize], seed: u64) -> FeatureMap {
    FeatureMap::new(randn(shape, seed), 0).unwrap()
}

fn shape(channels: usize, max_frames: usize) -> TsamShape {
    TsamShape {
        channels,
        max_frames,
        heads: 1,
        ffn_expansion: 4,
        mlp_depth: 1,
    }
}

fn jittered(store: &ParamStore, seed: u64) -> ParamStore {
    jitter(store, 0.3, seed)
}

/// Writes per-token results back into an (L, C, H, W) layout.
fn scatter(shape: &[usize], tok: impl Fn(usize, usize) -> Vec<f64>) -> Vec<f64> {
    let (l, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; l * c * h * w];
    for f in 0..l {
        for p in 0..h * w {
            let v = tok(f, p);
            for ch in 0..c {
                out[((f * c + ch) * h + p / w) * w + p % w] = v[ch];
            }
        }
    }
    out
}

fn norm_attn(x: &Tokens, s: &ParamStore, prefix: &str, pos: Option<&Tensor>) -> Tokens {
    let g = |n: &str| s.get(&format!("{prefix}.{n}")).unwrap();
    let normed: Tokens = x
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let n = layer_norm(t, g("attn.norm.gain"), g("attn.norm.bias"));
            match pos {
                Some(p) => add(&n, &p.data()[i * t.len()..(i + 1) * t.len()]),
                None => n,
            }
        })
        .collect();
    let a = attention(&normed, &normed, s, &format!("{prefix}.attn.attn"));
    x.iter()
        .zip(&a)
        .map(|(t, a)| ffn_sublayer(&add(t, a), s, &format!("{prefix}.ff")))
        .collect()
}

fn spatial_oracle(x: &Tensor, s: &ParamStore) -> Vec<f64> {
    let per_frame: Vec<Tokens> = (0..x.dim(0))
        .map(|f| norm_attn(&frame_tokens(x, f), s, "branch", None))
        .collect();
    scatter(x.shape(), |f, p| per_frame[f][p].clone())
}

fn temporal_oracle(x: &Tensor, s: &ParamStore) -> Vec<f64> {
    let pos = s.get("branch.pos").unwrap();
    let per_pos: Vec<Tokens> = (0..x.dim(2) * x.dim(3))
        .map(|p| norm_attn(&position_tokens(x, p), s, "branch", Some(pos)))
        .collect();
    scatter(x.shape(), |f, p| per_pos[p][f].clone())
}

#[test]
fn fresh_blocks_are_identity() {
    let f = fm(&[3, 4, 2, 3], 1);
    let (fs, ft) = split_channels(&f).unwrap();
    let sp = BranchParams::init_spatial(2, 1, &mut rng(2)).unwrap();
    assert_eq!(spatial_branch(&fs, &sp).unwrap().data(), fs.data());
    let tp = BranchParams::init_temporal(2, 4, 1, &mut rng(3)).unwrap();
    assert_eq!(temporal_branch(&ft, &tp).unwrap().data(), ft.data());
    let fp = FuseParams::init(4, 2, &mut rng(4)).unwrap();
    assert_eq!(fuse(&fm(&[3, 2, 2, 3], 5), &fm(&[3, 2, 2, 3], 6), &f, &fp).unwrap().data(), f.data());
    let p = TsamParams::init(&shape(4, 4), &mut rng(7)).unwrap();
    assert_eq!(tsam_block(&f, &p).unwrap().data(), f.data());
}

#[test]
fn split_matches_index_oracle() {
    let f = fm(&[2, 4, 3, 2], 8);
    let (a, b) = split_channels(&f).unwrap();
    for fr in 0..2 {
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..2 {
                    assert_eq!(common::at(a.data(), &[fr, c, y, x]), common::at(f.data(), &[fr, c, y, x]));
                    assert_eq!(common::at(b.data(), &[fr, c, y, x]), common::at(f.data(), &[fr, c + 2, y, x]));
                }
            }
        }
    }
}

#[test]
fn spatial_branch_matches_oracle_and_isolates_frames() {
    let p = BranchParams::init_spatial(3, 1, &mut rng(9)).unwrap();
    let p = BranchParams { store: jittered(&p.store, 10), ..p };
    let x = fm(&[2, 3, 2, 2], 11);
    let y = spatial_branch(&x, &p).unwrap();
    assert!(max_abs_diff(y.data().data(), &spatial_oracle(x.data(), &p.store)) < 1e-12);

    let mut x2 = x.data().clone();
    x2.data_mut()[12..].iter_mut().for_each(|v| *v += 1.0);
    let y2 = spatial_branch(&FeatureMap::new(x2, 0).unwrap(), &p).unwrap();
    assert_eq!(&y.data().data()[..12], &y2.data().data()[..12]);
    assert_ne!(&y.data().data()[12..], &y2.data().data()[12..]);
}

#[test]
fn one_pixel_spatial_attention_is_value_path() {
    let p = BranchParams::init_spatial(3, 1, &mut rng(12)).unwrap();
    let s = jittered(&p.store, 13);
    let p = BranchParams { store: s.clone(), ..p };
    let x = fm(&[2, 3, 1, 1], 14);
    let y = spatial_branch(&x, &p).unwrap();
    let g = |n: &str| s.get(&format!("branch.{n}")).unwrap();
    for f in 0..2 {
        let t = &x.data().data()[f * 3..f * 3 + 3];
        let n = layer_norm(t, g("attn.norm.gain"), g("attn.norm.bias"));
        let v = common::row_mul(&common::row_mul(&n, g("attn.attn.w_v")), g("attn.attn.w_out"));
        let want = ffn_sublayer(&add(t, &v), &s, "branch.ff");
        assert!(max_abs_diff(&y.data().data()[f * 3..f * 3 + 3], &want) < 1e-12);
    }
}

#[test]
fn temporal_branch_matches_oracle_and_isolates_positions() {
    let p = BranchParams::init_temporal(2, 3, 1, &mut rng(15)).unwrap();
    let p = BranchParams { store: jittered(&p.store, 16), ..p };
    let x = fm(&[3, 2, 2, 2], 17);
    let y = temporal_branch(&x, &p).unwrap();
    assert!(max_abs_diff(y.data().data(), &temporal_oracle(x.data(), &p.store)) < 1e-6);

    // perturb position (0, 0) in every frame and channel
    let mut x2 = x.data().clone();
    for i in (0..x2.len()).step_by(4) {
        x2.data_mut()[i] += 1.0;
    }
    let y2 = temporal_branch(&FeatureMap::new(x2, 0).unwrap(), &p).unwrap();
    for i in 0..y.data().len() {
        if i % 4 == 3 {
            assert_eq!(y.data().data()[i], y2.data().data()[i]);
        }
    }
}

#[test]
fn single_frame_temporal_attention_is_value_path() {
    let p = BranchParams::init_temporal(2, 3, 1, &mut rng(18)).unwrap();
    let p = BranchParams { store: jittered(&p.store, 19), ..p };
    let x = fm(&[1, 2, 2, 2], 20);
    let y = temporal_branch(&x, &p).unwrap();
    assert!(max_abs_diff(y.data().data(), &temporal_oracle(x.data(), &p.store)) < 1e-12);
}

#[test]
fn fuse_matches_matrix_oracle() {
    let p = FuseParams::init(4, 1, &mut rng(21)).unwrap();
    let p = FuseParams { store: jittered(&p.store, 22), ..p };
    let (s, t, r) = (fm(&[2, 2, 2, 3], 23), fm(&[2, 2, 2, 3], 24), fm(&[2, 4, 2, 3], 25));
    let y = fuse(&s, &t, &r, &p).unwrap();
    let w = p.store.get("fuse.mlp.0.weight").unwrap();
    let b = p.store.get("fuse.mlp.0.bias").unwrap();
    let cat = concat_channels(&s, &t).unwrap();
    let want = scatter(r.shape(), |f, pos| {
        let x = &frame_tokens(cat.data(), f)[pos];
        let res = &frame_tokens(r.data(), f)[pos];
        (0..4)
            .map(|o| b.data()[o] + (0..4).map(|i| common::at(w, &[o, i, 0, 0]) * x[i]).sum::<f64>() + res[o])
            .collect()
    });
    assert!(max_abs_diff(y.data().data(), &want) < 1e-12);
}

#[test]
fn block_equals_manual_chain() {
    let p = TsamParams::init(&shape(4, 3), &mut rng(26)).unwrap();
    let p = TsamParams { store: jittered(&p.store, 27), ..p };
    let x = fm(&[3, 4, 2, 2], 28);
    let (fs, ft) = split_channels(&x).unwrap();
    let a = spatial_branch(&fs, &p.spatial()).unwrap();
    let b = temporal_branch(&ft, &p.temporal()).unwrap();
    let want = fuse(&a, &b, &x, &p.fuse()).unwrap();
    assert_eq!(tsam_block(&x, &p).unwrap().data(), want.data());
}

#[test]
fn spatial_half_has_no_cross_frame_path() {
    let p = TsamParams::init(&shape(4, 3), &mut rng(29)).unwrap();
    let p = TsamParams { store: jittered(&p.store, 30), ..p };
    let x = fm(&[3, 4, 2, 2], 31);
    let mut x2 = x.data().clone();
    x2.data_mut()[16..32].iter_mut().for_each(|v| *v -= 0.5);
    let x2 = FeatureMap::new(x2, 0).unwrap();
    let pre = |f: &FeatureMap| spatial_branch(&split_channels(f).unwrap().0, &p.spatial()).unwrap();
    let (a, b) = (pre(&x), pre(&x2));
    assert_eq!(&a.data().data()[..8], &b.data().data()[..8]);
    assert_eq!(&a.data().data()[16..], &b.data().data()[16..]);
    // the temporal half does mix frames
    let (ya, yb) = (tsam_block(&x, &p).unwrap(), tsam_block(&x2, &p).unwrap());
    assert_ne!(&ya.data().data()[..16], &yb.data().data()[..16]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_concat_inverse(seed in 0u64..10_000, l in 1usize..4, half in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let f = fm(&[l, 2 * half, h, w], seed);
        let (a, b) = split_channels(&f).unwrap();
        let back = concat_channels(&a, &b).unwrap();
        prop_assert_eq!(back.data(), f.data());
    }

    #[test]
    fn block_preserves_shape(seed in 0u64..10_000, l in 1usize..4, half in 1usize..3, h in 1usize..4, w in 1usize..4) {
        let p = TsamParams::init(&shape(2 * half, 3), &mut rng(seed)).unwrap();
        let p = TsamParams { store: jittered(&p.store, seed + 1), ..p };
        let f = fm(&[l, 2 * half, h, w], seed + 2);
        let y = tsam_block(&f, &p).unwrap();
        prop_assert_eq!(y.shape(), f.shape());
        prop_assert!(y.data().all_finite());
    }
}
