//! Degradation pipeline: stage oracles, shape contract and per-segment parameters.

mod common;

use common::{max_abs_diff, rng};
use latent_vsr::degrade::{
    degrade_segment, degrade_segment_with_params, draw_params, gaussian_blur, scale_factor, upsample_x4,
    DegradeConfig,
};
use latent_vsr::video::VideoSegment;
use latent_vsr::Tensor;
use proptest::prelude::*;

fn video(l: usize, h: usize, w: usize, seed: u64) -> VideoSegment {
    VideoSegment::new(Tensor::uniform(&[l, 3, h, w], 0.0, 1.0, &mut rng(seed)), "v", 0).unwrap()
}

fn constant(l: usize, h: usize, w: usize, v: f64) -> VideoSegment {
    VideoSegment::new(Tensor::full(&[l, 3, h, w], v), "c", 0).unwrap()
}

#[test]
fn impulse_blur_matches_dense_convolution() {
    let (h, w, cy, cx) = (17, 17, 8, 8);
    let mut img = Tensor::zeros(&[1, 1, h, w]);
    img.data_mut()[cy * w + cx] = 1.0;
    let got = gaussian_blur(&img, 1.0).unwrap();

    // 2-D Gaussian over the 7x7 window the 3-sigma support spans
    let g = |dy: i64, dx: i64| (-((dy * dy + dx * dx) as f64) / 2.0).exp();
    let norm: f64 = (-3..=3).flat_map(|dy| (-3..=3).map(move |dx| g(dy, dx))).sum();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as i64 - cy as i64, x as i64 - cx as i64);
            let want = if dy.abs() <= 3 && dx.abs() <= 3 { g(dy, dx) / norm } else { 0.0 };
            let v = got.data()[y * w + x];
            assert!((v - want).abs() < 1e-6, "({y},{x}): {v} vs {want}");
        }
    }
}

#[test]
fn same_inputs_give_identical_output() {
    let v = video(3, 64, 64, 1);
    let cfg = DegradeConfig::default();
    assert_eq!(degrade_segment(&v, 7, &cfg).unwrap(), degrade_segment(&v, 7, &cfg).unwrap());
    assert_ne!(degrade_segment(&v, 7, &cfg).unwrap(), degrade_segment(&v, 8, &cfg).unwrap());
}

#[test]
fn downsample_only_keeps_constants() {
    for c in [0.0, 0.25, 0.8, 1.0] {
        let lq = degrade_segment(&constant(2, 32, 48, c), 3, &DegradeConfig::downsample_only()).unwrap();
        assert_eq!(lq.frames().shape(), &[2, 3, 8, 12]);
        assert!(lq.frames().data().iter().all(|v| (v - c).abs() < 1e-12), "{c}");
    }
}

#[test]
fn downsample_only_is_deterministic_across_seeds() {
    let v = video(2, 32, 32, 4);
    let cfg = DegradeConfig::downsample_only();
    assert_eq!(degrade_segment(&v, 1, &cfg).unwrap(), degrade_segment(&v, 999, &cfg).unwrap());
}

#[test]
fn four_times_smaller_and_back() {
    assert_eq!(scale_factor(), 4);
    let lq = degrade_segment(&video(2, 64, 64, 5), 6, &DegradeConfig::default()).unwrap();
    assert_eq!(lq.frames().shape(), &[2, 3, 16, 16]);
    assert_eq!(upsample_x4(&lq).unwrap().frames().shape(), &[2, 3, 64, 64]);
}

#[test]
fn indivisible_dims_rejected() {
    let cfg = DegradeConfig::default();
    assert!(degrade_segment(&video(1, 30, 32, 1), 0, &cfg).is_err());
    assert!(degrade_segment(&video(1, 32, 30, 1), 0, &cfg).is_err());
    // 16/4 = 4 is not a multiple of the 8-pixel transform block
    assert!(degrade_segment(&video(1, 16, 16, 1), 0, &cfg).is_err());
    assert!(degrade_segment(&video(1, 16, 16, 1), 0, &DegradeConfig::downsample_only()).is_ok());
}

#[test]
fn empty_ranges_rejected() {
    let v = video(1, 32, 32, 1);
    let bad = [
        DegradeConfig { blur_sigma: [1.0, 0.5], ..Default::default() },
        DegradeConfig { noise_std: [-0.1, 0.0], ..Default::default() },
        DegradeConfig { quality: [90, 80], ..Default::default() },
        DegradeConfig { quality: [0, 80], ..Default::default() },
    ];
    for cfg in bad {
        assert!(degrade_segment(&v, 0, &cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn noise_free_segment_equals_per_frame_degradation() {
    // same blur and quality on every frame: segment output equals each frame degraded alone
    let cfg = DegradeConfig {
        noise_std: [0.0, 0.0],
        ..Default::default()
    };
    let v = video(4, 32, 32, 9);
    let whole = degrade_segment(&v, 10, &cfg).unwrap();
    for i in 0..4 {
        let one = degrade_segment(&v.slice(i, 1).unwrap(), 10, &cfg).unwrap();
        assert_eq!(whole.frame(i), one.frame(0), "frame {i}");
    }
}

#[test]
fn noise_level_shared_by_all_frames() {
    let cfg = DegradeConfig {
        blur_sigma: [0.0, 0.0],
        noise_std: [0.01, 0.05],
        quantize: false,
        ..Default::default()
    };
    let (lq, params) = degrade_segment_with_params(&constant(6, 128, 128, 0.5), 11, &cfg).unwrap();
    for i in 0..6 {
        let f = lq.frame(i);
        let n = f.len() as f64;
        let std = (f.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / params.noise_std - 1.0).abs() < 0.1, "frame {i}: {std} vs {}", params.noise_std);
    }
}

#[test]
fn params_vary_across_seeds() {
    let cfg = DegradeConfig::default();
    let drawn: Vec<_> = (0..8).map(|s| draw_params(&cfg, s).unwrap()).collect();
    for p in &drawn {
        assert!((0.2..=2.0).contains(&p.blur_sigma));
        assert!((0.0..=0.05).contains(&p.noise_std));
        assert!((60..=95).contains(&p.quality.unwrap()));
    }
    let sigmas: std::collections::BTreeSet<u64> = drawn.iter().map(|p| p.blur_sigma.to_bits()).collect();
    assert!(sigmas.len() > 1);
    assert!(drawn.windows(2).any(|w| w[0].noise_std != w[1].noise_std));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_in_unit_range(seed in 0u64..10_000, l in 1usize..3) {
        let cfg = DegradeConfig {
            noise_std: [0.0, 0.3],
            ..Default::default()
        };
        let lq = degrade_segment(&video(l, 32, 32, seed), seed + 1, &cfg).unwrap();
        prop_assert_eq!(lq.frames().shape(), &[l, 3, 8, 8]);
        prop_assert!(lq.frames().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn interior_blur_keeps_mass_and_symmetry(sigma in 0.3f64..1.5) {
        // an interior impulse keeps unit total weight
        let mut img = Tensor::zeros(&[1, 1, 21, 21]);
        img.data_mut()[10 * 21 + 10] = 1.0;
        let t = gaussian_blur(&img, sigma).unwrap().data().to_vec();
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mirrored: Vec<f64> = t.iter().rev().copied().collect();
        prop_assert!(max_abs_diff(&t, &mirrored) < 1e-15);
    }
}
