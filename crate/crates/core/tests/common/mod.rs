//! Shared helpers for the integration tests.
#![allow(dead_code)]

pub mod grad_cases;

use latent_vsr::autograd::Var;
use latent_vsr::nn::{Graph, ParamStore, Trainable};
use latent_vsr::{Result, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Adds `std`-scaled Gaussian noise to every parameter so zero-initialized
/// projections do not hide gradient paths.
pub fn jitter(store: &ParamStore, std: f64, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut out = store.clone();
    for (_, t) in out.iter_mut() {
        let n = Tensor::randn(t.shape(), std, &mut r);
        t.add_assign(&n);
    }
    out
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares tape gradients of the scalar produced by `forward` with central
/// differences over `coords` randomly sampled parameter coordinates (all of
/// them when there are fewer).
pub fn grad_check<F>(store: &ParamStore, coords: usize, seed: u64, forward: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store, Trainable::Everything);
    let loss = forward(&mut g)?;
    let grads = g.param_grads(loss)?;
    let index: Vec<(String, usize)> = grads
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let picks = if index.len() <= coords {
        (0..index.len()).collect::<Vec<_>>()
    } else {
        sample(&mut rng(seed), index.len(), coords).into_vec()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::frozen(s);
        let l = forward(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut report = GradReport {
        coords: picks.len(),
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for k in picks {
        let (name, i) = &index[k];
        let mut s = store.clone();
        let base = s.get(name).unwrap().data()[*i];
        s.get_mut(name).unwrap().data_mut()[*i] = base + FD_STEP;
        let up = eval(&s)?;
        s.get_mut(name).unwrap().data_mut()[*i] = base - FD_STEP;
        let down = eval(&s)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[name].data()[*i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}");
        }
    }
    Ok(report)
}

/// `sum(y * r)` for a fixed random `r`, a scalar with dense, O(1) gradients.
pub fn probe_loss(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let r = randn(g.shape(y), seed);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

// ---- loop oracles over token lists ----

pub type Tokens = Vec<Vec<f64>>;

pub fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, &k) in idx.iter().enumerate() {
        flat = flat * t.dim(i) + k;
    }
    t.data()[flat]
}

/// `x W` for a row vector `x` and a (din, dout) matrix.
pub fn row_mul(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.dim(1))
        .map(|j| (0..w.dim(0)).map(|i| x[i] * at(w, &[i, j])).sum())
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain.data()[i] + bias.data()[i])
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Single-head attention of `q` tokens over `kv` tokens with the projections
/// stored under `prefix` (`w_q`, `w_k`, `w_v`, `w_out`).
pub fn attention(q: &Tokens, kv: &Tokens, s: &ParamStore, prefix: &str) -> Tokens {
    let w = |n: &str| s.get(&format!("{prefix}.{n}")).unwrap();
    let keys: Tokens = kv.iter().map(|k| row_mul(k, w("w_k"))).collect();
    let vals: Tokens = kv.iter().map(|k| row_mul(k, w("w_v"))).collect();
    let d = w("w_q").dim(1) as f64;
    q.iter()
        .map(|x| {
            let qp = row_mul(x, w("w_q"));
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| qp.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mixed = vec![0.0; vals[0].len()];
            for (j, v) in vals.iter().enumerate() {
                for (c, x) in v.iter().enumerate() {
                    mixed[c] += e[j] / z * x;
                }
            }
            row_mul(&mixed, w("w_out"))
        })
        .collect()
}

/// `x + FFN(Norm(x))` with parameters under `prefix` (`norm`, `ffn`).
pub fn ffn_sublayer(x: &[f64], s: &ParamStore, prefix: &str) -> Vec<f64> {
    let p = |n: &str| s.get(&format!("{prefix}.{n}")).unwrap();
    let h = layer_norm(x, p("norm.gain"), p("norm.bias"));
    let h: Vec<f64> = add(&row_mul(&h, p("ffn.fc1.weight")), p("ffn.fc1.bias").data())
        .into_iter()
        .map(gelu)
        .collect();
    add(x, &add(&row_mul(&h, p("ffn.fc2.weight")), p("ffn.fc2.bias").data()))
}

/// Tokens of frame `f` of an (L, C, H, W) tensor, one per position.
pub fn frame_tokens(x: &Tensor, f: usize) -> Tokens {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    (0..h * w)
        .map(|p| (0..c).map(|ch| at(x, &[f, ch, p / w, p % w])).collect())
        .collect()
}

/// Tokens of position `p` across all frames of an (L, C, H, W) tensor.
pub fn position_tokens(x: &Tensor, p: usize) -> Tokens {
    let (l, c, w) = (x.dim(0), x.dim(1), x.dim(3));
    (0..l)
        .map(|f| (0..c).map(|ch| at(x, &[f, ch, p / w, p % w])).collect())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs the command-line tool with a clean seed environment.
pub fn cli(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_latent-vsr"))
        .args(args)
        .env_remove(latent_vsr::config::SEED_ENV)
        .output()
        .expect("spawn latent-vsr")
}

/// Runs the tool and panics with its stderr on failure.
pub fn cli_ok(args: &[&str]) -> std::process::Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "latent-vsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// SHA-256 over every file below `root` (relative path and contents, in
/// sorted order). Loss logs are hashed without their `wall_ms` timings.
pub fn digest_tree(root: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    fn walk(dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let mut files = vec![];
    walk(root, &mut files);
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        h.update(rel.as_bytes());
        let bytes = std::fs::read(&f).unwrap();
        if rel.ends_with(".log.jsonl") {
            for line in String::from_utf8(bytes).unwrap().lines() {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                h.update(v.to_string().as_bytes());
            }
        } else {
            h.update(&bytes);
        }
    }
    hex::encode(h.finalize())
}

/// A run config small enough for end-to-end command tests.
pub const TINY_CONFIG: &str = r#"schema_version = 1

[codec]
hidden = 8
epochs = 1

[denoiser]
base_channels = 8
timestep_embed_dim = 8
semantic_width = 4
norm_groups = 2

[encoder]
width = 4

[train]
steps = 2
examples = 4
codec_crops = 8
segment_length = 2

[sample]
steps = 3
segment_length = 2

[ablate]
stage1_steps = 2
stage2_steps = 2
profile_row = 4

[ablate.synth]
videos = 3
frames = 3
height = 32
width = 32
"#;

/// Multi-head scaled dot-product attention computed with explicit loops.
pub fn attention_oracle(q: &Tensor, kv: &Tensor, p: &latent_vsr::attention::AttentionParams) -> Vec<f64> {
    let (b, nq, nk) = (q.dim(0), q.dim(1), kv.dim(1));
    let (dm, dc, da, h) = (p.d_model(), p.d_ctx(), p.d_attn(), p.heads);
    let dh = da / h;
    let proj = |x: &Tensor, w: &Tensor, bi: usize, n: usize, din: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..da)
                    .map(|j| (0..din).map(|c| at(x, &[bi, i, c]) * at(w, &[c, j])).sum())
                    .collect()
            })
            .collect()
    };
    let mut out = vec![0.0; b * nq * dm];
    for bi in 0..b {
        let qp = proj(q, &p.w_q, bi, nq, dm);
        let kp = proj(kv, &p.w_k, bi, nk, dc);
        let vp = proj(kv, &p.w_v, bi, nk, dc);
        for i in 0..nq {
            let mut mixed = vec![0.0; da];
            for hh in 0..h {
                let r = hh * dh..(hh + 1) * dh;
                let logits: Vec<f64> = (0..nk)
                    .map(|j| {
                        r.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r.clone() {
                    mixed[c] = (0..nk).map(|j| e[j] / z * vp[j][c]).sum();
                }
            }
            for o in 0..dm {
                out[(bi * nq + i) * dm + o] = (0..da).map(|c| mixed[c] * at(&p.w_out, &[c, o])).sum();
            }
        }
    }
    out
}
