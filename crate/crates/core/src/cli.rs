//! Command-line front end. Every command writes a `metadata.json` record
//! (or `<checkpoint>.run.json` for training) holding the resolved seed, the
//! full config and the flags, enough to re-run it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::ablate::{run_ablation, AblationRow};
use crate::checkpoint::StageTag;
use crate::config::{resolve_seed, RunConfig};
use crate::degrade::degrade_segment_with_params;
use crate::error::{invalid, Error, Result};
use crate::io::{list_videos, read_frames, write_frames, write_image};
use crate::metrics::{flicker_index, psnr, temporal_profile, MetricRecord};
use crate::sampler::{super_resolve, SampleConfig};
use crate::schedule::NoiseSchedule;
use crate::seam::EncoderRegistry;
use crate::synth::synth_dataset;
use crate::tensor::Tensor;
use crate::training::{run_training, RunStart, TrainingState};
use crate::video::{derive_seed, VideoSegment};

pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Parser, Serialize)]
#[command(name = "latent-vsr", version, about = "Toy latent diffusion video super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase", tag = "command")]
pub enum Command {
    /// Synthesize low-quality frames from high-quality frame directories.
    Degrade {
        /// Directory of high-quality frame directories.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for low-quality frames and the parameter manifest.
        #[arg(long)]
        out: PathBuf,
        /// Seed (overrides the config and the environment).
        #[arg(long)]
        seed: Option<u64>,
        /// Run config TOML (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the denoiser (stage 1 from scratch, stage 2 from a stage-1 checkpoint).
    Train {
        /// Training stage, 1 or 2.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Run config TOML (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of high-quality frame directories.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss log and run record are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from (required for stage 2).
        #[arg(long)]
        resume_from: Option<PathBuf>,
        /// Seed (overrides the config and the environment).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Super-resolve low-quality frame directories by 4x.
    Sr {
        /// Directory of low-quality frame directories.
        #[arg(long = "in")]
        input: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for the upscaled frames.
        #[arg(long)]
        out: PathBuf,
        /// Reverse diffusion steps (config value when omitted).
        #[arg(long)]
        steps: Option<usize>,
        /// Seed (overrides the config and the environment).
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the semantic blocks.
        #[arg(long)]
        no_seam: bool,
        /// Drop the channel-split spatio-temporal blocks.
        #[arg(long)]
        no_tsam: bool,
    },
    /// PSNR, flicker and temporal profiles of predicted frames.
    Eval {
        /// Directory of predicted frame directories.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of matching reference frame directories.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Image row sampled for the temporal profile.
        #[arg(long)]
        profile_row: usize,
        /// Output directory for the report and profile images.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four mechanism configurations.
    Ablate {
        /// Run config TOML (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the report.
        #[arg(long)]
        out: PathBuf,
        /// Seed (overrides the config and the environment).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write procedural videos as frame directories.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Run config TOML (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed (overrides the config and the environment).
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool_version: &'static str,
    args: &'a Command,
    seed: Option<u64>,
    config: Option<&'a RunConfig>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_metadata(path: &Path, args: &Command, seed: Option<u64>, config: Option<&RunConfig>) -> Result<()> {
    write_json(
        path,
        &Metadata {
            tool_version: env!("CARGO_PKG_VERSION"),
            args,
            seed,
            config,
        },
    )
}

/// Output directory for a video: `out` itself when the input root held the
/// frames directly, otherwise `out/<name>`.
fn mirror(root: &Path, video_dir: &Path, out: &Path, name: &str) -> PathBuf {
    if video_dir == root {
        out.to_path_buf()
    } else {
        out.join(name)
    }
}

fn read_videos(root: &Path) -> Result<Vec<(String, PathBuf, VideoSegment)>> {
    list_videos(root)?
        .into_iter()
        .map(|(name, dir)| {
            let mut v = read_frames(&dir)?;
            v.source_id = name.clone();
            Ok((name, dir, v))
        })
        .collect()
}

/// One line of the degradation manifest.
#[derive(Serialize)]
struct ManifestEntry {
    video: String,
    segment: usize,
    frame_offset: usize,
    frames: usize,
    blur_sigma: f64,
    noise_std: f64,
    quality: Option<u8>,
}

/// Side-by-side (H, W1 + W2, 3) image.
fn hconcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dim(0) != b.dim(0) {
        return Err(invalid!("profiles have different frame counts"));
    }
    Tensor::concat(&[a, b], 1)
}

pub fn run(cli: &Cli) -> Result<()> {
    let args = &cli.command;
    match args {
        Command::Degrade {
            input,
            out,
            seed,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = resolve_seed(*seed, cfg.seed)?;
            let len = cfg.train.segment_length;
            let mut manifest = vec![];
            let mut outputs = vec![];
            for (name, dir, video) in read_videos(input)? {
                let mut parts = vec![];
                for (i, start) in (0..video.len()).step_by(len).enumerate() {
                    let seg = video.slice(start, len.min(video.len() - start))?;
                    let s = derive_seed(seed, &format!("degrade.{name}.{i}"));
                    let (lq, params) = degrade_segment_with_params(&seg, s, &cfg.degrade).map_err(|e| match e {
                        Error::Shape(m) => Error::Shape(format!("video `{name}`: {m}")),
                        other => other,
                    })?;
                    parts.push(lq);
                    manifest.push(ManifestEntry {
                        video: name.clone(),
                        segment: i,
                        frame_offset: start,
                        frames: seg.len(),
                        blur_sigma: params.blur_sigma,
                        noise_std: params.noise_std,
                        quality: params.quality,
                    });
                }
                outputs.push((mirror(input, &dir, out, &name), VideoSegment::concat(&parts)?));
            }
            for (dir, v) in &outputs {
                write_frames(dir, v)?;
            }
            write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
            write_metadata(&out.join(METADATA_FILE), args, Some(seed), Some(&cfg))
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            resume_from,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = resolve_seed(*seed, cfg.seed)?;
            let stage = StageTag::from_number(*stage)?;
            let start = match resume_from {
                Some(p) => RunStart::From(TrainingState::load(p)?),
                None if stage == StageTag::Stage2 => {
                    return Err(Error::Contract("stage 2 needs --resume-from with a stage-1 checkpoint".into()))
                }
                None => RunStart::Fresh,
            };
            let videos: Vec<_> = read_videos(data)?.into_iter().map(|(_, _, v)| v).collect();
            let report = run_training(&cfg, stage, &videos, start, seed, Some(out))?;
            if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
                eprintln!(
                    "stage {}: steps {}..{} loss {:.4} -> {:.4}",
                    stage.number(),
                    first.step,
                    last.step,
                    first.loss,
                    last.loss
                );
            }
            let mut meta = out.as_os_str().to_owned();
            meta.push(".run.json");
            write_metadata(Path::new(&meta), args, Some(seed), Some(&cfg))
        }
        Command::Sr {
            input,
            ckpt,
            out,
            steps,
            seed,
            no_seam,
            no_tsam,
        } => {
            let state = TrainingState::load(ckpt)?;
            let cfg = &state.run;
            let seed = resolve_seed(*seed, cfg.seed)?;
            let net = state.net.with_toggles(!no_seam, true, !no_tsam)?;
            let registry = EncoderRegistry::default();
            let encoder = registry.create(&cfg.encoder.id, &cfg.encoder.options())?;
            let sample = SampleConfig {
                steps: steps.unwrap_or(cfg.sample.steps),
                segment_length: cfg.sample.segment_length,
                seed,
            };
            let schedule = NoiseSchedule::default();
            for (name, dir, lq) in read_videos(input)? {
                let hq = super_resolve(&net, &state.codec, Some(encoder.as_ref()), &lq, &schedule, &sample)?;
                write_frames(&mirror(input, &dir, out, &name), &hq)?;
            }
            write_metadata(&out.join(METADATA_FILE), args, Some(seed), Some(cfg))
        }
        Command::Eval {
            pred,
            reference,
            profile_row,
            out,
        } => {
            let preds = read_videos(pred)?;
            let refs = reference.as_deref().map(read_videos).transpose()?;
            let tag = if refs.is_some() { "full-reference" } else { "no-reference" };
            let mut records = vec![];
            for (name, _, p) in &preds {
                let r = match &refs {
                    Some(refs) => Some(
                        refs.iter()
                            .find(|(n, _, _)| n == name)
                            .map(|(_, _, v)| v)
                            .or_else(|| (refs.len() == 1 && preds.len() == 1).then(|| &refs[0].2))
                            .ok_or_else(|| invalid!("no reference video named `{name}`"))?,
                    ),
                    None => None,
                };
                let profile = temporal_profile(p, *profile_row)?;
                write_image(&out.join("profiles").join(format!("{name}_pred.png")), &profile)?;
                if let Some(r) = r {
                    let rp = temporal_profile(r, *profile_row)?;
                    write_image(&out.join("profiles").join(format!("{name}_ref.png")), &rp)?;
                    if rp.dim(0) == profile.dim(0) {
                        write_image(
                            &out.join("profiles").join(format!("{name}_side_by_side.png")),
                            &hconcat(&profile, &rp)?,
                        )?;
                    }
                }
                records.push(MetricRecord {
                    id: name.clone(),
                    psnr_db: r.map(|r| psnr(p, r)).transpose()?,
                    flicker: if p.len() >= 2 { Some(flicker_index(p)?) } else { None },
                    config: tag.into(),
                });
            }
            write_jsonl(&out.join("report.jsonl"), &records)?;
            write_metadata(&out.join(METADATA_FILE), args, None, None)
        }
        Command::Ablate { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let seed = resolve_seed(*seed, cfg.seed)?;
            let rows: Vec<AblationRow> = run_ablation(&cfg, seed)?;
            for r in &rows {
                eprintln!("({}) psnr {:.3} dB flicker {:.5}", r.tag, r.psnr_db, r.flicker);
            }
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_jsonl(&out.join("report.jsonl"), &rows)?;
            write_metadata(&out.join(METADATA_FILE), args, Some(seed), Some(&cfg))
        }
        Command::Synth { out, config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let seed = resolve_seed(*seed, cfg.seed)?;
            for v in synth_dataset(&cfg.ablate.synth, seed)? {
                write_frames(&out.join(&v.source_id), &v)?;
            }
            write_metadata(&out.join(METADATA_FILE), args, Some(seed), Some(&cfg))
        }
    }
}
