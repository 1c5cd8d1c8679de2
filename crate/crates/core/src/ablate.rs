//! The four-way mechanism ablation: semantic attention and the channel-split
//! spatio-temporal block each on or off, temporal attention always on.

use serde::{Deserialize, Serialize};

use crate::checkpoint::StageTag;
use crate::config::RunConfig;
use crate::degrade::degrade_segment;
use crate::denoiser::{DenoiserNetwork, ParamGroup};
use crate::error::{invalid, Result};
use crate::metrics::{flicker_index, psnr};
use crate::sampler::{super_resolve, SampleConfig};
use crate::schedule::NoiseSchedule;
use crate::seam::EncoderRegistry;
use crate::synth::synth_dataset;
use crate::training::{run_training, RunStart, TrainingState};
use crate::video::{derive_seed, VideoSegment};

/// Row tags in report order with their (semantic, spatio-temporal) switches.
pub const ROWS: [(&str, bool, bool); 4] = [("a", false, false), ("b", true, false), ("c", false, true), ("d", true, true)];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub semantic: usize,
    pub temporal: usize,
    pub tsam: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn of(net: &DenoiserNetwork) -> Self {
        Self {
            backbone: net.group_param_count(ParamGroup::Backbone),
            semantic: net.group_param_count(ParamGroup::Semantic),
            temporal: net.group_param_count(ParamGroup::Temporal),
            tsam: net.group_param_count(ParamGroup::Tsam),
            total: net.param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tag: String,
    pub semantic: bool,
    pub tsam: bool,
    pub temporal: bool,
    /// Mean over held-out videos.
    pub psnr_db: f64,
    pub flicker: f64,
    pub params: ParamCounts,
    pub stage1_final_loss: Option<f64>,
    pub stage2_final_loss: Option<f64>,
}

/// Held-out low-quality inputs and their references.
pub fn eval_pairs(run: &RunConfig, held_out: &[VideoSegment], seed: u64) -> Result<Vec<(VideoSegment, VideoSegment)>> {
    held_out
        .iter()
        .map(|hq| {
            let lq = degrade_segment(hq, derive_seed(seed, &format!("ablate.eval.{}", hq.source_id)), &run.degrade)?;
            Ok((lq, hq.clone()))
        })
        .collect()
}

pub fn run_ablation(run: &RunConfig, seed: u64) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let a = &run.ablate;
    let videos = synth_dataset(&a.synth, derive_seed(seed, "ablate.synth"))?;
    if a.held_out_videos == 0 || a.held_out_videos >= videos.len() {
        return Err(invalid!(
            "ablate.held_out_videos must be in 1..{} for {} videos",
            videos.len(),
            videos.len()
        ));
    }
    let (train, held_out) = videos.split_at(videos.len() - a.held_out_videos);
    let pairs = eval_pairs(run, held_out, seed)?;
    let registry = EncoderRegistry::default();
    let encoder = registry.create(&run.encoder.id, &run.encoder.options())?;
    let schedule = NoiseSchedule::default();
    let sample = SampleConfig {
        steps: run.sample.steps,
        segment_length: run.sample.segment_length,
        seed: derive_seed(seed, "ablate.sample"),
    };

    let mut stage1: Vec<(bool, TrainingState, Option<f64>)> = vec![];
    for semantic in [false, true] {
        let mut r = run.clone();
        r.denoiser.semantic_enabled = semantic;
        r.denoiser.temporal_enabled = false;
        r.denoiser.tsam_enabled = false;
        r.train.steps = a.stage1_steps;
        let rep = run_training(&r, StageTag::Stage1, train, RunStart::Fresh, seed, None)?;
        let last = rep.records.last().map(|x| x.loss);
        stage1.push((semantic, rep.state, last));
    }

    let mut rows = vec![];
    for (tag, semantic, tsam) in ROWS {
        let (_, s1, s1_loss) = stage1.iter().find(|(s, _, _)| *s == semantic).expect("both stage-1 variants");
        let mut r = s1.run.clone();
        r.denoiser.temporal_enabled = true;
        r.denoiser.tsam_enabled = tsam;
        r.train.steps = a.stage2_steps;
        let rep = run_training(&r, StageTag::Stage2, train, RunStart::From(s1.clone()), seed, None)?;
        let net = &rep.state.net;
        let (mut p_sum, mut f_sum) = (0.0, 0.0);
        for (lq, hq) in &pairs {
            let sr = super_resolve(net, &rep.state.codec, Some(encoder.as_ref()), lq, &schedule, &sample)?;
            p_sum += psnr(&sr, hq)?;
            f_sum += flicker_index(&sr)?;
        }
        let n = pairs.len() as f64;
        rows.push(AblationRow {
            tag: tag.into(),
            semantic,
            tsam,
            temporal: true,
            psnr_db: p_sum / n,
            flicker: f_sum / n,
            params: ParamCounts::of(net),
            stage1_final_loss: *s1_loss,
            stage2_final_loss: rep.records.last().map(|x| x.loss),
        });
    }
    Ok(rows)
}
