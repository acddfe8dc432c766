//! Test-set evaluation: stylize every clip, then score FID over all frames and
//! FWE / temporal MSE per clip.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_pipeline::{FrameSequence, ImageSet, TensorImage};
use crate::error::{Error, Result};
use crate::metrics::{
    extract_features, fid, flow_warping_error, temporal_mse, FeatureExtractor, FeatureStats, FlowDir,
    StylizedSequence,
};
use crate::training::{stylize_video, Model};
use crate::warping_ops::{occlusion_mask, FlowField};

/// What maps source frames to stylized frames.
pub enum Translator {
    /// Pass-through at the given size; a reference point for the temporal metrics.
    Identity { image_size: usize },
    Model(Box<Model>),
}

impl Translator {
    pub fn image_size(&self) -> usize {
        match self {
            Translator::Identity { image_size } => *image_size,
            Translator::Model(m) => m.config.image_size,
        }
    }

    pub fn stylize(&self, clip: &FrameSequence) -> Result<Vec<TensorImage>> {
        match self {
            Translator::Identity { image_size } => (0..clip.len()).map(|i| clip.load(i, *image_size)).collect(),
            Translator::Model(m) => stylize_video(m, clip, usize::MAX),
        }
    }
}

/// Flow files needed to score `clip`: for every `t >= 1`, `t -> t-1` and `t-1 -> t`.
pub fn required_flows(clip: &FrameSequence) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for t in 1..clip.len() {
        let (a, b) = (clip.frame_stem(t)?, clip.frame_stem(t - 1)?);
        out.push((a.clone(), b.clone()));
        out.push((b, a));
    }
    Ok(out)
}

/// Fails listing every absent flow file.
pub fn check_flows(clips: &[FrameSequence], flows: &FlowDir) -> Result<()> {
    let mut missing = Vec::new();
    for clip in clips {
        for (from, to) in required_flows(clip)? {
            let p = flows.path(&from, &to);
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} flow file(s) missing: {}",
            missing.len(),
            missing.join(", ")
        )))
    }
}

fn load_flow(flows: &FlowDir, from: &str, to: &str, size: usize) -> Result<FlowField> {
    let f = flows.load(from, to)?;
    Ok(if f.height() == size && f.width() == size {
        f
    } else {
        f.resized(size, size)
    })
}

/// Pairs stylized frames with their flows and occlusion masks.
pub fn stylized_sequence(
    clip: &FrameSequence,
    frames: Vec<TensorImage>,
    flows: &FlowDir,
    size: usize,
) -> Result<StylizedSequence> {
    let mut fl = Vec::new();
    let mut masks = Vec::new();
    for t in 1..clip.len() {
        let (curr, prev) = (clip.frame_stem(t)?, clip.frame_stem(t - 1)?);
        let back = load_flow(flows, &curr, &prev, size)?;
        let fwd = load_flow(flows, &prev, &curr, size)?;
        masks.push(occlusion_mask(&back, &fwd)?);
        fl.push(back);
    }
    Ok(StylizedSequence {
        frames,
        flows: fl,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub frames: usize,
    pub fwe: f64,
    pub mse: f64,
}

/// `fwe` and `mse` are means over all consecutive pairs of all clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub fid: f64,
    pub fwe: f64,
    pub mse: f64,
    pub per_clip: BTreeMap<String, ClipScores>,
}

pub struct EvalInputs<'a> {
    pub clips: &'a [FrameSequence],
    pub flows: &'a FlowDir,
    pub extractor: &'a dyn FeatureExtractor,
    /// Target-domain statistics; computed from `target` when absent.
    pub real_stats: Option<FeatureStats>,
    pub target: Option<&'a ImageSet>,
}

/// Report plus the statistics of the stylized frames.
pub fn evaluate(translator: &Translator, inputs: &EvalInputs<'_>) -> Result<(EvalReport, FeatureStats)> {
    let size = translator.image_size();
    check_flows(inputs.clips, inputs.flows)?;
    let real = match (&inputs.real_stats, inputs.target) {
        (Some(s), _) => s.clone(),
        (None, Some(target)) => {
            let imgs = target
                .images
                .iter()
                .map(|h| h.load(size))
                .collect::<Result<Vec<_>>>()?;
            extract_features(imgs.iter(), inputs.extractor)?
        }
        (None, None) => {
            return Err(Error::Config(
                "FID needs target images or precomputed real statistics".into(),
            ))
        }
    };
    let mut per_clip = BTreeMap::new();
    let mut all_frames = Vec::new();
    let (mut fwe_sum, mut mse_sum, mut pairs) = (0.0, 0.0, 0usize);
    for clip in inputs.clips {
        if clip.len() < 2 {
            log::warn!("clip {} has fewer than 2 frames; skipped", clip.source_id);
            continue;
        }
        if per_clip.contains_key(&clip.source_id) {
            return Err(Error::Data(format!("duplicate clip id {}", clip.source_id)));
        }
        let out = translator.stylize(clip)?;
        let src = (0..clip.len()).map(|i| clip.load(i, size)).collect::<Result<Vec<_>>>()?;
        let mse = temporal_mse(&src, &out)?;
        let seq = stylized_sequence(clip, out, inputs.flows, size)?;
        let fwe = flow_warping_error(&seq)?;
        let n = clip.len() - 1;
        fwe_sum += fwe * n as f64;
        mse_sum += mse * n as f64;
        pairs += n;
        per_clip.insert(
            clip.source_id.clone(),
            ClipScores {
                frames: clip.len(),
                fwe,
                mse,
            },
        );
        all_frames.extend(seq.frames);
    }
    if pairs == 0 {
        return Err(Error::Data("no clip has two or more frames".into()));
    }
    let fake = extract_features(all_frames.iter(), inputs.extractor)?;
    let report = EvalReport {
        fid: fid(&real, &fake)?,
        fwe: fwe_sum / pairs as f64,
        mse: mse_sum / pairs as f64,
        per_clip,
    };
    Ok((report, fake))
}
