//! End-to-end streaming runs over a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use tta_core::domain::DiscriminatorModel;
use tta_core::evaluation::{
    check_inputs, evaluate_class, EvalConfig, EvalReport, FrameDetections, FrameGroundTruth, FrameId, GroundTruth,
};
use tta_core::mean_teacher::AdaptCheckpoint;
use tta_core::imaging::Image;
use tta_core::pipeline::{FrameResult, Pipeline, Route};
use tta_core::{ChannelId, Detection};

use crate::config::RunConfig;
use crate::error::{read_string, write, HarnessError, Result};
use crate::manifest::{load_image, parse_manifest, FrameEntry, LoadedManifest, RecordCache};

/// Frames decoded ahead of the sequential fold.
const PREFETCH: usize = 64;

pub fn load_discriminator(path: &Path) -> Result<DiscriminatorModel> {
    let text = read_string(path)?;
    let model: DiscriminatorModel =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.into(), line: e.line(), message: e.to_string() })?;
    model.validate()?;
    Ok(model)
}

/// COCO evaluation with classes spread over the current rayon pool. The
/// reduction runs in class order, so the result does not depend on the
/// thread count.
pub fn evaluate_parallel(
    dets: &[FrameDetections],
    gts: &[FrameGroundTruth],
    num_classes: u32,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    check_inputs(dets, gts, num_classes)?;
    let classes: Vec<_> = (0..num_classes).into_par_iter().map(|c| evaluate_class(dets, gts, c, cfg)).collect();
    Ok(EvalReport::from_classes(&classes))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub frames: Vec<FrameResult>,
    pub eval: Option<EvalReport>,
    pub night_frames: usize,
    pub boosted_frames: usize,
    /// Adaptation state after the last frame.
    pub checkpoint: AdaptCheckpoint,
}

type FrameInputs = (BTreeMap<ChannelId, Vec<Detection>>, Option<Vec<GroundTruth>>);

fn load_frame(m: &LoadedManifest, cache: &mut RecordCache, entry: &FrameEntry, cfg: &RunConfig) -> Result<FrameInputs> {
    let mut dets = BTreeMap::new();
    for (i, ch) in cfg.channels.iter().enumerate() {
        let id = ChannelId(i as u16);
        dets.insert(id, m.channel_detections(cache, entry, &ch.name, id)?);
    }
    Ok((dets, m.frame_ground_truth(cache, entry)?))
}

/// Runs the configured pipeline over the manifest. Returns every frame
/// result and, when every frame has ground truth, the evaluation of the
/// fused output.
pub fn run_stream(cfg: &RunConfig) -> Result<RunOutcome> {
    let manifest = parse_manifest(&cfg.manifest)?;
    let discriminator = cfg.discriminator.as_deref().map(load_discriminator).transpose()?;
    let mut pipeline = Pipeline::new(cfg.pipeline_config(), cfg.channel_specs()?, discriminator)?;
    log::info!(
        "{} frames, {} channels; detections are file-backed, so the visibility boost only affects routing",
        manifest.manifest.frames.len(),
        cfg.channels.len()
    );

    let mut cache = RecordCache::new();
    let mut results = Vec::with_capacity(manifest.manifest.frames.len());
    let mut fused = Vec::new();
    let mut truth = Vec::new();
    let mut all_gt = true;
    for chunk in manifest.manifest.frames.chunks(PREFETCH) {
        let images: Vec<Result<Image>> = chunk.par_iter().map(|e| load_image(&manifest.resolve(&e.image))).collect();
        for (entry, image) in chunk.iter().zip(images) {
            let (dets, gt) = load_frame(&manifest, &mut cache, entry, cfg)?;
            let id = FrameId(entry.frame_id);
            let r = pipeline.process_frame(&image?, id, &dets)?;
            match gt {
                Some(objects) => truth.push(FrameGroundTruth { frame_id: id, objects }),
                None => all_gt = false,
            }
            fused.push(FrameDetections { frame_id: id, detections: r.detections.clone() });
            results.push(r);
        }
    }
    let eval = if all_gt && !results.is_empty() {
        Some(evaluate_parallel(&fused, &truth, cfg.num_classes as u32, &EvalConfig { max_dets: cfg.max_dets })?)
    } else {
        None
    };
    let night_frames = results.iter().filter(|r| r.route == Route::Night).count();
    let boosted_frames = results.iter().filter(|r| r.visibility_applied).count();
    log::info!("{night_frames} frames routed to the night channel, {boosted_frames} boosted");
    Ok(RunOutcome { frames: results, eval, night_frames, boosted_frames, checkpoint: pipeline.adapt_state().checkpoint() })
}

pub fn frames_jsonl(frames: &[FrameResult]) -> String {
    let mut s = String::new();
    for f in frames {
        s.push_str(&serde_json::to_string(f).expect("frame result serializes"));
        s.push('\n');
    }
    s
}

pub fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

/// Runs and writes `frames.jsonl`, `eval.json` (when ground truth is
/// available), `adapt_state.json` and `config_resolved.json` to `out_dir`.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let outcome = run_stream(cfg)?;
    write(&out_dir.join("frames.jsonl"), frames_jsonl(&outcome.frames))?;
    if let Some(e) = &outcome.eval {
        write(&out_dir.join("eval.json"), pretty_json(e))?;
    }
    write(&out_dir.join("adapt_state.json"), pretty_json(&outcome.checkpoint))?;
    write(&out_dir.join("config_resolved.json"), cfg.to_json())?;
    Ok(outcome)
}

/// Runs inside a dedicated pool of `threads` workers (`None` uses the
/// global pool).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
