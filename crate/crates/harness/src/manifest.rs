//! Frame manifests: the ordered list of frames a run consumes.
//!
//! Paths inside a manifest are relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tta_core::domain::DomainLabel;
use tta_core::evaluation::{FrameId, GroundTruth};
use tta_core::imaging::{parse_ppm, Image};
use tta_core::{ChannelId, Detection};

use crate::error::{read, read_string, HarnessError, Result};
use crate::formats::{parse_detections, parse_gt, DetectionRecord, GtRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub image: PathBuf,
    /// Channel name to detection file.
    #[serde(default)]
    pub detections: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    /// Recorded condition (`day`, `night`, `dusk`, `fog`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl FrameEntry {
    pub fn domain_label(&self) -> Option<DomainLabel> {
        self.domain.as_deref().and_then(DomainLabel::from_condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameManifest {
    pub frames: Vec<FrameEntry>,
}

/// A parsed manifest together with the directory its paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub path: PathBuf,
    pub root: PathBuf,
    pub manifest: FrameManifest,
}

pub fn parse_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = read_string(path)?;
    let manifest: FrameManifest =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.into(), line: e.line(), message: e.to_string() })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for (i, f) in manifest.frames.iter().enumerate() {
        if i > 0 && f.frame_id <= manifest.frames[i - 1].frame_id {
            return Err(HarnessError::config(path, format!("frame ids must increase (frame {} after {})", f.frame_id, manifest.frames[i - 1].frame_id)));
        }
        if let Some(d) = &f.domain {
            if DomainLabel::from_condition(d).is_none() {
                return Err(HarnessError::config(path, format!("frame {}: unknown domain `{d}`", f.frame_id)));
            }
        }
        let refs = std::iter::once(&f.image).chain(f.detections.values()).chain(f.gt.as_ref());
        for r in refs {
            let p = root.join(r);
            if !p.is_file() {
                return Err(HarnessError::config(path, format!("frame {}: missing file {}", f.frame_id, p.display())));
            }
        }
    }
    Ok(LoadedManifest { path: path.to_path_buf(), root, manifest })
}

pub fn load_image(path: &Path) -> Result<Image> {
    parse_ppm(&read(path)?).map_err(|source| HarnessError::Image { path: path.to_path_buf(), source })
}

/// Detection and ground-truth files are usually shared by many frames, so
/// each file is parsed once and indexed by frame.
#[derive(Debug, Default)]
pub struct RecordCache {
    dets: HashMap<PathBuf, BTreeMap<u64, Vec<DetectionRecord>>>,
    gts: HashMap<PathBuf, BTreeMap<u64, Vec<GtRecord>>>,
}

impl RecordCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn detections(&mut self, path: &Path, frame_id: u64) -> Result<&[DetectionRecord]> {
        if !self.dets.contains_key(path) {
            let mut by_frame: BTreeMap<u64, Vec<DetectionRecord>> = BTreeMap::new();
            for r in parse_detections(path)? {
                by_frame.entry(r.frame_id).or_default().push(r);
            }
            self.dets.insert(path.to_path_buf(), by_frame);
        }
        Ok(self.dets[path].get(&frame_id).map_or(&[][..], Vec::as_slice))
    }

    pub fn ground_truth(&mut self, path: &Path, frame_id: u64) -> Result<&[GtRecord]> {
        if !self.gts.contains_key(path) {
            let mut by_frame: BTreeMap<u64, Vec<GtRecord>> = BTreeMap::new();
            for r in parse_gt(path)? {
                by_frame.entry(r.frame_id).or_default().push(r);
            }
            self.gts.insert(path.to_path_buf(), by_frame);
        }
        Ok(self.gts[path].get(&frame_id).map_or(&[][..], Vec::as_slice))
    }
}

impl LoadedManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Detections of `channel` for one frame. A record whose `channel_id`
    /// disagrees with the channel it is filed under is an error.
    pub fn channel_detections(
        &self,
        cache: &mut RecordCache,
        frame: &FrameEntry,
        channel: &str,
        id: ChannelId,
    ) -> Result<Vec<Detection>> {
        let Some(rel) = frame.detections.get(channel) else {
            return Err(HarnessError::config(&self.path, format!("frame {}: no detections for channel `{channel}`", frame.frame_id)));
        };
        let path = self.resolve(rel);
        let records = cache.detections(&path, frame.frame_id)?;
        if let Some(bad) = records.iter().find(|r| r.channel_id != channel) {
            return Err(HarnessError::config(&path, format!("record for channel `{}` filed under `{channel}`", bad.channel_id)));
        }
        Ok(records.iter().map(|r| r.to_detection(id)).collect())
    }

    pub fn frame_ground_truth(&self, cache: &mut RecordCache, frame: &FrameEntry) -> Result<Option<Vec<GroundTruth>>> {
        match &frame.gt {
            None => Ok(None),
            Some(rel) => Ok(Some(cache.ground_truth(&self.resolve(rel), frame.frame_id)?.iter().map(GtRecord::to_gt).collect())),
        }
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        self.manifest.frames.iter().map(|f| FrameId(f.frame_id)).collect()
    }
}
