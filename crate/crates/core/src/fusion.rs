//! Soft-NMS suppression and multi-channel ensemble fusion.
//!
//! [`soft_nms`] decays the scores of overlapping boxes instead of deleting
//! them and records, for every kept box, the boxes it decayed the most
//! ([`FusionCluster`]). [`refine_confidence`] then uses those clusters to undo
//! the decay on boxes that several independent channels agree on, folding the
//! agreeing duplicates into the representative. [`fuse_ensemble`] chains
//! channel weighting, class-wise suppression and refinement.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, ChannelId, Detection};

/// Score decay applied to boxes overlapping a selected box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum DecayMethod {
    /// `s * exp(-iou^2 / sigma)`
    #[default]
    Gaussian,
    /// `s * (1 - iou)` once `iou` exceeds the linear threshold.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct SoftNmsConfig {
    pub method: DecayMethod,
    pub sigma: f64,
    pub linear_iou_threshold: f64,
    /// Boxes whose score falls below this value are discarded.
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self { method: DecayMethod::Gaussian, sigma: 0.5, linear_iou_threshold: 0.3, score_floor: 0.001 }
    }
}

impl SoftNmsConfig {
    pub fn gaussian(sigma: f64) -> Self {
        Self { method: DecayMethod::Gaussian, sigma, ..Self::default() }
    }

    pub fn linear(threshold: f64) -> Self {
        Self { method: DecayMethod::Linear, linear_iou_threshold: threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(FusionError::InvalidConfig("sigma must be a positive finite number"));
        }
        if !(self.linear_iou_threshold >= 0.0 && self.linear_iou_threshold < 1.0) {
            return Err(FusionError::InvalidConfig("linear_iou_threshold must lie in [0, 1)"));
        }
        if !(self.score_floor >= 0.0 && self.score_floor < 1.0) {
            return Err(FusionError::InvalidConfig("score_floor must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Multiplicative decay for a box overlapping the selected box by `overlap`.
    pub fn decay(&self, overlap: f64) -> f64 {
        match self.method {
            DecayMethod::Gaussian => libm::exp(-(overlap * overlap) / self.sigma),
            DecayMethod::Linear => {
                if overlap > self.linear_iou_threshold {
                    1.0 - overlap
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct FusionConfig {
    pub soft_nms: SoftNmsConfig,
    /// Minimum IoU between a cluster member and its representative for the
    /// member to count as supporting evidence.
    pub support_iou: f64,
    /// Number of distinct channels (representative included) required before
    /// a cluster's score is restored.
    pub min_support: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { soft_nms: SoftNmsConfig::default(), support_iou: 0.55, min_support: 2 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        self.soft_nms.validate()?;
        if !(0.0..=1.0).contains(&self.support_iou) {
            return Err(FusionError::InvalidConfig("support_iou must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionError {
    InvalidConfig(&'static str),
    MixedClasses { expected: u32, found: u32 },
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::InvalidConfig(msg) => write!(f, "invalid fusion config: {msg}"),
            FusionError::MixedClasses { expected, found } => {
                write!(f, "soft_nms input mixes classes {expected} and {found}")
            }
        }
    }
}

impl core::error::Error for FusionError {}

/// A box that was decayed by a cluster's representative.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ClusterMember {
    /// The member with its final score (at selection when it was kept
    /// later, at removal when it fell under the floor).
    pub detection: Detection,
    pub pre_decay_score: f64,
    /// Position of the member in the `soft_nms` input.
    pub input_index: usize,
    /// IoU with the representative.
    pub iou: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FusionCluster {
    pub representative: Detection,
    pub representative_index: usize,
    pub members: Vec<ClusterMember>,
    pub support_channels: BTreeSet<ChannelId>,
}

impl FusionCluster {
    /// Members overlapping the representative by at least `support_iou`.
    pub fn supporting(&self, support_iou: f64) -> impl Iterator<Item = &ClusterMember> {
        self.members.iter().filter(move |m| m.iou >= support_iou)
    }
}

/// Result of [`soft_nms`]; `clusters[i]` describes `kept[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SoftNmsOutput {
    pub kept: Vec<Detection>,
    pub clusters: Vec<FusionCluster>,
}

/// Soft-NMS over detections of a single class.
///
/// Each round selects the highest remaining score (ties broken by
/// `(channel, input position)`), then decays every other remaining box by
/// [`SoftNmsConfig::decay`] of its IoU with the selection. Boxes below
/// `score_floor` are dropped. Kept boxes come out in selection order, which
/// is also descending final score.
///
/// Every decayed box is recorded as a member of the cluster of the kept box
/// that decayed it the most; equal decays go to the earlier kept box.
pub fn soft_nms(dets: &[Detection], cfg: &SoftNmsConfig) -> Result<SoftNmsOutput, FusionError> {
    cfg.validate()?;
    if let Some(first) = dets.first() {
        if let Some(other) = dets.iter().find(|d| d.class_id != first.class_id) {
            return Err(FusionError::MixedClasses { expected: first.class_id, found: other.class_id });
        }
    }

    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| dets[i].channel);
    let mut rank = alloc::vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut alive: Vec<bool> = scores.iter().map(|&s| s >= cfg.score_floor).collect();
    // (strongest decay factor, position in `selected`)
    let mut strongest: Vec<Option<(f64, usize)>> = alloc::vec![None; n];
    let mut selected: Vec<usize> = Vec::new();

    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] || (scores[i] == scores[b] && rank[i] < rank[b]) => Some(i),
                keep => keep,
            };
        }
        let Some(m) = best else { break };
        alive[m] = false;
        let pos = selected.len();
        selected.push(m);

        for j in 0..n {
            if !alive[j] {
                continue;
            }
            let factor = cfg.decay(iou(&dets[m].bbox, &dets[j].bbox));
            if factor < 1.0 {
                scores[j] *= factor;
                if strongest[j].is_none_or(|(f, _)| factor < f) {
                    strongest[j] = Some((factor, pos));
                }
            }
            if scores[j] < cfg.score_floor {
                alive[j] = false;
            }
        }
    }

    let is_kept = {
        let mut v = alloc::vec![false; n];
        for &i in &selected {
            v[i] = true;
        }
        v
    };
    let kept: Vec<Detection> = selected.iter().map(|&i| dets[i].with_score(scores[i])).collect();
    let mut clusters: Vec<FusionCluster> = selected
        .iter()
        .zip(&kept)
        .map(|(&i, rep)| FusionCluster {
            representative: *rep,
            representative_index: i,
            members: Vec::new(),
            support_channels: BTreeSet::from([rep.channel]),
        })
        .collect();
    for j in 0..n {
        if let Some((_, pos)) = strongest[j] {
            let rep_index = selected[pos];
            let cluster = &mut clusters[pos];
            cluster.support_channels.insert(dets[j].channel);
            cluster.members.push(ClusterMember {
                detection: dets[j].with_score(scores[j]),
                pre_decay_score: dets[j].score,
                input_index: j,
                iou: iou(&dets[rep_index].bbox, &dets[j].bbox),
                kept: is_kept[j],
            });
        }
    }
    Ok(SoftNmsOutput { kept, clusters })
}

/// Scales every score by `weight`.
pub fn weight_detections(dets: &[Detection], weight: f64) -> Vec<Detection> {
    dets.iter().map(|d| d.with_score(d.score * weight)).collect()
}

/// Restores decayed confidence on boxes corroborated by several channels.
///
/// `clusters[i]` must describe `kept[i]`, as produced by [`soft_nms`]. A kept
/// box whose supporting members (IoU >= `support_iou`) together with the
/// representative span at least `min_support` channels gets
/// `max(current, best pre-decay member score)`; the supporting members that
/// survived suppression are folded into it and leave the output.
pub fn refine_confidence(
    kept: &[Detection],
    clusters: &[FusionCluster],
    support_iou: f64,
    min_support: usize,
) -> Vec<Detection> {
    debug_assert_eq!(kept.len(), clusters.len());
    let mut absorbed = BTreeSet::new();
    let mut out = Vec::with_capacity(kept.len());
    for (det, cluster) in kept.iter().zip(clusters) {
        if absorbed.contains(&cluster.representative_index) {
            continue;
        }
        let mut channels = BTreeSet::from([det.channel]);
        let mut best_pre = f64::NEG_INFINITY;
        for m in cluster.supporting(support_iou) {
            channels.insert(m.detection.channel);
            best_pre = best_pre.max(m.pre_decay_score);
        }
        let mut refined = *det;
        if channels.len() >= min_support && best_pre.is_finite() {
            refined.score = det.score.max(best_pre);
            absorbed.extend(cluster.supporting(support_iou).filter(|m| m.kept).map(|m| m.input_index));
        }
        out.push(refined);
    }
    sort_by_score(&mut out);
    out
}

/// One detector's output together with its ensemble weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedChannel<'a> {
    pub detections: &'a [Detection],
    pub weight: f64,
}

impl<'a> WeightedChannel<'a> {
    pub fn new(detections: &'a [Detection], weight: f64) -> Self {
        Self { detections, weight }
    }
}

/// Weights each channel, runs class-wise Soft-NMS on the union and refines
/// the surviving confidences. Output is sorted by descending score, ties
/// kept in class order.
pub fn fuse_ensemble(channels: &[WeightedChannel<'_>], cfg: &FusionConfig) -> Result<Vec<Detection>, FusionError> {
    cfg.validate()?;
    let mut by_class: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for ch in channels {
        for d in weight_detections(ch.detections, ch.weight) {
            by_class.entry(d.class_id).or_default().push(d);
        }
    }
    let mut fused = Vec::new();
    for dets in by_class.values() {
        let out = soft_nms(dets, &cfg.soft_nms)?;
        fused.extend(refine_confidence(&out.kept, &out.clusters, cfg.support_iou, cfg.min_support));
    }
    sort_by_score(&mut fused);
    Ok(fused)
}

/// Class-wise Soft-NMS without refinement, used for single-detector paths.
pub fn suppress_classwise(dets: &[Detection], cfg: &SoftNmsConfig) -> Result<Vec<Detection>, FusionError> {
    let mut by_class: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().push(*d);
    }
    let mut out = Vec::new();
    for dets in by_class.values() {
        out.extend(soft_nms(dets, cfg)?.kept);
    }
    sort_by_score(&mut out);
    Ok(out)
}

/// Stable descending sort on score.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
}
