//! COCO-style AP / AR over IoU thresholds 0.50:0.05:0.95.
//!
//! Matching follows the COCO rules: per frame and class, detections are
//! visited in descending score (truncated to `max_dets`), each taking the
//! unmatched non-ignored ground truth of highest IoU at or above the
//! threshold, falling back to an ignore region (the detection is then left
//! out of the PR curve) or becoming a false positive. AP is the 101-point
//! interpolated precision; classes without ground truth are excluded from
//! every mean.

use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, Detection};

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const RECALL_POINTS: usize = 101;
pub const DEFAULT_MAX_DETS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(transparent))]
pub struct FrameId(pub u64);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: u32,
    /// Ignore regions absorb detections without counting as misses.
    pub ignore: bool,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: u32) -> Self {
        Self { bbox, class_id, ignore: false }
    }

    pub fn ignored(bbox: BBox, class_id: u32) -> Self {
        Self { bbox, class_id, ignore: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    pub frame_id: FrameId,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameGroundTruth {
    pub frame_id: FrameId,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// AP is undefined without ground truth.
    UndefinedAp,
    FrameMismatch { index: usize, detections: Option<FrameId>, ground_truth: Option<FrameId> },
    ClassOutOfRange { frame_id: FrameId, class_id: u32, num_classes: u32 },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::UndefinedAp => f.write_str("average precision is undefined when there is no ground truth"),
            EvalError::FrameMismatch { index, detections, ground_truth } => {
                let show = |id: &Option<FrameId>| match id {
                    Some(id) => alloc::format!("{id}"),
                    None => alloc::string::String::from("<missing>"),
                };
                write!(
                    f,
                    "frame ids do not align at position {index}: detections have {}, ground truth has {}",
                    show(detections),
                    show(ground_truth)
                )
            }
            EvalError::ClassOutOfRange { frame_id, class_id, num_classes } => {
                write!(f, "frame {frame_id}: class {class_id} outside 0..{num_classes}")
            }
        }
    }
}

impl core::error::Error for EvalError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Matched(usize),
    /// Matched an ignore region; excluded from precision and recall.
    Ignored(usize),
    FalsePositive,
}

impl MatchKind {
    pub fn gt_index(&self) -> Option<usize> {
        match *self {
            MatchKind::Matched(g) | MatchKind::Ignored(g) => Some(g),
            MatchKind::FalsePositive => None,
        }
    }
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    order
}

/// Greedy COCO matching on one frame and one class.
///
/// Returns `(detection index, outcome)` in visiting order (descending score,
/// stable). IoU ties go to the earlier ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_t: f64) -> Vec<(usize, MatchKind)> {
    let mut gt_order: Vec<usize> = (0..gts.len()).filter(|&g| !gts[g].ignore).collect();
    gt_order.extend((0..gts.len()).filter(|&g| gts[g].ignore));
    let mut taken = alloc::vec![false; gts.len()];

    score_order(dets)
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_order {
                if taken[g] && !gts[g].ignore {
                    continue;
                }
                if let Some((b, _)) = best {
                    if !gts[b].ignore && gts[g].ignore {
                        break;
                    }
                }
                let o = iou(&dets[d].bbox, &gts[g].bbox);
                let better = match best {
                    None => o >= iou_t,
                    Some((_, bo)) => o > bo,
                };
                if better {
                    best = Some((g, o));
                }
            }
            let kind = match best {
                Some((g, _)) if gts[g].ignore => MatchKind::Ignored(g),
                Some((g, _)) => {
                    taken[g] = true;
                    MatchKind::Matched(g)
                }
                None => MatchKind::FalsePositive,
            };
            (d, kind)
        })
        .collect()
}

/// A detection that takes part in the PR curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub true_positive: bool,
}

/// 101-point interpolated average precision.
///
/// `matches` are ranked by descending score with a stable sort, so equal
/// scores keep their given order.
pub fn average_precision(matches: &[ScoredMatch], num_gt: usize) -> Result<f64, EvalError> {
    if num_gt == 0 {
        return Err(EvalError::UndefinedAp);
    }
    let mut ranked: Vec<ScoredMatch> = matches.to_vec();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));

    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for m in &ranked {
        if m.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let threshold = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < threshold);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Ok(total / RECALL_POINTS as f64)
}

/// True-positive count over `num_gt`; `None` without ground truth.
pub fn recall(matches: &[ScoredMatch], num_gt: usize) -> Option<f64> {
    (num_gt > 0).then(|| matches.iter().filter(|m| m.true_positive).count() as f64 / num_gt as f64)
}

/// Mean of the defined per-class, per-threshold recalls. `max_dets` has
/// already been applied when the matches were built.
pub fn average_recall(classes: &[ClassEval]) -> f64 {
    mean_defined(classes.iter().flat_map(|c| c.recall.iter().copied()))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_dets: DEFAULT_MAX_DETS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MatchCounts {
    pub matched: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Per-class accumulation across all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub class_id: u32,
    pub num_gt: usize,
    pub ap: [Option<f64>; 10],
    pub recall: [Option<f64>; 10],
    pub counts: [MatchCounts; 10],
}

/// Checks that both sides list the same frames in the same order and that
/// every class id is in range.
pub fn check_inputs(dets: &[FrameDetections], gts: &[FrameGroundTruth], num_classes: u32) -> Result<(), EvalError> {
    for i in 0..dets.len().max(gts.len()) {
        let d = dets.get(i).map(|f| f.frame_id);
        let g = gts.get(i).map(|f| f.frame_id);
        if d != g {
            return Err(EvalError::FrameMismatch { index: i, detections: d, ground_truth: g });
        }
    }
    let classes = dets
        .iter()
        .flat_map(|f| f.detections.iter().map(move |d| (f.frame_id, d.class_id)))
        .chain(gts.iter().flat_map(|f| f.objects.iter().map(move |g| (f.frame_id, g.class_id))));
    for (frame_id, class_id) in classes {
        if class_id >= num_classes {
            return Err(EvalError::ClassOutOfRange { frame_id, class_id, num_classes });
        }
    }
    Ok(())
}

/// Accumulates one class over every frame. Inputs must have passed
/// [`check_inputs`].
pub fn evaluate_class(
    dets: &[FrameDetections],
    gts: &[FrameGroundTruth],
    class_id: u32,
    cfg: &EvalConfig,
) -> ClassEval {
    let mut per_threshold: [Vec<ScoredMatch>; 10] = Default::default();
    let mut num_gt = 0usize;
    for (fd, fg) in dets.iter().zip(gts) {
        let frame_gts: Vec<GroundTruth> = fg.objects.iter().filter(|g| g.class_id == class_id).copied().collect();
        num_gt += frame_gts.iter().filter(|g| !g.ignore).count();
        let mut frame_dets: Vec<Detection> =
            fd.detections.iter().filter(|d| d.class_id == class_id).copied().collect();
        let order = score_order(&frame_dets);
        frame_dets = order.into_iter().take(cfg.max_dets).map(|i| frame_dets[i]).collect();

        for (t, &iou_t) in IOU_THRESHOLDS.iter().enumerate() {
            for (d, kind) in match_detections(&frame_dets, &frame_gts, iou_t) {
                let score = frame_dets[d].score;
                match kind {
                    MatchKind::Matched(_) => per_threshold[t].push(ScoredMatch { score, true_positive: true }),
                    MatchKind::FalsePositive => per_threshold[t].push(ScoredMatch { score, true_positive: false }),
                    MatchKind::Ignored(_) => {}
                }
            }
        }
    }

    let mut ap = [None; 10];
    let mut rec = [None; 10];
    let mut counts = [MatchCounts::default(); 10];
    for t in 0..IOU_THRESHOLDS.len() {
        let m = &per_threshold[t];
        ap[t] = average_precision(m, num_gt).ok();
        rec[t] = recall(m, num_gt);
        let matched = m.iter().filter(|x| x.true_positive).count();
        counts[t] = MatchCounts { matched, false_positives: m.len() - matched, false_negatives: num_gt - matched };
    }
    ClassEval { class_id, num_gt, ap, recall: rec, counts }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EvalReport {
    pub num_classes: u32,
    pub iou_thresholds: Vec<f64>,
    /// `ap[class][threshold]`, `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub recall: Vec<Vec<Option<f64>>>,
    pub num_gt: Vec<usize>,
    pub map_5095: f64,
    pub ar_100: f64,
    /// Totals over classes, one entry per threshold.
    pub counts: Vec<MatchCounts>,
}

impl EvalReport {
    /// Reduces per-class results (in class order) into a report.
    pub fn from_classes(classes: &[ClassEval]) -> Self {
        let mut counts = alloc::vec![MatchCounts::default(); IOU_THRESHOLDS.len()];
        for c in classes {
            for (total, x) in counts.iter_mut().zip(&c.counts) {
                total.matched += x.matched;
                total.false_positives += x.false_positives;
                total.false_negatives += x.false_negatives;
            }
        }
        Self {
            num_classes: classes.len() as u32,
            iou_thresholds: IOU_THRESHOLDS.to_vec(),
            ap: classes.iter().map(|c| c.ap.to_vec()).collect(),
            recall: classes.iter().map(|c| c.recall.to_vec()).collect(),
            num_gt: classes.iter().map(|c| c.num_gt).collect(),
            map_5095: mean_defined(classes.iter().flat_map(|c| c.ap.iter().copied())),
            ar_100: average_recall(classes),
            counts,
        }
    }

    /// AP of one class averaged over thresholds.
    pub fn class_ap(&self, class_id: usize) -> Option<f64> {
        let row = self.ap.get(class_id)?;
        row.iter().all(Option::is_some).then(|| mean_defined(row.iter().copied()))
    }

    /// mAP at a single threshold index.
    pub fn map_at(&self, threshold: usize) -> f64 {
        mean_defined(self.ap.iter().map(|row| row[threshold]))
    }
}

/// Full evaluation over an aligned dataset.
pub fn evaluate(
    dets: &[FrameDetections],
    gts: &[FrameGroundTruth],
    num_classes: u32,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_inputs(dets, gts, num_classes)?;
    let classes: Vec<ClassEval> = (0..num_classes).map(|c| evaluate_class(dets, gts, c, cfg)).collect();
    Ok(EvalReport::from_classes(&classes))
}
