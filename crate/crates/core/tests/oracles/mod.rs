//! Independent reference implementations used only by tests.
//!
//! Nothing here calls into the code paths it checks: Soft-NMS is the plain
//! list-removal loop, the evaluator recomputes matching and interpolated
//! precision from the COCO definitions, and gradients come from central
//! differences.

#![allow(dead_code)]

use rand::Rng;
use tta_core::evaluation::{GroundTruth, IOU_THRESHOLDS};
use tta_core::fusion::{DecayMethod, SoftNmsConfig};
use tta_core::{BBox, ChannelId, Detection};

pub fn plain_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Soft-NMS as the textbook loop: pick the max of B, move it to D, rescore
/// the rest of B, delete what falls under the floor. Returns the input
/// indices of D and their final scores.
pub fn plain_soft_nms(dets: &[Detection], cfg: &SoftNmsConfig) -> Vec<(usize, f64)> {
    // B holds (input index, score) in tie-break order
    let mut b: Vec<(usize, f64)> = (0..dets.len()).map(|i| (i, dets[i].score)).collect();
    b.sort_by_key(|&(i, _)| dets[i].channel);
    b.retain(|&(_, s)| s >= cfg.score_floor);
    let mut d = Vec::new();
    while !b.is_empty() {
        let mut m = 0;
        for k in 1..b.len() {
            if b[k].1 > b[m].1 {
                m = k;
            }
        }
        let (mi, ms) = b.remove(m);
        d.push((mi, ms));
        for entry in b.iter_mut() {
            let o = plain_iou(&dets[mi].bbox, &dets[entry.0].bbox);
            let f = match cfg.method {
                DecayMethod::Gaussian => (-(o * o) / cfg.sigma).exp(),
                DecayMethod::Linear => {
                    if o > cfg.linear_iou_threshold {
                        1.0 - o
                    } else {
                        1.0
                    }
                }
            };
            entry.1 *= f;
        }
        b.retain(|&(_, s)| s >= cfg.score_floor);
    }
    d
}

/// Classic hard NMS: keep the best, delete everything overlapping it at
/// all (IoU > 0).
pub fn hard_nms(dets: &[Detection], floor: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= floor).collect();
    idx.sort_by_key(|&i| dets[i].channel);
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut keep: Vec<usize> = Vec::new();
    for i in idx {
        if keep.iter().all(|&k| plain_iou(&dets[k].bbox, &dets[i].bbox) == 0.0) {
            keep.push(i);
        }
    }
    keep
}

pub struct OracleReport {
    pub ap: Vec<Vec<Option<f64>>>,
    pub recall: Vec<Vec<Option<f64>>>,
    pub map: f64,
    pub ar: f64,
}

/// Brute-force COCO evaluation over `(detections, ground truth)` frames.
pub fn brute_force_evaluate(
    frames: &[(Vec<Detection>, Vec<GroundTruth>)],
    num_classes: u32,
    max_dets: usize,
) -> OracleReport {
    let mut ap = vec![vec![None; IOU_THRESHOLDS.len()]; num_classes as usize];
    let mut recall = ap.clone();
    for c in 0..num_classes {
        let npos: usize =
            frames.iter().map(|(_, g)| g.iter().filter(|x| x.class_id == c && !x.ignore).count()).sum();
        for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            // (score, is_tp)
            let mut records: Vec<(f64, bool)> = Vec::new();
            for (dets, gts) in frames {
                let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
                mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                mine.truncate(max_dets);
                let mut used = vec![false; gts.len()];
                for d in mine {
                    let mut pick: Option<(usize, f64)> = None;
                    for (g, gt) in gts.iter().enumerate() {
                        if gt.class_id != c || gt.ignore || used[g] {
                            continue;
                        }
                        let o = plain_iou(&d.bbox, &gt.bbox);
                        if o >= thr && pick.is_none_or(|(_, po)| o > po) {
                            pick = Some((g, o));
                        }
                    }
                    if let Some((g, _)) = pick {
                        used[g] = true;
                        records.push((d.score, true));
                    } else if gts.iter().any(|gt| gt.class_id == c && gt.ignore && plain_iou(&d.bbox, &gt.bbox) >= thr) {
                        // swallowed by an ignore region
                    } else {
                        records.push((d.score, false));
                    }
                }
            }
            if npos == 0 {
                continue;
            }
            records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut curve = Vec::new();
            let mut tp = 0usize;
            for (k, r) in records.iter().enumerate() {
                if r.1 {
                    tp += 1;
                }
                curve.push((tp as f64 / npos as f64, tp as f64 / (k + 1) as f64));
            }
            let mut sum = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                let best = curve.iter().filter(|(rec, _)| *rec >= level).map(|(_, p)| *p).fold(0.0, f64::max);
                sum += best;
            }
            ap[c as usize][t] = Some(sum / 101.0);
            recall[c as usize][t] = Some(tp as f64 / npos as f64);
        }
    }
    let mean = |m: &Vec<Vec<Option<f64>>>| {
        let v: Vec<f64> = m.iter().flatten().flatten().copied().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    OracleReport { map: mean(&ap), ar: mean(&recall), ap, recall }
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare on an absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64) -> BBox {
    let bw = rng.random_range(2.0..w * 0.5);
    let bh = rng.random_range(2.0..h * 0.5);
    let x = rng.random_range(0.0..w - bw);
    let y = rng.random_range(0.0..h - bh);
    BBox::new(x, y, x + bw, y + bh)
}

pub fn jitter<R: Rng>(rng: &mut R, b: &BBox, amount: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    BBox::new(
        b.x1 + rng.random_range(-amount..amount) * w,
        b.y1 + rng.random_range(-amount..amount) * h,
        b.x2 + rng.random_range(-amount..amount) * w,
        b.y2 + rng.random_range(-amount..amount) * h,
    )
    .normalize()
}

/// Up to `max` detections of one class, clustered so that overlaps are common.
pub fn random_nms_instance<R: Rng>(rng: &mut R, max: usize) -> Vec<Detection> {
    let n = rng.random_range(1..=max);
    let anchors: Vec<BBox> = (0..rng.random_range(1..=3)).map(|_| random_box(rng, 100.0, 100.0)).collect();
    (0..n)
        .map(|_| {
            let a = anchors[rng.random_range(0..anchors.len())];
            let b = if rng.random_bool(0.2) { random_box(rng, 100.0, 100.0) } else { jitter(rng, &a, 0.25) };
            Detection::new(b, rng.random_range(0.0..1.0), 0, ChannelId(rng.random_range(0..3)))
        })
        .collect()
}

pub struct HeadInstance {
    pub params: tta_core::mean_teacher::ParamVector,
    pub dets: Vec<Detection>,
    pub teacher_out: Vec<Detection>,
    pub frame: tta_core::mean_teacher::FrameSize,
    pub cfg: tta_core::mean_teacher::MtConfig,
}

/// Calibration-head instance with a teacher close enough to the student
/// that most outputs pair up. Some boxes hang over the frame edge so the
/// clipping mask is exercised, and half the instances use a small smooth-L1
/// beta so the linear branch is reached.
pub fn random_head_instance<R: Rng>(rng: &mut R) -> HeadInstance {
    use tta_core::mean_teacher::{head_apply, FrameSize, MtConfig, ParamVector};
    let num_classes = rng.random_range(1..=3);
    let frame = FrameSize::new(120.0, 90.0);
    let perturbed = |rng: &mut R, spread: f64| {
        let mut p = ParamVector::identity(num_classes);
        for v in p.values.iter_mut() {
            *v += rng.random_range(-spread..spread);
        }
        p
    };
    let params = perturbed(rng, 0.3);
    let teacher = perturbed(rng, 0.3);
    let dets: Vec<Detection> = (0..rng.random_range(1..=6))
        .map(|_| {
            let b = random_box(rng, 140.0, 110.0).translate(-10.0, -10.0);
            Detection::new(b, rng.random_range(0.02..0.98), rng.random_range(0..num_classes as u32), ChannelId(0))
        })
        .collect();
    let teacher_out = head_apply(&teacher, &dets, frame).unwrap();
    let cfg = MtConfig {
        smooth_l1_beta: if rng.random_bool(0.5) { 1.0 } else { 0.02 },
        score_loss_weight: rng.random_range(0.5..2.0),
        box_loss_weight: rng.random_range(0.5..2.0),
        ..MtConfig::default()
    };
    HeadInstance { params, dets, teacher_out, frame, cfg }
}

/// Largest relative error between the analytic gradient and central
/// differences at `h`. `None` when the loss has a kink within `h` of the
/// point (pairing flip, clip boundary, smooth-L1 knee), detected by
/// disagreeing one-sided differences.
pub fn head_gradient_error(inst: &HeadInstance, h: f64) -> Option<f64> {
    use tta_core::mean_teacher::{head_loss, mt_gradient, ParamVector};
    let loss = |v: &[f64]| {
        let p = ParamVector::from_values(inst.params.num_classes, v.to_vec()).unwrap();
        head_loss(&p, &inst.dets, &inst.teacher_out, inst.frame, &inst.cfg).unwrap()
    };
    let x = &inst.params.values;
    let f0 = loss(x);
    let mut probe = x.clone();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = (loss(&probe) - f0) / h;
        probe[k] = x[k] - h;
        let down = (f0 - loss(&probe)) / h;
        probe[k] = x[k];
        if (up - down).abs() > 1e-3 * up.abs().max(down.abs()).max(1e-2) {
            return None;
        }
    }
    let (grad, _) = mt_gradient(&inst.params, &inst.dets, &inst.teacher_out, inst.frame, &inst.cfg).unwrap();
    let fd = central_differences(x, h, loss);
    Some(grad.values.iter().zip(&fd).map(|(&a, &b)| relative_error(a, b)).fold(0.0, f64::max))
}
