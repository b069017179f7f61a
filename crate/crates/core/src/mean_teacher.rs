//! Mean-teacher adaptation of a detection calibration head.
//!
//! The adaptable surface is a small head applied on top of a detector's
//! output: per-class score calibration `sigmoid(a_c * logit(s) + b_c)` and
//! a global box correction `(d_x, d_y, d_w, d_h)` relative to box size. The
//! student is trained toward the teacher's output with MSE on scores and
//! smooth-L1 on normalized center-form box deltas; the teacher follows the
//! student by EMA, and the student is stochastically restored to the source
//! parameters after every applied step.

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{clip_box, iou, BBox, Detection};
use crate::math::{logit, sigmoid};

pub const SCORE_EPS: f64 = 1e-4;
/// Student/teacher pairs must overlap at least this much.
pub const PAIR_IOU: f64 = 0.5;
const MIN_TEACHER_SIZE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MtError {
    LayoutMismatch { left: usize, right: usize },
    ClassOutOfRange { class_id: u32, num_classes: usize },
    InvalidConfig(&'static str),
}

impl fmt::Display for MtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MtError::LayoutMismatch { left, right } => {
                write!(f, "parameter layouts differ: {left} vs {right} classes")
            }
            MtError::ClassOutOfRange { class_id, num_classes } => {
                write!(f, "class {class_id} outside the head's {num_classes} classes")
            }
            MtError::InvalidConfig(msg) => write!(f, "invalid mean-teacher config: {msg}"),
        }
    }
}

impl core::error::Error for MtError {}

/// Flat parameter bank: `[a_0..a_C, b_0..b_C, d_x, d_y, d_w, d_h]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct ParamVector {
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn len_for(num_classes: usize) -> usize {
        2 * num_classes + 4
    }

    /// The untrained head: unit scale, zero shift, zero box correction.
    pub fn identity(num_classes: usize) -> Self {
        let mut values = alloc::vec![0.0; Self::len_for(num_classes)];
        values[..num_classes].fill(1.0);
        Self { num_classes, values }
    }

    pub fn zeros(num_classes: usize) -> Self {
        Self { num_classes, values: alloc::vec![0.0; Self::len_for(num_classes)] }
    }

    pub fn from_values(num_classes: usize, values: Vec<f64>) -> Result<Self, MtError> {
        if values.len() != Self::len_for(num_classes) {
            return Err(MtError::InvalidConfig("parameter count does not match class count"));
        }
        Ok(Self { num_classes, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scale_index(&self, class: usize) -> usize {
        class
    }

    pub fn shift_index(&self, class: usize) -> usize {
        self.num_classes + class
    }

    pub fn box_index(&self) -> usize {
        2 * self.num_classes
    }

    pub fn score_scale(&self, class: usize) -> f64 {
        self.values[self.scale_index(class)]
    }

    pub fn score_shift(&self, class: usize) -> f64 {
        self.values[self.shift_index(class)]
    }

    /// `(d_x, d_y, d_w, d_h)`.
    pub fn box_offset(&self) -> [f64; 4] {
        let i = self.box_index();
        [self.values[i], self.values[i + 1], self.values[i + 2], self.values[i + 3]]
    }

    fn check_layout(&self, other: &ParamVector) -> Result<(), MtError> {
        if self.num_classes != other.num_classes || self.values.len() != other.values.len() {
            return Err(MtError::LayoutMismatch { left: self.num_classes, right: other.num_classes });
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

impl FrameSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone, Copy)]
struct HeadTrace {
    logit_in: f64,
    score: f64,
    size: (f64, f64),
    // unclipped corners
    raw: BBox,
}

fn head_forward(params: &ParamVector, det: &Detection, frame: FrameSize) -> Result<(Detection, HeadTrace), MtError> {
    let class = det.class_id as usize;
    if class >= params.num_classes {
        return Err(MtError::ClassOutOfRange { class_id: det.class_id, num_classes: params.num_classes });
    }
    let logit_in = logit(det.score.clamp(SCORE_EPS, 1.0 - SCORE_EPS));
    let score = sigmoid(params.score_scale(class) * logit_in + params.score_shift(class));

    let [dx, dy, dw, dh] = params.box_offset();
    let b = det.bbox;
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = b.center();
    let raw = BBox::from_center(cx + dx * w, cy + dy * h, w * (1.0 + dw), h * (1.0 + dh));
    let out = Detection { bbox: clip_box(&raw, frame.width, frame.height), score, ..*det };
    Ok((out, HeadTrace { logit_in, score, size: (w, h), raw }))
}

/// Applies the calibration head to every detection.
pub fn head_apply(params: &ParamVector, dets: &[Detection], frame: FrameSize) -> Result<Vec<Detection>, MtError> {
    dets.iter().map(|d| head_forward(params, d, frame).map(|(o, _)| o)).collect()
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_derivative(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct MtConfig {
    /// Student weight in `teacher <- (1 - alpha) * teacher + alpha * student`.
    pub ema_alpha: f64,
    pub lr: f64,
    /// Per-parameter probability of resetting the student to the source.
    pub restore_p: f64,
    /// Frames per applied gradient step.
    pub step_every: usize,
    pub smooth_l1_beta: f64,
    pub score_loss_weight: f64,
    pub box_loss_weight: f64,
}

impl Default for MtConfig {
    fn default() -> Self {
        Self {
            ema_alpha: 0.0001,
            lr: 0.00005,
            restore_p: 0.1,
            step_every: 2,
            smooth_l1_beta: 1.0,
            score_loss_weight: 1.0,
            box_loss_weight: 1.0,
        }
    }
}

impl MtConfig {
    pub fn validate(&self) -> Result<(), MtError> {
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(MtError::InvalidConfig("ema_alpha must lie in (0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(MtError::InvalidConfig("lr must be a non-negative finite number"));
        }
        if !(0.0..=1.0).contains(&self.restore_p) {
            return Err(MtError::InvalidConfig("restore_p must lie in [0, 1]"));
        }
        if self.step_every == 0 {
            return Err(MtError::InvalidConfig("step_every must be at least 1"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(MtError::InvalidConfig("smooth_l1_beta must be positive"));
        }
        if self.score_loss_weight < 0.0 || self.box_loss_weight < 0.0 {
            return Err(MtError::InvalidConfig("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Greedy same-class pairing: teacher pseudo-labels in descending score each
/// take the unpaired student detection of highest IoU (at least
/// [`PAIR_IOU`]). Returns `(student, teacher)` index pairs.
pub fn pair_outputs(student: &[Detection], teacher: &[Detection]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..teacher.len()).collect();
    order.sort_by(|&a, &b| teacher[b].score.partial_cmp(&teacher[a].score).unwrap_or(core::cmp::Ordering::Equal));
    let mut used = alloc::vec![false; student.len()];
    let mut pairs = Vec::new();
    for t in order {
        let mut best: Option<(usize, f64)> = None;
        for (s, det) in student.iter().enumerate() {
            if used[s] || det.class_id != teacher[t].class_id {
                continue;
            }
            let o = iou(&det.bbox, &teacher[t].bbox);
            if o >= PAIR_IOU && best.is_none_or(|(_, b)| o > b) {
                best = Some((s, o));
            }
        }
        if let Some((s, _)) = best {
            used[s] = true;
            pairs.push((s, t));
        }
    }
    pairs
}

fn box_deltas(student: &BBox, teacher: &BBox) -> ([f64; 4], (f64, f64)) {
    let (scx, scy) = student.center();
    let (tcx, tcy) = teacher.center();
    let tw = teacher.width().max(MIN_TEACHER_SIZE);
    let th = teacher.height().max(MIN_TEACHER_SIZE);
    (
        [(scx - tcx) / tw, (scy - tcy) / th, (student.width() - tw) / tw, (student.height() - th) / th],
        (tw, th),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PairTerm {
    pub student: usize,
    pub teacher: usize,
    pub score_sq: f64,
    pub box_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MtLoss {
    pub loss: f64,
    pub pairs: Vec<PairTerm>,
}

/// Squared score gap and summed smooth-L1 over the four center-form box
/// deltas, each normalized by the teacher box size.
pub fn pair_term(student: &Detection, teacher: &Detection, beta: f64) -> (f64, f64) {
    let gap = student.score - teacher.score;
    let (deltas, _) = box_deltas(&student.bbox, &teacher.bbox);
    (gap * gap, deltas.iter().map(|&d| smooth_l1(d, beta)).sum())
}

/// Mean-teacher loss between student output and teacher pseudo-labels.
/// No pairs means zero loss.
pub fn mt_loss(student_out: &[Detection], teacher_out: &[Detection], cfg: &MtConfig) -> MtLoss {
    let pairs: Vec<PairTerm> = pair_outputs(student_out, teacher_out)
        .into_iter()
        .map(|(s, t)| {
            let (score_sq, box_l1) = pair_term(&student_out[s], &teacher_out[t], cfg.smooth_l1_beta);
            PairTerm { student: s, teacher: t, score_sq, box_l1 }
        })
        .collect();
    if pairs.is_empty() {
        return MtLoss::default();
    }
    let n = pairs.len() as f64;
    let score: f64 = pairs.iter().map(|p| p.score_sq).sum::<f64>() / n;
    let boxes: f64 = pairs.iter().map(|p| p.box_l1).sum::<f64>() / n;
    MtLoss { loss: cfg.score_loss_weight * score + cfg.box_loss_weight * boxes, pairs }
}

/// Loss of the head at `params` against fixed teacher output.
pub fn head_loss(
    params: &ParamVector,
    dets: &[Detection],
    teacher_out: &[Detection],
    frame: FrameSize,
    cfg: &MtConfig,
) -> Result<f64, MtError> {
    Ok(mt_loss(&head_apply(params, dets, frame)?, teacher_out, cfg).loss)
}

fn inside(v: f64, hi: f64) -> f64 {
    if v > 0.0 && v < hi {
        1.0
    } else {
        0.0
    }
}

/// Analytic gradient of [`head_loss`] with respect to `params`; the teacher
/// output is a constant. Also returns the loss.
pub fn mt_gradient(
    params: &ParamVector,
    dets: &[Detection],
    teacher_out: &[Detection],
    frame: FrameSize,
    cfg: &MtConfig,
) -> Result<(ParamVector, MtLoss), MtError> {
    let mut outs = Vec::with_capacity(dets.len());
    let mut traces = Vec::with_capacity(dets.len());
    for d in dets {
        let (o, t) = head_forward(params, d, frame)?;
        outs.push(o);
        traces.push(t);
    }
    let loss = mt_loss(&outs, teacher_out, cfg);
    let mut grad = ParamVector::zeros(params.num_classes);
    if loss.pairs.is_empty() {
        return Ok((grad, loss));
    }
    let n = loss.pairs.len() as f64;
    let bi = grad.box_index();
    for p in &loss.pairs {
        let out = &outs[p.student];
        let tr = &traces[p.student];
        let class = out.class_id as usize;

        let ds = cfg.score_loss_weight / n * 2.0 * (tr.score - teacher_out[p.teacher].score);
        let dz = ds * tr.score * (1.0 - tr.score);
        grad.values[class] += dz * tr.logit_in;
        grad.values[params.num_classes + class] += dz;

        let (deltas, (tw, th)) = box_deltas(&out.bbox, &teacher_out[p.teacher].bbox);
        let g = deltas.map(|d| cfg.box_loss_weight / n * smooth_l1_derivative(d, cfg.smooth_l1_beta));
        let (dcx, dcy, dwo, dho) = (g[0] / tw, g[1] / th, g[2] / tw, g[3] / th);
        let gx1 = (0.5 * dcx - dwo) * inside(tr.raw.x1, frame.width);
        let gx2 = (0.5 * dcx + dwo) * inside(tr.raw.x2, frame.width);
        let gy1 = (0.5 * dcy - dho) * inside(tr.raw.y1, frame.height);
        let gy2 = (0.5 * dcy + dho) * inside(tr.raw.y2, frame.height);
        let (w, h) = tr.size;
        grad.values[bi] += (gx1 + gx2) * w;
        grad.values[bi + 1] += (gy1 + gy2) * h;
        grad.values[bi + 2] += (gx2 - gx1) * 0.5 * w;
        grad.values[bi + 3] += (gy2 - gy1) * 0.5 * h;
    }
    Ok((grad, loss))
}

/// `teacher' = (1 - alpha) * teacher + alpha * student`, element-wise.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, alpha: f64) -> Result<ParamVector, MtError> {
    teacher.check_layout(student)?;
    let values = teacher
        .values
        .iter()
        .zip(&student.values)
        // equal entries stay bit-identical
        .map(|(&t, &s)| if t == s { t } else { (1.0 - alpha) * t + alpha * s })
        .collect();
    Ok(ParamVector { num_classes: teacher.num_classes, values })
}

/// Resets each student parameter to its source value with probability `p`.
/// One uniform draw is consumed per parameter regardless of `p`.
pub fn stochastic_restore<R: Rng + ?Sized>(
    student: &ParamVector,
    source: &ParamVector,
    p: f64,
    rng: &mut R,
) -> Result<ParamVector, MtError> {
    student.check_layout(source)?;
    let values = student
        .values
        .iter()
        .zip(&source.values)
        .map(|(&s, &src)| if rng.random::<f64>() < p { src } else { s })
        .collect();
    Ok(ParamVector { num_classes: student.num_classes, values })
}

/// Serializable position of the restoration RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Adaptation state owned by one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub student: ParamVector,
    pub teacher: ParamVector,
    pub source: ParamVector,
    /// Frames seen.
    pub step_counter: u64,
    /// Gradient steps applied.
    pub applied_steps: u64,
    pub pending_gradient: ParamVector,
    pub rng: ChaCha8Rng,
}

impl AdaptState {
    /// Student and teacher both start from `source`.
    pub fn new(source: ParamVector, seed: u64) -> Self {
        Self {
            student: source.clone(),
            teacher: source.clone(),
            pending_gradient: ParamVector::zeros(source.num_classes),
            source,
            step_counter: 0,
            applied_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn checkpoint(&self) -> AdaptCheckpoint {
        AdaptCheckpoint {
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            source: self.source.clone(),
            step_counter: self.step_counter,
            applied_steps: self.applied_steps,
            pending_gradient: self.pending_gradient.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(c: &AdaptCheckpoint) -> Result<Self, MtError> {
        c.student.check_layout(&c.source)?;
        c.teacher.check_layout(&c.source)?;
        c.pending_gradient.check_layout(&c.source)?;
        Ok(Self {
            student: c.student.clone(),
            teacher: c.teacher.clone(),
            source: c.source.clone(),
            step_counter: c.step_counter,
            applied_steps: c.applied_steps,
            pending_gradient: c.pending_gradient.clone(),
            rng: c.rng.restore(),
        })
    }
}

/// JSON-friendly snapshot of [`AdaptState`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct AdaptCheckpoint {
    pub student: ParamVector,
    pub teacher: ParamVector,
    pub source: ParamVector,
    pub step_counter: u64,
    pub applied_steps: u64,
    pub pending_gradient: ParamVector,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutput {
    pub student_out: Vec<Detection>,
    pub teacher_out: Vec<Detection>,
    pub loss: f64,
    /// Whether this frame completed an accumulation window.
    pub applied: bool,
}

/// One frame of mean-teacher adaptation.
///
/// The gradient of the frame's loss is accumulated; every `step_every`
/// frames the student takes a step with the averaged gradient, is
/// stochastically restored, and the teacher absorbs it by EMA.
pub fn adapt_step(
    state: &mut AdaptState,
    dets: &[Detection],
    frame: FrameSize,
    cfg: &MtConfig,
) -> Result<AdaptOutput, MtError> {
    let teacher_out = head_apply(&state.teacher, dets, frame)?;
    let student_out = head_apply(&state.student, dets, frame)?;
    let (grad, loss) = mt_gradient(&state.student, dets, &teacher_out, frame, cfg)?;
    for (acc, g) in state.pending_gradient.values.iter_mut().zip(&grad.values) {
        *acc += g;
    }
    state.step_counter += 1;

    let applied = state.step_counter.is_multiple_of(cfg.step_every as u64);
    if applied {
        let scale = cfg.lr / cfg.step_every as f64;
        for (p, g) in state.student.values.iter_mut().zip(&state.pending_gradient.values) {
            *p -= scale * g;
        }
        state.pending_gradient.values.fill(0.0);
        state.student = stochastic_restore(&state.student, &state.source, cfg.restore_p, &mut state.rng)?;
        state.teacher = ema_update(&state.teacher, &state.student, cfg.ema_alpha)?;
        state.applied_steps += 1;
    }
    Ok(AdaptOutput { student_out, teacher_out, loss: loss.loss, applied })
}
