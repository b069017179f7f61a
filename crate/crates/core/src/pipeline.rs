//! Per-frame orchestration.
//!
//! For every frame: visibility boost, domain prediction on the boosted
//! frame, then either the night path (night channel alone, Soft-NMS, no
//! adaptation) or the ensemble path (mean-teacher step on the multi-domain
//! channel, scheduled weighting, fusion of all day channels).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::domain::{extract_features, predict_domain, DiscriminatorModel, DomainLabel};
use crate::evaluation::FrameId;
use crate::fusion::{fuse_ensemble, suppress_classwise, weight_detections, FusionConfig, FusionError, WeightedChannel};
use crate::geometry::{ChannelId, Detection};
use crate::imaging::{visibility_boost, Image, VisibilityConfig};
use crate::mean_teacher::{adapt_step, AdaptState, FrameSize, MtConfig, MtError, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ChannelRole {
    /// Detector trained on the source domain only.
    Source,
    /// Detector trained on domain-augmented data; the one that adapts.
    MultiDomain,
    /// Additional detector that diversifies the ensemble.
    Auxiliary,
    /// Low-light specialist used on frames routed to night.
    Night,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ChannelSpec {
    pub id: ChannelId,
    pub name: String,
    pub role: ChannelRole,
}

impl ChannelSpec {
    pub fn new(id: u16, name: impl Into<String>, role: ChannelRole) -> Self {
        Self { id: ChannelId(id), name: name.into(), role }
    }
}

/// Linear ramp of the source channel's weight.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct EnsembleSchedule {
    pub initial_source_weight: f64,
    pub ramp_frames: u64,
}

impl Default for EnsembleSchedule {
    fn default() -> Self {
        Self { initial_source_weight: 0.3, ramp_frames: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RoleWeights {
    pub source: f64,
    pub multi_domain: f64,
    pub auxiliary: f64,
}

impl RoleWeights {
    pub fn for_role(&self, role: ChannelRole) -> f64 {
        match role {
            ChannelRole::Source => self.source,
            ChannelRole::MultiDomain => self.multi_domain,
            ChannelRole::Auxiliary => self.auxiliary,
            ChannelRole::Night => 1.0,
        }
    }
}

/// `source = min(1, w0 + (1 - w0) * t / T)`, exactly 1 from frame `T` on;
/// every other day channel has weight 1.
pub fn schedule_weights(frame_index: u64, sched: &EnsembleSchedule) -> RoleWeights {
    let w0 = sched.initial_source_weight;
    let source = if frame_index >= sched.ramp_frames {
        1.0
    } else {
        (w0 + (1.0 - w0) * frame_index as f64 / sched.ramp_frames as f64).min(1.0)
    };
    RoleWeights { source, multi_domain: 1.0, auxiliary: 1.0 }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct PipelineConfig {
    pub num_classes: usize,
    pub night_routing: bool,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub visibility: VisibilityConfig,
    pub mean_teacher: MtConfig,
    pub schedule: EnsembleSchedule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            night_routing: true,
            seed: 0,
            fusion: FusionConfig::default(),
            visibility: VisibilityConfig::default(),
            mean_teacher: MtConfig::default(),
            schedule: EnsembleSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    InvalidConfig(String),
    MissingChannel { frame_id: FrameId, channel: String },
    Fusion(FusionError),
    Adaptation(MtError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::InvalidConfig(msg) => write!(f, "invalid pipeline config: {msg}"),
            PipelineError::MissingChannel { frame_id, channel } => {
                write!(f, "frame {frame_id}: no detections supplied for channel `{channel}`")
            }
            PipelineError::Fusion(e) => write!(f, "{e}"),
            PipelineError::Adaptation(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for PipelineError {}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        PipelineError::Fusion(e)
    }
}

impl From<MtError> for PipelineError {
    fn from(e: MtError) -> Self {
        PipelineError::Adaptation(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum Route {
    Night,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ChannelWeight {
    pub channel: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FrameResult {
    pub frame_id: FrameId,
    pub frame_index: u64,
    pub route: Route,
    /// `None` when no discriminator is configured.
    pub domain: Option<DomainLabel>,
    pub night_probability: Option<f64>,
    pub visibility_applied: bool,
    pub channel_weights: Vec<ChannelWeight>,
    pub detections: Vec<Detection>,
    /// Mean-teacher loss, present on the ensemble path when a multi-domain
    /// channel is configured.
    pub adaptation_loss: Option<f64>,
}

/// One stream's state machine.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    channels: Vec<ChannelSpec>,
    discriminator: Option<DiscriminatorModel>,
    adapt: AdaptState,
    frame_index: u64,
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::InvalidConfig(msg.into())
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        channels: Vec<ChannelSpec>,
        discriminator: Option<DiscriminatorModel>,
    ) -> Result<Self, PipelineError> {
        cfg.fusion.validate()?;
        cfg.mean_teacher.validate()?;
        cfg.visibility.validate().map_err(invalid)?;
        if !(0.0..=1.0).contains(&cfg.schedule.initial_source_weight) {
            return Err(invalid("initial_source_weight must lie in [0, 1]"));
        }
        if cfg.schedule.ramp_frames == 0 {
            return Err(invalid("ramp_frames must be positive"));
        }
        if cfg.num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        let count = |role| channels.iter().filter(|c| c.role == role).count();
        if channels.iter().all(|c| c.role == ChannelRole::Night) {
            return Err(invalid("at least one non-night channel is required"));
        }
        if count(ChannelRole::Source) > 1 || count(ChannelRole::MultiDomain) > 1 {
            return Err(invalid("at most one source and one multi_domain channel are allowed"));
        }
        if count(ChannelRole::Night) > 1 {
            return Err(invalid("at most one night channel is allowed"));
        }
        for (i, a) in channels.iter().enumerate() {
            if channels[..i].iter().any(|b| b.id == a.id || b.name == a.name) {
                return Err(invalid(alloc::format!("duplicate channel `{}`", a.name)));
            }
        }
        if cfg.night_routing {
            if count(ChannelRole::Night) != 1 {
                return Err(invalid("night routing needs exactly one night channel"));
            }
            if discriminator.is_none() {
                return Err(invalid("night routing needs a discriminator model"));
            }
        }
        if let Some(model) = &discriminator {
            model.validate().map_err(|e| invalid(alloc::format!("{e}")))?;
        }
        let adapt = AdaptState::new(ParamVector::identity(cfg.num_classes), cfg.seed);
        Ok(Self { cfg, channels, discriminator, adapt, frame_index: 0 })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn adapt_state(&self) -> &AdaptState {
        &self.adapt
    }

    /// Frames processed so far.
    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    /// Processes the next frame of the stream. `dets` must hold an entry
    /// (possibly empty) for every configured channel.
    pub fn process_frame(
        &mut self,
        img: &Image,
        frame_id: FrameId,
        dets: &BTreeMap<ChannelId, Vec<Detection>>,
    ) -> Result<FrameResult, PipelineError> {
        for ch in &self.channels {
            if !dets.contains_key(&ch.id) {
                return Err(PipelineError::MissingChannel { frame_id, channel: ch.name.clone() });
            }
        }
        let (boosted, visibility_applied) = visibility_boost(img, &self.cfg.visibility);
        let prediction = self.discriminator.as_ref().map(|m| predict_domain(m, &extract_features(&boosted)));
        let frame_index = self.frame_index;
        let night = self.cfg.night_routing && matches!(prediction, Some((DomainLabel::Night, _)));

        let mut result = FrameResult {
            frame_id,
            frame_index,
            route: if night { Route::Night } else { Route::Ensemble },
            domain: prediction.map(|p| p.0),
            night_probability: prediction.map(|p| p.1),
            visibility_applied,
            channel_weights: Vec::new(),
            detections: Vec::new(),
            adaptation_loss: None,
        };

        if night {
            let spec = self.channels.iter().find(|c| c.role == ChannelRole::Night).expect("validated");
            result.detections = suppress_classwise(&dets[&spec.id], &self.cfg.fusion.soft_nms)?;
            result.channel_weights.push(ChannelWeight { channel: spec.name.clone(), weight: 1.0 });
        } else {
            let frame = FrameSize::new(img.width() as f64, img.height() as f64);
            let weights = schedule_weights(frame_index, &self.cfg.schedule);
            let mut inputs: Vec<(Vec<Detection>, f64)> = Vec::new();
            for spec in self.channels.iter().filter(|c| c.role != ChannelRole::Night) {
                let raw = &dets[&spec.id];
                let used = if spec.role == ChannelRole::MultiDomain {
                    let out = adapt_step(&mut self.adapt, raw, frame, &self.cfg.mean_teacher)?;
                    result.adaptation_loss = Some(out.loss);
                    out.student_out
                } else {
                    raw.clone()
                };
                let w = weights.for_role(spec.role);
                result.channel_weights.push(ChannelWeight { channel: spec.name.clone(), weight: w });
                inputs.push((used, w));
            }
            let weighted: Vec<WeightedChannel<'_>> =
                inputs.iter().map(|(d, w)| WeightedChannel::new(d, *w)).collect();
            result.detections = fuse_ensemble(&weighted, &self.cfg.fusion)?;
        }
        self.frame_index += 1;
        Ok(result)
    }
}

/// Re-weights detections of one channel according to the schedule; handy
/// for reproducing the ensemble inputs outside the pipeline.
pub fn scheduled_channel(dets: &[Detection], role: ChannelRole, frame_index: u64, sched: &EnsembleSchedule) -> Vec<Detection> {
    weight_detections(dets, schedule_weights(frame_index, sched).for_role(role))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::imaging::augment_night;
    use alloc::vec;

    #[test]
    fn schedule_examples() {
        let s = EnsembleSchedule { initial_source_weight: 0.3, ramp_frames: 1000 };
        let w = schedule_weights(0, &s);
        assert_eq!((w.source, w.multi_domain, w.auxiliary), (0.3, 1.0, 1.0));
        assert_eq!(schedule_weights(1000, &s).source, 1.0);
        assert_eq!(schedule_weights(5000, &s).source, 1.0);
        assert!((schedule_weights(500, &s).source - 0.65).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = EnsembleSchedule { initial_source_weight: 0.13, ramp_frames: 37 };
        let w: Vec<f64> = (0..60).map(|t| schedule_weights(t, &s).source).collect();
        assert!(w.windows(2).all(|p| p[1] >= p[0]));
        assert_eq!(w[37], 1.0);
    }

    fn channels() -> Vec<ChannelSpec> {
        vec![
            ChannelSpec::new(0, "source", ChannelRole::Source),
            ChannelSpec::new(1, "multi", ChannelRole::MultiDomain),
            ChannelSpec::new(2, "aux", ChannelRole::Auxiliary),
            ChannelSpec::new(3, "night", ChannelRole::Night),
        ]
    }

    // Night iff the frame is dark.
    fn darkness_model() -> DiscriminatorModel {
        DiscriminatorModel { weights: [-20.0, 0.0, 0.0, 0.0], bias: 6.0, ..Default::default() }
    }

    fn frame_dets() -> BTreeMap<ChannelId, Vec<Detection>> {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        (0..4u16).map(|c| (ChannelId(c), vec![Detection::new(b, 0.8, 0, ChannelId(c))])).collect()
    }

    fn day_image() -> Image {
        Image::from_fn(48, 32, |x, y| [0.3 + 0.01 * x as f64, 0.5, 0.2 + 0.02 * y as f64])
    }

    #[test]
    fn dark_frame_takes_night_path() {
        let mut p = Pipeline::new(PipelineConfig::default(), channels(), Some(darkness_model())).unwrap();
        let dark = augment_night(&day_image(), 2.0, 0.3);
        let r = p.process_frame(&dark, FrameId(0), &frame_dets()).unwrap();
        assert_eq!(r.route, Route::Night);
        assert!(r.adaptation_loss.is_none());
        assert!(r.detections.iter().all(|d| d.channel == ChannelId(3)));
        assert_eq!(p.adapt_state().step_counter, 0);
    }

    #[test]
    fn bright_frame_takes_ensemble_path() {
        let mut p = Pipeline::new(PipelineConfig::default(), channels(), Some(darkness_model())).unwrap();
        let r = p.process_frame(&day_image(), FrameId(0), &frame_dets()).unwrap();
        assert_eq!(r.route, Route::Ensemble);
        assert!(r.adaptation_loss.is_some());
        assert_eq!(r.channel_weights.len(), 3);
        assert_eq!(r.detections.len(), 1);
    }

    #[test]
    fn routing_disabled_ignores_discriminator() {
        let cfg = PipelineConfig { night_routing: false, ..Default::default() };
        let mut p = Pipeline::new(cfg, channels(), Some(darkness_model())).unwrap();
        let dark = augment_night(&day_image(), 2.0, 0.3);
        let r = p.process_frame(&dark, FrameId(0), &frame_dets()).unwrap();
        assert_eq!(r.route, Route::Ensemble);
        assert_eq!(r.domain, Some(DomainLabel::Night));
    }

    #[test]
    fn missing_channel_named_in_error() {
        let mut p = Pipeline::new(PipelineConfig::default(), channels(), Some(darkness_model())).unwrap();
        let mut dets = frame_dets();
        dets.remove(&ChannelId(2));
        match p.process_frame(&day_image(), FrameId(7), &dets) {
            Err(PipelineError::MissingChannel { frame_id, channel }) => {
                assert_eq!(frame_id, FrameId(7));
                assert_eq!(channel, "aux");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_checks() {
        assert!(Pipeline::new(PipelineConfig::default(), channels(), None).is_err());
        let night_only = vec![ChannelSpec::new(0, "n", ChannelRole::Night)];
        let cfg = PipelineConfig { night_routing: false, ..Default::default() };
        assert!(Pipeline::new(cfg.clone(), night_only, None).is_err());
        let dup = vec![ChannelSpec::new(0, "a", ChannelRole::Source), ChannelSpec::new(0, "b", ChannelRole::Auxiliary)];
        assert!(Pipeline::new(cfg.clone(), dup, None).is_err());
        let day_only = vec![ChannelSpec::new(0, "a", ChannelRole::Source)];
        assert!(Pipeline::new(cfg, day_only, None).is_ok());
    }
}
