//! Synthetic domain-shift streams.
//!
//! Frames are a sky gradient with filled rectangles standing in for
//! objects; the frame's condition (day, night, dusk, fog) is applied with
//! the `imaging` transforms. Every channel turns the ground truth into
//! detections through its own error model for that condition.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tta_core::domain::DomainLabel;
use tta_core::evaluation::GroundTruth;
use tta_core::imaging::{augment_fog, augment_night, color_temperature, quantize, write_ppm, Image};
use tta_core::pipeline::ChannelRole;
use tta_core::{BBox, ChannelId, Detection};

use crate::error::{write, HarnessError, Result};
use crate::formats::{write_jsonl, DetectionRecord, GtRecord};
use crate::manifest::{FrameEntry, FrameManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Day,
    Night,
    Dusk,
    Fog,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Self::Day => "day",
            Self::Night => "night",
            Self::Dusk => "dusk",
            Self::Fog => "fog",
        }
    }

    pub fn label(self) -> DomainLabel {
        DomainLabel::from_condition(self.name()).expect("known condition")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub condition: Condition,
    pub frames: usize,
}

/// How a channel corrupts ground truth in one condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    /// Corner jitter, as a fraction of the box side.
    pub loc_sigma: f64,
    /// True-positive scores are `1 - score_sigma * |z|`.
    pub score_sigma: f64,
    pub miss_rate: f64,
    /// Chance, per ground-truth object, of an extra false positive.
    pub fp_rate: f64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self { loc_sigma: 0.05, score_sigma: 0.2, miss_rate: 0.1, fp_rate: 0.1 }
    }
}

impl ErrorModel {
    pub const NOISELESS: Self = Self { loc_sigma: 0.0, score_sigma: 0.0, miss_rate: 0.0, fp_rate: 0.0 };

    fn new(loc_sigma: f64, score_sigma: f64, miss_rate: f64, fp_rate: f64) -> Self {
        Self { loc_sigma, score_sigma, miss_rate, fp_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthChannel {
    pub name: String,
    pub role: ChannelRole,
    pub errors: BTreeMap<Condition, ErrorModel>,
}

fn default_width() -> usize {
    64
}

fn default_height() -> usize {
    48
}

fn default_classes() -> u32 {
    1
}

fn default_objects() -> [usize; 2] {
    [2, 5]
}

fn default_beta() -> [f64; 2] {
    [2.0, 5.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_classes")]
    pub num_classes: u32,
    /// Inclusive range of objects per frame.
    #[serde(default = "default_objects")]
    pub objects_per_frame: [usize; 2],
    pub timeline: Vec<Segment>,
    #[serde(default)]
    pub channels: Vec<SynthChannel>,
    /// Beta distribution of false-positive scores.
    #[serde(default = "default_beta")]
    pub fp_score_beta: [f64; 2],
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.width < 16 || self.height < 16 {
            return bad("frames must be at least 16x16".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let [lo, hi] = self.objects_per_frame;
        if lo > hi {
            return bad("objects_per_frame must be an increasing pair".into());
        }
        let covered: usize = self.timeline.iter().map(|s| s.frames).sum();
        if covered != self.frames {
            return bad(format!("timeline covers {covered} frames, expected {}", self.frames));
        }
        if !self.fp_score_beta.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return bad("fp_score_beta parameters must be positive".into());
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if !safe_name(&ch.name) {
                return bad(format!("channel name `{}` must be non-empty [A-Za-z0-9_-]", ch.name));
            }
            if self.channels[..i].iter().any(|c| c.name == ch.name) {
                return bad(format!("duplicate channel `{}`", ch.name));
            }
            for seg in &self.timeline {
                if !ch.errors.contains_key(&seg.condition) {
                    return bad(format!("channel `{}` has no error model for {}", ch.name, seg.condition.name()));
                }
            }
            for (cond, m) in &ch.errors {
                let rates = [m.miss_rate, m.fp_rate];
                if !rates.iter().all(|r| (0.0..=1.0).contains(r)) {
                    return bad(format!("channel `{}` {}: rates must lie in [0, 1]", ch.name, cond.name()));
                }
                if !(m.loc_sigma >= 0.0 && m.score_sigma >= 0.0) {
                    return bad(format!("channel `{}` {}: sigmas must be non-negative", ch.name, cond.name()));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| HarnessError::Parse { path: path.into(), line: e.line(), message: e.to_string() })
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::config(path, e.message().to_string()))
        }
    }

    pub fn condition_at(&self, index: usize) -> Condition {
        let mut start = 0;
        for s in &self.timeline {
            if index < start + s.frames {
                return s.condition;
            }
            start += s.frames;
        }
        self.timeline.last().map_or(Condition::Day, |s| s.condition)
    }

    /// The domain-shift benchmark: day, night, fog, day, 500 frames each,
    /// a source / multi-domain / auxiliary trio that degrades at night and a
    /// night specialist that is weak in daylight.
    pub fn benchmark(seed: u64) -> Self {
        let seg = |condition, frames| Segment { condition, frames };
        let errors = |day: ErrorModel, fog: ErrorModel, night: ErrorModel| {
            BTreeMap::from([(Condition::Day, day), (Condition::Fog, fog), (Condition::Night, night), (Condition::Dusk, night)])
        };
        let channel = |name: &str, role, errors| SynthChannel { name: name.into(), role, errors };
        Self {
            seed,
            frames: 2000,
            width: 64,
            height: 48,
            num_classes: 2,
            objects_per_frame: [2, 4],
            timeline: vec![
                seg(Condition::Day, 500),
                seg(Condition::Night, 500),
                seg(Condition::Fog, 500),
                seg(Condition::Day, 500),
            ],
            channels: vec![
                channel(
                    "source",
                    ChannelRole::Source,
                    errors(ErrorModel::new(0.04, 0.15, 0.25, 0.15), ErrorModel::new(0.06, 0.25, 0.35, 0.2), ErrorModel::new(0.08, 0.3, 0.6, 0.3)),
                ),
                channel(
                    "multi_domain",
                    ChannelRole::MultiDomain,
                    errors(ErrorModel::new(0.05, 0.15, 0.25, 0.15), ErrorModel::new(0.05, 0.2, 0.3, 0.15), ErrorModel::new(0.07, 0.25, 0.6, 0.25)),
                ),
                channel(
                    "auxiliary",
                    ChannelRole::Auxiliary,
                    errors(ErrorModel::new(0.05, 0.2, 0.3, 0.2), ErrorModel::new(0.06, 0.25, 0.35, 0.2), ErrorModel::new(0.08, 0.3, 0.6, 0.3)),
                ),
                channel(
                    "night",
                    ChannelRole::Night,
                    errors(ErrorModel::new(0.06, 0.25, 0.6, 0.2), ErrorModel::new(0.07, 0.3, 0.6, 0.25), ErrorModel::new(0.04, 0.15, 0.1, 0.1)),
                ),
            ],
            fp_score_beta: default_beta(),
        }
    }

    /// Labelled day / night / dusk images without channels, for training
    /// the domain discriminator.
    pub fn corpus(seed: u64, frames: usize) -> Self {
        let night = frames * 3 / 10;
        let dusk = frames / 5;
        Self {
            seed,
            frames,
            width: 64,
            height: 48,
            num_classes: 1,
            objects_per_frame: [1, 4],
            timeline: vec![
                Segment { condition: Condition::Day, frames: frames - night - dusk },
                Segment { condition: Condition::Night, frames: night },
                Segment { condition: Condition::Dusk, frames: dusk },
            ],
            channels: Vec::new(),
            fp_score_beta: default_beta(),
        }
    }
}

/// One generated frame. The image is already quantized to 8 bits, so it
/// equals what a reader of the written PPM sees.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub frame_id: u64,
    pub condition: Condition,
    pub image: Image,
    pub objects: Vec<GroundTruth>,
    /// Per channel, in configuration order.
    pub detections: Vec<Vec<Detection>>,
}

/// Lazily generated stream; the same config always yields the same frames.
pub struct SynthStream<'a> {
    cfg: &'a SynthConfig,
    index: usize,
    scene: ChaCha8Rng,
    channels: Vec<ChaCha8Rng>,
    fp_scores: Beta<f64>,
}

pub fn synth_stream(cfg: &SynthConfig) -> Result<SynthStream<'_>> {
    cfg.validate()?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let [a, b] = cfg.fp_score_beta;
    Ok(SynthStream {
        cfg,
        index: 0,
        scene: stream(0),
        channels: (0..cfg.channels.len()).map(|i| stream(1 + i as u64)).collect(),
        fp_scores: Beta::new(a, b).map_err(|e| HarnessError::Invalid(e.to_string()))?,
    })
}

fn random_rect<R: Rng>(rng: &mut R, w: usize, h: usize) -> BBox {
    let bw = rng.random_range(w * 3 / 25..=w * 7 / 20);
    let bh = rng.random_range(h * 3 / 20..=h * 2 / 5);
    let x = rng.random_range(0..=w - bw);
    let y = rng.random_range(0..=h - bh);
    BBox::new(x as f64, y as f64, (x + bw) as f64, (y + bh) as f64)
}

fn render_scene<R: Rng>(rng: &mut R, cfg: &SynthConfig, objects: &[GroundTruth]) -> Image {
    let (w, h) = (cfg.width, cfg.height);
    let light = rng.random_range(0.85..1.05);
    let top = [0.55 * light, 0.7 * light, 0.95 * light];
    let bottom = [0.5 * light, 0.48 * light, 0.42 * light];
    let mut img = Image::from_fn(w, h, |_, y| {
        let t = y as f64 / (h - 1) as f64;
        core::array::from_fn(|c| ((1.0 - t) * top[c] + t * bottom[c]).clamp(0.0, 1.0))
    });
    for o in objects {
        let color: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.05..0.95));
        for y in o.bbox.y1 as usize..o.bbox.y2 as usize {
            for x in o.bbox.x1 as usize..o.bbox.x2 as usize {
                img.set_pixel(x, y, color);
            }
        }
    }
    img
}

fn apply_condition<R: Rng>(rng: &mut R, img: &Image, cond: Condition) -> Image {
    match cond {
        Condition::Day => img.clone(),
        Condition::Night => {
            let dark = augment_night(img, rng.random_range(1.8..2.6), rng.random_range(0.25..0.45));
            color_temperature(&dark, 0.85, 0.95, 1.1)
        }
        Condition::Dusk => {
            let dim = augment_night(img, rng.random_range(1.2..1.5), rng.random_range(0.55..0.7));
            color_temperature(&dim, 1.1, 0.95, 0.85)
        }
        Condition::Fog => augment_fog(img, rng.random_range(0.55..0.7), 0.8),
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

impl SynthStream<'_> {
    fn channel_detections(&mut self, ci: usize, cond: Condition, objects: &[GroundTruth]) -> Vec<Detection> {
        let cfg = self.cfg;
        let m = cfg.channels[ci].errors[&cond];
        let id = ChannelId(ci as u16);
        let (fw, fh) = (cfg.width as f64, cfg.height as f64);
        let rng = &mut self.channels[ci];
        let mut out = Vec::new();
        for o in objects {
            if rng.random::<f64>() < m.miss_rate {
                continue;
            }
            let b = o.bbox;
            let (w, h) = (b.width(), b.height());
            let jittered = BBox::new(
                b.x1 + m.loc_sigma * w * normal(rng),
                b.y1 + m.loc_sigma * h * normal(rng),
                b.x2 + m.loc_sigma * w * normal(rng),
                b.y2 + m.loc_sigma * h * normal(rng),
            )
            .clip(fw, fh);
            let score = (1.0 - m.score_sigma * normal(rng).abs()).clamp(0.0, 1.0);
            if jittered.area() > 0.0 {
                out.push(Detection::new(jittered, score, o.class_id, id));
            }
        }
        for _ in objects {
            if rng.random::<f64>() < m.fp_rate {
                let b = random_rect(rng, cfg.width, cfg.height);
                let class = rng.random_range(0..cfg.num_classes);
                out.push(Detection::new(b, self.fp_scores.sample(rng), class, id));
            }
        }
        out
    }
}

impl Iterator for SynthStream<'_> {
    type Item = SynthFrame;

    fn next(&mut self) -> Option<SynthFrame> {
        let cfg = self.cfg;
        if self.index >= cfg.frames {
            return None;
        }
        let cond = cfg.condition_at(self.index);
        let rng = &mut self.scene;
        let [lo, hi] = cfg.objects_per_frame;
        let objects: Vec<GroundTruth> = (0..rng.random_range(lo..=hi))
            .map(|_| GroundTruth::new(random_rect(rng, cfg.width, cfg.height), rng.random_range(0..cfg.num_classes)))
            .collect();
        let clean = render_scene(rng, cfg, &objects);
        let image = apply_condition(rng, &clean, cond).map_channels(|v| quantize(v) as f64 / 255.0);
        let detections = (0..cfg.channels.len()).map(|ci| self.channel_detections(ci, cond, &objects)).collect();
        let frame = SynthFrame { frame_id: self.index as u64, condition: cond, image, objects, detections };
        self.index += 1;
        Some(frame)
    }
}

pub fn frame_path(frame_id: u64) -> PathBuf {
    PathBuf::from(format!("frames/{frame_id:06}.ppm"))
}

pub fn channel_path(name: &str) -> PathBuf {
    PathBuf::from(format!("dets/{name}/detections.jsonl"))
}

/// Writes the stream under `out_dir` (`frames/`, `dets/<channel>/`,
/// `gt.jsonl`, `manifest.json`) and returns the manifest.
pub fn generate_synthetic_stream(cfg: &SynthConfig, out_dir: &Path) -> Result<FrameManifest> {
    let stream = synth_stream(cfg)?;
    std::fs::create_dir_all(out_dir.join("frames")).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut gt = Vec::new();
    let mut dets: Vec<Vec<DetectionRecord>> = vec![Vec::new(); cfg.channels.len()];
    let mut entries = Vec::with_capacity(cfg.frames);
    for f in stream {
        let image = frame_path(f.frame_id);
        write(&out_dir.join(&image), write_ppm(&f.image))?;
        gt.extend(f.objects.iter().map(|g| GtRecord::from_gt(f.frame_id, g)));
        for (ci, d) in f.detections.iter().enumerate() {
            let name = &cfg.channels[ci].name;
            dets[ci].extend(d.iter().map(|x| DetectionRecord::from_detection(f.frame_id, name, x)));
        }
        entries.push(FrameEntry {
            frame_id: f.frame_id,
            image,
            detections: cfg.channels.iter().map(|c| (c.name.clone(), channel_path(&c.name))).collect(),
            gt: Some(PathBuf::from("gt.jsonl")),
            domain: Some(f.condition.name().to_string()),
        });
    }
    write(&out_dir.join("gt.jsonl"), write_jsonl(&gt))?;
    for (ci, records) in dets.iter().enumerate() {
        write(&out_dir.join(channel_path(&cfg.channels[ci].name)), write_jsonl(records))?;
    }
    let manifest = FrameManifest { frames: entries };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&out_dir.join("manifest.json"), text)?;
    write(&out_dir.join("synth_config.json"), serde_json::to_string_pretty(cfg).expect("config serializes") + "\n")?;
    Ok(manifest)
}
