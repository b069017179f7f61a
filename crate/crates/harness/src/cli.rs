//! The `tta` command line.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use tta_core::domain::TrainConfig;
use tta_core::evaluation::{EvalConfig, FrameDetections, FrameGroundTruth, FrameId};
use tta_core::fusion::{fuse_ensemble, DecayMethod, FusionConfig, SoftNmsConfig, WeightedChannel};
use tta_core::imaging::{
    adjust_brightness, adjust_contrast, augment_fog, augment_night, augment_rain, color_temperature, write_ppm,
    VisibilityConfig,
};

use crate::config::RunConfig;
use crate::discriminator::{corpus_samples, train_with_holdout};
use crate::error::{write, HarnessError, Result};
use crate::formats::{group_detections, group_gt, parse_detections, parse_gt, write_jsonl, ChannelTable, DetectionRecord};
use crate::manifest::{load_image, parse_manifest};
use crate::run::{evaluate_parallel, pretty_json, run_to_dir, with_threads};
use crate::synth::{generate_synthetic_stream, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "tta", version, about = "Streaming test-time adaptation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 2,000-frame day/night/fog/day stream with four channels
    Benchmark,
    /// Labelled day/night/dusk images for discriminator training
    Corpus,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AugmentOp {
    Night,
    Fog,
    Rain,
    Brightness,
    Contrast,
    Temperature,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Gaussian,
    Linear,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stream (frames, detections, ground truth, manifest)
    Synth {
        /// Stream description (TOML or JSON); overrides --preset
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "benchmark")]
        preset: Preset,
        /// Frame count for the corpus preset
        #[arg(long, default_value_t = 4000)]
        frames: usize,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one image transform to a PPM file
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        op: AugmentOp,
        /// night: exponent applied to every channel
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        /// night: multiplier after the exponent
        #[arg(long, default_value_t = 0.35)]
        scale: f64,
        /// fog: blend weight of the haze
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        /// fog: haze luminance
        #[arg(long, default_value_t = 0.8)]
        fog_luma: f64,
        /// rain: number of streaks
        #[arg(long, default_value_t = 40)]
        streaks: usize,
        /// brightness: additive offset
        #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
        delta: f64,
        /// contrast: gain around the pivot
        #[arg(long, default_value_t = 1.5)]
        gain: f64,
        /// contrast: fixed point of the gain
        #[arg(long, default_value_t = 0.5)]
        pivot: f64,
        /// temperature: per-channel gains r,g,b
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.1, 1.0, 0.9])]
        rgb: Vec<f64>,
        /// rain: streak placement seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the day/night discriminator on a labelled manifest
    TrainDiscriminator {
        /// Manifest whose frames carry a `domain`
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the model (JSON)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        /// Fraction of the corpus held out for accuracy
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        /// Seed of the train/holdout shuffle
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the adaptation pipeline over a manifest
    Run {
        /// Run configuration (TOML or JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for decoding and evaluation
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// COCO-style evaluation of a detection file against ground truth
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Defaults to one more than the largest class id seen
        #[arg(long)]
        num_classes: Option<u32>,
        #[arg(long, default_value_t = tta_core::evaluation::DEFAULT_MAX_DETS)]
        max_dets: usize,
        /// Also write the full report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fuse detection files with weighted Soft-NMS and confidence refinement
    Fuse {
        /// Comma-separated detection files
        #[arg(long, value_delimiter = ',', required = true)]
        channels: Vec<PathBuf>,
        /// Comma-separated channel weights (default: all 1)
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        #[arg(long, value_enum, default_value = "gaussian")]
        method: Method,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 0.3)]
        linear_threshold: f64,
        #[arg(long, default_value_t = 0.001)]
        score_floor: f64,
        #[arg(long, default_value_t = 0.55)]
        support_iou: f64,
        #[arg(long, default_value_t = 2)]
        min_support: usize,
        /// Output file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={}: {msg}", e.kind());
            1
        }
    }
}

fn print(s: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes()).and_then(|_| out.flush()).map_err(|e| HarnessError::io(Path::new("<stdout>"), e))
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, preset, frames, seed, out } => {
            let mut cfg = match (&config, preset) {
                (Some(p), _) => SynthConfig::load(p)?,
                (None, Preset::Benchmark) => SynthConfig::benchmark(0),
                (None, Preset::Corpus) => SynthConfig::corpus(0, frames),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = generate_synthetic_stream(&cfg, &out)?;
            print(&format!("frames={} out={}\n", m.frames.len(), out.display()))
        }
        Command::Augment { input, output, op, gamma, scale, alpha, fog_luma, streaks, delta, gain, pivot, rgb, seed } => {
            let img = load_image(&input)?;
            let out = match op {
                AugmentOp::Night => augment_night(&img, gamma, scale),
                AugmentOp::Fog => augment_fog(&img, alpha, fog_luma),
                AugmentOp::Rain => augment_rain(&img, streaks, seed),
                AugmentOp::Brightness => adjust_brightness(&img, delta),
                AugmentOp::Contrast => adjust_contrast(&img, gain, pivot),
                AugmentOp::Temperature => color_temperature(&img, rgb[0], rgb[1], rgb[2]),
            };
            write(&output, write_ppm(&out))
        }
        Command::TrainDiscriminator { corpus, out, lr, epochs, holdout, seed } => {
            let m = parse_manifest(&corpus)?;
            let samples = corpus_samples(&m, &VisibilityConfig::default())?;
            let cfg = TrainConfig { lr, epochs, ..TrainConfig::default() };
            let (model, report) = train_with_holdout(&samples, &cfg, holdout, seed)?;
            write(&out, pretty_json(&model))?;
            print(&(serde_json::to_string(&report).expect("report serializes") + "\n"))
        }
        Command::Run { config, out, threads, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = with_threads(threads, || run_to_dir(&cfg, &out))??;
            let mut line = format!("frames={} night={} boosted={}", outcome.frames.len(), outcome.night_frames, outcome.boosted_frames);
            if let Some(e) = &outcome.eval {
                line.push_str(&format!(" map_5095={:?} ar_100={:?}", e.map_5095, e.ar_100));
            }
            print(&(line + "\n"))
        }
        Command::Eval { dets, gt, num_classes, max_dets, json } => {
            let det_records = parse_detections(&dets)?;
            let gt_records = parse_gt(&gt)?;
            let classes = num_classes.unwrap_or_else(|| {
                let max = det_records.iter().map(|r| r.class_id).chain(gt_records.iter().map(|r| r.class_id)).max();
                max.map_or(1, |m| m + 1)
            });
            let mut table = ChannelTable::new();
            let mut by_frame = group_detections(&det_records, &mut table)?;
            let mut truth = group_gt(&gt_records);
            let ids: BTreeSet<FrameId> = by_frame.keys().chain(truth.keys()).copied().collect();
            let d: Vec<FrameDetections> = ids
                .iter()
                .map(|&id| FrameDetections { frame_id: id, detections: by_frame.remove(&id).unwrap_or_default() })
                .collect();
            let g: Vec<FrameGroundTruth> =
                ids.iter().map(|&id| FrameGroundTruth { frame_id: id, objects: truth.remove(&id).unwrap_or_default() }).collect();
            let report = evaluate_parallel(&d, &g, classes, &EvalConfig { max_dets })?;
            if let Some(p) = json {
                write(&p, pretty_json(&report))?;
            }
            print(&crate::report::render(&report))
        }
        Command::Fuse { channels, weights, method, sigma, linear_threshold, score_floor, support_iou, min_support, out } => {
            let weights = if weights.is_empty() { vec![1.0; channels.len()] } else { weights };
            if weights.len() != channels.len() {
                return Err(HarnessError::Invalid(format!("{} channels but {} weights", channels.len(), weights.len())));
            }
            let method = match method {
                Method::Gaussian => DecayMethod::Gaussian,
                Method::Linear => DecayMethod::Linear,
            };
            let cfg = FusionConfig {
                soft_nms: SoftNmsConfig { method, sigma, linear_iou_threshold: linear_threshold, score_floor },
                support_iou,
                min_support,
            };
            let records = fuse_files(&channels, &weights, &cfg)?;
            let text = write_jsonl(&records);
            match out {
                Some(p) => write(&p, text),
                None => print(&text),
            }
        }
    }
}

/// Fuses the detection files frame by frame. Channel names are interned in
/// file order, which fixes the tie-break order.
pub fn fuse_files(paths: &[PathBuf], weights: &[f64], cfg: &FusionConfig) -> Result<Vec<DetectionRecord>> {
    cfg.validate()?;
    let mut table = ChannelTable::new();
    let mut per_file = Vec::with_capacity(paths.len());
    for p in paths {
        per_file.push(group_detections(&parse_detections(p)?, &mut table)?);
    }
    let ids: BTreeSet<FrameId> = per_file.iter().flat_map(|m| m.keys().copied()).collect();
    let mut out = Vec::new();
    let empty = Vec::new();
    for id in ids {
        let inputs: Vec<WeightedChannel<'_>> =
            per_file.iter().zip(weights).map(|(m, &w)| WeightedChannel::new(m.get(&id).unwrap_or(&empty), w)).collect();
        for d in fuse_ensemble(&inputs, cfg)? {
            out.push(DetectionRecord::from_detection(id.0, table.name(d.channel), &d));
        }
    }
    Ok(out)
}
