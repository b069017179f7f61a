#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tta_core::domain::TrainConfig;
use tta_harness::discriminator::{pipeline_features, train_with_holdout, Sample, TrainReport};
use tta_harness::run::pretty_json;
use tta_harness::synth::{synth_stream, Condition, Segment, SynthConfig};

pub fn tta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tta")).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// The benchmark shortened to `per_segment` frames per timeline segment.
pub fn short_benchmark(seed: u64, per_segment: usize) -> SynthConfig {
    let mut cfg = SynthConfig::benchmark(seed);
    for seg in cfg.timeline.iter_mut() {
        seg.frames = per_segment;
    }
    cfg.frames = per_segment * cfg.timeline.len();
    cfg
}

/// In-memory discriminator corpus features.
pub fn corpus(seed: u64, frames: usize) -> Vec<Sample> {
    let cfg = SynthConfig::corpus(seed, frames);
    let vis = Default::default();
    synth_stream(&cfg).unwrap().map(|f| (pipeline_features(&f.image, &vis), f.condition.label())).collect()
}

pub fn train_corpus_model(seed: u64, frames: usize) -> (tta_core::domain::DiscriminatorModel, TrainReport) {
    train_with_holdout(&corpus(seed, frames), &TrainConfig::default(), 0.2, seed).unwrap()
}

/// Writes a run config for a generated stream at `data` with the model at
/// `model`, returning its path.
pub fn write_run_config(dir: &Path, data: &Path, model: &Path, night_routing: bool, extra: &str) -> PathBuf {
    let text = format!(
        r#"manifest = "{}"
discriminator = "{}"
num_classes = 2
night_routing = {night_routing}

[[channels]]
name = "source"
role = "source"

[[channels]]
name = "multi_domain"
role = "multi_domain"

[[channels]]
name = "auxiliary"
role = "auxiliary"

[[channels]]
name = "night"
role = "night"
{extra}
"#,
        s(&data.join("manifest.json")),
        s(model)
    );
    let p = dir.join(if night_routing { "full.toml" } else { "routing_off.toml" });
    std::fs::write(&p, text).unwrap();
    p
}

pub fn write_model(dir: &Path, seed: u64, frames: usize) -> PathBuf {
    let (model, _) = train_corpus_model(seed, frames);
    let p = dir.join("discriminator.json");
    std::fs::write(&p, pretty_json(&model)).unwrap();
    p
}

/// All files under `dir`, relative, sorted, with contents.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn day_night_timeline(day: usize, night: usize) -> Vec<Segment> {
    vec![Segment { condition: Condition::Day, frames: day }, Segment { condition: Condition::Night, frames: night }]
}
