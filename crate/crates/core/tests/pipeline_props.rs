mod oracles;

use std::collections::BTreeMap;

use oracles::{jitter, random_box};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::domain::DiscriminatorModel;
use tta_core::evaluation::FrameId;
use tta_core::imaging::{augment_night, Image};
use tta_core::mean_teacher::MtConfig;
use tta_core::pipeline::{
    schedule_weights, ChannelRole, ChannelSpec, EnsembleSchedule, FrameResult, Pipeline, PipelineConfig, Route,
};
use tta_core::{ChannelId, Detection};

type Stream = Vec<(Image, FrameId, BTreeMap<ChannelId, Vec<Detection>>)>;

fn channels() -> Vec<ChannelSpec> {
    vec![
        ChannelSpec::new(0, "source", ChannelRole::Source),
        ChannelSpec::new(1, "multi", ChannelRole::MultiDomain),
        ChannelSpec::new(2, "aux", ChannelRole::Auxiliary),
        ChannelSpec::new(3, "night", ChannelRole::Night),
    ]
}

/// Night when mean luma is low.
fn darkness() -> DiscriminatorModel {
    DiscriminatorModel { weights: [-20.0, 0.0, 0.0, 0.0], bias: 0.0, feature_mean: [0.35, 0.0, 0.0, 0.0], ..Default::default() }
}

fn stream(seed: u64, frames: usize) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|i| {
            let base = Image::from_fn(32, 24, |x, y| {
                let v = 0.4 + 0.4 * ((x + y) % 5) as f64 / 5.0;
                [v, v * 0.95, v * 0.9]
            });
            let img = if rng.random_bool(0.3) { augment_night(&base, 2.0, 0.3) } else { base };
            let objects: Vec<_> = (0..rng.random_range(1..4)).map(|_| random_box(&mut rng, 32.0, 24.0)).collect();
            let mut dets = BTreeMap::new();
            for ch in 0..4u16 {
                let mut v = Vec::new();
                for b in &objects {
                    if rng.random_bool(0.8) {
                        let bbox = jitter(&mut rng, b, 0.05);
                        v.push(Detection::new(bbox, rng.random_range(0.2..1.0), rng.random_range(0..2), ChannelId(ch)));
                    }
                }
                dets.insert(ChannelId(ch), v);
            }
            (img, FrameId(i as u64), dets)
        })
        .collect()
}

fn run(cfg: &PipelineConfig, s: &Stream) -> Vec<FrameResult> {
    let mut p = Pipeline::new(cfg.clone(), channels(), Some(darkness())).unwrap();
    s.iter().map(|(img, id, d)| p.process_frame(img, *id, d).unwrap()).collect()
}

fn frozen() -> PipelineConfig {
    PipelineConfig {
        num_classes: 2,
        mean_teacher: MtConfig { lr: 0.0, restore_p: 0.0, ..MtConfig::default() },
        ..PipelineConfig::default()
    }
}

#[test]
fn frozen_adaptation_ignores_ema_alpha() {
    let s = stream(1, 40);
    let base = run(&frozen(), &s);
    for alpha in [1e-4, 0.1, 0.9] {
        let mut cfg = frozen();
        cfg.mean_teacher.ema_alpha = alpha;
        let out = run(&cfg, &s);
        let strip = |r: &[FrameResult]| r.iter().map(|f| f.detections.clone()).collect::<Vec<_>>();
        assert_eq!(strip(&out), strip(&base));
    }
}

#[test]
fn frozen_adaptation_is_permutation_invariant() {
    // a flat schedule, since ramp weights depend on the position in the stream
    let mut cfg = frozen();
    cfg.schedule = EnsembleSchedule { initial_source_weight: 1.0, ramp_frames: 1 };
    let s = stream(2, 30);
    let mut shuffled = s.clone();
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(9));
    let by_id = |r: Vec<FrameResult>| r.into_iter().map(|f| (f.frame_id, (f.route, f.detections))).collect::<BTreeMap<_, _>>();
    assert_eq!(by_id(run(&cfg, &s)), by_id(run(&cfg, &shuffled)));
}

#[test]
fn every_frame_takes_exactly_one_route() {
    let s = stream(3, 60);
    let out = run(&PipelineConfig { num_classes: 2, ..PipelineConfig::default() }, &s);
    let night = out.iter().filter(|f| f.route == Route::Night).count();
    let ensemble = out.iter().filter(|f| f.route == Route::Ensemble).count();
    assert!(night > 0 && ensemble > 0);
    assert_eq!(night + ensemble, s.len());
    for f in &out {
        // the night path never touches the adaptation head
        assert_eq!(f.route == Route::Night, f.adaptation_loss.is_none());
    }
}

#[test]
fn schedule_weights_non_decreasing() {
    let sched = EnsembleSchedule::default();
    let mut last = 0.0;
    for t in 0..2000 {
        let w = schedule_weights(t, &sched).source;
        assert!(w >= last);
        last = w;
    }
    assert_eq!(schedule_weights(sched.ramp_frames, &sched).source, 1.0);
}
