mod oracles;

use oracles::{brute_force_evaluate, jitter, random_box};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::evaluation::{
    evaluate, match_detections, EvalConfig, FrameDetections, FrameGroundTruth, FrameId, GroundTruth, MatchKind,
    IOU_THRESHOLDS,
};
use tta_core::{BBox, ChannelId, Detection};

type Frame = (Vec<Detection>, Vec<GroundTruth>);

fn micro_dataset(rng: &mut ChaCha8Rng) -> Vec<Frame> {
    (0..rng.random_range(1..=3))
        .map(|_| {
            let gts: Vec<GroundTruth> = (0..rng.random_range(0..=6))
                .map(|_| {
                    let b = random_box(rng, 50.0, 50.0);
                    let c = rng.random_range(0..2);
                    if rng.random_bool(0.1) { GroundTruth::ignored(b, c) } else { GroundTruth::new(b, c) }
                })
                .collect();
            let dets = (0..rng.random_range(0..=6))
                .map(|_| {
                    let (b, c) = match gts.get(rng.random_range(0..gts.len().max(1))) {
                        Some(g) if rng.random_bool(0.7) => (jitter(rng, &g.bbox, 0.15), g.class_id),
                        _ => (random_box(rng, 50.0, 50.0), rng.random_range(0..2)),
                    };
                    Detection::new(b, rng.random_range(0.0..1.0), c, ChannelId(0))
                })
                .collect();
            (dets, gts)
        })
        .collect()
}

fn split(frames: &[Frame]) -> (Vec<FrameDetections>, Vec<FrameGroundTruth>) {
    frames
        .iter()
        .enumerate()
        .map(|(i, (d, g))| {
            (
                FrameDetections { frame_id: FrameId(i as u64), detections: d.clone() },
                FrameGroundTruth { frame_id: FrameId(i as u64), objects: g.clone() },
            )
        })
        .unzip()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

#[test]
fn matches_brute_force_on_micro_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let frames = micro_dataset(&mut rng);
        let (d, g) = split(&frames);
        let got = evaluate(&d, &g, 2, &EvalConfig::default()).unwrap();
        let want = brute_force_evaluate(&frames, 2, 100);
        for c in 0..2 {
            for t in 0..IOU_THRESHOLDS.len() {
                assert!(close(got.ap[c][t], want.ap[c][t]), "ap {c} {t}: {:?} {:?}", got.ap[c][t], want.ap[c][t]);
                assert!(close(got.recall[c][t], want.recall[c][t]));
            }
        }
        assert!((got.map_5095 - want.map).abs() <= 1e-9);
        assert!((got.ar_100 - want.ar).abs() <= 1e-9);
    }
}

#[test]
fn max_dets_truncates_per_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let frames = micro_dataset(&mut rng);
        let (d, g) = split(&frames);
        let got = evaluate(&d, &g, 2, &EvalConfig { max_dets: 2 }).unwrap();
        let want = brute_force_evaluate(&frames, 2, 2);
        assert!((got.map_5095 - want.map).abs() <= 1e-9);
    }
}

/// Greedy matching in score order is not the maximum assignment: the
/// stronger box ties on both ground truths and takes the first, leaving the
/// weaker box unmatched even though a perfect assignment exists.
#[test]
fn crossed_pair_matching() {
    let g = [GroundTruth::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0), GroundTruth::new(BBox::new(4.0, 0.0, 14.0, 10.0), 0)];
    let d = [
        Detection::new(BBox::new(2.0, 0.0, 12.0, 10.0), 0.9, 0, ChannelId(0)),
        Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.8, 0, ChannelId(0)),
    ];
    assert_eq!(match_detections(&d, &g, 0.5), vec![(0, MatchKind::Matched(0)), (1, MatchKind::FalsePositive)]);
    let best = [[0usize, 1], [1, 0]]
        .iter()
        .map(|perm| (0..2).filter(|&i| oracles::plain_iou(&d[i].bbox, &g[perm[i]].bbox) >= 0.5).count())
        .max()
        .unwrap();
    assert_eq!(best, 2);
}

#[test]
fn invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let frames = micro_dataset(&mut rng);
        let (d, g) = split(&frames);
        let base = evaluate(&d, &g, 2, &EvalConfig::default()).unwrap();

        // strictly monotone rescaling of scores changes nothing
        let rescaled: Vec<FrameDetections> = d
            .iter()
            .map(|f| FrameDetections {
                frame_id: f.frame_id,
                detections: f.detections.iter().map(|x| x.with_score(x.score.powi(3) * 0.5)).collect(),
            })
            .collect();
        let r = evaluate(&rescaled, &g, 2, &EvalConfig::default()).unwrap();
        assert!((r.map_5095 - base.map_5095).abs() <= 1e-12);

        // a far-away false positive ranked below everything never helps
        let mut extra = d.clone();
        extra[0].detections.push(Detection::new(BBox::new(900.0, 900.0, 910.0, 910.0), 0.0, 0, ChannelId(0)));
        let e = evaluate(&extra, &g, 2, &EvalConfig::default()).unwrap();
        assert!(e.map_5095 <= base.map_5095 + 1e-12);

        // stricter thresholds never raise AP
        for c in 0..2 {
            if let (Some(lo), Some(hi)) = (base.ap[c][0], base.ap[c][9]) {
                assert!(hi <= lo + 1e-12);
            }
        }
    }
}

/// A box overlapping two ground truths lets its duplicate claim the second,
/// so recall only stays put when every box can reach at most one.
fn single_reach(frames: &[Frame]) -> bool {
    frames.iter().all(|(dets, gts)| {
        dets.iter().all(|d| {
            gts.iter()
                .filter(|g| !g.ignore && g.class_id == d.class_id && oracles::plain_iou(&d.bbox, &g.bbox) >= 0.5)
                .count()
                <= 1
        })
    })
}

#[test]
fn near_duplicates_leave_recall_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut checked = 0;
    while checked < 200 {
        let frames = micro_dataset(&mut rng);
        if !single_reach(&frames) {
            continue;
        }
        checked += 1;
        let (d, g) = split(&frames);
        let base = evaluate(&d, &g, 2, &EvalConfig::default()).unwrap();
        let dup: Vec<FrameDetections> = d
            .iter()
            .map(|f| {
                let mut v = f.detections.clone();
                v.extend(f.detections.iter().map(|x| Detection {
                    bbox: x.bbox.translate(1e-9, 0.0),
                    score: x.score * (1.0 - 1e-9),
                    ..*x
                }));
                FrameDetections { frame_id: f.frame_id, detections: v }
            })
            .collect();
        let r = evaluate(&dup, &g, 2, &EvalConfig::default()).unwrap();
        assert!((r.ar_100 - base.ar_100).abs() <= 1e-12);
        assert!(r.map_5095 <= base.map_5095 + 1e-12);
    }
}
