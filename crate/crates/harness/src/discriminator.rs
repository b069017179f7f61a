//! Training the day/night discriminator from a labelled manifest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use tta_core::domain::{accuracy, extract_features, train_discriminator, DiscriminatorModel, DomainFeatures, DomainLabel, TrainConfig};
use tta_core::imaging::{visibility_boost, Image, VisibilityConfig};

use crate::error::{HarnessError, Result};
use crate::manifest::{load_image, LoadedManifest};

pub type Sample = (DomainFeatures, DomainLabel);

/// Features as the pipeline sees them: after the visibility boost.
pub fn pipeline_features(img: &Image, vis: &VisibilityConfig) -> DomainFeatures {
    extract_features(&visibility_boost(img, vis).0)
}

/// Every manifest frame with a recorded domain. Frames without one are
/// skipped.
pub fn corpus_samples(m: &LoadedManifest, vis: &VisibilityConfig) -> Result<Vec<Sample>> {
    m.manifest
        .frames
        .par_iter()
        .filter_map(|f| f.domain_label().map(|l| (f, l)))
        .map(|(f, label)| Ok((pipeline_features(&load_image(&m.resolve(&f.image))?, vis), label)))
        .collect()
}

/// Shuffles with `seed` and holds out `fraction` of the samples.
pub fn split_holdout(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(HarnessError::Invalid("holdout fraction must lie in [0, 1)".into()));
    }
    let mut v = samples.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = (v.len() as f64 * fraction).round() as usize;
    let train = v.split_off(test);
    Ok((train, v))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub final_loss: f64,
}

pub fn train_with_holdout(
    samples: &[Sample],
    cfg: &TrainConfig,
    holdout: f64,
    seed: u64,
) -> Result<(DiscriminatorModel, TrainReport)> {
    let (train, test) = split_holdout(samples, holdout, seed)?;
    let outcome = train_discriminator(&train, cfg)?;
    let report = TrainReport {
        train_samples: train.len(),
        holdout_samples: test.len(),
        train_accuracy: accuracy(&outcome.model, &train),
        holdout_accuracy: (!test.is_empty()).then(|| accuracy(&outcome.model, &test)),
        final_loss: *outcome.loss_history.last().expect("history starts with the initial loss"),
    };
    Ok((outcome.model, report))
}
