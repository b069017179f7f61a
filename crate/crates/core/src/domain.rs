//! Day/night discriminator over luminance statistics.
//!
//! A logistic model on four z-scored image features, trained by full-batch
//! gradient descent on the mean cross-entropy. Night is the positive class:
//! the model outputs `P(Night)`.

use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::imaging::{luma, luminance_stats, Image};
use crate::math::sigmoid;

pub const NUM_FEATURES: usize = 4;
/// Pixels darker than this count toward `dark_fraction`.
pub const DARK_LUMA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum DomainLabel {
    Day,
    Night,
}

impl DomainLabel {
    /// Maps a scene condition name to the discriminator label. Dusk and dawn
    /// count as night; daytime weather (fog, rain, overcast...) counts as day.
    pub fn from_condition(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "night" | "dusk" | "dawn" => Some(DomainLabel::Night),
            "day" | "daytime" | "clear" | "fog" | "foggy" | "rain" | "rainy" | "overcast" | "cloudy" => {
                Some(DomainLabel::Day)
            }
            _ => None,
        }
    }

    fn target(self) -> f64 {
        match self {
            DomainLabel::Day => 0.0,
            DomainLabel::Night => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DomainFeatures {
    pub mean_luma: f64,
    pub std_luma: f64,
    pub dark_fraction: f64,
    /// Mean red minus mean blue.
    pub warm_bias: f64,
}

impl DomainFeatures {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [self.mean_luma, self.std_luma, self.dark_fraction, self.warm_bias]
    }
}

pub fn extract_features(img: &Image) -> DomainFeatures {
    let stats = luminance_stats(img);
    let n = img.pixels().len() as f64;
    let dark = img.pixels().iter().filter(|p| luma(p) < DARK_LUMA).count() as f64 / n;
    let warm = img.pixels().iter().map(|p| p[0] - p[2]).sum::<f64>() / n;
    DomainFeatures { mean_luma: stats.mean, std_luma: stats.std, dark_fraction: dark, warm_bias: warm }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct DiscriminatorModel {
    pub weights: [f64; NUM_FEATURES],
    pub bias: f64,
    /// Per-feature mean and scale used to z-score inputs.
    pub feature_mean: [f64; NUM_FEATURES],
    pub feature_scale: [f64; NUM_FEATURES],
    pub decision_threshold: f64,
}

impl Default for DiscriminatorModel {
    fn default() -> Self {
        Self {
            weights: [0.0; NUM_FEATURES],
            bias: 0.0,
            feature_mean: [0.0; NUM_FEATURES],
            feature_scale: [1.0; NUM_FEATURES],
            decision_threshold: 0.5,
        }
    }
}

impl DiscriminatorModel {
    pub fn normalize(&self, f: &DomainFeatures) -> [f64; NUM_FEATURES] {
        let raw = f.to_array();
        core::array::from_fn(|k| (raw[k] - self.feature_mean[k]) / self.feature_scale[k])
    }

    pub fn logit(&self, f: &DomainFeatures) -> f64 {
        let x = self.normalize(f);
        self.bias + self.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let finite = self.weights.iter().chain(&self.feature_mean).chain(&self.feature_scale).all(|v| v.is_finite())
            && self.bias.is_finite();
        if !finite || self.feature_scale.iter().any(|&s| s <= 0.0) {
            return Err(DomainError::InvalidModel("parameters must be finite with positive feature scales"));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(DomainError::InvalidModel("decision_threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainError {
    SingleClass,
    InvalidModel(&'static str),
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainError::SingleClass => f.write_str("training data must contain both day and night samples"),
            DomainError::InvalidModel(msg) => write!(f, "invalid discriminator model: {msg}"),
        }
    }
}

impl core::error::Error for DomainError {}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.5, epochs: 500, decision_threshold: 0.5 }
    }
}

/// Mean cross-entropy of `(weights, bias)` on already z-scored inputs.
pub fn cross_entropy(weights: &[f64; NUM_FEATURES], bias: f64, xs: &[[f64; NUM_FEATURES]], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            // log(1 + e^z) - y z, written to avoid overflow
            let softplus = if z > 0.0 { z + libm::log1p(libm::exp(-z)) } else { libm::log1p(libm::exp(z)) };
            softplus - y * z
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`cross_entropy`]: `(d/dweights, d/dbias)`.
pub fn cross_entropy_gradient(
    weights: &[f64; NUM_FEATURES],
    bias: f64,
    xs: &[[f64; NUM_FEATURES]],
    ys: &[f64],
) -> ([f64; NUM_FEATURES], f64) {
    let n = xs.len() as f64;
    let mut gw = [0.0; NUM_FEATURES];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        let r = sigmoid(z) - y;
        for k in 0..NUM_FEATURES {
            gw[k] += r * x[k];
        }
        gb += r;
    }
    (gw.map(|g| g / n), gb / n)
}

/// Trained model plus its per-epoch training loss (index 0 is the loss of
/// the zero-initialized model).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: DiscriminatorModel,
    pub loss_history: Vec<f64>,
}

/// Full-batch gradient descent from zero weights; deterministic.
pub fn train_discriminator(
    samples: &[(DomainFeatures, DomainLabel)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DomainError> {
    let has_day = samples.iter().any(|(_, l)| *l == DomainLabel::Day);
    let has_night = samples.iter().any(|(_, l)| *l == DomainLabel::Night);
    if !(has_day && has_night) {
        return Err(DomainError::SingleClass);
    }
    let n = samples.len() as f64;
    let raw: Vec<[f64; NUM_FEATURES]> = samples.iter().map(|(f, _)| f.to_array()).collect();
    let mut mean = [0.0; NUM_FEATURES];
    for x in &raw {
        for k in 0..NUM_FEATURES {
            mean[k] += x[k] / n;
        }
    }
    let mut scale = [0.0; NUM_FEATURES];
    for x in &raw {
        for k in 0..NUM_FEATURES {
            scale[k] += (x[k] - mean[k]) * (x[k] - mean[k]) / n;
        }
    }
    let scale = scale.map(|v| {
        let s = libm::sqrt(v);
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    });

    let mut model = DiscriminatorModel {
        feature_mean: mean,
        feature_scale: scale,
        decision_threshold: cfg.decision_threshold,
        ..DiscriminatorModel::default()
    };
    let xs: Vec<[f64; NUM_FEATURES]> =
        raw.iter().map(|x| core::array::from_fn(|k| (x[k] - mean[k]) / scale[k])).collect();
    let ys: Vec<f64> = samples.iter().map(|(_, l)| l.target()).collect();

    let mut loss_history = Vec::with_capacity(cfg.epochs + 1);
    loss_history.push(cross_entropy(&model.weights, model.bias, &xs, &ys));
    for _ in 0..cfg.epochs {
        let (gw, gb) = cross_entropy_gradient(&model.weights, model.bias, &xs, &ys);
        for (w, g) in model.weights.iter_mut().zip(gw) {
            *w -= cfg.lr * g;
        }
        model.bias -= cfg.lr * gb;
        loss_history.push(cross_entropy(&model.weights, model.bias, &xs, &ys));
    }
    model.validate()?;
    Ok(TrainOutcome { model, loss_history })
}

/// Returns the label and `P(Night)`.
pub fn predict_domain(model: &DiscriminatorModel, features: &DomainFeatures) -> (DomainLabel, f64) {
    let p = sigmoid(model.logit(features));
    let label = if p >= model.decision_threshold { DomainLabel::Night } else { DomainLabel::Day };
    (label, p)
}

pub fn accuracy(model: &DiscriminatorModel, samples: &[(DomainFeatures, DomainLabel)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples.iter().filter(|(f, l)| predict_domain(model, f).0 == *l).count();
    hits as f64 / samples.len() as f64
}
