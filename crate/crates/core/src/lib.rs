//! Streaming test-time adaptation for object detection.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm of the
//! harness: box geometry, Soft-NMS ensemble fusion with confidence
//! refinement, COCO-style evaluation, image statistics and domain
//! augmentations, the day/night discriminator, the mean-teacher calibration
//! head, and the per-frame pipeline that ties them together. File formats,
//! the synthetic benchmark and the CLI live in the `tta-harness` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod domain;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod imaging;
pub mod mean_teacher;
pub mod pipeline;

mod math;

pub use geometry::{BBox, ChannelId, Detection};
pub use math::{logit, sigmoid};
