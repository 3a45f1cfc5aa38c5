//! Preterm-birth prediction from longitudinal diagnosis codes with noisy labels.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`synth`] generates seeded synthetic hospital cohorts (mothers, newborns, true links).
//! 2. [`linkage`] re-links newborns to mothers from admission/discharge times alone.
//! 3. [`synth::build_datasets`] assembles the clean set, the noisy set and their overlap.
//! 4. [`noise`] estimates the 2x2 label corruption matrix from the overlap.
//! 5. [`train`] fits the attention recurrent network in [`net`] with alternating
//!    loss correction or one of the baselines, and [`eval`] scores repeated splits.
//!
//! With the default `parallel` feature, hospitals, batch examples and benchmark
//! repeats are processed on the rayon pool. Every reduction happens in a fixed
//! order, so results are bit-identical for any thread count, and also identical
//! to a build without the feature.

pub mod datamodel;
pub mod error;
pub mod eval;
pub mod linkage;
pub mod net;
pub mod noise;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod svg;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
