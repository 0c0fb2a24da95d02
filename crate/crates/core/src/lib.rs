//! Discovery of latent-space directions that edit one semantic region of a
//! generated image while leaving the rest untouched.
//!
//! The pipeline: a [`generator::GeneratorBackend`] exposes featuremaps, a
//! [`segmentation::SegmenterBackend`] supplies part masks, the
//! [`objective`] module scores how much of an edit's featuremap change
//! falls inside the part, and the [`trainer`] maximizes that score with
//! Adam. Trained directions are persisted in a [`bank::DirectionBank`] and
//! applied through [`edit::EditSession`]s.

pub mod bank;
pub mod edit;
pub mod error;
pub mod generator;
pub mod latent;
pub mod objective;
pub mod segmentation;
pub mod trainer;

pub use error::{LelsdError, Result};
