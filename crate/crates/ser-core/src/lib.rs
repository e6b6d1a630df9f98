//! Two-stage multi-task speech emotion recognition on synthetic audio.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f64 tensors and a reverse-mode tape covering every
//!   primitive the model needs, including a CTC loss node;
//! * [`optim`] — named parameter stores, SGD and Adam with per-group
//!   learning rates, and hard freeze enforcement;
//! * [`data`] — a deterministic synthetic speech corpus with speaker,
//!   gender, style, emotion and transcript annotations, plus WAV/manifest
//!   I/O, tempo augmentation and speaker-independent folds;
//! * [`encoder`] — a small convolutional-frontend transformer encoder that
//!   exposes every layer's output;
//! * [`fusion`] — layer-fusion strategies over those outputs and the
//!   attention block that conditions emotion features on auxiliary-task
//!   features;
//! * [`tasks`] — classification and CTC heads with their losses;
//! * [`metrics`] — accuracy and edit-distance metrics;
//! * [`model`] — the assembled network;
//! * [`train`] — the two-stage schedule, evaluation, cross-validation and
//!   the ablation grid.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seeding;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
