//! Two-stage distillation of a frozen vision-language teacher into a small
//! student.
//!
//! Stage one learns a shared prompt context so that the teacher's text
//! features (the semantic anchors) fit the target domain. The anchors are
//! then frozen, and stage two trains the student against them with feature
//! and text alignment plus a structural term that matches how the teacher
//! ranks each sample's most confusable classes.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix `f32`, which is what training uses.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
mod binfmt;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod toy;
pub mod train;

pub use anchors::{ClassVocabulary, ContextTokens, SemanticAnchors};
pub use config::{LossWeights, TrainConfig};
pub use encoder::{EncoderPair, Fingerprint, ImageEncoder, TextEncoder};
pub use error::{PandError, Result};
pub use metrics::{EpochRecord, MetricsLog};
pub use scalar::Scalar;
pub use student::{Checkpoint, StudentModel};
pub use tensor::Matrix;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Anchors32 = anchors::SemanticAnchors<f32>;
pub type Student32 = student::ToyStudent<f32>;
pub type Dataset32 = data::DatasetSplit<f32>;
pub type World32 = train::World<f32>;
