//! Two-branch weakly supervised audio-visual video parsing.
//!
//! A training-only *reference* branch (unimodal self-attention plus
//! learnable class tokens) and a deployed *anchor* branch (hybrid
//! self/cross attention with multimodal multiple-instance pooling) are
//! trained together from video-level labels. Three collaborative losses
//! couple them: an event-aware contrastive term whose strength follows the
//! fraction of unaligned events, self-modality knowledge distillation into
//! the reference branch, and co-occurrence class distillation into the
//! anchor branch.
//!
//! Evaluation covers the usual audio/visual/audio-visual F-scores plus the
//! exclusive audible-only and visible-only variants, at segment and event
//! level.

pub mod branches;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod synthdata;

pub use branches::{BranchParams, Modality, SegmentGroundTruth, VideoSample};
pub use error::{Error, Result};
pub use harness::{Branch, Prediction, TrainConfig, TrainLog};
pub use losses::LossBundle;
pub use metrics::{EvalConfig, MetricReport, Threshold};
pub use numerics::Tensor;
pub use synthdata::{Corpus, CorpusSpec, GeneratedCorpus};
