//! Desk-scale sequential LiDAR 3D detection with semantic-supervised
//! spatial-temporal fusion.
//!
//! The pipeline: synthetic sequential scenes ([`scene`]) → per-point semantic
//! labels from ground truth ([`inject`]) → shared BEV encoder ([`encoder`]) →
//! spatial aggregation + attention-based temporal merging ([`fusion`]) →
//! feature-level teacher/student distillation losses ([`supervision`]) →
//! center-based detection head and AP metric ([`detect`]). Training loops,
//! configuration, and the ablation runner live in [`harness`]. Everything
//! differentiable is built on the in-crate autodiff in [`tensor`].

pub mod detect;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod inject;
pub mod scene;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result};
