// SPDX-License-Identifier: Apache-2.0

//! Non-neural building blocks for auto-vocabulary 3D object detection.
//!
//! The crate covers four areas:
//!
//! * evaluation: IoU matching, coverage, the thresholded semantic AUC and the
//!   semantic score, and embedding-assigned mAP / recall ([`metrics`]);
//! * vocabulary construction: provenance-tagged embedding banks ([`embedding`])
//!   and rejection sampling of new prototypes around them ([`fsse`]);
//! * pseudo supervision: projecting point clouds into 2D masks and fitting
//!   gravity-aligned boxes with PCA ([`geometry`], [`pseudo_box`]);
//! * the semantic head: softmax classification against a bank and the
//!   distillation / contrastive losses with analytic gradients ([`alignment`]).
//!
//! [`synth`] builds synthetic scenes and vocabularies with known answers, and
//! [`io`] reads and writes the on-disk formats used by the `av3d` CLI.

pub mod alignment;
pub mod embedding;
pub mod fsse;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pseudo_box;
pub mod rng;
pub mod synth;

pub use alignment::{LossWeights, ObjectFeature};
pub use embedding::{BankEntry, Embedding, EmbeddingBank, Provenance};
pub use fsse::{FsseConfig, FsseOutcome, SampleCount};
pub use geometry::{CameraModel, IouMode, Mask2D, OrientedBox3, Point3, PointCloud};
pub use metrics::{ClassSplit, DetectionReport, SemanticReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
