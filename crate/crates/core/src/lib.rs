//! Real-time hand localization and grasp analysis.
//!
//! The pipeline refines scored bounding-box proposals with an
//! illumination-adaptive pixel-level skin classifier, producing tight hand
//! masks, and classifies each masked hand as wheel-grasp / phone-grasp /
//! no-grasp with HOG features, PCA and a linear SVM.
//!
//! Stages, in dataflow order:
//!
//! 1. [`pixelfeat`] — per-pixel color + dense SIFT descriptors and global
//!    HSV histograms.
//! 2. [`illumskin`] — k-means illumination clusters, one random-forest skin
//!    regressor per cluster; inference yields per-pixel skin probability.
//! 3. [`proposals`] — external detector proposals (confidence threshold +
//!    NMS) or a self-contained fallback proposer.
//! 4. [`refine`] — skin-mask refinement of proposal boxes, false-positive
//!    rejection, masked 128x128 hand chips.
//! 5. [`graspfeat`] / [`graspclf`] — HOG, jitter augmentation, PCA to 30
//!    dims, linear SVM (binary or one-vs-all).
//! 6. [`evalkit`] — detection PR/AP, pixel-level skin metrics, grasp
//!    accuracy reports.
//!
//! [`imagecore`] holds the shared image/box primitives, [`synth`] generates
//! the seeded synthetic corpora used for verification, and [`oracle`]
//! contains slow, independent reference implementations used by the test
//! suites.

pub mod imagecore;
pub mod pixelfeat;
pub mod illumskin;
pub mod proposals;
pub mod refine;
pub mod graspfeat;
pub mod graspclf;
pub mod evalkit;
pub mod synth;

#[doc(hidden)]
pub mod oracle;

mod error;

pub use error::{Error, Result};
pub use imagecore::{BinaryMask, GrayImage, ImageRGB, ScoredBox};
