//! Fixed-capacity replay buffering for task-incremental visual localization.
//!
//! Scenes arrive one after another; after each scene a buffer of fixed size
//! decides which of its frames to keep for replay. Three replacement rules
//! are provided: reservoir sampling, class-balanced replacement, and
//! coverage-score buffering, which always keeps a frame that sees a coarse
//! scene region its scene's buffer slice does not yet cover.
//!
//! The crate also ships a synthetic scene generator, a label-overlap
//! localization oracle, the evaluation metrics and an experiment harness.

pub mod buffering;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod localizer;
pub mod metrics;
pub mod replay;
pub mod rng;
pub mod scenegen;
pub mod types;
pub mod verify;

pub use buffering::{Buffer, BufferDecision, BufferPolicy, CoverageLevel, Strategy};
pub use error::{Error, Result};
pub use hierarchy::LabelHierarchy;
pub use rng::RngHandle;
pub use types::{ClusterLabel, Instance, LabelSet, PointId, Pose, SceneId};
