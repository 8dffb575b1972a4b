//! Probabilistic 6D object pose estimation by rectified flow matching on SE(3).
//!
//! The crate covers the whole desk-scale pipeline: Lie-group numerics
//! ([`lie`]), a synthetic depth-camera world ([`scene`]), the conditional
//! velocity network and its training loop ([`net`], [`train`]), hypothesis
//! sampling ([`sampler`]), pose selection ([`select`]), uncertainty and
//! next-best-view planning ([`uncertainty`]), pose-marginalized grasping
//! ([`grasp`]) and evaluation ([`eval`]).

pub mod eval;
pub mod grasp;
pub mod lie;
pub mod net;
pub mod sampler;
pub mod scene;
pub mod select;
pub mod train;
pub mod uncertainty;

pub use lie::{Pose, Rotation, TangentVec};
pub use scene::{ObjectId, ObjectModel, SceneSample};
