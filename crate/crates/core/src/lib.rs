//! Evaluation and tracking toolkit for 4D panoptic occupancy.
//!
//! Per-frame panoptic voxel grids are produced from semantic occupancy plus
//! tracked boxes ([`label_gen`]), scored with the streaming OccSTQ / PQ
//! accumulators in [`metrics`], and associated over time by the trackers in
//! [`trackers`].

pub mod assignment;
pub mod cli;
pub mod io;
pub mod label_gen;
pub mod metrics;
pub mod synth;
pub mod trackers;
pub mod voxel;

pub use voxel::{ClassEntry, ClassRole, ClassTable, GridSpec, PanopticGrid, Pose, TrackedBox};
