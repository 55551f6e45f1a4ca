//! Dynamic-aware lidar-inertial registration.
//!
//! Points are classified as stable or unstable from the temporal component of
//! their spatio-temporal (4D) normals inside every iteration of an iterated
//! point-to-plane optimizer. A spatial consistency check then separates
//! genuinely moving clusters from false positives for static map building.

pub mod config;
pub mod dataset;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod grid_index;
pub mod io;
pub mod kdtree;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod scc;
pub mod sim;
pub mod so3;
pub mod temporal_map;
pub mod voxel_map;

pub use geometry::{
    Aabb, NormalEstimate, NormalParams, Pose, SpatioTemporalNormal, StabilityLabel, StampedPoint, SymMat4, Vec3,
    Vec4,
};
pub use preprocess::{ImuSample, NavState, RawScan};
pub use temporal_map::TemporalWindowMap;
pub use voxel_map::{PlaneVoxel, PlaneVoxelMap, StaticVoxelRecord, VoxelKey};
