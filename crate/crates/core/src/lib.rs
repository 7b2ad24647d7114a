pub mod beliefs;
pub mod frame;
pub mod geometry;
pub mod scalar;
pub mod voxel_map;
pub mod renderer;
pub mod dynamics;
pub mod worlds;
pub mod tracker;
pub mod pipeline;
pub mod evaluation;

pub use geometry::{CameraIntrinsics, Control, Pose, Twist};
pub use scalar::Real;

pub type Pose64 = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
/// Map stored in single precision, the default.
pub type MapF32 = voxel_map::VoxelMapBelief<f32>;
pub type MapF64 = voxel_map::VoxelMapBelief<f64>;
pub type FilterStateF32 = pipeline::FilterState<f32>;
pub type FilterStateF64 = pipeline::FilterState<f64>;
