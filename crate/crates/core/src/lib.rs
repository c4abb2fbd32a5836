//! Scaffold-driven 4D Gaussian feature fields: geometry, rasterization,
//! distillation, semantic queries and editing.

pub mod agent;
pub mod distill;
pub mod io;
pub mod map;
pub mod query;
pub mod raster;
pub mod scaffold;
pub mod scene;
pub mod se3;
pub mod worldgen;
