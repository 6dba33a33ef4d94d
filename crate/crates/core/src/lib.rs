//! Hierarchical semantic Gaussian splatting SLAM.

pub mod datasets;
pub mod eval;
pub mod frame;
pub mod gaussian_map;
pub mod geometry;
pub mod losses;
pub mod mono_prior;
pub mod optim;
pub mod rasterizer;
pub mod scene_synth;
pub mod semantic_tree;
pub mod slam;
