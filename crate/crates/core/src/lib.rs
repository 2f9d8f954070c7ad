pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod heads;
pub mod kitti;
pub mod losses;
pub mod model;
pub mod neck;
pub mod nn;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;
