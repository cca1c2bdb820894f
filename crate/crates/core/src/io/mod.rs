//! Files and data: run configuration, datasets, the synthetic scene,
//! checkpoints, PLY point clouds and end-to-end runs.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod init;
pub mod pipeline;
pub mod ply;
pub mod synth;
