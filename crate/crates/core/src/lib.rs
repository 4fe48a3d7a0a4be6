//! Joint generation of LiDAR range images and multi-view camera images with
//! a dual-branch denoising diffusion model, trained and evaluated on a
//! built-in synthetic driving-scene simulator.

pub mod autodiff;
pub mod conditioning;
pub mod geometry;
pub mod netblocks;
pub mod rng;
pub mod scenesim;
