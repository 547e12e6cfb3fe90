#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod fit;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod recognition;
pub mod rng;
pub mod uv;
