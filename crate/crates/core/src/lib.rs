//! CPU Gaussian splatting toolkit.
//!
//! * [`model`]: kernels, cameras, images and SH shading.
//! * [`io`]: Gaussian PLY checkpoints, camera JSON, masks, depth maps, meshes.
//! * [`raster`]: tile-based forward splatting with accumulated opacity and
//!   median depth.
//! * [`sky`]: Gaussian sky-ball background and its opacity penalty.
//! * [`losses`]: photometric loss, PSNR and kernel regularizers.
//! * [`optim`]: analytic backward pass, Adam updates, density control and
//!   the training loop.
//! * [`surface`]: median-depth fusion into a TSDF and marching-cubes meshing.

pub mod error;
pub mod io;
pub mod model;
pub mod optim;
pub mod losses;
pub mod raster;
pub mod sky;
pub mod surface;

pub use error::{Error, Result};
