//! Latent-space 4D motion modeling: sparse keypoint SE(3) trajectories drive
//! canonical 3D Gaussians through linear blend skinning, trained end-to-end
//! against multi-view video supervision with a differentiable point splatter.

pub mod diff;
pub mod error;
pub mod geom;
pub mod latent;
pub mod loss;
pub mod motion;
pub mod render;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub mod cli;
pub use cli::cli_main;
