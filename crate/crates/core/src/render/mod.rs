//! Pinhole camera model and a differentiable point-splat rasterizer
//! producing RGB, alpha and expected-depth images with analytic gradients.

mod camera;
mod images;
mod splat;

pub use camera::Camera;
pub use images::{load_png_gray, load_png_rgb, read_raw_planes, write_png_gray, write_png_rgb, write_raw_planes};
pub use splat::{splat_render, RenderOutput, SplatOp};
