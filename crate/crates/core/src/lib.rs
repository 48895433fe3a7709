//! Omnidirectional video saliency prediction over tangent images.
//!
//! The pipeline projects equirectangular (ERP) frames onto gnomonic tangent
//! planes, encodes each plane into a viewport token, mixes tokens with
//! factored temporal/spatial attention, decodes per-plane saliency and
//! blends it back onto the sphere.

pub mod geom;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;
