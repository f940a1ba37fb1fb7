//! Layers and the five-stage 3D convolutional backbone.

mod backbone;
mod layers;
mod params;

pub use backbone::BackboneSpec;
pub use layers::{conv3d, fully_connected, global_avgpool3d, global_maxpool3d, maxpool3d, Conv3dSpec};
pub use params::{uniform_fan_in, Bindings, ParamStore};
