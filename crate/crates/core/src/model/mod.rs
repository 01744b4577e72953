pub mod params;
pub mod unet;

pub use params::{NamedParameterSet, NamedTensor};
pub use unet::{ConvInfo, UNet, UNetConfig};
