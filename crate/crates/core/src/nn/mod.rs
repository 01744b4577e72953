//! Differentiable layer set with hand-derived backward rules and Adam.

pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod param;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, LayerCounter, Mode, Module, ResidualBlock};
pub use loss::{l1_loss, prox_penalty};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use param::{LayerTag, Parameter, TagKind};
