use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl TagKind {
    pub const ALL: [TagKind; 6] = [
        TagKind::ConvWeight,
        TagKind::ConvBias,
        TagKind::BnGamma,
        TagKind::BnBeta,
        TagKind::BnRunningMean,
        TagKind::BnRunningVar,
    ];

    pub fn code(self) -> u8 {
        match self {
            TagKind::ConvWeight => 0,
            TagKind::ConvBias => 1,
            TagKind::BnGamma => 2,
            TagKind::BnBeta => 3,
            TagKind::BnRunningMean => 4,
            TagKind::BnRunningVar => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Identifies what a parameter is and which layer owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerTag {
    pub kind: TagKind,
    pub layer_index: u32,
}

impl LayerTag {
    pub fn new(kind: TagKind, layer_index: u32) -> Self {
        LayerTag { kind, layer_index }
    }

    /// Batch-normalization entries, trainable or not.
    pub fn is_batch_norm(&self) -> bool {
        matches!(
            self.kind,
            TagKind::BnGamma | TagKind::BnBeta | TagKind::BnRunningMean | TagKind::BnRunningVar
        )
    }

    /// Running statistics are state, not weights: they never see an optimizer.
    pub fn is_trainable(&self) -> bool {
        !matches!(self.kind, TagKind::BnRunningMean | TagKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub tag: LayerTag,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>, tag: LayerTag) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad, tag }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}
