//! Bytes on the wire per client and round, from the tensor serialisation
//! format (32-bit floats plus shape headers).

use crate::dualnet::{Channels, ModelParams, Offset};
use crate::tensor::{encoded_len, encoded_list_len, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overhead {
    /// Encoded size of the double-channel model.
    pub weight_bytes: usize,
    /// Encoded size of the same backbone with a single input channel.
    pub single_weight_bytes: usize,
    pub offset_bytes: usize,
    /// Extra bytes of the double-channel model plus the offset, relative to
    /// the single-channel model, in percent.
    pub delta_percent: f64,
}

pub fn weight_bytes(tensors: &[&Tensor]) -> usize {
    encoded_list_len(tensors.iter().map(|t| t.shape()))
}

pub fn model_bytes(params: &ModelParams) -> usize {
    weight_bytes(&params.tensors())
}

pub fn offset_bytes(offset: &Offset) -> usize {
    encoded_len(offset.shape())
}

pub fn communication_overhead(params: &ModelParams, offset: &Offset) -> Overhead {
    let dual = ModelParams::zeros(&params.architecture().with_channels(Channels::Dual));
    let single = ModelParams::zeros(&params.architecture().with_channels(Channels::Single));
    let weight_bytes = model_bytes(&dual);
    let single_weight_bytes = model_bytes(&single);
    let offset_bytes = offset_bytes(offset);
    let extra = (weight_bytes - single_weight_bytes + offset_bytes) as f64;
    Overhead {
        weight_bytes,
        single_weight_bytes,
        offset_bytes,
        delta_percent: 100.0 * extra / single_weight_bytes as f64,
    }
}
