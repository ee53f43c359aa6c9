//! Dense float64 tensors with a reverse-mode gradient tape and the operator
//! set used by the segmentation models.

mod checkpoint;
mod conv;
mod lstm;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use lstm::{conv_lstm_step, ConvLstmWeights};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests;
