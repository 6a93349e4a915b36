//! A small laboratory for machine unlearning on a byte-level transformer.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`]: `f64` tensors and a reverse-mode tape.
//! - [`model`]: tokenizer, decoder-only transformer, low-rank adapters, `ULF1` checkpoints.
//! - [`data`]: JSON-lines datasets, negative-response replacement, sentence
//!   re-segmentation and single-split batch scheduling.
//! - [`unlearn`]: the reciprocal unlearning loss and its variants, Adam, and
//!   the forget/retain training loop.
//! - [`eval`]: membership-inference, task-aggregate and capability scores.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod unlearn;

pub use data::{Dataset, Example, Split, Task};
pub use error::{Error, Result};
pub use model::{EncodedExample, LoraConfig, ModelConfig, ModelState};
pub use tensor::{Tape, Tensor, Var};
pub use unlearn::{ForgetLoss, TrainLog, UnlearnConfig};
