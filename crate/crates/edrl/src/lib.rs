//! A desk-scale transducer speech-recognition laboratory: an RNN-T model on a
//! hand-rolled reverse-mode tape, lattice NLL training, alignment-synchronous
//! beam search, and edit-distance-based reinforcement-learning fine-tuning.

pub mod beam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod reward;
pub mod rnnt;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod wer;

pub use error::{Error, Result};
