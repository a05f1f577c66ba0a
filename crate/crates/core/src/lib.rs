//! Visually grounded sentence encoder.
//!
//! A bidirectional LSTM encoder with multi-head self-attention produces a
//! sentence representation that is trained to reconstruct its caption
//! (`cap2cap`), to predict the paired image features under a batch ranking
//! loss (`cap2img`), or both (`cap2all`). Everything runs on a small
//! reverse-mode autodiff tape over `f64` matrices.
//!
//! With the `parallel` feature (on by default) batch members and retrieval
//! queries are processed with rayon; [`exec::Exec::Sequential`] gives the
//! same results bit for bit.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
mod rng;
pub mod text;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Matrix, NodeId};
pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{Dims, ModelParameters};
pub use text::{Corpus, Vocabulary};
pub use train::{Checkpoint, Objective, TrainConfig};
