//! pagefuse — a desk-scale multi-modal document page encoder.
//!
//! The library fuses three modalities of a document page — the token text,
//! the token bounding boxes, and the page raster — into a single transformer
//! encoder whose attention scores carry learnable relative-position biases
//! for both the 1D token index and the 2D box anchors. On top of the encoder
//! sit three self-supervised pre-training objectives (masked visual-language
//! modeling, text-image alignment, text-image matching) and three fine-tuning
//! heads (sequence labeling, extractive QA, page classification).
//!
//! Everything runs on a small built-in tensor substrate with reverse-mode
//! differentiation, so the whole stack — including gradients — is testable
//! on one CPU core. See the `book/` guide at the repository root for a
//! chapter-by-chapter tour; its code snippets double as doc-tests.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod doc;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod funsd;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

mod book;

pub use error::Error;
pub use tensor::{Scalar, Tensor};
