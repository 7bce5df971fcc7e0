//! Few-shot sound event detection.
//!
//! The pipeline: a log-mel front end feeds a small convolutional encoder
//! trained on base classes; at test time a two-class linear classifier is
//! initialized from support-set prototypes, refined by transductive
//! inference over the unlabeled query segments (cross-entropy plus a
//! mutual-information term), and the encoder is fine-tuned against the
//! refined classifier (mutual learning). Detections are scored with an
//! event-based F-measure.

pub mod audio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mutual;
pub mod pipeline;
pub mod transductive;

pub use error::{Error, Result};
