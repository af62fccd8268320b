//! Zero-shot guitar amplifier tone modeling.
//!
//! Given a clean signal and a reference recording, a frozen tone encoder
//! extracts an embedding; a hypernetwork (or FiLM generator) turns that
//! embedding into per-layer weight modulations of a gated convolutional
//! generator; the generator renders the clean signal with the reference
//! tone. A synthetic amplifier corpus provides desk-scale training data,
//! and a block-based streaming engine with baked weights runs the trained
//! model in real time.

pub mod amp;
pub mod audio;
pub mod cond;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod mel;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod store;
pub mod stream;
pub mod train;
pub mod verify;
pub mod wav;

pub use audio::{peak_normalize, AudioBuffer, DEFAULT_SAMPLE_RATE};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
