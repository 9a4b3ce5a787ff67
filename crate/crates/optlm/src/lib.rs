//! Optionized next-token modeling at desk scale.
//!
//! A small frozen decoder-only transformer is augmented with a discrete-latent
//! plug-in: an encoder that maps (hidden state, target embedding) to a
//! distribution over K options, a decoder that turns an option into an
//! additive hidden-state bias applied before the shared lm_head, and a policy
//! that selects options from the hidden state alone. Training combines
//! cross-entropy through the biased path, an adaptively scaled KL-to-uniform
//! regularizer on the encoder, and behavioral cloning of the policy.

pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod plugin;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
