//! Shift-equivariant vision-transformer building blocks on a small dense
//! `f64` tensor core, plus a harness that audits equivariance by exhaustive
//! circular-shift enumeration.

pub mod attention;
pub mod conv;
pub mod error;
pub mod harness;
pub mod model;
pub mod polyphase;
pub mod rng;
pub mod sum;
pub mod tensor;

pub use error::{Error, Result};
pub use polyphase::{AnchorResult, PolyphaseIndex};
pub use rng::Rng;
pub use tensor::{NormOrder, Shift2D, Tensor};
