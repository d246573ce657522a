//! Pyramid fusion transformer for per-mask semantic segmentation.
//!
//! The crate is organised bottom-up: [`tensor`] provides the reverse-mode
//! engine, [`pyramid`] the toy backbone and FPN, [`decoder`] the three
//! attention layer types, [`heads`] the probability/mask heads, [`losses`]
//! the training objective, then [`synth`], [`eval`] and [`train`].

pub mod checks;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod segmap;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{PftError, Result};
pub use model::{ModelConfig, PftModel};
pub use tensor::{Tape, Tensor, Var};
