//! Event Transformer: classification of raw event-camera streams with a
//! backbone of local temporal attention, sparse-convolution windowed
//! attention and global attention over farthest-point-sampled events.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod events;
pub mod geometry;
pub mod numerics;
pub mod seed;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
