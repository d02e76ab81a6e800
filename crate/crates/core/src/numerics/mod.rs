//! Dense linear algebra, feed-forward networks, Adam, and gradient checking.
//!
//! Everything is `f64`. Networks keep their parameters in one flat buffer so
//! optimizers, Polyak averaging and checkpoints can treat them uniformly.

mod adam;
mod checkpoint;
mod gradcheck;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_mlps, write_mlps, CHECKPOINT_MAGIC};
pub use gradcheck::{central_difference, grad_check, relative_error, GradCheckReport};
pub use matrix::{distance, squared_distance, Matrix};
pub use mlp::{Activation, DropoutMasks, Mlp, OutputActivation, Trace};
