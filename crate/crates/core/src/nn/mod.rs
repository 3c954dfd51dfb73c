//! Neural building blocks recorded on the [`Tape`](crate::Tape).

pub mod conv1d;
pub mod conv2d;
mod dropout;
mod linear;
pub mod norm;
pub mod position;
pub mod softmax;

pub use conv1d::{dilated_conv1d_stack, receptive_field, DilatedPadding};
pub use conv2d::{ConvMaskKind, Tap};
pub use dropout::Phase;
pub use position::{sinusoidal_table, PositionalKind};
