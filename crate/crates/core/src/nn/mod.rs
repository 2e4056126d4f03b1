//! Parameters and layers.
//!
//! Every trainable tensor lives once in a [`ParamStore`] and is referred to by a
//! [`ParamHandle`]. Weight sharing is nothing more than using one handle at
//! several graph sites; weight tying wraps an encoder kernel handle in a
//! [`TiedView`] that a transposed convolution consumes as-is.

mod layers;
mod registry;

pub use layers::{Conv2d, DoubleConvBlock, TiedConvTranspose};
pub use registry::{InitRule, ParamHandle, ParamStore, TiedView};
