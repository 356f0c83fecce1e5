//! Layer operations. Each submodule adds its forward op to [`Tape`] and
//! supplies the matching backward rule.
//!
//! [`Tape`]: crate::tape::Tape

pub(crate) mod concat;
pub(crate) mod conv;
pub(crate) mod linear;
pub(crate) mod loss;
pub(crate) mod norm;
pub(crate) mod pool;
pub(crate) mod upsample;

pub use conv::Conv2dParams;
pub use linear::LinearParams;
pub use loss::{argmax_rows, softmax};
pub use norm::{BatchNorm2dParams, BnMode, BnRunning, RunningStats};
pub use pool::{max_pool2d, pooled_extent};
