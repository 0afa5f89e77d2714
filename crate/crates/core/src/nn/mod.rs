//! Layers composing the residual transform, the gate controller and the head.

mod batchnorm;
mod conv;
mod linear;
mod loss;
mod params;
mod pool;

pub use batchnorm::{batch_norm_eval, batch_norm_train, BatchNorm2d, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use conv::{conv2d, Conv2d, ConvGeometry};
pub use linear::{linear, Linear};
pub use loss::cross_entropy;
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use pool::global_average_pool;
