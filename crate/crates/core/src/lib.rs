//! Skeleton attention with a learnable Fourier smoother, CUR sketching
//! and Fourier-extrapolation forecasting.

pub mod attention;
pub mod error;
pub mod forecast;
pub mod params;
pub mod sketch;
pub mod smoother;

pub use error::{CoreError, Result};
pub use params::{grad_check_model, Ctx, Optimizer, ParamId, ParamStore};
