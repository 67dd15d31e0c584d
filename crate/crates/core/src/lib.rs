//! Fourier-kernel attention: kernel density and Nadaraya–Watson estimators,
//! sinc-product attention with a fused backward pass, a small reverse-mode
//! tape and a byte-level transformer trained on it.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
