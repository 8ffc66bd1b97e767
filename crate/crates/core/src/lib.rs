//! SO(2)-equivariant steerable network layers over band-limited angular
//! feature maps.
//!
//! The crate provides:
//! - [`fourier`]: band-limited signals, sampling, rotation and norms
//! - [`activations`]: pointwise nonlinearities applied in the Fourier domain
//!   (exact direct convolution for polynomials, oversampled FFT for general
//!   functions, norm-only variants)
//! - [`conv2d`]: SE(2)-equivariant point-cloud convolution with Gaussian ring
//!   kernels, Fourier batch norm, pooling, cropping and invariant maps
//! - [`surfel`]: SE(3)-equivariant convolution on oriented point clouds with
//!   tangent-frame coefficient alignment
//! - [`autodiff`]: a scope-limited reverse-mode tape covering exactly the
//!   operations the networks use, plus Adam and finite-difference checks
//! - [`pipeline`]: dataset handling, model assembly, training and checkpoints
//! - [`harness`]: the equivariance-error measurement harness

pub mod activations;
pub mod autodiff;
pub mod conv2d;
pub mod error;
pub mod fft;
pub mod fourier;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod surfel;

pub use error::{Error, Result};
pub use fourier::{BandLimitedSignal, FeatureMap};
pub use scalar::Scalar;
