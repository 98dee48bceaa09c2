//! Anomaly detection via an autoencoder with a robust-subspace-recovery (RSR)
//! layer, plus the linear subspace baselines it is compared against.
//!
//! The crate is built around a small dense-tensor type with reverse-mode
//! automatic differentiation ([`autodiff::Tape`]). On top of that sit dense
//! encoder/decoder layers with a linear RSR layer ([`net`]), the reconstruction
//! and subspace losses ([`losses`]), Adam plus the alternating and joint
//! training loops ([`optim`]), linear robust subspace recovery ([`linear`]),
//! a Gaussian 2-Wasserstein check of the rank-constrained projection property
//! ([`gaussian`]), ranking metrics ([`metrics`]), and synthetic dataset
//! generation with CSV I/O ([`data`]).

// The numeric kernels walk several arrays in lockstep by index; the iterator
// rewrites clippy suggests for such loops obscure them.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod gaussian;
pub mod linear;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod tensor;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
