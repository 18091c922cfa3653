//! Numerical lab for a large-portfolio stochastic-volatility model with
//! common noise.
//!
//! The crate is organised bottom-up: parameter validation and exponent
//! bookkeeping ([`params`]), addressed random streams ([`noise`]), the CIR
//! variance engine ([`cirlab`]), the finite particle pool ([`pool`]), the
//! one- and two-dimensional SPDE solvers ([`pde1d`], [`spde2d`]) and the
//! verification layer ([`verify`]).

// `!(v > 0.0)` is the intended spelling: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cirlab;
pub mod error;
pub mod grid;
pub mod kde;
pub mod noise;
pub mod numerics;
pub mod params;
pub mod pde1d;
pub mod pool;
pub mod spde2d;
pub mod transport;
pub mod verify;

pub use error::{LpsvError, Result};
pub use grid::TensorGrid;
pub use noise::{NoiseBundle, SeedLineage, StreamPurpose};
pub use params::{
    feasible_exponents, validate_params, Check, ExponentSet, ModelParams, ValidationReport,
};
