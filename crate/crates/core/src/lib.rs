//! Calibration toolkit for high-dimensional simulator boundary conditions.
//!
//! Represents spatio-temporal forcing fields with a small set of basis
//! coefficients, generates observation-consistent fields via separable
//! Gaussian conditioning, and iteratively shrinks the joint
//! parameter-coefficient space by history matching emulated simulator output
//! against continuous and binary observations.

pub mod basis;
pub mod boundary;
pub mod config;
pub mod emulator;
pub mod error;
pub mod history_match;
pub mod io;
pub mod kron;
pub mod obs;
pub mod optim;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
