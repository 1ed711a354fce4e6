//! Distributions of exponential functionals `I_t = ∫_0^t e^{-X_s} ds` of
//! processes with independent increments.
//!
//! The crate solves the forward integro-differential equations satisfied by
//! the density and distribution function of `I_t` (through the time-reversed
//! Markov process `V`), the stationary equations for `I_∞`, and cross-checks
//! both against Monte Carlo simulation and closed forms.

pub mod error;
pub mod grid;
pub mod quadrature;
pub mod reversal;
pub mod stationary;
pub mod mc_engine;
pub mod oracle;
pub mod pide;
pub mod process_model;

pub use error::{Error, Result};
