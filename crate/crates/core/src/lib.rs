//! Numerical kernel for two-time-scale McKean–Vlasov SDEs.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithm: the
//! coefficient expression language, empirical measures, Euler–Maruyama
//! integration with label-addressed noise streams, frozen-equation
//! estimators (invariant measure, averaged drift, Poisson cell solution),
//! the interacting-particle slow-fast system and its controlled variant,
//! moderate-deviation rate functionals, and the scaling studies built on
//! top of them.
//!
//! Parallel work goes through [`exec::Executor`]; the crate ships a
//! sequential implementation and a std host can supply a thread pool.
//! Results never depend on which executor ran them.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dsl;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod frozen;
pub mod linalg;
pub mod measure;
pub mod multiscale;
pub mod rate;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
