//! Core-migration toolkit for a three-level storage system.
//!
//! The crate covers the full loop: synthetic IO workload generation, a fluid
//! simulator of CPU core migration across the NORMAL/KV/RV levels, recurrent
//! actor-critic training, quantized-bottleneck distillation of the trained
//! policy into an explicit finite state machine, and statistical
//! interpretation of the machine's states.
//!
//! Numeric kernels (the recurrent network, the autoencoders, the simulator)
//! are generic over the scalar type via [`scalar::Scalar`]; the pipeline uses
//! the `f64` aliases exported at the crate root.

pub mod error;
pub mod fsm;
pub mod harness;
pub mod interpret;
pub mod neural;
pub mod qbn;
pub mod rl;
pub mod scalar;
pub mod sim;
pub mod workload;

pub use error::Error;

/// Scalar type used by the shipped pipeline.
pub type Real = f64;

pub type Simulator = sim::Simulator<Real>;
pub type Observation = sim::Observation<Real>;
pub type GruPolicy = neural::gru::GruPolicy<Real>;
pub type AdamState = neural::AdamState<Real>;
pub type Qbn = qbn::Qbn<Real>;

/// Single-precision alias for forward-only inference.
pub type GruPolicy32 = neural::gru::GruPolicy<f32>;

pub type Result<T> = std::result::Result<T, Error>;
