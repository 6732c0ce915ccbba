//! Joint architecture-and-weight ensembling for differentiable NAS.
//!
//! The crate couples a Dirichlet distribution over cell-edge operation
//! mixing weights with a cyclical SGLD sampler over network weights,
//! generates joint ensembles, and scores them with accuracy, ECE and NLL
//! on clean and corrupted data.
//!
//! Core numerics (`tensor`, `search_space`, `metrics`) are generic over
//! the scalar type via [`Scalar`]; the default everywhere is `f64`.

// the training loop allocates and frees large activation buffers at high
// rate; the system allocator returns them to the OS each time, so page
// faults dominate without a caching allocator
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod arch_dist;
pub mod data;
pub mod error;
pub mod metrics;
pub mod persistence;
pub mod rng;
pub mod samplers;
pub mod scalar;
pub mod search_space;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor (`f64`).
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision tape (`f64`).
pub type Tape = tensor::Tape<f64>;
