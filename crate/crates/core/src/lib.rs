//! Ensembling frozen diffusion denoisers with learned spatial feature
//! aggregation, plus mixture-of-experts and merging baselines.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod layers;
pub mod merge;
pub mod moe;
pub mod optim;
pub mod random;
pub mod sabw;
pub mod trainer;

pub use afa_autograd::{Graph, Real, Tensor, Var};
pub use error::{Error, Result};
