//! Toy-scale video super-resolution with spatially adaptive and temporally
//! aligned guidance inside a latent-diffusion stack.
//!
//! The crate is organised bottom-up: [`ops`] and [`graph`] provide the
//! differentiable kernels, [`tubelet`], [`adaptation`] and [`alignment`]
//! implement the guidance modules, [`networks`] assembles the upscaler, VAE,
//! latent encoder, UNet and refiner, [`diffusion`] holds the noise schedule
//! and samplers, and [`pipeline`] runs the staged training and inference.

pub mod adaptation;
pub mod alignment;
pub mod data_io;
pub mod diffusion;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod tubelet;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use rng::RngState;
pub use tensor::{Tensor, VideoTensor};
