//! GAN workbench: a small reverse-mode tensor engine, the upsampling
//! squeeze-and-excitation (USE) and convolutional multi-head self-attention
//! (CMHSA) generator blocks, a DCGAN-style generator/discriminator family
//! with its four ablation variants, BCE adversarial training, FID/IS
//! evaluation, and a synthetic face dataset for desk-scale runs.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod plot;
pub mod rng;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod use_block;

pub use error::{Error, Result};
pub use ops::Mode;
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
