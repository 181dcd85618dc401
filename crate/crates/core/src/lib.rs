//! Few-shot image classification by dynamic meta-filter alignment.
//!
//! Query feature maps are aligned to each class prototype by a continuous
//! flow `dx/dt = F(x; theta)` whose field is a grouped convolution with
//! position-specific filters generated from adaptively sampled prototype
//! neighbourhoods. Everything runs on a small reverse-mode tensor engine
//! ([`tape`], [`ops`]) in `f64`.

pub mod backbone;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metafilter;
pub mod model;
pub mod ode;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod reference;
pub mod runtime;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
