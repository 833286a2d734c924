//! Dense matrices, LoRA-family adapters, their gradients, and the
//! measurement and training tools built on them.

pub mod adapters;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod gradients;
pub mod linalg;
pub mod matrix;
pub mod outlier;
pub mod rng;
pub mod trainer;

pub use adapters::{
    init_adapter, random_adapter, AdaptedLayer, Adapter, AdapterKind, AdapterSpec, GraLoraAdapter,
    HybridGraLoraAdapter, LoraAdapter,
};
pub use error::{Error, Result};
pub use gradients::{backward, forward, BatchInput, LayerGradients};
pub use matrix::Matrix;
