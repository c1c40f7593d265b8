pub mod attrib;
pub mod classviz;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod tsne;
pub mod vizio;

pub use env::{Action, EnvConfig, EnvState};
pub use error::{Error, Result};
pub use network::{Objective, PolicyNetwork};
pub use tensor::{LayerGrads, Scalar, Tensor};
