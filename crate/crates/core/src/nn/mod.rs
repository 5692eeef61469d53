//! Minimal f64 tape autodiff and the layers built on it.
//!
//! Everything here is deterministic: parameter initialization and any
//! stochastic choice in a model take explicit seeds, and no thread ever
//! races another (training is single-threaded by design so runs are
//! bit-reproducible).

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod resnet;
pub mod transformer;

pub use conv::ConvSpec;
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{cosine_lr, Adam, SgdMomentum};
pub use params::{ParamId, ParamStore};
