//! Video captioning with stacked attention over a bidirectional LSTM encoder,
//! plus the data pipeline and metrics around it.

pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use tensor::{Tensor, TensorError};
