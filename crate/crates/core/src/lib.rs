//! Self-supervised representation learning for multivariate time series with
//! learned time embeddings.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod model;
pub mod params;
pub mod sampling;
pub mod tasks;
pub mod tensor;
pub mod time_embedding;
pub mod trainer;

pub use data::{Dataset, Labels};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use model::{Architecture, Granularity, Representation, TRepModel};
pub use params::{Bound, ParamStore};
pub use tasks::{LossReport, TaskConfig, TaskWeights};
pub use tensor::{Tape, Tensor, Var};
pub use time_embedding::{TeKind, TimeEmbeddingConfig};
pub use trainer::{encode_dataset, train, TrainConfig, TrainOutcome};
