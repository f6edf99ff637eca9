pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rlc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use data::{Freq, Scaler, Segment, SeriesDataset, SplitSpec, WindowBatch, WindowSet};
pub use metrics::{EvalReport, Metrics};
pub use model::{Checkpoint, Model, ModelConfig};
pub use rlc::RlcWeights;
pub use train::{train, TrainConfig, TrainOutcome, Trainer};
