//! Training, evaluation, checkpointing, visualization and experiment
//! drivers built on the model components.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod pipeline_check;
pub mod retrieval;
pub mod train;
pub mod visualize;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::Config;
pub use model::{Forward, Model, QuantizeMode, VideoForward};
pub use pipeline_check::{pipeline_gradcheck, PipelineCheck};
pub use retrieval::{evaluate_retrieval, Direction, RetrievalMetrics};
pub use train::{evaluate, Adam, Evaluation, StepReport, Trainer};
pub use visualize::{video_maps, visualize, VideoMaps};
