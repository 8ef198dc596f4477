//! Transformer-based multi-object tracking: a stacked-frame encoder predicts
//! a center heatmap, box sizes and per-object motion, which are decoded into
//! detections and linked over time by optimal assignment.

pub mod config;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod tracking;
pub mod trainer;

pub use config::{PathsConfig, RunConfig};
pub use dataio::{MotRow, SynthConfig};
pub use encoding::{DisplacementNorm, EmbeddingMode, FrameWindow, PipelineConfig, TokenMode};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossWeights, ObjectBox};
pub use metrics::{EvalReport, FrameAnnotations};
pub use model::{Model, ModelConfig, ModelOutput};
pub use numerics::{Graph, Tensor, Var};
pub use params::ParamStore;
pub use tracking::{AssocConfig, BBox, Detection, TrackRow, Tracker};
pub use trainer::{Phase, TmpSchedule, TrainReport, Trainer};
