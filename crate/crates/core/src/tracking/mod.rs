//! Detection decoding and identity association.

mod bbox;
mod decode;
mod hungarian;
mod nms;
mod pipeline;
mod tracker;

pub use bbox::{iou, BBox};
pub use decode::{cell_center, decode, extract_peaks, Detection, Peak};
pub use hungarian::{assignment_cost, hungarian};
pub use nms::{nms, nms_indices};
pub use pipeline::{Detector, NoopDetector, SequenceRun, TrackingPipeline};
pub use tracker::{build_cost, AssocConfig, CostKind, Track, TrackRow, TrackState, Tracker};
