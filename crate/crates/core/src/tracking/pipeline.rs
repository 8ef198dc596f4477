use std::time::{Duration, Instant};

use serde::Serialize;

use super::decode::{decode, extract_peaks};
use super::nms::nms;
use super::tracker::{AssocConfig, TrackRow, Tracker};
use crate::dataio::resize_bilinear;
use crate::encoding::{DisplacementNorm, FrameWindow, PipelineConfig};
use crate::error::Result;
use crate::metrics::fps;
use crate::model::{Model, ModelOutput};
use crate::numerics::Tensor;

/// Anything that turns a frame window into output maps.
pub trait Detector {
    fn infer(&mut self, window: &FrameWindow) -> Result<ModelOutput>;
}

impl Detector for Model {
    fn infer(&mut self, window: &FrameWindow) -> Result<ModelOutput> {
        self.forward(window)
    }
}

impl<D: Detector + ?Sized> Detector for &mut D {
    fn infer(&mut self, window: &FrameWindow) -> Result<ModelOutput> {
        (**self).infer(window)
    }
}

/// Returns empty maps without any computation; used to time the pipeline
/// overhead alone.
#[derive(Debug, Clone)]
pub struct NoopDetector {
    out: ModelOutput,
}

impl NoopDetector {
    pub fn new(grid: usize) -> Self {
        Self {
            out: ModelOutput {
                heatmap: Tensor::zeros(&[1, grid, grid]),
                dims: Tensor::zeros(&[2, grid, grid]),
                disp: Tensor::zeros(&[2, grid, grid]),
            },
        }
    }
}

impl Detector for NoopDetector {
    fn infer(&mut self, _window: &FrameWindow) -> Result<ModelOutput> {
        Ok(self.out.clone())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceRun {
    pub rows: Vec<TrackRow>,
    pub frames: usize,
    /// Wall time of resize, inference, decoding, NMS and association.
    pub elapsed: Duration,
    pub fps: f64,
}

/// Full tracking-by-detection loop over one sequence.
pub struct TrackingPipeline<D> {
    pub detector: D,
    pub pipeline: PipelineConfig,
    pub assoc: AssocConfig,
    pub norm: DisplacementNorm,
}

impl<D: Detector> TrackingPipeline<D> {
    pub fn new(
        detector: D,
        pipeline: PipelineConfig,
        assoc: AssocConfig,
        norm: DisplacementNorm,
    ) -> Self {
        Self {
            detector,
            pipeline,
            assoc,
            norm,
        }
    }

    /// Tracks `frames` (decoded `[3,H,W]` images in [0,1], at source
    /// resolution). Frames are numbered from 1 in the output.
    pub fn run(&mut self, frames: &[Tensor], source_size: (usize, usize)) -> Result<SequenceRun> {
        let s = self.pipeline.image_size;
        let mut tracker = Tracker::new(self.assoc.clone());
        let mut resized = Vec::with_capacity(frames.len());
        let mut rows = Vec::new();
        let start = Instant::now();
        for (t, raw) in frames.iter().enumerate() {
            resized.push(resize_bilinear(raw, s)?);
            let window = FrameWindow::ending_at(&resized, t, self.pipeline.window, source_size)?;
            let out = self.detector.infer(&window)?;
            let peaks = extract_peaks(&out.heatmap, self.assoc.heat_threshold)?;
            let dets = decode(&peaks, &out.dims, &out.disp, &self.norm)?;
            let dets = nms(&dets, self.assoc.nms_iou);
            rows.extend(tracker.step(&dets, t + 1)?);
        }
        let elapsed = start.elapsed();
        Ok(SequenceRun {
            rows,
            frames: frames.len(),
            elapsed,
            fps: fps(frames.len(), elapsed.as_secs_f64())?,
        })
    }
}
