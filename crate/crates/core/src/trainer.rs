//! Phased multitask training: each output head is trained alone (the other
//! heads frozen and their loss terms weighted to zero), then all heads train
//! jointly. The shared trunk trains in every phase.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{DisplacementNorm, FrameWindow};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, render_targets, LossConfig, LossValues, LossWeights, ObjectBox, TargetMaps,
};
use crate::model::{HeadKind, Model};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Heatmap,
    Dims,
    Disp,
    Joint,
}

impl Phase {
    pub const TMP_ORDER: [Phase; 4] = [Phase::Heatmap, Phase::Dims, Phase::Disp, Phase::Joint];

    pub fn weights(self) -> LossWeights {
        let (w1, w2, w3) = match self {
            Phase::Heatmap => (1.0, 0.0, 0.0),
            Phase::Dims => (0.0, 1.0, 0.0),
            Phase::Disp => (0.0, 0.0, 1.0),
            Phase::Joint => (1.0, 1.0, 1.0),
        };
        LossWeights { w1, w2, w3 }
    }

    /// The only head this phase trains, or `None` when all train.
    pub fn active_head(self) -> Option<HeadKind> {
        match self {
            Phase::Heatmap => Some(HeadKind::Heatmap),
            Phase::Dims => Some(HeadKind::Dims),
            Phase::Disp => Some(HeadKind::Disp),
            Phase::Joint => None,
        }
    }

    /// Whether the parameter `name` is frozen during this phase.
    pub fn freezes(self, name: &str) -> bool {
        match self.active_head() {
            None => false,
            Some(active) => HeadKind::ALL
                .iter()
                .any(|&k| k != active && name.starts_with(&k.param_prefix())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Heatmap => "heatmap",
            Phase::Dims => "dims",
            Phase::Disp => "disp",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmpSchedule {
    pub phases: Vec<Phase>,
    pub epochs_per_phase: usize,
    /// Epochs without a new best loss before a phase stops early.
    pub patience: usize,
}

impl Default for TmpSchedule {
    fn default() -> Self {
        Self {
            phases: Phase::TMP_ORDER.to_vec(),
            epochs_per_phase: 50,
            patience: 10,
        }
    }
}

impl TmpSchedule {
    /// A single joint phase with the same total epoch budget.
    pub fn joint_only(&self) -> Self {
        Self {
            phases: vec![Phase::Joint],
            epochs_per_phase: self.epochs_per_phase * self.phases.len().max(1),
            patience: self.patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::config("schedule has no phases"));
        }
        let tmp = self.phases == Phase::TMP_ORDER;
        let joint = self.phases == [Phase::Joint];
        if !tmp && !joint {
            return Err(Error::config(format!(
                "phases must be [heatmap, dims, disp, joint] or [joint], got {:?}",
                self.phases
            )));
        }
        if self.epochs_per_phase > 0 && self.patience >= self.epochs_per_phase {
            return Err(Error::config(format!(
                "patience {} must be below epochs_per_phase {}",
                self.patience, self.epochs_per_phase
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples whose gradients are averaged per update.
    pub accumulation: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accumulation: 8,
        }
    }
}

impl OptimConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0) || !betas || !(self.eps > 0.0) || self.accumulation == 0 {
            return Err(Error::config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub step_count: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update from each parameter's `grad` (multiplied by
    /// `grad_scale`). Parameters with no gradient or for which `frozen`
    /// holds are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        frozen: impl Fn(&str) -> bool,
        grad_scale: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let OptimConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if frozen(name) {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let grad = grad.clone();
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                let g = g * grad_scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

/// Tracks the best loss seen and signals when `patience` epochs pass without
/// a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records an epoch loss; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

/// One training example: an input window and the targets for its newest frame.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub window: FrameWindow,
    pub targets: TargetMaps,
}

/// Builds one sample per frame of a sequence. `frames` are preprocessed
/// `[3,S,S]` tensors and `objects[t]` the annotations of frame `t`.
pub fn samples_from_sequence(
    frames: &[Tensor],
    objects: &[Vec<ObjectBox>],
    source_size: (usize, usize),
    window: usize,
    grid: usize,
    norm: &DisplacementNorm,
    loss: &LossConfig,
) -> Result<Vec<TrainSample>> {
    if frames.len() != objects.len() {
        return Err(Error::contract(format!(
            "{} frames but {} annotation frames",
            frames.len(),
            objects.len()
        )));
    }
    (0..frames.len())
        .map(|t| {
            let previous = if t == 0 { &[][..] } else { &objects[t - 1][..] };
            Ok(TrainSample {
                window: FrameWindow::ending_at(frames, t, window, source_size)?,
                targets: render_targets(&objects[t], previous, grid, norm, loss),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Mean loss components per epoch.
    pub components: Vec<LossValues>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean loss before any update, under the first phase's weights.
    pub initial_loss: f64,
    pub phases: Vec<PhaseReport>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.phases.last().and_then(|p| p.losses.last().copied())
    }
}

/// Hooks for progress logging and checkpointing.
pub trait TrainObserver {
    fn on_epoch(&mut self, _phase: Phase, _epoch: usize, _loss: &LossValues) {}
    fn on_phase_end(&mut self, _report: &PhaseReport, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct Trainer<'a> {
    pub model: &'a mut Model,
    pub loss: LossConfig,
    pub optim: Adam,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, loss: LossConfig, optim: OptimConfig, seed: u64) -> Self {
        Self {
            model,
            loss,
            optim: Adam::new(optim),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Forward pass and loss for one sample; with `backward`, gradients of
    /// the non-frozen parameters are added into the store.
    pub fn sample_loss(
        &mut self,
        sample: &TrainSample,
        phase: Phase,
        backward: bool,
    ) -> Result<LossValues> {
        let mut g = Graph::new();
        let bound = self
            .model
            .params
            .bind_with(&mut g, |name| backward && !phase.freezes(name));
        let out = self.model.forward_graph(&mut g, &sample.window, &bound)?;
        let lv = combined_loss(
            &mut g,
            out.heatmap,
            out.dims,
            out.disp,
            &sample.targets,
            self.loss.gamma,
            phase.weights(),
        )?;
        let values = lv.values(&g);
        if !values.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss in {} phase at frame {}: {values:?}",
                phase.name(),
                sample.window.frame_index
            )));
        }
        if backward {
            g.backward(lv.total)?;
            self.model.params.collect_grads(&g, &bound);
        }
        Ok(values)
    }

    /// Mean loss over `data` without updating anything.
    pub fn evaluate(&mut self, data: &[TrainSample], phase: Phase) -> Result<LossValues> {
        let mut acc = Accum::default();
        for s in data {
            acc.add(&self.sample_loss(s, phase, false)?);
        }
        Ok(acc.mean())
    }

    pub fn run_phase(
        &mut self,
        data: &[TrainSample],
        phase: Phase,
        schedule: &TmpSchedule,
        observer: &mut dyn TrainObserver,
    ) -> Result<PhaseReport> {
        if data.is_empty() {
            return Err(Error::contract("training data is empty"));
        }
        let mut stopper = EarlyStopper::new(schedule.patience);
        let mut report = PhaseReport {
            phase,
            epochs_run: 0,
            losses: Vec::new(),
            components: Vec::new(),
            stop: StopReason::MaxEpochs,
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = self.optim.cfg.accumulation;
        for epoch in 1..=schedule.epochs_per_phase {
            order.shuffle(&mut self.rng);
            let mut acc = Accum::default();
            for chunk in order.chunks(batch) {
                self.model.params.zero_grad();
                for &i in chunk {
                    acc.add(&self.sample_loss(&data[i], phase, true)?);
                }
                self.optim.step(
                    &mut self.model.params,
                    |n| phase.freezes(n),
                    1.0 / chunk.len() as f64,
                );
            }
            self.model.params.zero_grad();
            let mean = acc.mean();
            observer.on_epoch(phase, epoch, &mean);
            report.epochs_run = epoch;
            report.losses.push(mean.total);
            report.components.push(mean);
            if stopper.observe(mean.total) {
                report.stop = StopReason::Patience;
                break;
            }
        }
        observer.on_phase_end(&report, self.model)?;
        Ok(report)
    }

    /// Runs every phase of `schedule` in order.
    pub fn train(
        &mut self,
        data: &[TrainSample],
        schedule: &TmpSchedule,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainReport> {
        schedule.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training data is empty"));
        }
        let first = schedule.phases[0];
        let initial_loss = self.evaluate(data, first)?.total;
        let mut phases = Vec::new();
        if schedule.epochs_per_phase > 0 {
            for &phase in &schedule.phases {
                phases.push(self.run_phase(data, phase, schedule, observer)?);
            }
        }
        Ok(TrainReport {
            initial_loss,
            phases,
        })
    }
}

#[derive(Default)]
struct Accum {
    sum: LossValues,
    n: usize,
}

impl Accum {
    fn add(&mut self, v: &LossValues) {
        self.sum.center += v.center;
        self.sum.focal += v.focal;
        self.sum.grid_dims += v.grid_dims;
        self.sum.grid_disp += v.grid_disp;
        self.sum.total += v.total;
        self.n += 1;
    }

    fn mean(&self) -> LossValues {
        let n = self.n.max(1) as f64;
        LossValues {
            center: self.sum.center / n,
            focal: self.sum.focal / n,
            grid_dims: self.sum.grid_dims / n,
            grid_disp: self.sum.grid_disp / n,
            total: self.sum.total / n,
        }
    }
}
