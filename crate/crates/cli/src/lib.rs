//! Command implementations behind the `stacktrack` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use stacktrack::dataio::{
    self, load_frames, parse_mot, synth_generate, write_results, MotRole, SeqInfo,
};
use stacktrack::losses::{LossValues, ObjectBox};
use stacktrack::metrics::{
    evaluate_sequence, render_table, EvalReport, EvalTotals, FrameAnnotations, MATCH_IOU,
};
use stacktrack::tracking::TrackingPipeline;
use stacktrack::trainer::{
    samples_from_sequence, Phase, PhaseReport, TrainObserver, TrainReport, TrainSample, Trainer,
};
use stacktrack::{EmbeddingMode, Model, RunConfig, Tensor, TokenMode};

#[derive(Debug, Parser)]
#[command(
    name = "stacktrack",
    version,
    about = "Train, run and evaluate a transformer-based multi-object tracker"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (and the synthetic data seed).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Train all heads jointly in one phase instead of the phased schedule.
    #[arg(long, global = true)]
    pub no_tmp: bool,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub embedding: Option<EmbeddingArg>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences into `paths.data_dir`.
    Synth,
    /// Train a model on the sequences in `paths.data_dir`.
    Train,
    /// Track every sequence and write MOTChallenge result files.
    Track,
    /// Score result files against ground truth.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Stacked,
    Streamed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingArg {
    #[value(name = "channel_wise")]
    ChannelWise,
    Positional,
}

/// A failure with its process exit code: 1 for usage or configuration
/// problems, 2 for errors while running.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<stacktrack::Error>() {
            Some(stacktrack::Error::Config(_)) => 1,
            _ => 2,
        };
        Self { code, error }
    }
}

impl From<stacktrack::Error> for CliError {
    fn from(error: stacktrack::Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reads the configuration, applies flag overrides and validates it.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(CliError::config)?;
            RunConfig::from_toml(&text)
                .with_context(|| format!("in config {}", path.display()))
                .map_err(CliError::config)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.model.pipeline.token_mode = match mode {
            ModeArg::Stacked => TokenMode::Stacked,
            ModeArg::Streamed => TokenMode::Streamed,
        };
    }
    if let Some(e) = cli.embedding {
        cfg.model.pipeline.embedding_mode = match e {
            EmbeddingArg::ChannelWise => EmbeddingMode::ChannelWise,
            EmbeddingArg::Positional => EmbeddingMode::Positional,
        };
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if cli.no_tmp {
        cfg.schedule = cfg.schedule.joint_only();
    }
    cfg.validate()
        .context("invalid configuration")
        .map_err(CliError::config)?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::Synth => {
            let names = cmd_synth(&cfg)?;
            println!(
                "wrote {} sequences to {}",
                names.len(),
                cfg.paths.data_dir.display()
            );
        }
        Command::Train => {
            let out = cmd_train(&cfg)?;
            println!(
                "initial loss {:.6}, final loss {:.6} after {} phase(s); model at {}",
                out.report.initial_loss,
                out.report.final_loss().unwrap_or(f64::NAN),
                out.report.phases.len(),
                out.checkpoint.display()
            );
        }
        Command::Track => {
            for t in cmd_track(&cfg)? {
                println!(
                    "{}: {} frames, {} rows, {:.2} FPS",
                    t.sequence, t.frames, t.rows, t.fps
                );
            }
        }
        Command::Eval => {
            let reports = cmd_eval(&cfg)?;
            print!("{}", render_table(&reports));
        }
    }
    Ok(())
}

/// Generates the synthetic dataset into `paths.data_dir`.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let seqs = synth_generate(&cfg.synth)?;
    for s in &seqs {
        s.write(&cfg.paths.data_dir)
            .with_context(|| format!("writing sequence {}", s.name))?;
    }
    Ok(seqs.into_iter().map(|s| s.name).collect())
}

/// A sequence directory in the MOT17 layout.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub name: String,
    pub root: PathBuf,
    pub info: Option<SeqInfo>,
}

impl SequenceDir {
    pub fn image_dir(&self) -> PathBuf {
        let dir = self.info.as_ref().map_or("img1", |i| i.im_dir.as_str());
        self.root.join(dir)
    }

    pub fn gt_path(&self) -> PathBuf {
        self.root.join("gt").join("gt.txt")
    }

    /// Source resolution from `seqinfo.ini`, else from the first frame.
    pub fn source_size(&self) -> anyhow::Result<(usize, usize)> {
        if let Some(i) = &self.info {
            return Ok((i.im_width, i.im_height));
        }
        let first = dataio::list_frames(&self.image_dir())?
            .into_iter()
            .next()
            .ok_or_else(|| anyhow!("no frames in {}", self.image_dir().display()))?;
        let img = dataio::read_frame(&first)?;
        Ok((img.shape()[2], img.shape()[1]))
    }

    pub fn ground_truth(&self, source: (usize, usize)) -> anyhow::Result<Vec<FrameAnnotations>> {
        let path = self.gt_path();
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        parse_mot(&text, source, MotRole::GroundTruth)
            .with_context(|| format!("in {}", path.display()))
    }
}

/// Sequence directories under `paths.data_dir`, sorted by name and
/// restricted to `paths.sequences` when that is non-empty.
pub fn discover_sequences(cfg: &RunConfig) -> anyhow::Result<Vec<SequenceDir>> {
    let root = &cfg.paths.data_dir;
    if !root.is_dir() {
        bail!("data directory {} does not exist", root.display());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let info_path = path.join("seqinfo.ini");
        let info = if info_path.is_file() {
            Some(SeqInfo::read(&info_path)?)
        } else {
            None
        };
        let seq = SequenceDir {
            name,
            root: path,
            info,
        };
        if seq.image_dir().is_dir() {
            found.push(seq);
        }
    }
    found.sort_by(|a, b| a.name.cmp(&b.name));
    if !cfg.paths.sequences.is_empty() {
        for want in &cfg.paths.sequences {
            if !found.iter().any(|s| &s.name == want) {
                bail!("sequence {want} not found in {}", root.display());
            }
        }
        found.retain(|s| cfg.paths.sequences.contains(&s.name));
    }
    if found.is_empty() {
        bail!("no sequences found in {}", root.display());
    }
    Ok(found)
}

/// Training samples for one sequence.
pub fn load_training_samples(
    cfg: &RunConfig,
    seq: &SequenceDir,
) -> anyhow::Result<Vec<TrainSample>> {
    let p = &cfg.model.pipeline;
    let source = seq.source_size()?;
    let frames = load_frames(&seq.image_dir(), Some(p.image_size))?;
    let gt = seq.ground_truth(source)?;
    let mut objects: Vec<Vec<ObjectBox>> = vec![Vec::new(); frames.len()];
    for f in gt {
        if let Some(slot) = f.frame.checked_sub(1).and_then(|i| objects.get_mut(i)) {
            *slot = f
                .objects
                .iter()
                .map(|&(id, bbox)| ObjectBox { id, bbox })
                .collect();
        }
    }
    let samples = samples_from_sequence(
        &frames,
        &objects,
        source,
        p.window,
        cfg.model.grid,
        &cfg.displacement,
        &cfg.loss,
    )?;
    Ok(samples)
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    sequences: &'a [String],
    samples: usize,
    schedule: Vec<Phase>,
    parameters: usize,
    report: &'a TrainReport,
}

/// Writes one log line per epoch and a checkpoint at the end of every phase.
struct FileObserver {
    log: fs::File,
    out_dir: PathBuf,
    checkpoints: Vec<PathBuf>,
}

impl TrainObserver for FileObserver {
    fn on_epoch(&mut self, phase: Phase, epoch: usize, l: &LossValues) {
        let _ = writeln!(
            self.log,
            "phase={} epoch={} total={:.8} center={:.8} focal={:.8} grid_dims={:.8} grid_disp={:.8}",
            phase.name(),
            epoch,
            l.total,
            l.center,
            l.focal,
            l.grid_dims,
            l.grid_disp
        );
    }

    fn on_phase_end(&mut self, report: &PhaseReport, model: &Model) -> stacktrack::Result<()> {
        let path = self.out_dir.join(format!(
            "phase{}_{}.ckpt",
            self.checkpoints.len() + 1,
            report.phase.name()
        ));
        model.save(&path)?;
        let _ = writeln!(
            self.log,
            "phase={} done epochs={} stop={:?} checkpoint={}",
            report.phase.name(),
            report.epochs_run,
            report.stop,
            path.display()
        );
        self.checkpoints.push(path);
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub phase_checkpoints: Vec<PathBuf>,
}

/// Trains on every discovered sequence. Outputs go to `paths.out_dir`:
/// `config.toml`, `train.log`, one checkpoint per phase, `model.ckpt` and
/// `train_summary.json`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let seqs = discover_sequences(cfg)?;
    let mut data = Vec::new();
    for s in &seqs {
        data.extend(
            load_training_samples(cfg, s)
                .with_context(|| format!("loading sequence {}", s.name))?,
        );
    }
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let log_path = out.join("train.log");
    let log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut observer = FileObserver {
        log,
        out_dir: out.clone(),
        checkpoints: Vec::new(),
    };
    let report = {
        let mut trainer = Trainer::new(&mut model, cfg.loss.clone(), cfg.optim.clone(), cfg.seed);
        trainer.train(&data, &cfg.schedule, &mut observer)?
    };
    let checkpoint = cfg.checkpoint_path();
    model.save(&checkpoint)?;

    let names: Vec<String> = seqs.iter().map(|s| s.name.clone()).collect();
    let summary = TrainSummary {
        sequences: &names,
        samples: data.len(),
        schedule: cfg.schedule.phases.clone(),
        parameters: model.params.numel(),
        report: &report,
    };
    let json = serde_json::to_string_pretty(&summary).context("serializing train summary")?;
    write_file(&out.join("train_summary.json"), json.as_bytes())?;
    Ok(TrainOutcome {
        report,
        checkpoint,
        phase_checkpoints: observer.checkpoints,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackOutcome {
    pub sequence: String,
    pub frames: usize,
    pub rows: usize,
    pub seconds: f64,
    pub fps: f64,
    pub results: PathBuf,
}

/// Tracks every discovered sequence with the trained checkpoint, writing
/// `<results_dir>/<sequence>.txt` and `<out_dir>/track_summary.json`.
pub fn cmd_track(cfg: &RunConfig) -> CliResult<Vec<TrackOutcome>> {
    let seqs = discover_sequences(cfg)?;
    let ckpt = cfg.checkpoint_path();
    let model = Model::load_with_config(&ckpt, cfg.model.clone())
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let mut pipeline = TrackingPipeline::new(
        model,
        cfg.model.pipeline.clone(),
        cfg.assoc.clone(),
        cfg.displacement,
    );
    let results_dir = cfg.results_dir();
    fs::create_dir_all(&results_dir)
        .with_context(|| format!("creating {}", results_dir.display()))?;
    let mut outcomes = Vec::new();
    for s in &seqs {
        let source = s.source_size()?;
        let frames: Vec<Tensor> = load_frames(&s.image_dir(), None)?;
        let run = pipeline
            .run(&frames, source)
            .with_context(|| format!("tracking {}", s.name))?;
        let path = results_dir.join(format!("{}.txt", s.name));
        write_file(&path, write_results(&run.rows, source).as_bytes())?;
        outcomes.push(TrackOutcome {
            sequence: s.name.clone(),
            frames: run.frames,
            rows: run.rows.len(),
            seconds: run.elapsed.as_secs_f64(),
            fps: run.fps,
            results: path,
        });
    }
    let json = serde_json::to_string_pretty(&outcomes).context("serializing track summary")?;
    write_file(
        &cfg.paths.out_dir.join("track_summary.json"),
        json.as_bytes(),
    )?;
    Ok(outcomes)
}

/// Evaluates `<results_dir>/<sequence>.txt` against each sequence's ground
/// truth. Returns one report per sequence followed by a combined `OVERALL`
/// report, and writes them to `<out_dir>/report.txt` and `report.json`.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<Vec<EvalReport>> {
    let seqs = discover_sequences(cfg)?;
    let results_dir = cfg.results_dir();
    let fps = read_fps(&cfg.paths.out_dir.join("track_summary.json"));
    let mut reports = Vec::new();
    let mut overall = EvalTotals::default();
    let (mut frames, mut seconds) = (0usize, 0.0f64);
    for s in &seqs {
        let source = s.source_size()?;
        let gt = s.ground_truth(source)?;
        let path = results_dir.join(format!("{}.txt", s.name));
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading results {}", path.display()))?;
        let pred = parse_mot(&text, source, MotRole::Prediction)
            .with_context(|| format!("in {}", path.display()))?;
        let (totals, _) = evaluate_sequence(&gt, &pred, MATCH_IOU);
        overall.merge(&totals);
        let seq_fps = fps.get(&s.name).copied();
        if let Some(t) = seq_fps {
            frames += t.0;
            seconds += t.1;
        }
        reports.push(EvalReport::from_totals(
            &s.name,
            &totals,
            seq_fps.map(|t| t.2),
        ));
    }
    let overall_fps = (seconds > 0.0).then(|| frames as f64 / seconds);
    reports.push(EvalReport::from_totals("OVERALL", &overall, overall_fps));

    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("report.txt"), render_table(&reports).as_bytes())?;
    let json = serde_json::to_string_pretty(&reports).context("serializing report")?;
    write_file(&out.join("report.json"), json.as_bytes())?;
    Ok(reports)
}

/// `(frames, seconds, fps)` per sequence from a track summary, if present.
fn read_fps(path: &Path) -> BTreeMap<String, (usize, f64, f64)> {
    let Ok(text) = fs::read_to_string(path) else {
        return BTreeMap::new();
    };
    let Ok(outcomes) = serde_json::from_str::<Vec<TrackOutcome>>(&text) else {
        return BTreeMap::new();
    };
    outcomes
        .into_iter()
        .map(|t| (t.sequence, (t.frames, t.seconds, t.fps)))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Result of training, tracking and evaluating once with the phased
/// schedule and once with joint-only training, from the same seed.
#[derive(Debug)]
pub struct Ablation {
    pub tmp: EvalReport,
    pub joint: EvalReport,
    pub report_path: PathBuf,
}

/// Runs the phased-vs-joint comparison under `<out_dir>/tmp` and
/// `<out_dir>/joint` and writes `<out_dir>/comparison.txt`.
pub fn cmd_ablation(cfg: &RunConfig) -> CliResult<Ablation> {
    let base = cfg.paths.out_dir.clone();
    let mut overall = Vec::new();
    for (label, joint) in [("tmp", false), ("joint", true)] {
        let mut c = cfg.clone();
        c.paths.out_dir = base.join(label);
        c.paths.checkpoint = None;
        c.paths.results_dir = None;
        if joint {
            c.schedule = c.schedule.joint_only();
        }
        cmd_train(&c)?;
        cmd_track(&c)?;
        let mut reports = cmd_eval(&c)?;
        let mut last = reports.pop().expect("eval always adds an overall report");
        last.name = label.to_uppercase();
        overall.push(last);
    }
    let joint = overall.pop().unwrap();
    let tmp = overall.pop().unwrap();
    let text = render_table(&[tmp.clone(), joint.clone()]);
    let report_path = base.join("comparison.txt");
    write_file(&report_path, text.as_bytes())?;
    Ok(Ablation {
        tmp,
        joint,
        report_path,
    })
}
