//! Seeded synthetic sequences: coloured rectangles moving at constant
//! velocity (plus jitter) over a textured background, with occluders.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frames::write_ppm;
use super::mot::{group_frames, MotRow};
use super::seqinfo::SeqInfo;
use crate::error::{Error, Result};
use crate::metrics::FrameAnnotations;
use crate::numerics::Tensor;
use crate::tracking::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Largest |vx| in image fractions per frame.
    pub max_speed_x: f64,
    /// Largest |vy| in image fractions per frame.
    pub max_speed_y: f64,
    /// Largest per-frame random offset added to each velocity component.
    pub jitter: f64,
    /// Box side range as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    pub occluders: usize,
    pub occluder_duration: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sequences: 20,
            frames_per_sequence: 10,
            objects_min: 2,
            objects_max: 4,
            image_width: 160,
            image_height: 120,
            max_speed_x: 0.004,
            max_speed_y: 0.008,
            jitter: 0.0005,
            size_min: 0.15,
            size_max: 0.3,
            occluders: 1,
            occluder_duration: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synth: {m}")));
        if self.num_sequences == 0 || self.frames_per_sequence == 0 {
            return bad("num_sequences and frames_per_sequence must be positive");
        }
        if self.objects_min > self.objects_max || self.objects_max > PALETTE.len() {
            return bad("object count range must satisfy min <= max <= 8");
        }
        if self.image_width < 8 || self.image_height < 8 {
            return bad("image must be at least 8x8");
        }
        if !(0.0 < self.size_min && self.size_min <= self.size_max && self.size_max < 0.5) {
            return bad("size range must satisfy 0 < min <= max < 0.5");
        }
        let speeds = [self.max_speed_x, self.max_speed_y, self.jitter];
        if speeds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("speeds and jitter must be finite and >= 0");
        }
        Ok(())
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.9, 0.9],
    [1.0, 0.55, 0.1],
    [0.98, 0.98, 0.98],
];
const PLACEMENT_TRIES: usize = 64;
const OCCLUDER: [f64; 3] = [0.05, 0.05, 0.05];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// `[3,H,W]` frames in [0,1].
    pub frames: Vec<Tensor>,
    /// Ground truth with every object in every frame.
    pub gt: Vec<MotRow>,
}

impl SyntheticSequence {
    pub fn annotations(&self) -> Vec<FrameAnnotations> {
        group_frames(&self.gt, (self.width, self.height))
            .expect("generated ids are unique per frame")
    }

    /// Writes the MOT17-style layout: `<dir>/<name>/{img1/000001.ppm, gt/gt.txt, seqinfo.ini}`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let root = dir.join(&self.name);
        let img = root.join("img1");
        let gt = root.join("gt");
        for d in [&img, &gt] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (t, f) in self.frames.iter().enumerate() {
            write_ppm(&img.join(format!("{:06}.ppm", t + 1)), f)?;
        }
        let text: String = self.gt.iter().map(|r| r.to_line() + "\n").collect();
        let gt_path = gt.join("gt.txt");
        fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;
        SeqInfo {
            name: self.name.clone(),
            im_dir: "img1".into(),
            frame_rate: 30,
            seq_length: self.frames.len(),
            im_width: self.width,
            im_height: self.height,
            im_ext: ".ppm".into(),
        }
        .write(&root.join("seqinfo.ini"))
    }
}

struct Mover {
    bbox: BBox,
    vel: (f64, f64),
    color: [f64; 3],
}

/// Generates `cfg.num_sequences` sequences; identical configs give
/// bit-identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SyntheticSequence>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_sequences)
        .map(|k| {
            let seed = master.random::<u64>();
            generate_one(cfg, format!("SYN-{:02}", k + 1), seed)
        })
        .collect()
}

fn generate_one(cfg: &SynthConfig, name: String, seed: u64) -> Result<SyntheticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.image_width, cfg.image_height);
    let background = texture(&mut rng, w, h);

    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut colors = PALETTE.to_vec();
    for i in (1..colors.len()).rev() {
        colors.swap(i, rng.random_range(0..=i));
    }
    let sym = |rng: &mut ChaCha8Rng, m: f64| {
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let mut movers: Vec<Mover> = Vec::with_capacity(count);
    for &color in colors.iter().take(count) {
        // Start positions avoid overlap where a few tries allow it.
        let mut bbox = BBox::new(0.5, 0.5, cfg.size_min, cfg.size_min);
        for _ in 0..PLACEMENT_TRIES {
            let bw = rng.random_range(cfg.size_min..=cfg.size_max);
            let bh = rng.random_range(cfg.size_min..=cfg.size_max);
            let cx = rng.random_range(bw / 2.0..=1.0 - bw / 2.0);
            let cy = rng.random_range(bh / 2.0..=1.0 - bh / 2.0);
            bbox = BBox::new(cx, cy, bw, bh);
            if movers.iter().all(|m| overlap_area(&m.bbox, &bbox) == 0.0) {
                break;
            }
        }
        let vel = (
            sym(&mut rng, cfg.max_speed_x),
            sym(&mut rng, cfg.max_speed_y),
        );
        movers.push(Mover { bbox, vel, color });
    }

    let n = cfg.frames_per_sequence;
    let occluders: Vec<(usize, usize, BBox)> = (0..cfg.occluders)
        .map(|_| {
            let start = rng.random_range(0..n);
            let ow = rng.random_range(0.15..=0.3);
            let oh = rng.random_range(0.15..=0.3);
            let cx = rng.random_range(ow / 2.0..=1.0 - ow / 2.0);
            let cy = rng.random_range(oh / 2.0..=1.0 - oh / 2.0);
            (
                start,
                start + cfg.occluder_duration,
                BBox::new(cx, cy, ow, oh),
            )
        })
        .collect();

    let mut frames = Vec::with_capacity(n);
    let mut gt = Vec::new();
    for t in 0..n {
        if t > 0 {
            for m in &mut movers {
                let step = (
                    m.vel.0 + sym(&mut rng, cfg.jitter),
                    m.vel.1 + sym(&mut rng, cfg.jitter),
                );
                let (dx, flip_x) = bounce(m.bbox.cx, m.bbox.w, step.0);
                let (dy, flip_y) = bounce(m.bbox.cy, m.bbox.h, step.1);
                if flip_x {
                    m.vel.0 = -m.vel.0;
                }
                if flip_y {
                    m.vel.1 = -m.vel.1;
                }
                m.bbox = m.bbox.shifted(dx, dy);
            }
        }
        let active: Vec<BBox> = occluders
            .iter()
            .filter(|(s, e, _)| (*s..*e).contains(&t))
            .map(|o| o.2)
            .collect();
        let mut img = background.clone();
        for m in &movers {
            fill(&mut img, &m.bbox, m.color);
        }
        for o in &active {
            fill(&mut img, o, OCCLUDER);
        }
        for (i, m) in movers.iter().enumerate() {
            let hidden: f64 = active
                .iter()
                .map(|o| overlap_area(&m.bbox, o))
                .sum::<f64>()
                .min(m.bbox.area());
            gt.push(MotRow {
                visibility: 1.0 - hidden / m.bbox.area(),
                class_id: 1,
                ..MotRow::from_bbox(t + 1, i as i64 + 1, &m.bbox, (w, h))
            });
        }
        frames.push(img);
    }
    Ok(SyntheticSequence {
        name,
        width: w,
        height: h,
        frames,
        gt,
    })
}

/// Step along one axis that keeps `[c − s/2, c + s/2]` inside [0,1],
/// reversing direction when the step would leave it.
fn bounce(c: f64, s: f64, step: f64) -> (f64, bool) {
    let next = c + step;
    if next - s / 2.0 < 0.0 || next + s / 2.0 > 1.0 {
        (-step, true)
    } else {
        (step, false)
    }
}

fn overlap_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0)
}

fn texture(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Tensor {
    let phase: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let fx = rng.random_range(2.0..5.0);
    let fy = rng.random_range(2.0..5.0);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64;
                let v = y as f64 / h as f64;
                let wave = (std::f64::consts::TAU * (fx * u + phase[c])).sin()
                    * (std::f64::consts::TAU * (fy * v + phase[(c + 1) % 3])).cos();
                let noise: f64 = rng.random_range(-0.03..0.03);
                d[c * h * w + y * w + x] = (0.4 + 0.08 * wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    t
}

/// Paints pixels whose centers fall inside `b`.
fn fill(img: &mut Tensor, b: &BBox, color: [f64; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (x1, y1, x2, y2) = b.corners();
    let span = |lo: f64, hi: f64, n: usize| {
        let a = (lo * n as f64 - 0.5).ceil().max(0.0) as usize;
        let b = ((hi * n as f64 - 0.5).ceil().max(0.0) as usize).min(n);
        a..b
    };
    let d = img.data_mut();
    for y in span(y1, y2, h) {
        for x in span(x1, x2, w) {
            for (c, v) in color.iter().enumerate() {
                d[c * h * w + y * w + x] = *v;
            }
        }
    }
}
