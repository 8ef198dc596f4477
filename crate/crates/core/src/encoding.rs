//! Window stacking, patch tokenization, temporal/positional embeddings and
//! displacement normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One trainable vector per frame of the window.
    ChannelWise,
    /// One trainable vector per token position (ablation baseline).
    Positional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Frames concatenated along channels; `(S/P)²` tokens regardless of `W`.
    Stacked,
    /// Each frame tokenized separately; `W·(S/P)²` tokens.
    Streamed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub embedding_mode: EmbeddingMode,
    pub token_mode: TokenMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            window: 5,
            embed_dim: 64,
            embedding_mode: EmbeddingMode::ChannelWise,
            token_mode: TokenMode::Stacked,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::config("image_size and patch_size must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be at least 1"));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Encoder sequence length.
    pub fn num_tokens(&self) -> usize {
        match self.token_mode {
            TokenMode::Stacked => self.num_patches(),
            TokenMode::Streamed => self.window * self.num_patches(),
        }
    }

    /// Input channels seen by the patch projection.
    pub fn projection_channels(&self) -> usize {
        match self.token_mode {
            TokenMode::Stacked => 3 * self.window,
            TokenMode::Streamed => 3,
        }
    }
}

/// `W` consecutive frames, oldest first, each `[3,S,S]` with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    frames: Vec<Tensor>,
    /// Original `(height, width)` in pixels.
    pub source_size: (usize, usize),
    /// Index of the newest frame.
    pub frame_index: usize,
}

impl FrameWindow {
    pub fn new(
        frames: Vec<Tensor>,
        source_size: (usize, usize),
        frame_index: usize,
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("a window needs at least one frame"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::dim(format!("frames must be [3,S,S], got {shape:?}")));
        }
        for f in &frames {
            if f.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "frame shapes differ: {shape:?} vs {:?}",
                    f.shape()
                )));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract("frame values must lie in [0,1]"));
            }
        }
        Ok(Self {
            frames,
            source_size,
            frame_index,
        })
    }

    /// Window of `window` frames ending at `frames[newest]`; history before
    /// the first frame is filled by repeating frame 0.
    pub fn ending_at(
        frames: &[Tensor],
        newest: usize,
        window: usize,
        source_size: (usize, usize),
    ) -> Result<Self> {
        if newest >= frames.len() || window == 0 {
            return Err(Error::contract(format!(
                "window of {window} ending at frame {newest} of {}",
                frames.len()
            )));
        }
        let picked = (0..window)
            .map(|k| frames[(newest + k + 1).saturating_sub(window)].clone())
            .collect();
        Self::new(picked, source_size, newest)
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        if self.len() != cfg.window || self.image_size() != cfg.image_size {
            return Err(Error::config(format!(
                "window of {} frames at {}px does not match config ({} frames at {}px)",
                self.len(),
                self.image_size(),
                cfg.window,
                cfg.image_size
            )));
        }
        Ok(())
    }
}

/// Concatenates the window's frames along channels, oldest first: `[3W,S,S]`.
pub fn stack_window(w: &FrameWindow) -> Tensor {
    let s = w.image_size();
    let data = w
        .frames
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .collect();
    Tensor::new(&[3 * w.len(), s, s], data).expect("frames validated")
}

/// Splits a `[3W,S,S]` stack back into `W` frames.
pub fn unstack(stacked: &Tensor) -> Result<Vec<Tensor>> {
    let shape = stacked.shape();
    if shape.len() != 3 || !shape[0].is_multiple_of(3) {
        return Err(Error::dim(format!("cannot unstack {shape:?}")));
    }
    let frame_len = 3 * shape[1] * shape[2];
    stacked
        .data()
        .chunks(frame_len)
        .map(|c| Tensor::new(&[3, shape[1], shape[2]], c.to_vec()))
        .collect()
}

/// Non-overlapping `P×P` patch projection of `[C,S,S]` into `[(S/P)², n_d]`
/// tokens in row-major patch order.
pub fn patchify_project(g: &mut Graph, image: Var, proj: Var) -> Result<Var> {
    let img = g.shape(image).to_vec();
    let k = g.shape(proj).to_vec();
    if img.len() != 3 || k.len() != 4 {
        return Err(Error::dim(format!("patchify of {img:?} with kernel {k:?}")));
    }
    let p = k[2];
    if !img[1].is_multiple_of(p) || !img[2].is_multiple_of(p) {
        return Err(Error::config(format!(
            "image {}x{} is not divisible into {p}px patches",
            img[1], img[2]
        )));
    }
    let maps = g.conv2d(image, proj, p, 0)?;
    let n_d = k[0];
    let n_p = (img[1] / p) * (img[2] / p);
    let flat = g.reshape(maps, &[n_d, n_p])?;
    g.transpose(flat)
}

/// Graph handles of the embedding parameters in use.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddingVars {
    /// `[W, n_d]`, present in channel-wise mode.
    pub channel: Option<Var>,
    /// `[rows, n_d]` learned position table.
    pub position: Option<Var>,
}

/// Adds the configured embeddings to already-projected tokens.
///
/// * channel-wise, stacked: every token gets `Σ_w E[w]`
/// * channel-wise, streamed: token block `w` gets `E[w]`, patch `p` of each
///   block gets `pos[p]`
/// * positional: token `i` gets `pos[i]`
pub fn apply_embedding(
    g: &mut Graph,
    tokens: Var,
    cfg: &PipelineConfig,
    emb: EmbeddingVars,
) -> Result<Var> {
    let n_d = cfg.embed_dim;
    let expect = [cfg.num_tokens(), n_d];
    if g.shape(tokens) != expect {
        return Err(Error::config(format!(
            "tokens {:?} do not match config {expect:?}",
            g.shape(tokens)
        )));
    }
    match cfg.embedding_mode {
        EmbeddingMode::ChannelWise => {
            let e = emb
                .channel
                .ok_or_else(|| Error::config("channel-wise mode needs channel embeddings"))?;
            check_shape(g, e, &[cfg.window, n_d], "channel embeddings")?;
            match cfg.token_mode {
                TokenMode::Stacked => {
                    let total = sum_rows(g, e)?;
                    g.add_bias(tokens, total, 1)
                }
                TokenMode::Streamed => {
                    let pos = emb
                        .position
                        .ok_or_else(|| Error::config("streamed mode needs a position table"))?;
                    let n_p = cfg.num_patches();
                    check_shape(g, pos, &[n_p, n_d], "position table")?;
                    let w = cfg.window;
                    let per_frame = broadcast_rows(g, e, |t| t / n_p, w * n_p, n_d)?;
                    let per_patch = broadcast_rows(g, pos, |t| t % n_p, w * n_p, n_d)?;
                    let x = g.add(tokens, per_frame)?;
                    g.add(x, per_patch)
                }
            }
        }
        EmbeddingMode::Positional => {
            let pos = emb
                .position
                .ok_or_else(|| Error::config("positional mode needs a position table"))?;
            check_shape(g, pos, &expect, "position table")?;
            g.add(tokens, pos)
        }
    }
}

fn check_shape(g: &Graph, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if g.shape(v) != shape {
        return Err(Error::config(format!(
            "{what} has shape {:?}, expected {shape:?}",
            g.shape(v)
        )));
    }
    Ok(())
}

/// `Σ_rows m` as a 1-D `[cols]` vector.
pub(crate) fn sum_rows(g: &mut Graph, m: Var) -> Result<Var> {
    let (rows, cols) = (g.shape(m)[0], g.shape(m)[1]);
    let ones = g.constant(Tensor::ones(&[1, rows]));
    let s = g.matmul(ones, m)?;
    g.reshape(s, &[cols])
}

/// Builds `[rows, cols]` whose row `t` is row `src(t)` of `m`.
fn broadcast_rows(
    g: &mut Graph,
    m: Var,
    src: impl Fn(usize) -> usize,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let index = (0..rows)
        .flat_map(|t| {
            let r = src(t);
            (0..cols).map(move |c| r * cols + c)
        })
        .collect();
    g.gather(m, index, &[rows, cols])
}

/// Min/max per-step displacement per axis, as fractions of the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplacementNorm {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Default for DisplacementNorm {
    /// Extremes measured on the MOT17 training split.
    fn default() -> Self {
        Self {
            min_x: -0.0174,
            max_x: 0.0057,
            min_y: -0.0157,
            max_y: 0.0166,
        }
    }
}

/// Number of normalized components that fell outside `[-1,1]` and were clamped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampCounter(pub usize);

impl DisplacementNorm {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.min_x, self.max_x, self.min_y, self.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !ok || self.min_x >= self.max_x || self.min_y >= self.max_y {
            return Err(Error::config(format!(
                "displacement range must satisfy min < max per axis: {self:?}"
            )));
        }
        Ok(())
    }

    /// Maps `(dx, dy)` affinely onto `[-1,1]²`, clamping out-of-range values.
    pub fn normalize(&self, d: (f64, f64)) -> (f64, f64) {
        self.normalize_counted(d, &mut ClampCounter::default())
    }

    pub fn normalize_counted(&self, (dx, dy): (f64, f64), clamps: &mut ClampCounter) -> (f64, f64) {
        let mut axis = |v: f64, lo: f64, hi: f64| {
            let u = 2.0 * (v - lo) / (hi - lo) - 1.0;
            if !(-1.0..=1.0).contains(&u) {
                clamps.0 += 1;
            }
            u.clamp(-1.0, 1.0)
        };
        let u = axis(dx, self.min_x, self.max_x);
        let v = axis(dy, self.min_y, self.max_y);
        (u, v)
    }

    pub fn denormalize(&self, (u, v): (f64, f64)) -> Result<(f64, f64)> {
        if !(-1.0..=1.0).contains(&u) || !(-1.0..=1.0).contains(&v) {
            return Err(Error::contract(format!(
                "normalized displacement ({u}, {v}) outside [-1,1]"
            )));
        }
        let axis = |u: f64, lo: f64, hi: f64| lo + (u + 1.0) * 0.5 * (hi - lo);
        Ok((
            axis(u, self.min_x, self.max_x),
            axis(v, self.min_y, self.max_y),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(w: usize, s: usize) -> FrameWindow {
        let frames = (0..w)
            .map(|k| Tensor::from_fn(&[3, s, s], |i| ((i * 7 + k * 13) % 255) as f64 / 255.0))
            .collect();
        FrameWindow::new(frames, (s, s), w - 1).unwrap()
    }

    #[test]
    fn stack_shapes_and_order() {
        let w1 = window(1, 8);
        assert_eq!(stack_window(&w1), w1.frames()[0]);

        let w5 = window(5, 224);
        assert_eq!(stack_window(&w5).shape(), &[15, 224, 224]);

        let w2 = window(2, 64);
        let st = stack_window(&w2);
        assert_eq!(st.shape(), &[6, 64, 64]);
        let oldest = &st.data()[..3 * 64 * 64];
        assert_eq!(oldest, w2.frames()[0].data());
        assert_eq!(unstack(&st).unwrap(), w2.frames());
    }

    #[test]
    fn token_counts() {
        let vit_b16 = PipelineConfig {
            image_size: 224,
            patch_size: 16,
            ..Default::default()
        };
        assert_eq!(vit_b16.num_patches(), 196);
        let single = PipelineConfig {
            image_size: 16,
            patch_size: 16,
            ..Default::default()
        };
        assert_eq!(single.num_patches(), 1);
        assert_eq!(PipelineConfig::default().num_patches(), 64);
        for window in [1, 2, 5, 10, 20] {
            let cfg = PipelineConfig {
                window,
                ..Default::default()
            };
            assert_eq!(cfg.num_tokens(), 64);
        }
    }

    #[test]
    fn indivisible_patch_rejected() {
        let cfg = PipelineConfig {
            image_size: 60,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[3, 12, 12]));
        let k = g.constant(Tensor::zeros(&[4, 3, 8, 8]));
        assert!(matches!(
            patchify_project(&mut g, img, k),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_image_patch_is_one_token() {
        let mut g = Graph::new();
        let img = g.constant(Tensor::ones(&[3, 4, 4]));
        let k = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| {
            if i < 48 {
                1.0
            } else {
                0.5
            }
        }));
        let t = patchify_project(&mut g, img, k).unwrap();
        assert_eq!(g.shape(t), &[1, 2]);
        assert_eq!(g.value(t).data(), &[48.0, 24.0]);
    }

    #[test]
    fn zero_embeddings_are_identity() {
        for (emb, tok) in [
            (EmbeddingMode::ChannelWise, TokenMode::Stacked),
            (EmbeddingMode::ChannelWise, TokenMode::Streamed),
            (EmbeddingMode::Positional, TokenMode::Stacked),
        ] {
            let cfg = PipelineConfig {
                image_size: 16,
                patch_size: 8,
                window: 3,
                embed_dim: 4,
                embedding_mode: emb,
                token_mode: tok,
            };
            let mut g = Graph::new();
            let t = Tensor::from_fn(&[cfg.num_tokens(), 4], |i| i as f64 * 0.1);
            let tokens = g.constant(t.clone());
            let pos_rows = match emb {
                EmbeddingMode::Positional => cfg.num_tokens(),
                EmbeddingMode::ChannelWise => cfg.num_patches(),
            };
            let vars = EmbeddingVars {
                channel: Some(g.constant(Tensor::zeros(&[3, 4]))),
                position: Some(g.constant(Tensor::zeros(&[pos_rows, 4]))),
            };
            let out = apply_embedding(&mut g, tokens, &cfg, vars).unwrap();
            assert_eq!(g.value(out), &t);
        }
    }

    #[test]
    fn streamed_offsets_per_frame() {
        let cfg = PipelineConfig {
            image_size: 16,
            patch_size: 8,
            window: 2,
            embed_dim: 3,
            embedding_mode: EmbeddingMode::ChannelWise,
            token_mode: TokenMode::Streamed,
        };
        let mut g = Graph::new();
        let tokens = g.constant(Tensor::zeros(&[8, 3]));
        let e = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let vars = EmbeddingVars {
            channel: Some(g.constant(e)),
            position: Some(g.constant(Tensor::zeros(&[4, 3]))),
        };
        let out = apply_embedding(&mut g, tokens, &cfg, vars).unwrap();
        let v = g.value(out);
        assert_eq!(v.shape(), &[8, 3]);
        for t in 0..8 {
            let expect = if t < 4 {
                [1.0, 2.0, 3.0]
            } else {
                [10.0, 20.0, 30.0]
            };
            assert_eq!(&v.data()[t * 3..t * 3 + 3], &expect);
        }
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let cfg = PipelineConfig {
            image_size: 16,
            patch_size: 8,
            window: 2,
            embed_dim: 3,
            ..Default::default()
        };
        let mut g = Graph::new();
        let tokens = g.constant(Tensor::zeros(&[4, 3]));
        let r = apply_embedding(&mut g, tokens, &cfg, EmbeddingVars::default());
        assert!(matches!(r, Err(Error::Config(_))));
        let wrong = g.constant(Tensor::zeros(&[8, 3]));
        let vars = EmbeddingVars {
            channel: Some(g.constant(Tensor::zeros(&[2, 3]))),
            position: None,
        };
        assert!(matches!(
            apply_embedding(&mut g, wrong, &cfg, vars),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn displacement_endpoints_and_midpoint() {
        let n = DisplacementNorm::default();
        assert_eq!(n.normalize((-0.0174, 0.0)).0, -1.0);
        assert_eq!(n.normalize((0.0, 0.0166)).1, 1.0);
        let mid = (-0.0174 + 0.0057) / 2.0;
        assert!(n.normalize((mid, 0.0)).0.abs() < 1e-12);
        assert_eq!(n.denormalize((-1.0, 0.0)).unwrap().0, -0.0174);
        assert!((n.denormalize((0.0, 0.0)).unwrap().0 - (-0.00585)).abs() < 1e-15);
    }

    #[test]
    fn clamping_is_counted() {
        let n = DisplacementNorm::default();
        let mut c = ClampCounter::default();
        let (u, v) = n.normalize_counted((0.5, -0.5), &mut c);
        assert_eq!((u, v), (1.0, -1.0));
        assert_eq!(c.0, 2);
        assert!(matches!(n.denormalize((1.5, 0.0)), Err(Error::Contract(_))));
    }
}
