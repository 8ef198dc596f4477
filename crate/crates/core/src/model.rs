//! Encoder-only transformer over window tokens, followed by a projection back
//! to spatial maps and three grid heads (center heatmap, box size, motion).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{
    apply_embedding, EmbeddingMode, EmbeddingVars, FrameWindow, PipelineConfig, TokenMode,
};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub pipeline: PipelineConfig,
    /// Transformer blocks.
    pub layers: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Output grid side `R`.
    pub grid: usize,
    /// Hidden width of the output heads.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            grid: 16,
            head_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        let d = self.pipeline.embed_dim;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {d} is not divisible by {} attention heads",
                self.heads
            )));
        }
        if self.grid < 2 {
            return Err(Error::config("output grid side must be at least 2"));
        }
        let side = self.pipeline.grid_side();
        if !self.grid.is_multiple_of(side) {
            return Err(Error::config(format!(
                "output grid {} is not a multiple of the {side} patches per side",
                self.grid
            )));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 {
            return Err(Error::config("mlp_ratio and head_hidden must be positive"));
        }
        Ok(())
    }

    /// Output cells per patch side.
    pub fn cells_per_patch(&self) -> usize {
        self.grid / self.pipeline.grid_side()
    }

    fn map_channels_per_token(&self) -> usize {
        match self.pipeline.token_mode {
            TokenMode::Stacked => self.pipeline.window,
            TokenMode::Streamed => 1,
        }
    }

    fn position_rows(&self) -> Option<usize> {
        let p = &self.pipeline;
        match (p.embedding_mode, p.token_mode) {
            (EmbeddingMode::Positional, _) => Some(p.num_tokens()),
            (EmbeddingMode::ChannelWise, TokenMode::Streamed) => Some(p.num_patches()),
            (EmbeddingMode::ChannelWise, TokenMode::Stacked) => None,
        }
    }

    /// Number of scalar parameters the model holds.
    pub fn param_count(&self) -> usize {
        let p = &self.pipeline;
        let d = p.embed_dim;
        let hm = d * self.mlp_ratio;
        let k2 = self.cells_per_patch().pow(2);
        let (r, hh, w) = (self.grid, self.head_hidden, p.window);

        let mut n = d * p.projection_channels() * p.patch_size.pow(2) + d;
        if p.embedding_mode == EmbeddingMode::ChannelWise {
            n += w * d;
        }
        n += self.position_rows().map_or(0, |rows| rows * d);
        let block =
            2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hm + hm) + (hm * d + d);
        n += self.layers * block;
        let c = self.map_channels_per_token() * k2;
        n += d * c + c;
        for kind in HeadKind::ALL {
            let out = kind.out_dim();
            n += (r * hh + hh) + (hh * r + r) + (hh * w * 9 + hh) + (out * hh * 9 + out);
        }
        n
    }

    /// Analytic multiply-accumulate counts of one forward pass.
    pub fn cost(&self) -> CostBreakdown {
        let p = &self.pipeline;
        let (d, w, n) = (p.embed_dim, p.window, p.num_tokens());
        let hm = d * self.mlp_ratio;
        let mut tokenize = d * 3 * p.patch_size.pow(2) * p.num_patches() * w;
        if p.embedding_mode == EmbeddingMode::ChannelWise && p.token_mode == TokenMode::Stacked {
            tokenize += w * d;
        }
        let encoder = self.layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * hm);
        let projection = n * d * self.map_channels_per_token() * self.cells_per_patch().pow(2);
        let (r, hh) = (self.grid, self.head_hidden);
        let heads = HeadKind::ALL
            .iter()
            .map(|k| 2 * w * r * r * hh + hh * w * 9 * r * r + k.out_dim() * hh * 9 * r * r)
            .sum::<usize>();
        CostBreakdown {
            tokens: n,
            tokenize: tokenize as u64,
            encoder: encoder as u64,
            projection: projection as u64,
            heads: heads as u64,
        }
    }
}

/// Multiply-accumulate operations per stage of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    /// Encoder sequence length.
    pub tokens: usize,
    pub tokenize: u64,
    pub encoder: u64,
    pub projection: u64,
    pub heads: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.tokenize + self.encoder + self.projection + self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Heatmap,
    Dims,
    Disp,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Heatmap, HeadKind::Dims, HeadKind::Disp];

    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Heatmap => 1,
            HeadKind::Dims | HeadKind::Disp => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Heatmap => "heatmap",
            HeadKind::Dims => "dims",
            HeadKind::Disp => "disp",
        }
    }

    /// Prefix shared by every parameter of this head.
    pub fn param_prefix(self) -> String {
        format!("heads.{}.", self.name())
    }
}

/// Current-frame predictions on an `R×R` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `[1,R,R]`, center probability in (0,1).
    pub heatmap: Tensor,
    /// `[2,R,R]`, (width, height) as image fractions in (0,1).
    pub dims: Tensor,
    /// `[2,R,R]`, normalized (dx, dy) from the previous frame in (-1,1).
    pub disp: Tensor,
}

impl ModelOutput {
    pub fn grid(&self) -> usize {
        self.heatmap.shape()[1]
    }
}

/// Graph handles of every stage of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub tokens: Var,
    pub encoded: Var,
    pub maps: Var,
    pub heatmap: Var,
    pub dims: Var,
    pub disp: Var,
    /// Multiplies spent inside the encoder blocks.
    pub encoder_macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    pub params: ParamStore,
}

const INIT_STD: f64 = 0.02;

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let p = &cfg.pipeline;
        let d = p.embed_dim;
        let hm = d * cfg.mlp_ratio;
        let mut trunc = |shape: &[usize], std: f64| truncated_normal(&mut rng, shape, std);

        params.insert(
            "embed.proj",
            trunc(
                &[d, p.projection_channels(), p.patch_size, p.patch_size],
                INIT_STD,
            ),
        );
        params.insert("embed.proj_bias", Tensor::zeros(&[d]));
        if p.embedding_mode == EmbeddingMode::ChannelWise {
            params.insert("embed.channel", trunc(&[p.window, d], INIT_STD));
        }
        if let Some(rows) = cfg.position_rows() {
            params.insert("embed.pos", trunc(&[rows, d], INIT_STD));
        }
        for l in 0..cfg.layers {
            let pre = format!("encoder.{l}.");
            params.insert(format!("{pre}ln1.gain"), Tensor::ones(&[d]));
            params.insert(format!("{pre}ln1.bias"), Tensor::zeros(&[d]));
            params.insert(
                format!("{pre}attn.qkv.weight"),
                trunc(&[d, 3 * d], INIT_STD),
            );
            params.insert(format!("{pre}attn.qkv.bias"), Tensor::zeros(&[3 * d]));
            params.insert(format!("{pre}attn.out.weight"), trunc(&[d, d], INIT_STD));
            params.insert(format!("{pre}attn.out.bias"), Tensor::zeros(&[d]));
            params.insert(format!("{pre}ln2.gain"), Tensor::ones(&[d]));
            params.insert(format!("{pre}ln2.bias"), Tensor::zeros(&[d]));
            params.insert(format!("{pre}mlp.fc1.weight"), trunc(&[d, hm], INIT_STD));
            params.insert(format!("{pre}mlp.fc1.bias"), Tensor::zeros(&[hm]));
            params.insert(format!("{pre}mlp.fc2.weight"), trunc(&[hm, d], INIT_STD));
            params.insert(format!("{pre}mlp.fc2.bias"), Tensor::zeros(&[d]));
        }
        let c = cfg.map_channels_per_token() * cfg.cells_per_patch().pow(2);
        params.insert("project.weight", trunc(&[d, c], INIT_STD));
        params.insert("project.bias", Tensor::zeros(&[c]));

        let (r, hh, w) = (cfg.grid, cfg.head_hidden, p.window);
        for kind in HeadKind::ALL {
            let pre = kind.param_prefix();
            // Fan-in scaled so activations survive the ReLU stack.
            params.insert(
                format!("{pre}fc1.weight"),
                trunc(&[r, hh], (2.0 / r as f64).sqrt()),
            );
            params.insert(format!("{pre}fc1.bias"), Tensor::zeros(&[hh]));
            params.insert(
                format!("{pre}fc2.weight"),
                trunc(&[hh, r], (2.0 / hh as f64).sqrt()),
            );
            params.insert(format!("{pre}fc2.bias"), Tensor::zeros(&[r]));
            params.insert(
                format!("{pre}conv1.weight"),
                trunc(&[hh, w, 3, 3], (2.0 / (w * 9) as f64).sqrt()),
            );
            params.insert(format!("{pre}conv1.bias"), Tensor::zeros(&[hh]));
            params.insert(
                format!("{pre}conv2.weight"),
                Tensor::zeros(&[kind.out_dim(), hh, 3, 3]),
            );
            params.insert(format!("{pre}conv2.bias"), Tensor::zeros(&[kind.out_dim()]));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Runs the full model on `window` without recording gradients.
    pub fn forward(&self, window: &FrameWindow) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, window, &bound)?;
        Ok(ModelOutput {
            heatmap: g.take_value(out.heatmap),
            dims: g.take_value(out.dims),
            disp: g.take_value(out.disp),
        })
    }

    /// Records the forward pass on `g` using parameters bound by
    /// [`ParamStore::bind`].
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        window: &FrameWindow,
        bound: &Bound,
    ) -> Result<ForwardVars> {
        window.check(&self.cfg.pipeline)?;
        let tokens = self.tokenize(g, window, bound)?;
        let before = g.macs();
        let encoded = self.encode_graph(g, tokens, bound)?;
        let encoder_macs = g.macs() - before;
        let maps = self.project_graph(g, encoded, bound)?;
        let heatmap = self.head_graph(g, HeadKind::Heatmap, maps, bound)?;
        let dims = self.head_graph(g, HeadKind::Dims, maps, bound)?;
        let disp = self.head_graph(g, HeadKind::Disp, maps, bound)?;
        Ok(ForwardVars {
            tokens,
            encoded,
            maps,
            heatmap,
            dims,
            disp,
            encoder_macs,
        })
    }

    /// Patch projection plus embeddings. In stacked mode each frame's three
    /// channels go through their own slice of the projection kernel and the
    /// partial projections are summed.
    fn tokenize(&self, g: &mut Graph, window: &FrameWindow, bound: &Bound) -> Result<Var> {
        let p = &self.cfg.pipeline;
        let proj = bound.var("embed.proj");
        let mut parts = Vec::with_capacity(p.window);
        for (w, frame) in window.frames().iter().enumerate() {
            let f = g.constant(frame.clone());
            let kernel = match p.token_mode {
                TokenMode::Stacked => g.narrow(proj, 1, 3 * w, 3)?,
                TokenMode::Streamed => proj,
            };
            parts.push(crate::encoding::patchify_project(g, f, kernel)?);
        }
        let projected = match p.token_mode {
            TokenMode::Stacked => {
                let mut acc = parts[0];
                for &part in &parts[1..] {
                    acc = g.add(acc, part)?;
                }
                acc
            }
            TokenMode::Streamed => g.concat(&parts, 0)?,
        };
        let tokens = g.add_bias(projected, bound.var("embed.proj_bias"), 1)?;
        let emb = EmbeddingVars {
            channel: bound.try_var("embed.channel"),
            position: bound.try_var("embed.pos"),
        };
        apply_embedding(g, tokens, p, emb)
    }

    fn encode_graph(&self, g: &mut Graph, tokens: Var, bound: &Bound) -> Result<Var> {
        let d = self.cfg.pipeline.embed_dim;
        if g.shape(tokens).len() != 2 || g.shape(tokens)[1] != d || g.shape(tokens)[0] == 0 {
            return Err(Error::dim(format!(
                "encoder expects [N,{d}] tokens, got {:?}",
                g.shape(tokens)
            )));
        }
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = tokens;
        for l in 0..self.cfg.layers {
            let v = |name: &str| bound.var(&format!("encoder.{l}.{name}"));
            let h = g.layer_norm(x, v("ln1.gain"), v("ln1.bias"))?;
            let qkv = linear(g, h, v("attn.qkv.weight"), v("attn.qkv.bias"))?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = g.narrow(qkv, 1, head * dh, dh)?;
                let k = g.narrow(qkv, 1, d + head * dh, dh)?;
                let val = g.narrow(qkv, 1, 2 * d + head * dh, dh)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax_lastdim(scores);
                outs.push(g.matmul(attn, val)?);
            }
            let merged = g.concat(&outs, 1)?;
            let attn_out = linear(g, merged, v("attn.out.weight"), v("attn.out.bias"))?;
            x = g.add(x, attn_out)?;

            let h = g.layer_norm(x, v("ln2.gain"), v("ln2.bias"))?;
            let hidden = linear(g, h, v("mlp.fc1.weight"), v("mlp.fc1.bias"))?;
            let hidden = g.relu(hidden);
            let mlp_out = linear(g, hidden, v("mlp.fc2.weight"), v("mlp.fc2.bias"))?;
            x = g.add(x, mlp_out)?;
        }
        Ok(x)
    }

    /// Per-token projection to a `k×k` block of cells for each map channel,
    /// placed at the token's patch location: `[N,n_d]` → `[W,R,R]`.
    fn project_graph(&self, g: &mut Graph, features: Var, bound: &Bound) -> Result<Var> {
        let p = &self.cfg.pipeline;
        let n = p.num_tokens();
        if g.shape(features) != [n, p.embed_dim] {
            return Err(Error::config(format!(
                "map projection expects [{n},{}] features, got {:?}",
                p.embed_dim,
                g.shape(features)
            )));
        }
        let per_token = linear(
            g,
            features,
            bound.var("project.weight"),
            bound.var("project.bias"),
        )?;
        let (w, r, k) = (p.window, self.cfg.grid, self.cfg.cells_per_patch());
        let (side, n_p) = (p.grid_side(), p.num_patches());
        let width = g.shape(per_token)[1];
        let mut index = Vec::with_capacity(w * r * r);
        for c in 0..w {
            for y in 0..r {
                for x in 0..r {
                    let patch = (y / k) * side + x / k;
                    let cell = (y % k) * k + x % k;
                    let src = match p.token_mode {
                        TokenMode::Stacked => patch * width + c * k * k + cell,
                        TokenMode::Streamed => (c * n_p + patch) * width + cell,
                    };
                    index.push(src);
                }
            }
        }
        g.gather(per_token, index, &[w, r, r])
    }

    fn head_graph(&self, g: &mut Graph, kind: HeadKind, maps: Var, bound: &Bound) -> Result<Var> {
        let (w, r) = (self.cfg.pipeline.window, self.cfg.grid);
        if g.shape(maps) != [w, r, r] {
            return Err(Error::dim(format!(
                "head expects [{w},{r},{r}] maps, got {:?}",
                g.shape(maps)
            )));
        }
        let pre = kind.param_prefix();
        let v = |name: &str| bound.var(&format!("{pre}{name}"));
        let rows = g.reshape(maps, &[w * r, r])?;
        let h = linear(g, rows, v("fc1.weight"), v("fc1.bias"))?;
        let h = g.relu(h);
        let h = linear(g, h, v("fc2.weight"), v("fc2.bias"))?;
        let h = g.relu(h);
        let h = g.reshape(h, &[w, r, r])?;
        let h = g.conv2d(h, v("conv1.weight"), 1, 1)?;
        let h = g.add_bias(h, v("conv1.bias"), 0)?;
        let h = g.relu(h);
        let h = g.conv2d(h, v("conv2.weight"), 1, 1)?;
        let h = g.add_bias(h, v("conv2.bias"), 0)?;
        Ok(match kind {
            HeadKind::Heatmap | HeadKind::Dims => g.sigmoid(h),
            HeadKind::Disp => g.tanh(h),
        })
    }

    /// Encoder blocks alone, `[N,n_d]` → `[N,n_d]`.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let t = g.constant(tokens.clone());
        let out = self.encode_graph(&mut g, t, &bound)?;
        Ok(g.take_value(out))
    }

    /// Map projection alone, `[N,n_d]` → `[W,R,R]`.
    pub fn project_maps(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let f = g.constant(features.clone());
        let out = self.project_graph(&mut g, f, &bound)?;
        Ok(g.take_value(out))
    }

    /// One output head alone, `[W,R,R]` → `[OutDim,R,R]`.
    pub fn run_head(&self, kind: HeadKind, maps: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let m = g.constant(maps.clone());
        let out = self.head_graph(&mut g, kind, m, &bound)?;
        Ok(g.take_value(out))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = toml::to_string(&self.cfg).expect("config serializes");
        self.params.to_checkpoint(meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds a model from the config echoed in the checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg: ModelConfig = toml::from_str(&ck.meta)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut model = Model::new(cfg, 0)?;
        model.params.load_checkpoint(&ck)?;
        Ok(model)
    }

    /// Loads weights into a model built from `cfg`, failing when the
    /// checkpoint's config or any array shape disagrees.
    pub fn load_with_config(path: &Path, cfg: ModelConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if let Ok(saved) = toml::from_str::<ModelConfig>(&ck.meta) {
            if saved != cfg {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {} does not match run config {}",
                    describe(&saved),
                    describe(&cfg)
                )));
            }
        }
        let mut model = Model::new(cfg, 0)?;
        model.params.load_checkpoint(&ck)?;
        Ok(model)
    }
}

fn describe(cfg: &ModelConfig) -> String {
    let p = &cfg.pipeline;
    format!(
        "[S={} P={} W={} n_d={} L={} heads={} R={} mode={:?}/{:?}]",
        p.image_size,
        p.patch_size,
        p.window,
        p.embed_dim,
        cfg.layers,
        cfg.heads,
        cfg.grid,
        p.token_mode,
        p.embedding_mode
    )
}

/// `x · weight + bias` for `x[N,in]`, `weight[in,out]`, `bias[out]`.
fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_bias(y, bias, 1)
}

fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            pipeline: PipelineConfig {
                image_size: 16,
                patch_size: 8,
                window: 2,
                embed_dim: 8,
                ..Default::default()
            },
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            grid: 4,
            head_hidden: 3,
        }
    }

    #[test]
    fn param_count_matches_construction() {
        for cfg in [ModelConfig::default(), tiny()] {
            for (emb, tok) in [
                (EmbeddingMode::ChannelWise, TokenMode::Stacked),
                (EmbeddingMode::ChannelWise, TokenMode::Streamed),
                (EmbeddingMode::Positional, TokenMode::Stacked),
                (EmbeddingMode::Positional, TokenMode::Streamed),
            ] {
                let mut cfg = cfg.clone();
                cfg.pipeline.embedding_mode = emb;
                cfg.pipeline.token_mode = tok;
                let m = Model::new(cfg.clone(), 1).unwrap();
                assert_eq!(m.params.numel(), cfg.param_count(), "{emb:?}/{tok:?}");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.grid = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.grid = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut cfg = tiny();
        cfg.layers = 0;
        let m = Model::new(cfg, 3).unwrap();
        let t = Tensor::from_fn(&[4, 8], |i| (i as f64).sin());
        assert_eq!(m.encode(&t).unwrap(), t);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.otck");
        let m = Model::new(tiny(), 9).unwrap();
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
        let mut other = tiny();
        other.layers = 2;
        let err = Model::load_with_config(&path, other).unwrap_err();
        assert!(
            err.to_string().contains("L=1") && err.to_string().contains("L=2"),
            "{err}"
        );
    }
}
