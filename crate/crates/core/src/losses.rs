//! Ground-truth grid rendering and the detection/regression losses.

use serde::{Deserialize, Serialize};

use crate::encoding::{ClampCounter, DisplacementNorm};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::tracking::BBox;

/// Probability clamp keeping both log terms finite.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focusing exponent of the focal term.
    pub gamma: f64,
    /// Heatmap (center + focal) weight.
    pub w1: f64,
    /// Box-size grid weight.
    pub w2: f64,
    /// Displacement grid weight.
    pub w3: f64,
    /// Pixel weights are `1 + center_alpha · P`.
    pub center_alpha: f64,
    /// Gaussian σ is `max(sigma_min, diagonal_in_cells / sigma_divisor)`.
    pub sigma_divisor: f64,
    pub sigma_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 4.0,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            center_alpha: 0.0,
            sigma_divisor: 6.0,
            sigma_min: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::config("gamma must be a finite value >= 0"));
        }
        LossWeights::new(self.w1, self.w2, self.w3)?;
        if self.center_alpha < 0.0 || self.sigma_divisor <= 0.0 || self.sigma_min <= 0.0 {
            return Err(Error::config(
                "center_alpha must be >= 0 and the sigma policy positive",
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
        }
    }
}

/// Mixing weights of the heatmap, size and displacement terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        let all = [w1, w2, w3];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::config(format!("loss weights must be >= 0: {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::config("loss weights are all zero"));
        }
        Ok(Self { w1, w2, w3 })
    }

    pub fn sum(&self) -> f64 {
        self.w1 + self.w2 + self.w3
    }
}

/// An annotated object in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectBox {
    pub id: i64,
    pub bbox: BBox,
}

/// Training targets on the `R×R` output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `[1,R,R]` Gaussian-rendered centers, exactly 1 at center cells.
    pub heat: Tensor,
    /// `[1,R,R]` per-cell weights of the center loss.
    pub pixel_weights: Tensor,
    /// `[2,R,R]` (w, h) at center cells.
    pub dims: Tensor,
    /// `[2,R,R]` normalized (dx, dy) at center cells.
    pub disp: Tensor,
    /// `[1,R,R]` 1 at center cells.
    pub mask: Tensor,
    /// Objects whose center lies outside the image.
    pub skipped: usize,
    /// Displacement components clamped during normalization.
    pub clamped: usize,
}

/// Center cell `(row, col)` of a normalized point, if it lies in the image.
pub fn center_cell(cx: f64, cy: f64, grid: usize) -> Option<(usize, usize)> {
    let inside = (0.0..1.0).contains(&cx) && (0.0..1.0).contains(&cy);
    inside.then_some(((cy * grid as f64) as usize, (cx * grid as f64) as usize))
}

/// Renders the targets for `current`, taking displacement from the same ids
/// in `previous` (objects absent there get zero motion).
pub fn render_targets(
    current: &[ObjectBox],
    previous: &[ObjectBox],
    grid: usize,
    norm: &DisplacementNorm,
    cfg: &LossConfig,
) -> TargetMaps {
    let r = grid;
    let mut heat = Tensor::zeros(&[1, r, r]);
    let mut dims = Tensor::zeros(&[2, r, r]);
    let mut disp = Tensor::zeros(&[2, r, r]);
    let mut mask = Tensor::zeros(&[1, r, r]);
    let mut skipped = 0;
    let mut clamps = ClampCounter::default();

    for obj in current {
        let b = obj.bbox;
        let Some((row, col)) = center_cell(b.cx, b.cy, r) else {
            skipped += 1;
            continue;
        };
        let diag = ((b.w * r as f64).powi(2) + (b.h * r as f64).powi(2)).sqrt();
        let sigma = (diag / cfg.sigma_divisor).max(cfg.sigma_min);
        let two_s2 = 2.0 * sigma * sigma;
        for y in 0..r {
            for x in 0..r {
                let d2 = (y as f64 - row as f64).powi(2) + (x as f64 - col as f64).powi(2);
                let v = (-d2 / two_s2).exp();
                if v > heat.at(&[0, y, x]) {
                    heat.set(&[0, y, x], v);
                }
            }
        }
        let motion = previous
            .iter()
            .find(|p| p.id == obj.id)
            .map_or((0.0, 0.0), |p| (b.cx - p.bbox.cx, b.cy - p.bbox.cy));
        let (u, v) = norm.normalize_counted(motion, &mut clamps);
        mask.set(&[0, row, col], 1.0);
        dims.set(&[0, row, col], b.w);
        dims.set(&[1, row, col], b.h);
        disp.set(&[0, row, col], u);
        disp.set(&[1, row, col], v);
    }
    let pixel_weights = Tensor::from_fn(&[1, r, r], |i| 1.0 + cfg.center_alpha * heat.data()[i]);
    TargetMaps {
        heat,
        pixel_weights,
        dims,
        disp,
        mask,
        skipped,
        clamped: clamps.0,
    }
}

/// Weighted binary cross-entropy averaged over all cells:
/// `−(1/N)·Σ [P·ln P̂ + (1−P)·ln(1−P̂)]·W`.
pub fn center_loss(g: &mut Graph, pred: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
    check(g, pred, target, "center loss target")?;
    check(g, pred, weights, "center loss weights")?;
    let n = target.numel() as f64;
    let p_hat = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let p = g.constant(target.clone());
    let w = g.constant(weights.clone());
    let log_p = g.ln(p_hat);
    let pos = g.mul(p, log_p)?;
    let q_hat = g.one_minus(p_hat);
    let log_q = g.ln(q_hat);
    let q = g.constant(Tensor::from_fn(target.shape(), |i| 1.0 - target.data()[i]));
    let neg = g.mul(q, log_q)?;
    let both = g.add(pos, neg)?;
    let weighted = g.mul(both, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / n))
}

/// `−(1/N)·Σ (1−P̂)^γ · P · ln P̂`.
pub fn focal_loss(g: &mut Graph, pred: Var, target: &Tensor, gamma: f64) -> Result<Var> {
    check(g, pred, target, "focal loss target")?;
    let n = target.numel() as f64;
    let p_hat = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let q_hat = g.one_minus(p_hat);
    let modulator = g.powf(q_hat, gamma);
    let p = g.constant(target.clone());
    let log_p = g.ln(p_hat);
    let t = g.mul(modulator, p)?;
    let t = g.mul(t, log_p)?;
    let s = g.sum(t);
    Ok(g.scale(s, -1.0 / n))
}

/// Mean absolute error over masked cells of every channel; 0 when the mask
/// is empty. `mask` is `[1,R,R]` and broadcasts over the channels of `pred`.
pub fn grid_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    check(g, pred, target, "grid loss target")?;
    let shape = target.shape();
    let plane = mask.numel();
    if shape.len() != 3 || mask.shape() != [1, shape[1], shape[2]] {
        return Err(Error::dim(format!(
            "mask {:?} does not broadcast over {shape:?}",
            mask.shape()
        )));
    }
    let channels = shape[0];
    let masked = mask.data().iter().filter(|&&m| m != 0.0).count() * channels;
    if masked == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let full_mask = Tensor::from_fn(shape, |i| mask.data()[i % plane]);
    let t = g.constant(target.clone());
    let m = g.constant(full_mask);
    let diff = g.sub(t, pred)?;
    let abs = g.abs(diff);
    let sel = g.mul(abs, m)?;
    let s = g.sum(sel);
    Ok(g.scale(s, 1.0 / masked as f64))
}

fn check(g: &Graph, pred: Var, t: &Tensor, what: &str) -> Result<()> {
    if g.shape(pred) != t.shape() {
        return Err(Error::dim(format!(
            "{what} {:?} vs prediction {:?}",
            t.shape(),
            g.shape(pred)
        )));
    }
    Ok(())
}

/// Loss terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub center: Var,
    pub focal: Var,
    pub grid_dims: Var,
    pub grid_disp: Var,
    pub total: Var,
}

/// Scalar values of [`LossVars`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub center: f64,
    pub focal: f64,
    pub grid_dims: f64,
    pub grid_disp: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            center: g.value(self.center).item(),
            focal: g.value(self.focal).item(),
            grid_dims: g.value(self.grid_dims).item(),
            grid_disp: g.value(self.grid_disp).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Weighted mean of the heatmap term (center + focal), the size grid term
/// and the displacement grid term.
pub fn combine(
    g: &mut Graph,
    heat: Var,
    grid_dims: Var,
    grid_disp: Var,
    w: LossWeights,
) -> Result<Var> {
    let w = LossWeights::new(w.w1, w.w2, w.w3)?;
    let a = g.scale(heat, w.w1);
    let b = g.scale(grid_dims, w.w2);
    let c = g.scale(grid_disp, w.w3);
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    Ok(g.scale(abc, 1.0 / w.sum()))
}

/// Full training loss for one sample's outputs.
pub fn combined_loss(
    g: &mut Graph,
    heatmap: Var,
    dims: Var,
    disp: Var,
    targets: &TargetMaps,
    gamma: f64,
    weights: LossWeights,
) -> Result<LossVars> {
    let center = center_loss(g, heatmap, &targets.heat, &targets.pixel_weights)?;
    let focal = focal_loss(g, heatmap, &targets.heat, gamma)?;
    let grid_dims = grid_loss(g, dims, &targets.dims, &targets.mask)?;
    let grid_disp = grid_loss(g, disp, &targets.disp, &targets.mask)?;
    let heat = g.add(center, focal)?;
    let total = combine(g, heat, grid_dims, grid_disp, weights)?;
    Ok(LossVars {
        center,
        focal,
        grid_dims,
        grid_disp,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grid(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 1], v)
    }

    #[test]
    fn center_loss_single_pixel() {
        let mut g = Graph::new();
        let pred = g.constant(scalar_grid(0.9));
        let l = center_loss(&mut g, pred, &scalar_grid(1.0), &scalar_grid(1.0)).unwrap();
        assert!((g.value(l).item() - 0.10536051565782628).abs() < 1e-12);
        let l2 = center_loss(&mut g, pred, &scalar_grid(1.0), &scalar_grid(2.0)).unwrap();
        assert!((g.value(l2).item() - 2.0 * g.value(l).item()).abs() < 1e-15);
    }

    #[test]
    fn center_loss_perfect_is_near_zero() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[1, 2, 2], |i| (i % 2) as f64);
        let pred = g.constant(t.clone());
        let l = center_loss(&mut g, pred, &t, &Tensor::ones(&[1, 2, 2])).unwrap();
        let v = g.value(l).item();
        assert!((0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn focal_values() {
        let mut g = Graph::new();
        let pred = g.constant(scalar_grid(0.5));
        let l = focal_loss(&mut g, pred, &scalar_grid(1.0), 4.0).unwrap();
        assert!((g.value(l).item() - 0.0625 * 2f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 0.0433217).abs() < 1e-7);

        let zero = focal_loss(&mut g, pred, &scalar_grid(0.0), 4.0).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);

        let pred = g.constant(Tensor::new(&[1, 1, 2], vec![0.3, 0.8]).unwrap());
        let l = focal_loss(&mut g, pred, &Tensor::ones(&[1, 1, 2]), 0.0).unwrap();
        let expect = -(0.3f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn grid_loss_values() {
        let mut g = Graph::new();
        let target = Tensor::new(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let pred = g.constant(Tensor::new(&[2, 1, 1], vec![1.5, 1.5]).unwrap());
        let mask = Tensor::ones(&[1, 1, 1]);
        let l = grid_loss(&mut g, pred, &target, &mask).unwrap();
        assert_eq!(g.value(l).item(), 0.5);

        let exact = g.constant(target.clone());
        let l = grid_loss(&mut g, exact, &target, &mask).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let l = grid_loss(&mut g, pred, &target, &Tensor::zeros(&[1, 1, 1])).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn combine_weighted_mean() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.3));
        let b = g.constant(Tensor::scalar(0.6));
        let c = g.constant(Tensor::scalar(0.9));
        let w = LossWeights::new(1.0, 1.0, 1.0).unwrap();
        let t = combine(&mut g, a, b, c, w).unwrap();
        assert!((g.value(t).item() - 0.6).abs() < 1e-15);

        let only_heat = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let t = combine(&mut g, a, b, c, only_heat).unwrap();
        assert_eq!(g.value(t).item(), 0.3);

        let scaled = LossWeights::new(2.5, 2.5, 2.5).unwrap();
        let t = combine(&mut g, a, b, c, scaled).unwrap();
        assert!((g.value(t).item() - 0.6).abs() < 1e-15);

        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn render_empty_and_single() {
        let cfg = LossConfig::default();
        let norm = DisplacementNorm::default();
        let t = render_targets(&[], &[], 8, &norm, &cfg);
        assert!(t.heat.data().iter().all(|&v| v == 0.0));
        assert!(t.mask.data().iter().all(|&v| v == 0.0));

        // 8 cells, center of cell (3,4); small box so sigma = 1.
        let obj = ObjectBox {
            id: 1,
            bbox: BBox::new(4.5 / 8.0, 3.5 / 8.0, 0.1, 0.1),
        };
        let t = render_targets(&[obj], &[], 8, &norm, &cfg);
        assert_eq!(t.heat.at(&[0, 3, 4]), 1.0);
        assert_eq!(t.mask.at(&[0, 3, 4]), 1.0);
        assert!((t.heat.at(&[0, 3, 5]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((t.heat.at(&[0, 3, 5]) - 0.6065).abs() < 1e-4);
        assert_eq!(t.dims.at(&[0, 3, 4]), 0.1);
        assert_eq!(t.mask.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn render_skips_outside_and_composes_by_max() {
        let cfg = LossConfig::default();
        let norm = DisplacementNorm::default();
        let a = ObjectBox {
            id: 1,
            bbox: BBox::new(0.2, 0.2, 0.3, 0.3),
        };
        let b = ObjectBox {
            id: 2,
            bbox: BBox::new(0.35, 0.3, 0.2, 0.4),
        };
        let out = ObjectBox {
            id: 3,
            bbox: BBox::new(1.2, 0.5, 0.1, 0.1),
        };
        let ab = render_targets(&[a, b, out], &[], 16, &norm, &cfg);
        let ba = render_targets(&[b, a], &[], 16, &norm, &cfg);
        assert_eq!(ab.skipped, 1);
        assert_eq!(ab.heat, ba.heat);
        assert!(ab.heat.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn render_displacement_uses_previous_frame() {
        let cfg = LossConfig::default();
        let norm = DisplacementNorm::default();
        let prev = ObjectBox {
            id: 7,
            bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
        };
        let cur = ObjectBox {
            id: 7,
            bbox: BBox::new(0.503, 0.49, 0.2, 0.2),
        };
        let t = render_targets(&[cur], &[prev], 16, &norm, &cfg);
        let (row, col) = center_cell(0.503, 0.49, 16).unwrap();
        let (u, v) = norm.normalize((0.503 - 0.5, 0.49 - 0.5));
        assert_eq!(t.disp.at(&[0, row, col]), u);
        assert_eq!(t.disp.at(&[1, row, col]), v);
        assert_eq!(t.clamped, 0);
    }
}
