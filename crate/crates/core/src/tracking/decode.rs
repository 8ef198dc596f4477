use serde::Serialize;

use super::bbox::BBox;
use crate::encoding::DisplacementNorm;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A heatmap local maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Motion since the previous frame, in image fractions.
    pub disp: (f64, f64),
}

/// Cells of a `[1,R,R]` heatmap that are at least `tau` and no smaller than
/// any of their (up to 8) neighbours, in row-major order.
pub fn extract_peaks(heatmap: &Tensor, tau: f64) -> Result<Vec<Peak>> {
    let r = grid_of(heatmap, 1)?;
    let h = heatmap.data();
    let mut peaks = Vec::new();
    for row in 0..r {
        for col in 0..r {
            let s = h[row * r + col];
            if s < tau {
                continue;
            }
            let is_max = neighbours(row, col, r).all(|(y, x)| s >= h[y * r + x]);
            if is_max {
                peaks.push(Peak { row, col, score: s });
            }
        }
    }
    Ok(peaks)
}

fn neighbours(row: usize, col: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dy| (-1i64..=1).map(move |dx| (dy, dx)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dy, dx)| {
            let y = row as i64 + dy;
            let x = col as i64 + dx;
            let inside = (0..r as i64).contains(&y) && (0..r as i64).contains(&x);
            inside.then_some((y as usize, x as usize))
        })
}

fn grid_of(t: &Tensor, channels: usize) -> Result<usize> {
    match t.shape() {
        [c, h, w] if *c == channels && h == w => Ok(*h),
        s => Err(Error::dim(format!(
            "expected a [{channels},R,R] map, got {s:?}"
        ))),
    }
}

/// Center of grid cell `(row, col)` in image fractions.
pub fn cell_center(row: usize, col: usize, grid: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) / grid as f64,
        (row as f64 + 0.5) / grid as f64,
    )
}

/// Builds one detection per peak from the size and displacement maps.
pub fn decode(
    peaks: &[Peak],
    dims: &Tensor,
    disp: &Tensor,
    norm: &DisplacementNorm,
) -> Result<Vec<Detection>> {
    let r = grid_of(dims, 2)?;
    if grid_of(disp, 2)? != r {
        return Err(Error::dim(format!(
            "dims map {:?} and disp map {:?} differ",
            dims.shape(),
            disp.shape()
        )));
    }
    peaks
        .iter()
        .map(|p| {
            if p.row >= r || p.col >= r {
                return Err(Error::dim(format!(
                    "peak ({}, {}) outside {r}x{r} grid",
                    p.row, p.col
                )));
            }
            let (cx, cy) = cell_center(p.row, p.col, r);
            let w = dims.at(&[0, p.row, p.col]);
            let h = dims.at(&[1, p.row, p.col]);
            let d = norm.denormalize((disp.at(&[0, p.row, p.col]), disp.at(&[1, p.row, p.col])))?;
            Ok(Detection {
                bbox: BBox::new(cx, cy, w, h),
                score: p.score,
                disp: d,
            })
        })
        .collect()
}
