//! Frame files: binary portable pixmaps (`.ppm`, P6) and raw float dumps
//! (`.otf`: magic `OTFR`, u32 LE channels/height/width, then f32 LE values
//! in channel-major order).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"OTFR";

fn frames_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Frames(format!("{}: {msg}", path.display()))
}

/// Decodes a P6 image into a `[3,H,W]` tensor in [0,1].
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(frames_err(path, "truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if header[0] != "P6" {
        return Err(frames_err(
            path,
            format!("unsupported magic {:?}", header[0]),
        ));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| frames_err(path, format!("bad header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(frames_err(path, format!("bad header {w}x{h} max {maxval}")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    let body = bytes
        .get(pos..pos + need)
        .ok_or_else(|| frames_err(path, "truncated pixel data"))?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let k = i * 3 + c;
            let v = if bps == 1 {
                body[k] as f64
            } else {
                u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as f64
            };
            data[c * h * w + i] = v / maxval as f64;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encodes a `[3,H,W]` tensor (values clamped to [0,1]) as 8-bit P6.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(frames_err(path, "not a raw frame dump"));
    }
    let dim =
        |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    if shape[0] != 3 {
        return Err(frames_err(
            path,
            format!("expected 3 channels, found {}", shape[0]),
        ));
    }
    let n: usize = shape.iter().product();
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(frames_err(
            path,
            format!("expected {} data bytes, found {}", 4 * n, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(frames_err(path, "values outside [0,1]"));
    }
    Tensor::new(&shape, data).map_err(|e| frames_err(path, e))
}

pub fn encode_raw(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = RAW_MAGIC.to_vec();
    for d in [3u32, h as u32, w as u32] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::dim(format!("expected a [3,H,W] image, got {s:?}"))),
    }
}

/// Reads one `.ppm` or `.otf` frame.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => decode_ppm(&bytes, path),
        Some("otf") => decode_raw(&bytes, path),
        _ => Err(frames_err(path, "unsupported frame format")),
    }
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Frame files of `dir` with a numeric stem, in numeric order. Indices must
/// be consecutive; the first missing one is reported.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<(u64, usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("ppm" | "otf")
        );
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if !ext_ok || stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let index: u64 = stem
            .parse()
            .map_err(|_| frames_err(&path, "frame index out of range"))?;
        found.push((index, stem.len(), path));
    }
    if found.is_empty() {
        return Err(Error::Frames(format!("{}: no frame files", dir.display())));
    }
    found.sort_by_key(|f| f.0);
    for pair in found.windows(2) {
        if pair[1].0 == pair[0].0 {
            return Err(frames_err(&pair[1].2, "duplicate frame index"));
        }
        if pair[1].0 != pair[0].0 + 1 {
            let width = pair[0].1;
            return Err(Error::Frames(format!(
                "{}: missing frame {:0width$}",
                dir.display(),
                pair[0].0 + 1
            )));
        }
    }
    Ok(found.into_iter().map(|f| f.2).collect())
}

/// Loads every frame of `dir`, optionally resized to `size×size`.
pub fn load_frames(dir: &Path, size: Option<usize>) -> Result<Vec<Tensor>> {
    list_frames(dir)?
        .iter()
        .map(|p| {
            let img = read_frame(p)?;
            match size {
                Some(s) => resize_bilinear(&img, s),
                None => Ok(img),
            }
        })
        .collect()
}

/// Bilinear resize of a `[C,H,W]` image to `[C,size,size]` (pixel centers
/// aligned, edges clamped).
pub fn resize_bilinear(img: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::dim(format!(
            "expected a [C,H,W] image, got {:?}",
            img.shape()
        )));
    };
    if size == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    if h == size && w == size {
        return Ok(img.clone());
    }
    let axis = |src: usize, i: usize| {
        let x = ((i as f64 + 0.5) * src as f64 / size as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let ys: Vec<_> = (0..size).map(|i| axis(h, i)).collect();
    let xs: Vec<_> = (0..size).map(|i| axis(w, i)).collect();
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}
