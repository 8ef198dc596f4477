//! MOTChallenge text rows: `frame,id,left,top,width,height,conf,class,visibility`
//! in pixels, frames and ids starting at 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::FrameAnnotations;
use crate::tracking::{BBox, TrackRow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: usize,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
    pub class_id: i64,
    pub visibility: f64,
}

impl MotRow {
    /// Box in image fractions for a `(width, height)` source.
    pub fn bbox(&self, (sw, sh): (usize, usize)) -> BBox {
        let (sw, sh) = (sw as f64, sh as f64);
        BBox::new(
            (self.left + self.width / 2.0) / sw,
            (self.top + self.height / 2.0) / sh,
            self.width / sw,
            self.height / sh,
        )
    }

    pub fn from_bbox(frame: usize, id: i64, b: &BBox, (sw, sh): (usize, usize)) -> Self {
        let (sw, sh) = (sw as f64, sh as f64);
        Self {
            frame,
            id,
            left: (b.cx - b.w / 2.0) * sw,
            top: (b.cy - b.h / 2.0) * sh,
            width: b.w * sw,
            height: b.h * sh,
            conf: 1.0,
            class_id: -1,
            visibility: -1.0,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.frame,
            self.id,
            self.left,
            self.top,
            self.width,
            self.height,
            self.conf,
            self.class_id,
            self.visibility
        )
    }
}

/// Whether a file holds annotations or tracker output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotRole {
    /// Rows with `conf == 0` are ignored and boxes must have positive size.
    GroundTruth,
    Prediction,
}

/// Parses rows of 6 to 10 comma-separated fields. Missing trailing fields
/// default to conf 1, class −1 and visibility −1. Blank lines are skipped.
pub fn parse_mot_rows(text: &str, role: MotRole) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(6..=10).contains(&fields.len()) {
            return Err(err(format!(
                "expected 6 to 10 fields, found {}",
                fields.len()
            )));
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[k]
                .parse()
                .map_err(|_| err(format!("{name} {:?} is not a number", fields[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("{name} is not finite")))
            }
        };
        let int = |k: usize, name: &str| -> Result<i64> {
            let v = num(k, name)?;
            if v.fract() != 0.0 {
                return Err(err(format!("{name} {v} is not an integer")));
            }
            Ok(v as i64)
        };
        let frame = int(0, "frame")?;
        if frame < 1 {
            return Err(err(format!("frame {frame} must be >= 1")));
        }
        let row = MotRow {
            frame: frame as usize,
            id: int(1, "id")?,
            left: num(2, "left")?,
            top: num(3, "top")?,
            width: num(4, "width")?,
            height: num(5, "height")?,
            conf: if fields.len() > 6 {
                num(6, "conf")?
            } else {
                1.0
            },
            class_id: if fields.len() > 7 {
                int(7, "class")?
            } else {
                -1
            },
            visibility: if fields.len() > 8 {
                num(8, "visibility")?
            } else {
                -1.0
            },
        };
        if role == MotRole::GroundTruth {
            if row.conf == 0.0 {
                continue;
            }
            if row.width <= 0.0 || row.height <= 0.0 {
                return Err(err(format!(
                    "box size {}x{} must be positive",
                    row.width, row.height
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Groups rows by frame (ascending) into normalized boxes.
pub fn group_frames(rows: &[MotRow], source_size: (usize, usize)) -> Result<Vec<FrameAnnotations>> {
    let mut frames: BTreeMap<usize, Vec<(i64, BBox)>> = BTreeMap::new();
    for r in rows {
        let objs = frames.entry(r.frame).or_default();
        if objs.iter().any(|(id, _)| *id == r.id) {
            return Err(Error::contract(format!(
                "id {} appears twice in frame {}",
                r.id, r.frame
            )));
        }
        objs.push((r.id, r.bbox(source_size)));
    }
    Ok(frames
        .into_iter()
        .map(|(frame, objects)| FrameAnnotations { frame, objects })
        .collect())
}

pub fn parse_mot(
    text: &str,
    source_size: (usize, usize),
    role: MotRole,
) -> Result<Vec<FrameAnnotations>> {
    group_frames(&parse_mot_rows(text, role)?, source_size)
}

/// Formats tracker output as result rows sorted by `(frame, id)`, with
/// class and visibility set to −1.
pub fn write_results(rows: &[TrackRow], source_size: (usize, usize)) -> String {
    let mut sorted: Vec<&TrackRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in sorted {
        let row = MotRow {
            conf: r.score,
            ..MotRow::from_bbox(r.frame, r.id as i64, &r.bbox, source_size)
        };
        let _ = writeln!(out, "{}", row.to_line());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_gt_row() {
        let f = parse_mot(
            "1,1,912,484,97,109,1,1,1",
            (1920, 1080),
            MotRole::GroundTruth,
        )
        .unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].frame, 1);
        let (id, b) = f[0].objects[0];
        assert_eq!(id, 1);
        assert_eq!(b.cx, (912.0 + 48.5) / 1920.0);
        assert_eq!(b.cy, (484.0 + 54.5) / 1080.0);
    }

    #[test]
    fn empty_and_errors() {
        assert!(parse_mot("", (10, 10), MotRole::GroundTruth)
            .unwrap()
            .is_empty());
        match parse_mot("1,1,abc,4,5,6,1,1,1", (10, 10), MotRole::GroundTruth) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_mot("1,1,1,1,2,2\n2,1,1,1", (10, 10), MotRole::Prediction) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ignores_zero_conf_gt() {
        let f = parse_mot(
            "1,1,1,1,2,2,0,1,1\n1,2,1,1,2,2,1,1,1",
            (10, 10),
            MotRole::GroundTruth,
        )
        .unwrap();
        assert_eq!(f[0].objects.len(), 1);
        assert_eq!(f[0].objects[0].0, 2);
    }

    #[test]
    fn write_sorts_and_round_trips() {
        assert_eq!(write_results(&[], (10, 10)), "");
        let rows = [
            TrackRow {
                frame: 3,
                id: 2,
                bbox: BBox::new(0.3, 0.4, 0.1, 0.2),
                score: 0.7,
            },
            TrackRow {
                frame: 1,
                id: 5,
                bbox: BBox::new(0.6, 0.5, 0.2, 0.1),
                score: 0.9,
            },
        ];
        let text = write_results(&rows, (640, 480));
        assert!(text.starts_with("1,5,"));
        let back = parse_mot(&text, (640, 480), MotRole::Prediction).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].frame, 3);
        let b = back[1].objects[0].1;
        assert!((b.cx - 0.3).abs() < 1e-12 && (b.h - 0.2).abs() < 1e-12);
    }
}
