use serde::{Deserialize, Serialize};

use super::bbox::{iou, BBox};
use super::decode::Detection;
use super::hungarian::hungarian;
use crate::error::{Error, Result};

/// How a detection-to-track cost is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `1 − IoU`.
    #[default]
    InverseIou,
    /// Euclidean distance between box centers.
    CenterDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocConfig {
    /// Minimum heatmap value for a peak to count as a detection.
    pub heat_threshold: f64,
    pub nms_iou: f64,
    /// Detection/track pairs overlapping less than this are never matched.
    pub match_min_iou: f64,
    /// Frames a track may stay unmatched before it is terminated.
    pub max_lost: usize,
    pub cost: CostKind,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            heat_threshold: 0.4,
            nms_iou: 0.5,
            match_min_iou: 0.1,
            max_lost: 10,
            cost: CostKind::InverseIou,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.heat_threshold) || !unit(self.nms_iou) || !unit(self.match_min_iou) {
            return Err(Error::config(format!(
                "heat_threshold, nms_iou and match_min_iou must lie in (0,1): {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Active,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Track {
    pub id: u64,
    pub last_box: BBox,
    pub state: TrackState,
    pub lost_age: usize,
    pub history: Vec<(usize, BBox)>,
}

/// One tracked box reported for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackRow {
    pub frame: usize,
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Cost of assigning each detection (rows) to each track (columns). Each
/// detection box is first moved back by its displacement so that it is
/// compared with where the object was in the previous frame.
pub fn build_cost(dets: &[Detection], tracks: &[Track], cfg: &AssocConfig) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| {
            let back = d.bbox.shifted(-d.disp.0, -d.disp.1);
            tracks
                .iter()
                .map(|t| {
                    let overlap = iou(&back, &t.last_box);
                    if overlap < cfg.match_min_iou {
                        return f64::INFINITY;
                    }
                    match cfg.cost {
                        CostKind::InverseIou => 1.0 - overlap,
                        CostKind::CenterDistance => {
                            (back.cx - t.last_box.cx).hypot(back.cy - t.last_box.cy)
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Identity bookkeeping for one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: AssocConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<usize>,
}

impl Tracker {
    pub fn new(cfg: AssocConfig) -> Self {
        Self {
            cfg,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
        }
    }

    /// Live (active or lost) tracks.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Associates `dets` with the live tracks and returns the boxes of every
    /// track matched or started in `frame`.
    pub fn step(&mut self, dets: &[Detection], frame: usize) -> Result<Vec<TrackRow>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::contract(format!(
                    "frame {frame} presented after frame {last}"
                )));
            }
        }
        self.last_frame = Some(frame);

        let cost = build_cost(dets, &self.tracks, &self.cfg);
        let pairs = hungarian(&cost);
        let mut det_taken = vec![false; dets.len()];
        let mut track_taken = vec![false; self.tracks.len()];
        let mut rows = Vec::new();
        for (di, ti) in pairs {
            det_taken[di] = true;
            track_taken[ti] = true;
            let t = &mut self.tracks[ti];
            t.last_box = dets[di].bbox;
            t.state = TrackState::Active;
            t.lost_age = 0;
            t.history.push((frame, dets[di].bbox));
            rows.push(TrackRow {
                frame,
                id: t.id,
                bbox: dets[di].bbox,
                score: dets[di].score,
            });
        }
        for (t, taken) in self.tracks.iter_mut().zip(&track_taken) {
            if !taken {
                t.state = TrackState::Lost;
                t.lost_age += 1;
            }
        }
        let max_lost = self.cfg.max_lost;
        self.tracks.retain(|t| t.lost_age <= max_lost);

        for (d, _) in dets.iter().zip(&det_taken).filter(|(_, taken)| !**taken) {
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.push(Track {
                id,
                last_box: d.bbox,
                state: TrackState::Active,
                lost_age: 0,
                history: vec![(frame, d.bbox)],
            });
            rows.push(TrackRow {
                frame,
                id,
                bbox: d.bbox,
                score: d.score,
            });
        }
        rows.sort_by_key(|r| r.id);
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, disp: (f64, f64)) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, 0.1, 0.1),
            score: 0.9,
            disp,
        }
    }

    #[test]
    fn new_tracks_get_sequential_ids() {
        let mut t = Tracker::new(AssocConfig::default());
        let rows = t
            .step(
                &[
                    det(0.2, 0.2, (0.0, 0.0)),
                    det(0.6, 0.6, (0.0, 0.0)),
                    det(0.8, 0.2, (0.0, 0.0)),
                ],
                1,
            )
            .unwrap();
        assert_eq!(rows.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn identities_persist() {
        let mut t = Tracker::new(AssocConfig::default());
        let dets = [det(0.2, 0.2, (0.0, 0.0)), det(0.6, 0.6, (0.0, 0.0))];
        let a = t.step(&dets, 1).unwrap();
        let b = t.step(&dets, 2).unwrap();
        let ids = |r: &[TrackRow]| r.iter().map(|x| (x.id, x.bbox)).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn termination_after_max_lost() {
        let cfg = AssocConfig {
            max_lost: 2,
            ..Default::default()
        };
        let mut t = Tracker::new(cfg);
        let d = [det(0.5, 0.5, (0.0, 0.0))];
        assert_eq!(t.step(&d, 1).unwrap()[0].id, 1);
        t.step(&[], 2).unwrap();
        t.step(&[], 3).unwrap();
        assert_eq!(t.tracks().len(), 1);
        assert_eq!(t.tracks()[0].state, TrackState::Lost);
        assert_eq!(t.step(&d, 4).unwrap()[0].id, 1);

        t.step(&[], 5).unwrap();
        t.step(&[], 6).unwrap();
        t.step(&[], 7).unwrap();
        assert!(t.tracks().is_empty());
        assert_eq!(t.step(&d, 8).unwrap()[0].id, 2);
    }

    #[test]
    fn out_of_order_frame_rejected() {
        let mut t = Tracker::new(AssocConfig::default());
        t.step(&[], 3).unwrap();
        assert!(matches!(t.step(&[], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn cost_uses_back_projection() {
        let cfg = AssocConfig::default();
        let track = Track {
            id: 1,
            last_box: BBox::new(0.5, 0.5, 0.1, 0.1),
            state: TrackState::Active,
            lost_age: 0,
            history: Vec::new(),
        };
        let c = build_cost(
            &[det(0.5, 0.5, (0.0, 0.0))],
            std::slice::from_ref(&track),
            &cfg,
        );
        assert_eq!(c[0][0], 0.0);
        let c = build_cost(
            &[det(0.5, 0.5, (0.5, 0.0))],
            std::slice::from_ref(&track),
            &cfg,
        );
        assert_eq!(c[0][0], f64::INFINITY);
        let c = build_cost(
            &[det(0.53, 0.51, (0.03, 0.01))],
            std::slice::from_ref(&track),
            &cfg,
        );
        assert!(c[0][0].abs() < 1e-12, "{}", c[0][0]);
    }
}
