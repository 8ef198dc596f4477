//! CLEAR-MOT style evaluation: MOTA, MOTP, a per-frame overlap score
//! (`frame_hota`), identity switches, IDF1 and FPS.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracking::{hungarian, iou, BBox};

/// Default IoU a ground-truth/prediction pair needs to count as a match.
pub const MATCH_IOU: f64 = 0.5;

/// Boxes with identities in one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameAnnotations {
    pub frame: usize,
    pub objects: Vec<(i64, BBox)>,
}

impl FrameAnnotations {
    pub fn new(frame: usize, objects: Vec<(i64, BBox)>) -> Self {
        Self { frame, objects }
    }
}

/// A matched pair in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchPair {
    pub gt: i64,
    pub pred: i64,
    pub iou: f64,
}

/// Matches one frame's ground truth to predictions. Pairs matched in the
/// previous frame (`prev`, gt id → pred id) that still overlap by at least
/// `iou_min` are kept first; the rest are assigned to maximize the number
/// of matches and then the total IoU, counting only pairs with IoU ≥
/// `iou_min`.
pub fn match_frame(
    gt: &[(i64, BBox)],
    pred: &[(i64, BBox)],
    prev: &HashMap<i64, i64>,
    iou_min: f64,
) -> Vec<MatchPair> {
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut out = Vec::new();
    for (gi, (gid, gbox)) in gt.iter().enumerate() {
        let Some(&pid) = prev.get(gid) else { continue };
        let Some(pi) = pred.iter().position(|(id, _)| *id == pid) else {
            continue;
        };
        if pred_used[pi] {
            continue;
        }
        let o = iou(gbox, &pred[pi].1);
        if o >= iou_min {
            gt_used[gi] = true;
            pred_used[pi] = true;
            out.push(MatchPair {
                gt: *gid,
                pred: pid,
                iou: o,
            });
        }
    }
    let free_g: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let free_p: Vec<usize> = (0..pred.len()).filter(|&i| !pred_used[i]).collect();
    let cost: Vec<Vec<f64>> = free_g
        .iter()
        .map(|&gi| {
            free_p
                .iter()
                .map(|&pi| {
                    let o = iou(&gt[gi].1, &pred[pi].1);
                    if o >= iou_min {
                        -o
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect();
    for (r, c) in hungarian(&cost) {
        let (g, p) = (&gt[free_g[r]], &pred[free_p[c]]);
        out.push(MatchPair {
            gt: g.0,
            pred: p.0,
            iou: iou(&g.1, &p.1),
        });
    }
    out.sort_by_key(|m| m.gt);
    out
}

/// Per-frame error counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDiag {
    pub frame: usize,
    pub gt: usize,
    pub pred: usize,
    pub fn_: usize,
    pub fp: usize,
    pub idsw: usize,
    pub matches: Vec<MatchPair>,
}

/// `1 − Σ(FN + FP + IDSW) / ΣGT`.
pub fn mota(fn_: usize, fp: usize, idsw: usize, gt: usize) -> Result<f64> {
    if gt == 0 {
        return Err(Error::Undefined("MOTA with no ground-truth objects".into()));
    }
    Ok(1.0 - (fn_ + fp + idsw) as f64 / gt as f64)
}

/// Mean `1 − IoU` over all matches.
pub fn motp(distance_sum: f64, matches: usize) -> Result<f64> {
    if matches == 0 {
        return Err(Error::Undefined("MOTP with no matches".into()));
    }
    Ok(distance_sum / matches as f64)
}

/// `N / I_t`.
pub fn fps(frames: usize, seconds: f64) -> Result<f64> {
    if frames == 0 {
        return Ok(0.0);
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(seconds > 0.0) {
        return Err(Error::Undefined(format!("FPS over {seconds} s")));
    }
    Ok(frames as f64 / seconds)
}

/// One frame's overlap score: `Σ IoU / (|G| + |P| − |M|)`, which is the
/// mean matched IoU times `|M| / (|G| + |P| − |M|)`. A frame with nothing in
/// it scores 1; a frame with no matches otherwise scores 0.
pub fn hota_frame(gt: usize, pred: usize, matches: &[MatchPair]) -> f64 {
    if gt == 0 && pred == 0 {
        return 1.0;
    }
    if matches.is_empty() {
        return 0.0;
    }
    let sum: f64 = matches.iter().map(|m| m.iou).sum();
    sum / (gt + pred - matches.len()) as f64
}

/// Sums that several frames or sequences can be merged through.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalTotals {
    pub frames: usize,
    pub gt: usize,
    pub pred: usize,
    pub fn_: usize,
    pub fp: usize,
    pub idsw: usize,
    pub matches: usize,
    pub distance_sum: f64,
    pub hota_sum: f64,
    pub idtp: usize,
}

impl EvalTotals {
    pub fn merge(&mut self, o: &EvalTotals) {
        self.frames += o.frames;
        self.gt += o.gt;
        self.pred += o.pred;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.idsw += o.idsw;
        self.matches += o.matches;
        self.distance_sum += o.distance_sum;
        self.hota_sum += o.hota_sum;
        self.idtp += o.idtp;
    }

    pub fn mota(&self) -> Result<f64> {
        mota(self.fn_, self.fp, self.idsw, self.gt)
    }

    pub fn motp(&self) -> Result<f64> {
        motp(self.distance_sum, self.matches)
    }

    pub fn frame_hota(&self) -> Result<f64> {
        if self.frames == 0 {
            return Err(Error::Undefined("frame_hota over zero frames".into()));
        }
        Ok(self.hota_sum / self.frames as f64)
    }

    /// `2·IDTP / (2·IDTP + IDFP + IDFN)`; 1 when both sides are empty.
    pub fn idf1(&self) -> f64 {
        if self.gt + self.pred == 0 {
            return 1.0;
        }
        2.0 * self.idtp as f64 / (self.gt + self.pred) as f64
    }
}

/// Counts, per (gt id, pred id), the frames in which both boxes exist and
/// overlap by at least `iou_min`, then finds the one-to-one id
/// correspondence maximizing that count.
pub fn id_true_positives(
    gt: &[FrameAnnotations],
    pred: &[FrameAnnotations],
    iou_min: f64,
) -> usize {
    let frames = align(gt, pred);
    let gt_ids: BTreeSet<i64> = gt
        .iter()
        .flat_map(|f| f.objects.iter().map(|o| o.0))
        .collect();
    let pred_ids: BTreeSet<i64> = pred
        .iter()
        .flat_map(|f| f.objects.iter().map(|o| o.0))
        .collect();
    let gi: HashMap<i64, usize> = gt_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let pi: HashMap<i64, usize> = pred_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut count = vec![vec![0usize; pred_ids.len()]; gt_ids.len()];
    for (_, g, p) in &frames {
        for (gid, gb) in *g {
            for (pid, pb) in *p {
                if iou(gb, pb) >= iou_min {
                    count[gi[gid]][pi[pid]] += 1;
                }
            }
        }
    }
    let cost: Vec<Vec<f64>> = count
        .iter()
        .map(|r| r.iter().map(|&c| -(c as f64)).collect())
        .collect();
    hungarian(&cost).into_iter().map(|(r, c)| count[r][c]).sum()
}

type Objects<'a> = &'a [(i64, BBox)];

/// Pairs frames of `gt` and `pred` by index; frames missing on one side
/// are empty.
fn align<'a>(
    gt: &'a [FrameAnnotations],
    pred: &'a [FrameAnnotations],
) -> Vec<(usize, Objects<'a>, Objects<'a>)> {
    let mut map: BTreeMap<usize, (Objects, Objects)> = BTreeMap::new();
    for f in gt {
        map.entry(f.frame).or_insert((&[], &[])).0 = &f.objects;
    }
    for f in pred {
        map.entry(f.frame).or_insert((&[], &[])).1 = &f.objects;
    }
    map.into_iter().map(|(t, (g, p))| (t, g, p)).collect()
}

/// Evaluates one sequence. Frames are aligned by index; a frame present in
/// only one input counts as empty in the other.
pub fn evaluate_sequence(
    gt: &[FrameAnnotations],
    pred: &[FrameAnnotations],
    iou_min: f64,
) -> (EvalTotals, Vec<FrameDiag>) {
    let mut totals = EvalTotals::default();
    let mut diags = Vec::new();
    let mut prev: HashMap<i64, i64> = HashMap::new();
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    for (t, g, p) in align(gt, pred) {
        let matches = match_frame(g, p, &prev, iou_min);
        let mut idsw = 0;
        for m in &matches {
            if let Some(&before) = last_match.get(&m.gt) {
                if before != m.pred {
                    idsw += 1;
                }
            }
            last_match.insert(m.gt, m.pred);
        }
        prev = matches.iter().map(|m| (m.gt, m.pred)).collect();
        totals.frames += 1;
        totals.gt += g.len();
        totals.pred += p.len();
        totals.fn_ += g.len() - matches.len();
        totals.fp += p.len() - matches.len();
        totals.idsw += idsw;
        totals.matches += matches.len();
        totals.distance_sum += matches.iter().map(|m| 1.0 - m.iou).sum::<f64>();
        totals.hota_sum += hota_frame(g.len(), p.len(), &matches);
        diags.push(FrameDiag {
            frame: t,
            gt: g.len(),
            pred: p.len(),
            fn_: g.len() - matches.len(),
            fp: p.len() - matches.len(),
            idsw,
            matches,
        });
    }
    totals.idtp = id_true_positives(gt, pred, iou_min);
    (totals, diags)
}

/// Final metric values. Undefined ratios (no ground truth, no matches, no
/// timing) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub name: String,
    pub mota: Option<f64>,
    pub motp: Option<f64>,
    pub frame_hota: Option<f64>,
    pub idf1: f64,
    pub ids: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub gt: usize,
    pub matches: usize,
    pub fps: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<FrameDiag>,
}

impl EvalReport {
    pub fn from_totals(name: impl Into<String>, t: &EvalTotals, fps: Option<f64>) -> Self {
        Self {
            name: name.into(),
            mota: t.mota().ok(),
            motp: t.motp().ok(),
            frame_hota: t.frame_hota().ok(),
            idf1: t.idf1(),
            ids: t.idsw,
            fn_: t.fn_,
            fp: t.fp,
            gt: t.gt,
            matches: t.matches,
            fps,
            frames: Vec::new(),
        }
    }

    /// Convenience wrapper around [`evaluate_sequence`] at the default
    /// threshold.
    pub fn evaluate(
        name: impl Into<String>,
        gt: &[FrameAnnotations],
        pred: &[FrameAnnotations],
    ) -> Self {
        let (totals, frames) = evaluate_sequence(gt, pred, MATCH_IOU);
        Self {
            frames,
            ..Self::from_totals(name, &totals, None)
        }
    }
}

/// Renders reports as a fixed-width table.
pub fn render_table(reports: &[EvalReport]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<16} {:>9} {:>9} {:>10} {:>9} {:>6} {:>7} {:>7} {:>9}\n",
        "sequence", "MOTA", "MOTP", "frameHOTA", "IDF1", "IDS", "FN", "FP", "FPS"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>9} {:>10} {:>9.4} {:>6} {:>7} {:>7} {:>9}",
            r.name,
            opt(r.mota),
            opt(r.motp),
            opt(r.frame_hota),
            r.idf1,
            r.ids,
            r.fn_,
            r.fp,
            r.fps.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.5, 0.1, 0.1)
    }

    fn frame(t: usize, objs: &[(i64, f64)]) -> FrameAnnotations {
        FrameAnnotations::new(t, objs.iter().map(|&(id, x)| (id, b(x))).collect())
    }

    #[test]
    fn mota_values() {
        assert_eq!(mota(0, 0, 0, 10).unwrap(), 1.0);
        assert!((mota(2, 1, 1, 20).unwrap() - 0.8).abs() < 1e-15);
        assert!(mota(10, 15, 0, 10).unwrap() < 0.0);
        assert!(matches!(mota(0, 0, 0, 0), Err(Error::Undefined(_))));
    }

    #[test]
    fn motp_values() {
        assert_eq!(motp(0.0, 3).unwrap(), 0.0);
        assert_eq!(motp(0.5, 2).unwrap(), 0.25);
        assert!(motp(0.0, 0).is_err());
    }

    #[test]
    fn fps_values() {
        assert_eq!(fps(50, 2.0).unwrap(), 25.0);
        assert_eq!(fps(0, 0.0).unwrap(), 0.0);
        assert!(fps(5, 0.0).is_err());
    }

    #[test]
    fn hota_frame_values() {
        let m = |iou| {
            vec![MatchPair {
                gt: 1,
                pred: 1,
                iou,
            }]
        };
        assert_eq!(hota_frame(1, 1, &m(0.5)), 0.5);
        assert_eq!(hota_frame(1, 2, &m(1.0)), 0.5);
        assert_eq!(hota_frame(0, 0, &[]), 1.0);
        assert_eq!(hota_frame(2, 0, &[]), 0.0);
    }

    #[test]
    fn match_prefers_higher_iou() {
        let gt = [(1, BBox::new(0.5, 0.5, 0.2, 0.2))];
        let pred = [
            (7, BBox::new(0.51, 0.5, 0.2, 0.2)),
            (8, BBox::new(0.55, 0.5, 0.2, 0.2)),
        ];
        let m = match_frame(&gt, &pred, &HashMap::new(), 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].pred, 7);
    }

    #[test]
    fn perfect_tracking() {
        let gt: Vec<_> = (1..=5).map(|t| frame(t, &[(1, 0.2), (2, 0.6)])).collect();
        let r = EvalReport::evaluate("s", &gt, &gt);
        assert_eq!(r.mota, Some(1.0));
        assert_eq!(r.motp, Some(0.0));
        assert_eq!(r.frame_hota, Some(1.0));
        assert_eq!(r.idf1, 1.0);
        assert_eq!(r.ids, 0);
    }

    #[test]
    fn id_switch_counts() {
        let gt: Vec<_> = (1..=2).map(|t| frame(t, &[(1, 0.2)])).collect();
        let pred = vec![frame(1, &[(1, 0.2)]), frame(2, &[(2, 0.2)])];
        assert_eq!(EvalReport::evaluate("s", &gt, &pred).ids, 1);

        let gt: Vec<_> = (1..=3).map(|t| frame(t, &[(1, 0.2), (2, 0.25)])).collect();
        let pred = vec![
            frame(1, &[(1, 0.2), (2, 0.25)]),
            frame(2, &[(2, 0.2), (1, 0.25)]),
            frame(3, &[(1, 0.2), (2, 0.25)]),
        ];
        assert_eq!(EvalReport::evaluate("s", &gt, &pred).ids, 4);
    }

    #[test]
    fn idf1_split_and_empty() {
        let gt: Vec<_> = (1..=10).map(|t| frame(t, &[(1, 0.5)])).collect();
        let pred: Vec<_> = (1..=10)
            .map(|t| frame(t, &[(if t <= 5 { 1 } else { 2 }, 0.5)]))
            .collect();
        assert_eq!(EvalReport::evaluate("s", &gt, &pred).idf1, 0.5);
        let empty: Vec<FrameAnnotations> = Vec::new();
        let r = EvalReport::evaluate("s", &gt, &empty);
        assert_eq!(r.idf1, 0.0);
        assert_eq!(r.fn_, 10);
        assert_eq!(r.mota, Some(0.0));
    }

    #[test]
    fn report_json_fields() {
        let gt = vec![frame(1, &[(1, 0.5)])];
        let r = EvalReport::from_totals("s", &evaluate_sequence(&gt, &gt, MATCH_IOU).0, Some(10.0));
        let v = serde_json::to_value(&r).unwrap();
        for key in [
            "mota",
            "motp",
            "frame_hota",
            "idf1",
            "ids",
            "fn",
            "fp",
            "fps",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
