use super::bbox::iou;
use super::decode::Detection;

/// Greedy non-maximum suppression: repeatedly keeps the highest-scoring box
/// and drops every remaining box whose IoU with it exceeds `threshold`.
/// Output is in descending score order; equal scores keep input order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    nms_indices(dets, threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Indices into `dets` of the boxes [`nms`] keeps.
pub fn nms_indices(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::BBox;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::from_corners(x1, y1, x2, y2),
            score,
            disp: (0.0, 0.0),
        }
    }

    #[test]
    fn identical_boxes_keep_best() {
        let d = [det(0.0, 0.0, 1.0, 1.0, 0.8), det(0.0, 0.0, 1.0, 1.0, 0.9)];
        let kept = nms(&d, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn low_overlap_and_disjoint_kept() {
        let d = [det(0.0, 0.0, 2.0, 2.0, 0.9), det(1.0, 1.0, 3.0, 3.0, 0.8)];
        assert_eq!(nms(&d, 0.5).len(), 2);
        let d = [
            det(0.0, 0.0, 1.0, 1.0, 0.5),
            det(2.0, 2.0, 3.0, 3.0, 0.7),
            det(4.0, 4.0, 5.0, 5.0, 0.6),
        ];
        assert_eq!(nms_indices(&d, 0.5), vec![1, 2, 0]);
    }

    #[test]
    fn ties_keep_input_order() {
        let d = [det(0.0, 0.0, 1.0, 1.0, 0.5), det(0.0, 0.0, 1.0, 1.0, 0.5)];
        assert_eq!(nms_indices(&d, 0.5), vec![0]);
    }
}
