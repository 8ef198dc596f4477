use stacktrack::metrics::{evaluate_sequence, EvalTotals, FrameAnnotations, MATCH_IOU};
use stacktrack::BBox;
use proptest::prelude::*;

fn arb_frames() -> impl Strategy<Value = Vec<FrameAnnotations>> {
    prop::collection::vec(
        prop::collection::btree_map(
            0i64..6,
            (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.4, 0.05f64..0.4),
            0..5,
        ),
        1..6,
    )
    .prop_map(|frames| {
        frames
            .into_iter()
            .enumerate()
            .map(|(t, objs)| {
                let objects = objs
                    .into_iter()
                    .map(|(id, (cx, cy, w, h))| (id, BBox::new(cx, cy, w, h)))
                    .collect();
                FrameAnnotations::new(t + 1, objects)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn frame_hota_and_idf1_are_bounded(gt in arb_frames(), pred in arb_frames()) {
        let (t, _) = evaluate_sequence(&gt, &pred, MATCH_IOU);
        let h = t.frame_hota().unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((0.0..=1.0).contains(&t.idf1()));
        if let Ok(m) = t.mota() {
            prop_assert!(m <= 1.0);
        }
    }

    #[test]
    fn per_frame_counts_sum_to_totals(gt in arb_frames(), pred in arb_frames()) {
        let (t, diags) = evaluate_sequence(&gt, &pred, MATCH_IOU);
        let mut summed = EvalTotals::default();
        for d in &diags {
            summed.gt += d.gt;
            summed.fn_ += d.fn_;
            summed.fp += d.fp;
            summed.idsw += d.idsw;
        }
        prop_assert_eq!((summed.gt, summed.fn_, summed.fp, summed.idsw), (t.gt, t.fn_, t.fp, t.idsw));
        if t.gt > 0 {
            prop_assert_eq!(summed.mota().unwrap(), t.mota().unwrap());
        }
    }

    #[test]
    fn identical_predictions_score_perfectly(gt in arb_frames()) {
        let (t, _) = evaluate_sequence(&gt, &gt, MATCH_IOU);
        prop_assert_eq!(t.idf1(), 1.0);
        if t.gt > 0 {
            prop_assert_eq!(t.mota().unwrap(), 1.0);
        }
        prop_assert_eq!(t.idsw, 0);
    }
}

#[test]
fn merged_sequences_mota_uses_summed_counts() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let gt_a = vec![FrameAnnotations::new(1, vec![(1, b)])];
    let gt_b = vec![FrameAnnotations::new(
        1,
        vec![(1, b), (2, BBox::new(0.2, 0.2, 0.1, 0.1))],
    )];
    let (a, _) = evaluate_sequence(&gt_a, &gt_a, MATCH_IOU);
    let (c, _) = evaluate_sequence(&gt_b, &[], MATCH_IOU);
    let mut all = a.clone();
    all.merge(&c);
    assert_eq!(all.gt, 3);
    assert_eq!(all.fn_, 2);
    assert!((all.mota().unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn swapped_ids_break_perfection() {
    let (a, b) = (BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.7, 0.7, 0.2, 0.2));
    let gt: Vec<_> = (1..=4)
        .map(|t| FrameAnnotations::new(t, vec![(1, a), (2, b)]))
        .collect();
    let pred: Vec<_> = (1..=4)
        .map(|t| {
            let swap = t == 3;
            FrameAnnotations::new(
                t,
                vec![(if swap { 2 } else { 1 }, a), (if swap { 1 } else { 2 }, b)],
            )
        })
        .collect();
    let (t, _) = evaluate_sequence(&gt, &pred, MATCH_IOU);
    assert_eq!(t.idsw, 4);
    assert!(t.mota().unwrap() < 1.0);
    assert!(t.idf1() < 1.0);
}
