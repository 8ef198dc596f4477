use std::collections::HashSet;

use stacktrack::tracking::{nms, AssocConfig, BBox, Detection, Tracker};
use proptest::prelude::*;

fn det(cx: f64, cy: f64) -> Detection {
    Detection {
        bbox: BBox::new(cx, cy, 0.1, 0.1),
        score: 0.9,
        disp: (0.0, 0.0),
    }
}

fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(
        (
            0.05f64..0.95,
            0.05f64..0.95,
            0.02f64..0.3,
            0.02f64..0.3,
            0.0f64..1.0,
        )
            .prop_map(|(cx, cy, w, h, s)| Detection {
                bbox: BBox::new(cx, cy, w, h),
                score: s,
                disp: (0.0, 0.0),
            }),
        0..max,
    )
}

proptest! {
    #[test]
    fn ids_are_unique_increasing_and_never_reused(frames in prop::collection::vec(arb_dets(6), 1..12)) {
        let mut tracker = Tracker::new(AssocConfig { max_lost: 2, ..AssocConfig::default() });
        let mut ever: HashSet<u64> = HashSet::new();
        let mut retired: HashSet<u64> = HashSet::new();
        let mut highest = 0;
        for (t, dets) in frames.iter().enumerate() {
            let live_before: HashSet<u64> = tracker.tracks().iter().map(|tr| tr.id).collect();
            let rows = tracker.step(dets, t + 1).unwrap();
            let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
            let unique: HashSet<u64> = ids.iter().copied().collect();
            prop_assert_eq!(unique.len(), ids.len());
            for id in ids {
                prop_assert!(!retired.contains(&id));
                if ever.insert(id) {
                    prop_assert!(id > highest);
                    highest = id;
                }
            }
            let live_after: HashSet<u64> = tracker.tracks().iter().map(|tr| tr.id).collect();
            retired.extend(live_before.difference(&live_after));
            for tr in tracker.tracks() {
                prop_assert!(tr.lost_age <= 2);
            }
        }
    }

    #[test]
    fn nms_is_idempotent(dets in arb_dets(20), t in 0.1f64..0.9) {
        let once = nms(&dets, t);
        prop_assert_eq!(nms(&once, t), once);
    }
}

#[test]
fn lost_track_is_recovered_within_max_lost() {
    let mut tracker = Tracker::new(AssocConfig::default());
    let first = tracker.step(&[det(0.3, 0.3), det(0.7, 0.7)], 1).unwrap();
    for t in 2..=4 {
        tracker.step(&[det(0.3, 0.3)], t).unwrap();
    }
    let back = tracker.step(&[det(0.3, 0.3), det(0.7, 0.7)], 5).unwrap();
    let ids = |rows: &[stacktrack::TrackRow]| rows.iter().map(|r| r.id).collect::<Vec<_>>();
    assert_eq!(ids(&first), ids(&back));
}

#[test]
fn displacement_links_moving_objects() {
    let mut tracker = Tracker::new(AssocConfig::default());
    let a = tracker.step(&[det(0.3, 0.3)], 1).unwrap();
    // Moves by more than its own width; only the back-projection links it.
    let moved = Detection {
        disp: (0.15, 0.0),
        ..det(0.45, 0.3)
    };
    let b = tracker.step(&[moved], 2).unwrap();
    assert_eq!(a[0].id, b[0].id);
}
