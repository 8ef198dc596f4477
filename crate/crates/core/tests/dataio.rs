use std::collections::HashMap;
use std::fs;

use stacktrack::dataio::{
    load_frames, parse_mot, parse_mot_rows, synth_generate, write_ppm, MotRole, MotRow, SeqInfo,
    SynthConfig,
};
use stacktrack::encoding::ClampCounter;
use stacktrack::{DisplacementNorm, Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn mot_rows_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<MotRow> = (0..100)
        .map(|i| MotRow {
            frame: 1 + i / 7,
            id: (i % 7) as i64 + 1,
            left: rng.random_range(-50.0..1900.0),
            top: rng.random_range(-50.0..1000.0),
            width: rng.random_range(1.0..300.0),
            height: rng.random_range(1.0..500.0),
            conf: rng.random_range(0.01..1.0),
            class_id: 1,
            visibility: rng.random_range(0.0..1.0),
        })
        .collect();
    let text: String = rows.iter().map(|r| r.to_line() + "\n").collect();
    let back = parse_mot_rows(&text, MotRole::Prediction).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!((a.frame, a.id), (b.frame, b.id));
        for (x, y) in [
            (a.left, b.left),
            (a.top, b.top),
            (a.width, b.width),
            (a.height, b.height),
            (a.conf, b.conf),
        ] {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

fn write_frames(dir: &std::path::Path, numbers: impl Iterator<Item = usize>) {
    fs::create_dir_all(dir).unwrap();
    for n in numbers {
        let img = Tensor::full(&[3, 4, 6], n as f64 / 20.0);
        write_ppm(&dir.join(format!("{n:06}.ppm")), &img).unwrap();
    }
}

#[test]
fn frames_load_in_numeric_order() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(tmp.path(), (1..=10).rev());
    let frames = load_frames(tmp.path(), None).unwrap();
    assert_eq!(frames.len(), 10);
    for (i, f) in frames.iter().enumerate() {
        let want = (i + 1) as f64 / 20.0;
        assert!((f.data()[0] - want).abs() <= 1.0 / 255.0);
    }
    let resized = load_frames(tmp.path(), Some(8)).unwrap();
    assert_eq!(resized[0].shape(), [3, 8, 8]);
}

#[test]
fn frame_gap_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(tmp.path(), (1..=10).filter(|&n| n != 7));
    let e = load_frames(tmp.path(), None).unwrap_err();
    assert!(e.to_string().contains("000007"), "{e}");
}

#[test]
fn missing_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let e = load_frames(&tmp.path().join("nope"), None).unwrap_err();
    assert!(matches!(e, Error::Io { .. }), "{e:?}");
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_sequences: 2,
        frames_per_sequence: 6,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_writes_a_readable_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let seqs = synth_generate(&small_synth(3)).unwrap();
    for s in &seqs {
        s.write(tmp.path()).unwrap();
    }
    let s = &seqs[0];
    let root = tmp.path().join(&s.name);
    let info = SeqInfo::read(&root.join("seqinfo.ini")).unwrap();
    assert_eq!(
        (info.im_width, info.im_height, info.seq_length),
        (s.width, s.height, s.frames.len())
    );
    let frames = load_frames(&root.join("img1"), None).unwrap();
    for (a, b) in frames.iter().zip(&s.frames) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
    let text = fs::read_to_string(root.join("gt/gt.txt")).unwrap();
    let gt = parse_mot(&text, (s.width, s.height), MotRole::GroundTruth).unwrap();
    let want = s.annotations();
    assert_eq!(gt.len(), want.len());
    for (a, b) in gt.iter().zip(&want) {
        assert_eq!(a.frame, b.frame);
        for ((ia, ba), (ib, bb)) in a.objects.iter().zip(&b.objects) {
            assert_eq!(ia, ib);
            assert!((ba.cx - bb.cx).abs() < 1e-9 && (ba.w - bb.w).abs() < 1e-9);
        }
    }
}

#[test]
fn distinct_seeds_give_distinct_data() {
    let a = synth_generate(&small_synth(1)).unwrap();
    let b = synth_generate(&small_synth(2)).unwrap();
    assert_ne!(a[0].gt, b[0].gt);
    assert_eq!(a, synth_generate(&small_synth(1)).unwrap());
}

#[test]
fn default_synth_motion_needs_no_clamping() {
    let cfg = SynthConfig::default();
    let norm = DisplacementNorm::default();
    let mut clamps = ClampCounter::default();
    let mut steps = 0;
    for s in synth_generate(&cfg).unwrap() {
        let frames = s.annotations();
        for pair in frames.windows(2) {
            let prev: HashMap<i64, _> = pair[0].objects.iter().copied().collect();
            for (id, b) in &pair[1].objects {
                let p = prev[id];
                let (u, v) = norm.normalize_counted((b.cx - p.cx, b.cy - p.cy), &mut clamps);
                assert!((-1.0..=1.0).contains(&u) && (-1.0..=1.0).contains(&v));
                steps += 1;
            }
        }
    }
    assert!(steps > 0);
    assert_eq!(clamps.0, 0);
}
