mod common;

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force_on_random_scenes() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut with_unknown_hits = 0;
    let mut with_wi = 0;
    for i in 0..1000 {
        let scene = common::random_scene(&mut rng);
        if let Err(e) = common::check_scene(&scene) {
            panic!("scene {i}: {e}\n{scene:#?}");
        }
        with_unknown_hits += usize::from(common::a_ose_oracle(&scene) > 0);
        with_wi += usize::from(common::wi_oracle(&scene).is_some_and(|f| f.num > 0));
    }
    // the generator must exercise the interesting branches
    assert!(with_unknown_hits > 100, "{with_unknown_hits}");
    assert!(with_wi > 50, "{with_wi}");
    assert!(start.elapsed() < Duration::from_secs(30));
}

#[test]
fn oracle_agrees_with_a_hand_worked_scene() {
    use owlab::openworld::{BBox, DetectionRecord, GroundTruth};

    let b = |c: [f64; 4]| BBox::new(c[0], c[1], c[2], c[3]).unwrap();
    // class 0: two ground truths, detections TP (0.9), FP (0.8), TP (0.7)
    let gts = vec![
        GroundTruth { image_id: 0, bbox: b([0.0, 0.0, 4.0, 4.0]), class_id: 0 },
        GroundTruth { image_id: 1, bbox: b([0.0, 0.0, 4.0, 4.0]), class_id: 0 },
    ];
    let dets = vec![
        DetectionRecord::new(0, b([0.0, 0.0, 4.0, 4.0]), Some(0), 0.9).unwrap(),
        DetectionRecord::new(0, b([0.0, 0.0, 4.0, 4.0]), Some(0), 0.8).unwrap(),
        DetectionRecord::new(1, b([0.0, 0.0, 4.0, 3.0]), Some(0), 0.7).unwrap(),
    ];
    // precisions 1, 1/2, 2/3 -> AP = (1 + 2/3) / 2 = 5/6
    let ap = common::ap_oracle(&dets, &gts, 0).unwrap();
    assert_eq!((ap.num, ap.den), (5, 6));
    let scene = common::Scene { dets, gts, known: [0].into_iter().collect() };
    common::check_scene(&scene).unwrap();
}
