mod common;

use common::geometry::{edges, keypoints, oracle, random_pose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_core::geometry::{
    body_frame, complete_keypoints, region_boxes, CanonicalPose, Joint, Keypoints18, Overlap,
    PartId, JOINT_COUNT,
};

#[test]
fn regions_match_direct_formulas_on_random_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..1000 {
        let p = random_pose(&mut rng);
        let beta = rng.random_range(0.0..0.25);
        let want = oracle(&p, beta);
        let Ok(got) = region_boxes(&keypoints(&p), Overlap::Fraction(beta)) else {
            assert!(want[0].3 - want[0].1 <= 0.0);
            continue;
        };
        for (g, w) in got.iter().zip(want) {
            let g = edges(g);
            for (a, b) in [(g.0, w.0), (g.1, w.1), (g.2, w.2), (g.3, w.3)] {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
        checked += 1;
    }
    assert!(checked > 990);
}

#[test]
fn worked_example_head_and_lower_leg_spans() {
    let mut p = [(50.0, 100.0); 18];
    for (i, j) in p.iter_mut().enumerate().take(8) {
        j.1 = 10.0 + 20.0 * i as f64 / 7.0;
    }
    for (i, j) in p.iter_mut().enumerate().skip(14) {
        j.1 = 160.0 + 10.0 * (i - 14) as f64;
    }
    let frame = body_frame(&keypoints(&p)).unwrap();
    assert_eq!(frame.top, -10.0);
    assert_eq!(frame.bottom, 200.0);
    assert_eq!(frame.height, 210.0);
    let boxes = region_boxes(&keypoints(&p), Overlap::Pixels(0.0)).unwrap();
    assert_eq!(boxes[1].y_bottom, 30.0);
    assert_eq!(boxes[4].y_top, 160.0);
    assert_eq!(boxes.map(|b| b.part), PartId::ALL);
}

#[test]
fn overlap_grows_inner_edges_only() {
    let p = random_pose(&mut ChaCha8Rng::seed_from_u64(3));
    let k = keypoints(&p);
    let tight = region_boxes(&k, Overlap::Pixels(0.0)).unwrap();
    let loose = region_boxes(&k, Overlap::Pixels(5.0)).unwrap();
    assert_eq!(tight[0], loose[0]);
    assert_eq!(loose[1].y_top, tight[1].y_top);
    assert_eq!(loose[1].y_bottom, tight[1].y_bottom + 5.0);
    assert_eq!(loose[4].y_top, tight[4].y_top - 5.0);
    assert_eq!(loose[4].y_bottom, tight[4].y_bottom);
}

#[test]
fn flat_pose_is_degenerate() {
    assert!(body_frame(&keypoints(&[(3.0, 40.0); 18])).is_err());
}

fn pose_strategy() -> impl Strategy<Value = [(f64, f64); 18]> {
    // x on multiples of 18 and y on multiples of 3 make the centre and the
    // sole extrapolation exact, so translated boxes can be compared bitwise.
    prop::array::uniform18((-64i32..64, 0i32..32)).prop_map(|a| {
        let mut i = 0;
        a.map(|(x, y)| {
            let out = (18.0 * x as f64, 3.0 * (y + 8 * i) as f64);
            i += 1;
            out
        })
    })
}

proptest! {
    #[test]
    fn power_of_two_scaling_commutes(p in pose_strategy(), k in -4i32..6, beta in 0.0f64..0.3) {
        let s = 2f64.powi(k);
        let scaled = p.map(|(x, y)| (x * s, y * s));
        let (a, b) = (region_boxes(&keypoints(&p), Overlap::Fraction(beta)), region_boxes(&keypoints(&scaled), Overlap::Fraction(beta)));
        prop_assume!(a.is_ok());
        for (u, v) in a.unwrap().iter().zip(b.unwrap()) {
            let (u, v) = (edges(u), edges(&v));
            prop_assert_eq!((u.0 * s, u.1 * s, u.2 * s, u.3 * s), v);
        }
    }

    #[test]
    fn integer_translation_commutes(p in pose_strategy(), dx in -512i32..512, dy in -512i32..512) {
        let (dx, dy) = (dx as f64, dy as f64);
        let moved = p.map(|(x, y)| (x + dx, y + dy));
        let a = region_boxes(&keypoints(&p), Overlap::Pixels(3.0));
        prop_assume!(a.is_ok());
        let b = region_boxes(&keypoints(&moved), Overlap::Pixels(3.0)).unwrap();
        for (u, v) in a.unwrap().iter().zip(b) {
            let u = edges(u);
            prop_assert_eq!((u.0 + dx, u.1 + dy, u.2 + dx, u.3 + dy), edges(&v));
        }
    }

    #[test]
    fn parts_stay_inside_the_whole_body_vertically(p in pose_strategy(), beta in 0.0f64..0.3) {
        let Ok(b) = region_boxes(&keypoints(&p), Overlap::Fraction(beta)) else { return Ok(()) };
        prop_assert!(b[1].y_top == b[0].y_top && b[4].y_bottom == b[0].y_bottom);
        for part in &b[1..] {
            prop_assert_eq!((part.x_left, part.x_right), (b[0].x_left, b[0].x_right));
        }
        for (x, y) in p {
            prop_assert!(b[0].contains(x, y) || y < b[0].y_top || y > b[0].y_bottom);
        }
    }

    #[test]
    fn completion_keeps_confident_joints(p in pose_strategy(), mask in prop::array::uniform18(any::<bool>())) {
        let joints: [Joint; JOINT_COUNT] = std::array::from_fn(|i| {
            Joint::new(p[i].0, p[i].1, if mask[i] { 0.9 } else { 0.05 })
        });
        let kps = Keypoints18::new(joints).unwrap();
        match complete_keypoints(&kps, &CanonicalPose::standing()) {
            Ok(done) => {
                for i in 0..JOINT_COUNT {
                    let j = done.keypoints.joints()[i];
                    if mask[i] {
                        prop_assert_eq!(j, joints[i]);
                    } else {
                        prop_assert!(done.replaced.contains(&i));
                        prop_assert_eq!(j.confidence, 0.2);
                    }
                }
            }
            Err(e) => {
                let confident = mask.iter().filter(|&&m| m).count();
                prop_assert!(confident < 4 || e.to_string().contains("scale"), "{}", e);
            }
        }
    }
}

#[test]
fn completion_recovers_a_scaled_template() {
    let canonical = CanonicalPose::standing();
    let (s, tx, ty) = (180.0, 40.0, 12.0);
    let truth = canonical.joints.map(|(x, y)| (s * x + tx, s * y + ty));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let joints: [Joint; JOINT_COUNT] = std::array::from_fn(|i| {
            let dropped = rng.random_bool(0.4);
            if dropped {
                Joint::new(0.0, 0.0, 0.0)
            } else {
                Joint::new(truth[i].0, truth[i].1, 1.0)
            }
        });
        let kps = Keypoints18::new(joints).unwrap();
        let Ok(done) = complete_keypoints(&kps, &canonical) else {
            assert!(joints.iter().filter(|j| j.confidence > 0.5).count() < 4);
            continue;
        };
        for (j, t) in done.keypoints.joints().iter().zip(truth) {
            assert!((j.x - t.0).abs() < 1e-9 && (j.y - t.1).abs() < 1e-9);
        }
    }
}
