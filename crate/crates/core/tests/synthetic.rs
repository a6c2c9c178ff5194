use reid_core::data::manifest::Split;
use reid_core::data::synthetic::{generate_in_memory, render_sample, DEGRADED_CONFIDENCE};
use reid_core::data::{generate_synthetic, load_image, SyntheticConfig};
use reid_core::geometry::{body_frame, complete_keypoints, region_boxes, CanonicalPose, Joint, Keypoints18, Overlap};

fn reference() -> SyntheticConfig {
    SyntheticConfig::default()
}

#[test]
fn rendering_is_a_pure_function_of_its_arguments() {
    let cfg = reference();
    for (id, index) in [(0, 0), (5, 13), (15, 19)] {
        let (a, b) = (render_sample(&cfg, id, index), render_sample(&cfg, id, index));
        assert_eq!(a.image, b.image);
        assert_eq!(a.keypoints, b.keypoints);
    }
    let other = SyntheticConfig { seed: 8, ..cfg.clone() };
    assert_ne!(render_sample(&cfg, 2, 2).image, render_sample(&other, 2, 2).image);
}

#[test]
fn written_dataset_matches_the_renderer() {
    let cfg = SyntheticConfig { ids: 3, per_id: 4, ..reference() };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    let memory = generate_in_memory(&cfg).unwrap();
    assert_eq!(manifest.records.len(), 12);
    for (record, (name, sample)) in manifest.records.iter().zip(&memory) {
        assert_eq!(&record.image, name);
        assert_eq!(record.keypoints, sample.keypoints);
        assert_eq!(load_image(&manifest.resolve(record)).unwrap(), sample.image);
    }
    let again = tempfile::tempdir().unwrap();
    generate_synthetic(&cfg, again.path()).unwrap();
    for name in ["manifest.jsonl", "images/0002_003.ppm"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn keypoints_lie_inside_and_heads_sit_above_feet() {
    let cfg = reference();
    for (_, s) in generate_in_memory(&cfg).unwrap() {
        let j = s.keypoints.joints();
        for p in j {
            assert!(p.x >= 0.0 && p.x < cfg.width as f64 && p.y >= 0.0 && p.y < cfg.height as f64);
        }
        let head = j[..5].iter().map(|p| p.y).fold(f64::MIN, f64::max);
        let feet = j[16..].iter().map(|p| p.y).fold(f64::MAX, f64::min);
        assert!(head < feet);
    }
}

#[test]
fn whole_body_region_covers_the_figure() {
    let cfg = reference();
    let (mut inside, mut total) = (0usize, 0usize);
    for (_, s) in generate_in_memory(&cfg).unwrap().into_iter().take(200) {
        let boxes = region_boxes(&s.keypoints, Overlap::default()).unwrap();
        let r0 = boxes[0];
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if s.foreground[y * cfg.width + x] {
                    total += 1;
                    inside += r0.contains(x as f64 + 0.5, y as f64 + 0.5) as usize;
                }
            }
        }
    }
    let share = inside as f64 / total as f64;
    assert!(share >= 0.95, "{share}");
}

#[test]
fn degraded_joints_are_recovered_within_five_percent_of_height() {
    let cfg = SyntheticConfig { degrade_fraction: 1.0, ..reference() };
    let canonical = CanonicalPose::standing();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (_, s) in generate_in_memory(&cfg).unwrap() {
        let exact = s.keypoints.map(|j| Joint::new(j.x, j.y, 1.0));
        let h = body_frame(&exact).unwrap().height;
        let done = complete_keypoints(&s.keypoints, &canonical).unwrap();
        assert!(!done.replaced.is_empty());
        for &i in &done.replaced {
            assert!(s.keypoints.joints()[i].confidence < DEGRADED_CONFIDENCE);
            let (a, b) = (done.keypoints.joints()[i], exact.joints()[i]);
            worst = worst.max((a.x - b.x).hypot(a.y - b.y) / h);
            checked += 1;
        }
    }
    assert!(checked > 320);
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn splits_and_cameras_follow_the_index() {
    let cfg = reference();
    let all = generate_in_memory(&cfg).unwrap();
    let count = |split| all.iter().filter(|(_, s)| s.split == split).count();
    assert_eq!((count(Split::Train), count(Split::Query), count(Split::Gallery)), (192, 32, 96));
    for (_, s) in &all {
        let queries: Vec<u32> = all.iter().filter(|(_, t)| t.id == s.id && t.split == Split::Query).map(|(_, t)| t.cam).collect();
        assert_eq!(queries.len(), 2);
        assert_ne!(queries[0], queries[1]);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    for cfg in [
        SyntheticConfig { ids: 1, ..reference() },
        SyntheticConfig { per_id: 1, ..reference() },
        SyntheticConfig { height: 20, ..reference() },
        SyntheticConfig { occlusion_prob: 1.5, ..reference() },
    ] {
        assert!(generate_in_memory(&cfg).is_err());
    }
}

#[test]
fn cameras_differ_in_scale() {
    let cfg = SyntheticConfig { degrade_fraction: 0.0, ..reference() };
    let mean_height = |cam: u32| {
        let hs: Vec<f64> = (0..16)
            .flat_map(|id| (0..20).map(move |i| (id, i)))
            .map(|(id, i)| render_sample(&cfg, id, i))
            .filter(|s| s.cam == cam)
            .map(|s| body_frame(&Keypoints18::new(*s.keypoints.joints()).unwrap()).unwrap().height)
            .collect();
        hs.iter().sum::<f64>() / hs.len() as f64
    };
    let ratio = mean_height(1) / mean_height(0);
    assert!((ratio - 0.9).abs() < 0.03, "{ratio}");
}
