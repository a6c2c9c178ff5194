use reid_core::config::RunConfig;
use reid_core::data::synthetic::render_sample;
use reid_core::data::SyntheticConfig;
use reid_core::experiment::{ablation_table, dump_attention, load_dataset, AblationRow};
use reid_core::evaluation::evaluate;
use reid_core::geometry::{Joint, Keypoints18, PartId};
use reid_core::network::{Preset, Variant};
use reid_core::pipeline::{extract_regions, prepare_image, PartOptions, RegionSource};

#[test]
fn pose_regions_are_clamped_and_report_completions() {
    let cfg = SyntheticConfig { degrade_fraction: 1.0, ..SyntheticConfig::default() };
    let s = render_sample(&cfg, 3, 4);
    let (boxes, source) = extract_regions((128, 64), &s.keypoints, true, &PartOptions::default());
    assert!(matches!(source, RegionSource::Pose { completed } if (1..=3).contains(&completed)));
    for b in boxes {
        assert!(b.x_left >= 0.0 && b.x_right <= 64.0 && b.y_top >= 0.0 && b.y_bottom <= 128.0);
        assert!(!b.is_empty());
    }
    assert_eq!(boxes.map(|b| b.part), PartId::ALL);
}

#[test]
fn unusable_poses_fall_back_to_strips() {
    let kps = Keypoints18::new([Joint::new(10.0, 10.0, 0.0); 18]).unwrap();
    let (boxes, source) = extract_regions((100, 40), &kps, true, &PartOptions::default());
    assert!(matches!(source, RegionSource::Fallback(_)));
    assert_eq!(boxes[1].y_bottom, 25.0);
    assert_eq!(boxes[4].y_top, 75.0);
    let (_, strips) = extract_regions((100, 40), &kps, false, &PartOptions::default());
    assert_eq!(strips, RegionSource::Strips);
}

#[test]
fn prepared_crops_have_preset_sizes_and_zero_channel_means() {
    let s = render_sample(&SyntheticConfig::default(), 0, 0);
    let dims = Preset::Desk.dims();
    let (crops, _) = prepare_image(&s.image, &s.keypoints, &dims, true, &PartOptions::default()).unwrap();
    assert_eq!(crops[0].shape(), &[96, 48, 3]);
    for c in &crops[1..] {
        assert_eq!(c.shape(), &[24, 48, 3]);
    }
    for c in &crops {
        for ch in 0..3 {
            let mean: f64 = c.data().iter().skip(ch).step_by(3).map(|&v| v as f64).sum::<f64>() / (c.len() / 3) as f64;
            assert!(mean.abs() < 1e-4);
        }
    }
}

#[test]
fn synthetic_run_config_loads_all_splits() {
    let mut config = RunConfig::for_preset(Preset::Desk);
    config.synthetic = SyntheticConfig { ids: 4, per_id: 5, ..SyntheticConfig::default() };
    let data = load_dataset(&config).unwrap();
    assert_eq!((data.train.len(), data.query.len(), data.gallery.len(), data.q), (12, 4, 4, 4));
    assert_eq!(data.fallbacks(), 0);
}

#[test]
fn ablation_table_lists_every_variant() {
    let config = RunConfig::for_preset(Preset::Desk);
    let report = evaluate(&[], &[], 20);
    let rows: Vec<AblationRow> = Variant::ALL
        .into_iter()
        .map(|variant| AblationRow { variant, report: report.clone(), checkpoint: Vec::new() })
        .collect();
    let table = ablation_table(&config, &rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "# seed=7 preset=desk epochs=30");
    assert_eq!(lines[1], "variant,R1,R5,R10,R20,mAP");
    assert_eq!(lines[6], "Intra+inter,0.0000,0.0000,0.0000,0.0000,0.0000");
}

#[test]
fn attention_dump_writes_one_image_per_mask() {
    let mut config = RunConfig::for_preset(Preset::Desk);
    config.model.variant = Variant::IntraInter;
    config.synthetic = SyntheticConfig { ids: 2, per_id: 2, ..SyntheticConfig::default() };
    let data = load_dataset(&config).unwrap();
    let model = reid_core::training::Trainer::new(config.train_config(), 2).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let n = dump_attention(&model, &data.train, 1, dir.path()).unwrap();
    assert_eq!(n, 15);
    assert!(dir.path().join("000_global.block2.ppm").exists());
}
