use degpr_core::data::*;
use degpr_core::eval::{counting_report, evaluate, EvalSample, SubimageCounts};
use degpr_core::experiment::{evaluate_detector, BenchmarkConfig};
use degpr_core::synth::{render_dataset, train_detector, DetectorConfig, SceneSpec};
use proptest::prelude::*;

#[test]
fn synthetic_scenes_survive_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = render_dataset(&SceneSpec::default(), 3, 1).unwrap();
    let mut records = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let image = format!("s{i}.pgm").into();
        let labels = format!("s{i}.txt").into();
        write_pgm(dir.path().join(&image), &s.image).unwrap();
        write_annotations(dir.path().join(&labels), &s.gold, 128, 128).unwrap();
        records.push(ManifestRecord { image, labels, source: None });
    }
    let manifest = DatasetManifest {
        class_names: vec!["iel".into(), "en".into()],
        iou_threshold: 0.5,
        records,
    };
    manifest.save(dir.path().join("m.json")).unwrap();
    let loaded = DatasetManifest::load(dir.path().join("m.json")).unwrap();
    assert_eq!(loaded, manifest);
    let back = loaded.load_records(dir.path()).unwrap();
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.gold.len(), b.gold.len());
        for (g, h) in a.gold.iter().zip(&b.gold) {
            assert_eq!(g.class_id, h.class_id);
            assert!(iou(&g.bbox, &h.bbox) > 0.999);
        }
        for (p, q) in a.image.pixels().iter().zip(b.image.pixels()) {
            assert!((p - q).abs() <= 0.5);
        }
    }
}

#[test]
fn tiles_recompose_into_source_counts() {
    let scenes = render_dataset(&SceneSpec::default().with_seed(9), 4, 1).unwrap();
    let slice = SliceConfig {
        rows: 2,
        cols: 2,
        target_width: 64,
        target_height: 64,
        min_keep_fraction: 0.25,
    };
    let mut subs = Vec::new();
    let mut expected = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let mut total = vec![0usize; 2];
        for tile in slice_image(s, &slice).unwrap() {
            let counts = tile.gold_counts(2);
            total[0] += counts[0];
            total[1] += counts[1];
            subs.push(SubimageCounts {
                source: format!("img{i}"),
                predicted: counts.clone(),
                gold: counts,
            });
        }
        expected.push(total);
    }
    let report = counting_report(&subs, 2).unwrap();
    assert_eq!(report.mean_mae, 0.0);
    for (img, want) in report.images.iter().zip(&expected) {
        assert_eq!(&img.gold, want);
    }
}

#[test]
fn detector_learns_and_beats_chance() {
    let cfg = BenchmarkConfig::default();
    let train = render_dataset(&cfg.scene.with_seed(1), 30, 1).unwrap();
    let test = render_dataset(&cfg.scene.with_seed(2), 6, 1).unwrap();
    let detector = DetectorConfig {
        epochs: 30,
        ..DetectorConfig::default()
    };
    let trained = train_detector(&train, 2, &detector, None).unwrap();
    let first = trained.trace.first().unwrap().l_det;
    let last = trained.trace.last().unwrap().l_det;
    assert!(last < 0.5 * first, "{first} -> {last}");
    let names = cfg.scene.class_names();
    let report = evaluate_detector(&trained.params, &test, &detector, &names, 0.5).unwrap();
    assert!(report.detection.map.unwrap() > 0.2);
}

#[test]
fn gold_detections_score_perfectly() {
    let scenes = render_dataset(&SceneSpec::default(), 3, 1).unwrap();
    let samples: Vec<EvalSample> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| EvalSample {
            source: format!("{i}"),
            detections: s.gold.iter().map(Detection::from_gold).collect(),
            gold: s.gold.clone(),
        })
        .collect();
    let report = evaluate(&samples, &["iel".into(), "en".into()], 0.5).unwrap();
    assert_eq!(report.detection.map, Some(1.0));
    assert_eq!(report.counting.mean_mae, 0.0);
    assert_eq!(report.counting.mean_mre, Some(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pgm_round_trip_is_lossless_for_integer_images(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let pixels: Vec<f64> = (0..w * h).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 7) % 256) as f64).collect();
        let image = GrayImage::new(w, h, pixels).unwrap();
        let back = decode_pnm(&encode_pgm(&image)).unwrap();
        prop_assert_eq!(back, image);
    }
}
