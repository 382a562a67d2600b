use adv_attack::{AttackConfig, ConstraintReport};
use bench_cli::{
    aggregate, diff_image, delta_image, parse_records_jsonl, png_bytes, records_jsonl, report_csv, report_markdown,
    similarity_csv, DatasetSpec, ExperimentConfig, PairRecord, ReportRow, REFERENCE_BLOCK_LABEL, REPORT_CSV_HEADER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_core::Image;

fn record(eps: f64, pair: usize, pre: f64, post: f64) -> PairRecord {
    PairRecord {
        schema: 1,
        epsilon: eps,
        pair,
        probe_index: 2 * pair,
        reference_index: 2 * pair + 1,
        tau: 0.3,
        s_pre_clean: pre,
        s_pre_adv: pre,
        s_post_adv: post,
        s_post_initial: post,
        match_pre: pre >= 0.3,
        match_post: post >= 0.3,
        message: "0101".into(),
        initial_message: "1111".into(),
        delta_linf: eps,
        loss_trace: vec![post - pre],
        constraints: ConstraintReport::default(),
        attack: AttackConfig {
            epsilon: eps,
            ..AttackConfig::default()
        },
    }
}

fn random_records(seed: u64, eps: &[f64], pairs: usize) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eps.iter()
        .flat_map(|&e| (0..pairs).map(move |i| (e, i)))
        .map(|(e, i)| record(e, i, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

#[test]
fn aggregation_matches_a_direct_count() {
    let eps = [0.0, 1.0 / 255.0, 4.0 / 255.0];
    let recs = random_records(3, &eps, 37);
    let rows = aggregate(&recs);
    assert_eq!(rows.len(), 3);
    for (row, &e) in rows.iter().zip(&eps) {
        let mine: Vec<&PairRecord> = recs.iter().filter(|r| r.epsilon == e).collect();
        // Thresholding the logged similarities reproduces the match bits.
        let wo = mine.iter().filter(|r| r.s_pre_adv >= r.tau).count() as f64 / 37.0 * 100.0;
        let w = mine.iter().filter(|r| r.s_post_adv >= r.tau).count() as f64 / 37.0 * 100.0;
        assert_eq!(row.epsilon, e);
        assert_eq!(row.n_pairs, 37);
        assert!((row.accuracy_without_watermark - wo).abs() < 1e-12);
        assert!((row.accuracy_with_watermark - w).abs() < 1e-12);
        assert_eq!(row.reduction, row.accuracy_without_watermark - row.accuracy_with_watermark);
        assert!((0.0..=100.0).contains(&row.accuracy_with_watermark));
    }
}

#[test]
fn report_example_rows() {
    let recs = vec![
        record(0.0, 0, 0.9, 0.8),
        record(0.0, 1, 0.9, 0.1),
        record(0.0, 2, 0.2, 0.1),
        record(0.0, 3, 0.3, 0.3),
    ];
    let rows = aggregate(&recs);
    assert_eq!(
        rows,
        vec![ReportRow {
            epsilon: 0.0,
            accuracy_without_watermark: 75.0,
            accuracy_with_watermark: 50.0,
            reduction: 25.0,
            n_pairs: 4,
        }]
    );
    let csv = report_csv(&rows);
    assert_eq!(csv, format!("{REPORT_CSV_HEADER}\n0,0,75,50,25,4\n"));
}

#[test]
fn similarity_table_has_two_rows_per_record() {
    let recs = random_records(4, &[0.0, 2.0 / 255.0], 5);
    let csv = similarity_csv(&recs).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epsilon,condition,similarity");
    assert_eq!(lines.len(), 1 + 2 * 2 * 5);
    assert_eq!(lines[1], format!("0,without_watermarking,{}", recs[0].s_pre_adv));
    assert_eq!(lines[2], format!("0,with_watermarking,{}", recs[0].s_post_adv));
    assert!(similarity_csv(&[]).is_err());
}

#[test]
fn log_round_trip_is_exact() {
    let recs = random_records(5, &[0.0, 3.0 / 255.0], 4);
    let text = records_jsonl(&recs).unwrap();
    assert_eq!(text.lines().count(), 8);
    let back = parse_records_jsonl(&text).unwrap();
    assert_eq!(back, recs);
    assert_eq!(records_jsonl(&back).unwrap(), text);
    let bumped = text.replacen("\"schema\":1", "\"schema\":2", 1);
    assert!(parse_records_jsonl(&bumped).is_err());
}

#[test]
fn markdown_carries_the_reference_block() {
    let recs = random_records(6, &[0.0, 4.0 / 255.0], 3);
    let md = report_markdown(&aggregate(&recs), &recs);
    assert!(md.contains(REFERENCE_BLOCK_LABEL));
    assert!(md.contains("| 2 | 92.2 | 25.0 | 67.2 |"));
    assert!(md.contains("| 4 | 98.3 | 2.4 | 95.9 |"));
    assert!(md.contains("3 pairs per budget"));
}

#[test]
fn diff_image_arithmetic() {
    let a = Image::filled(2, 2, 3, 0.5);
    let same = diff_image(&a, &a).unwrap();
    assert!(same.data().iter().all(|&v| v == 1.0));
    let b = Image::filled(2, 2, 3, 0.5 + 1.0 / 32.0);
    let d = diff_image(&b, &a).unwrap();
    let png = png_bytes(&d).unwrap();
    let back = image::load_from_memory(&png).unwrap().to_rgb8();
    // 1 - 10/32 = 0.6875 is exact; 0.6875 * 255 = 175.31.
    let want = 175u8;
    assert!(back.as_raw().iter().all(|&v| v == want));
    let far = Image::filled(2, 2, 3, 0.9);
    assert!(diff_image(&far, &a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(diff_image(&a, &Image::filled(2, 3, 3, 0.5)).is_err());
}

#[test]
fn delta_image_maps_the_budget_to_the_unit_range() {
    let eps = 4.0 / 255.0;
    let d = Image::new(1, 1, 3, vec![-eps, 0.0, eps]).unwrap();
    assert_eq!(delta_image(&d, eps).unwrap().data(), &[0.0, 0.5, 1.0]);
    assert_eq!(delta_image(&Image::filled(1, 1, 3, 0.0), 0.0).unwrap().data(), &[0.5; 3]);
}

#[test]
fn config_defaults_and_validation() {
    let c = ExperimentConfig::default();
    assert!(c.validate().is_ok());
    assert_eq!(c.epsilon_grid.len(), 9);
    assert_eq!(c.epsilon_grid[0], 0.0);
    assert!((c.epsilon_grid[8] - 4.0 / 255.0).abs() < 1e-15);
    assert!((c.epsilon_grid[1] - 0.5 / 255.0).abs() < 1e-15);
    assert_eq!(c.tau, 0.3);
    let bad = |f: fn(&mut ExperimentConfig)| {
        let mut c = ExperimentConfig::default();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.epsilon_grid = vec![]));
    assert!(bad(|c| c.epsilon_grid = vec![0.02, 0.01]));
    assert!(bad(|c| c.epsilon_grid = vec![0.0, 0.0]));
    assert!(bad(|c| c.epsilon_grid = vec![-0.01, 0.01]));
    assert!(bad(|c| c.tau = 1.0));
    assert!(bad(|c| c.tau = -1.0));
    assert!(bad(|c| c.workers = 0));

    let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "tau": 0.25}"#).unwrap();
    assert_eq!(partial.seed, 3);
    assert_eq!(partial.tau, 0.25);
    assert_eq!(partial.eval_data, DatasetSpec::toy(100, 2, 7));
    let r = partial.resolved();
    assert_eq!((r.codec_train.seed, r.embedder_train.seed, r.attack.seed), (3, 3, 3));
    let text = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), r);
}
