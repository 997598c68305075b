use pllkit::eval::{parse_report, MetricBlock};
use pllkit::formats::{
    read_candidates_file, read_features, read_labels_file, write_candidates_file,
    write_labels_file, write_matrix_file,
};
use pllkit::genlab::gen_fps;
use pllkit::synth::{gaussian_blobs, noisy_text, BlobSpec};
use pllkit::trainer::{predict, read_model_file, write_model_file};
use pllkit::zsfilter::{candidate_stats, filter_topk, zeroshot_confidence, DEFAULT_TEMPERATURE};
use pllkit::{fit, FilterSpec, FitInputs, LabelSpace, ObjectiveKind, PLLDataset, TrainConfig};

fn spec(per_class: usize, seed: u64) -> BlobSpec {
    BlobSpec {
        k: 6,
        d: 24,
        per_class,
        separation: 4.0,
        noise: 1.0,
        offset: 0.5,
        seed,
    }
}

#[test]
fn files_filter_train_checkpoint_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let train = gaussian_blobs(&spec(80, 1));
    let test = gaussian_blobs(&spec(40, 2));
    let text = noisy_text(&train.means, 0.25, 3);
    let candidates = gen_fps(&train.labels, 6, 0.6, 4).unwrap();

    write_matrix_file(train.features.rows(), p("x.pllf")).unwrap();
    write_matrix_file(text.rows(), p("t.pllf")).unwrap();
    write_labels_file(&train.labels, 6, p("y.plly")).unwrap();
    write_candidates_file(&candidates, p("s.pllc")).unwrap();

    let x = read_features(p("x.pllf")).unwrap();
    let t = read_features(p("t.pllf")).unwrap();
    let (y, k) = read_labels_file(p("y.plly")).unwrap();
    let s = read_candidates_file(p("s.pllc")).unwrap();
    assert_eq!(
        (x.rows(), &y, k, &s),
        (train.features.rows(), &train.labels, 6, &candidates)
    );

    let conf = zeroshot_confidence(&x, &t, DEFAULT_TEMPERATURE).unwrap();
    let filtered = filter_topk(&s, &conf, &FilterSpec::new(3)).unwrap();
    let (before, after) = (
        candidate_stats(&s, Some(&y)),
        candidate_stats(&filtered, Some(&y)),
    );
    assert!(after.mean < before.mean);
    assert!(after.coverage.unwrap() > 0.9);

    let ds = PLLDataset::new(LabelSpace::new(k).unwrap(), x, filtered, Some(y)).unwrap();
    let cfg = TrainConfig {
        objective: ObjectiveKind::Proden,
        use_adapter: true,
        ..Default::default()
    };
    let inputs = FitInputs {
        text_init: Some(&t),
        test: Some(test.split()),
        ..Default::default()
    };
    let (model, state, report) = fit(&ds, inputs, &cfg).unwrap();
    assert!(
        report.final_test_acc().unwrap() > 0.8,
        "{}",
        report.to_text()
    );

    write_model_file(&model, p("m.pllm")).unwrap();
    let restored = read_model_file(p("m.pllm")).unwrap();
    let xt = test.features.to_f64();
    let preds = predict(&model, &cfg.objective, &state, xt.view());
    assert_eq!(predict(&restored, &cfg.objective, &state, xt.view()), preds);

    let block =
        MetricBlock::compute(&preds, &test.labels, k, Some(&ds.class_counts), None).unwrap();
    let parsed = parse_report(&block.to_report()).unwrap();
    assert_eq!(parsed[0].0, "overall_acc");
    assert!((parsed[0].1 - report.final_test_acc().unwrap()).abs() < 1e-6);
}
