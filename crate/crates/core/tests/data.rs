use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3_core::data::{
    forecast_windows, generate, load_forecast_csv, load_ucr_tsv, window_count, write_ucr_tsv, DataError,
    ForecastOptions, LabeledSeries, SyntheticKind, SyntheticSpec, UcrOptions,
};
use s3_core::models::{Backbone, Model, ModelConfig, Task};
use s3_core::train::{self, LossKind, OptimizerConfig, TrainConfig, TrainData};

#[test]
fn ucr_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let series: Vec<LabeledSeries> = (0..9)
        .map(|i| LabeledSeries {
            values: (0..6).map(|_| rng.random_range(-1e3..1e3) / 7.0).collect(),
            len: 6,
            channels: 1,
            label: i % 3,
        })
        .collect();
    let labels = vec!["-1".to_string(), "4".into(), "10".into()];
    let (train, test) = (dir.path().join("x_TRAIN.tsv"), dir.path().join("x_TEST.tsv"));
    write_ucr_tsv(&train, &series[..6], &labels).unwrap();
    write_ucr_tsv(&test, &series[6..], &labels).unwrap();
    let ds = load_ucr_tsv(&train, &test, &UcrOptions::default()).unwrap();
    assert_eq!(ds.labels, labels);
    for (got, want) in ds.train.iter().chain(&ds.test).zip(&series) {
        assert_eq!(got.label, want.label);
        for (a, b) in got.values.iter().zip(&want.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn ucr_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let good = write("good.tsv", "1\t0.1\t0.2\n2\t0.3\t0.4\n");
    let empty = write("empty.tsv", "");
    assert!(matches!(load_ucr_tsv(&empty, &good, &UcrOptions::default()), Err(DataError::Format { .. })));
    let ragged = write("ragged.tsv", "1\t0.1\t0.2\n2\t0.3\n");
    match load_ucr_tsv(&ragged, &good, &UcrOptions::default()) {
        Err(DataError::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a format error, got {other:?}"),
    }
    let unknown = write("unknown.tsv", "3\t0.1\t0.2\n");
    assert!(matches!(load_ucr_tsv(&good, &unknown, &UcrOptions::default()), Err(DataError::Format { .. })));
}

fn forecast_csv(rows: usize, channels: usize, seed: u64) -> (String, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("date");
    for c in 0..channels {
        write!(text, ",ch{c}").unwrap();
    }
    text.push('\n');
    let mut raw = Vec::new();
    for r in 0..rows {
        write!(text, "2016-07-01 {r:02}:00:00").unwrap();
        for c in 0..channels {
            let v = 10.0 * c as f64 + (r as f64 / 5.0).sin() + rng.random_range(-0.5..0.5);
            raw.push(v);
            write!(text, ",{v:?}").unwrap();
        }
        text.push('\n');
    }
    (text, raw)
}

#[test]
fn forecast_windows_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let (text, raw) = forecast_csv(100, 2, 9);
    let path = dir.path().join("ett.csv");
    std::fs::write(&path, text).unwrap();
    let options = ForecastOptions {
        context: 24,
        horizon: 24,
        stride: 1,
        split: (0.6, 0.2),
    };
    let ds = load_forecast_csv(&path, &options).unwrap();
    assert_eq!(ds.total_windows, 53);
    assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 53);
    assert!(ds.train.last().unwrap().start < ds.val[0].start);
    assert!(ds.val.last().unwrap().start < ds.test[0].start);

    for w in &ds.train {
        let mut target = w.target.clone();
        ds.scaler.invert(&mut target);
        let start = (w.start + options.context) * 2;
        for (a, b) in target.iter().zip(&raw[start..start + target.len()]) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    // Statistics come from the rows the train windows cover.
    let last = ds.train.last().unwrap().start + options.context + options.horizon;
    let mut covered = raw[..last * 2].to_vec();
    ds.scaler.apply(&mut covered);
    for c in 0..2 {
        let col: Vec<f64> = covered.iter().skip(c).step_by(2).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!(mean.abs() <= 1e-9 && (std - 1.0).abs() <= 1e-9, "channel {c}: {mean} {std}");
    }
}

#[test]
fn forecast_degenerate_cases() {
    assert_eq!(window_count(100, 24, 24, 100), 1);
    assert_eq!(window_count(47, 24, 24, 1), 0);
    let raw: Vec<f64> = (0..40).map(f64::from).collect();
    let options = ForecastOptions {
        context: 24,
        horizon: 24,
        stride: 1,
        split: (0.6, 0.2),
    };
    assert!(matches!(forecast_windows(raw, 1, &options), Err(DataError::Data(_))));
}

fn pattern_spec(noise: f64, permutation: Vec<usize>, seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::permuted_pattern(32, 4, permutation, noise, seed);
    spec.train_samples = 200;
    spec.test_samples = 100;
    spec
}

#[test]
fn identity_permutation_is_the_template() {
    let a = generate(&pattern_spec(0.0, vec![0, 1, 2, 3], 1)).unwrap();
    let mut spec = pattern_spec(0.0, vec![0, 1, 2, 3], 1);
    spec.permutation = None;
    assert_eq!(generate(&spec).unwrap(), a);
    // Only the pair chunks carry signal in a noiseless template.
    for s in &a.train {
        assert!(s.values[16..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn noiseless_identity_task_is_linearly_separable() {
    let data = generate(&pattern_spec(0.0, vec![0, 1, 2, 3], 2)).unwrap();
    // Perceptron as the oracle probe.
    let mut w = vec![0.0; 33];
    let score = |w: &[f64], s: &LabeledSeries| w[32] + s.values.iter().zip(w).map(|(x, v)| x * v).sum::<f64>();
    for _ in 0..100 {
        let mut mistakes = 0;
        for s in &data.train {
            let y = if s.label == 1 { 1.0 } else { -1.0 };
            if y * score(&w, s) <= 0.0 {
                mistakes += 1;
                for (wi, x) in w.iter_mut().zip(&s.values) {
                    *wi += y * x;
                }
                w[32] += y;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    for s in data.train.iter().chain(&data.test) {
        let y = if s.label == 1 { 1.0 } else { -1.0 };
        assert!(y * score(&w, s) > 0.0);
    }
}

#[test]
fn generators_are_pure() {
    let spec = pattern_spec(0.4, vec![2, 0, 3, 1], 3);
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let mut other = spec.clone();
    other.seed = 4;
    assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
}

#[test]
fn spec_errors() {
    let mut spec = pattern_spec(0.1, vec![0, 1, 2, 3], 0);
    spec.length = 30;
    assert!(matches!(generate(&spec), Err(DataError::Spec(_))));
    let spec = pattern_spec(0.1, vec![0, 1, 1, 3], 0);
    assert!(matches!(generate(&spec), Err(DataError::Spec(_))));
}

fn long_range_spec(distance: usize, samples: usize) -> SyntheticSpec {
    SyntheticSpec {
        kind: SyntheticKind::LongRangePair,
        length: 32,
        channels: 1,
        chunks: 8,
        permutation: None,
        noise: 0.3,
        train_samples: samples,
        test_samples: 200,
        seed: 7,
        distance,
        pair_level: 1.0,
        cue: 0.0,
    }
}

#[test]
fn long_range_labels_are_balanced() {
    let data = generate(&long_range_spec(3, 10_000)).unwrap();
    let ones = data.train.iter().filter(|s| s.label == 1).count();
    assert!((ones as f64 / 10_000.0 - 0.5).abs() <= 0.01);
}

#[test]
fn adjacent_pair_is_solvable_by_small_conv() {
    let data = generate(&long_range_spec(0, 600)).unwrap();
    let config = ModelConfig {
        task: Task::Classification { classes: 2 },
        backbone: Backbone::TemporalConv,
        channels: 1,
        input_len: 32,
        hidden: 8,
        kernel: 5,
        conv_blocks: 2,
        s3: None,
    };
    let mut model = Model::build(&config, 0).unwrap();
    let train_config = TrainConfig {
        optimizer: OptimizerConfig::default(),
        learning_rate: 5e-3,
        batch_size: 16,
        epochs: 15,
        seed: 0,
        loss: LossKind::CrossEntropy,
        trace_every: 10,
        priority_lr_multiplier: 1.0,
    };
    let td = TrainData::Classification {
        train: &data.train,
        test: &data.test,
    };
    let report = train::train(&mut model, &td, &train_config).unwrap();
    let acc = report.final_metrics.accuracy.unwrap();
    assert!(acc >= 0.9, "control accuracy {acc}");
}
