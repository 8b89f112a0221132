use s3_core::data::{ForecastWindow, LabeledSeries};
use s3_core::eval;
use s3_core::models::{Backbone, Model, ModelConfig, Task};
use s3_core::s3::S3StackConfig;
use s3_core::train::{
    self, adam_step, loss_trace_std, AdamState, LossKind, OptimizerConfig, TrainConfig, TrainData, TrainError,
};

fn classifier(s3: Option<S3StackConfig>) -> ModelConfig {
    ModelConfig {
        task: Task::Classification { classes: 2 },
        backbone: Backbone::TemporalConv,
        channels: 1,
        input_len: 16,
        hidden: 4,
        kernel: 3,
        conv_blocks: 1,
        s3,
    }
}

fn toy_series(count: usize) -> Vec<LabeledSeries> {
    (0..count)
        .map(|i| {
            let label = i % 2;
            let values = (0..16)
                .map(|t| {
                    let wiggle = ((i * 13 + t * 7) % 11) as f64 / 11.0 - 0.5;
                    if label == 1 && (4..8).contains(&t) { 1.5 + wiggle } else { wiggle }
                })
                .collect();
            LabeledSeries {
                values,
                len: 16,
                channels: 1,
                label,
            }
        })
        .collect()
}

fn config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::default(),
        learning_rate: lr,
        batch_size: 4,
        epochs,
        seed: 2,
        loss: LossKind::CrossEntropy,
        trace_every: 3,
        priority_lr_multiplier: 1.0,
    }
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let data = toy_series(12);
    let stack = S3StackConfig::new(4, 2, 1.0, 2).unwrap();
    let mut model = Model::build(&classifier(Some(stack)), 0).unwrap();
    let before = model.clone();
    let td = TrainData::Classification {
        train: &data,
        test: &data,
    };
    train::train(&mut model, &td, &config(0.0, 2)).unwrap();
    assert_eq!(model, before);
}

#[test]
fn overfits_a_single_sample() {
    let data = toy_series(2)[1..].to_vec();
    let stack = S3StackConfig::new(4, 1, 1.0, 1).unwrap();
    let mut model = Model::build(&classifier(Some(stack)), 1).unwrap();
    let td = TrainData::Classification {
        train: &data,
        test: &data,
    };
    let mut cfg = config(0.05, 200);
    cfg.batch_size = 1;
    let report = train::train(&mut model, &td, &cfg).unwrap();
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < 1e-2, "final loss {last}");
}

#[test]
fn same_seed_gives_identical_reports() {
    let data = toy_series(20);
    let stack = S3StackConfig::new(4, 2, 2.0, 1).unwrap();
    let run = || {
        let mut model = Model::build(&classifier(Some(stack)), 3).unwrap();
        let td = TrainData::Classification {
            train: &data,
            test: &data,
        };
        let mut report = train::train(&mut model, &td, &config(0.01, 3)).unwrap();
        report.wall_clock_seconds = 0.0;
        (report, model)
    };
    let (a, model_a) = run();
    let (b, model_b) = run();
    assert_eq!(a, b);
    assert_eq!(model_a, model_b);
    for (x, y) in a.loss_trace.iter().zip(&b.loss_trace) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
}

#[test]
fn trace_cadence_and_flat_steps() {
    let data = toy_series(22);
    let stack = S3StackConfig::new(4, 1, 1.0, 1).unwrap();
    let mut model = Model::build(&classifier(Some(stack)), 4).unwrap();
    let td = TrainData::Classification {
        train: &data,
        test: &data,
    };
    let report = train::train(&mut model, &td, &config(0.01, 2)).unwrap();
    // 22 samples in batches of 4 is 6 iterations per epoch.
    assert_eq!(report.iterations, 12);
    assert_eq!(report.loss_trace.len(), 12_usize.div_ceil(3));
    assert_eq!(report.permutation_trace.len(), report.loss_trace.len());
    assert_eq!(report.weights_trace.len(), report.loss_trace.len());
    assert!(report.flat_priority_steps.is_empty(), "{:?}", report.flat_priority_steps);
    assert_eq!(report.param_counts.s3, 4 + 3);
}

#[test]
fn adam_matches_hand_computation() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let grads = [[0.5, -2.0], [0.25, 1.0], [-1.0, 0.0]];
    let mut params = vec![1.0, -1.0];
    let mut state = AdamState::new(2);
    for g in &grads {
        adam_step(&mut params, g, &mut state, lr, b1, b2, eps);
    }

    let mut expected = [1.0, -1.0];
    for (j, p) in expected.iter_mut().enumerate() {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g[j];
            v = b2 * v + (1.0 - b2) * g[j] * g[j];
            let step = t as i32 + 1;
            let m_hat = m / (1.0 - b1.powi(step));
            let v_hat = v / (1.0 - b2.powi(step));
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    for (a, b) in params.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn loss_std_matches_two_pass_oracle() {
    let data = toy_series(16);
    let mut model = Model::build(&classifier(None), 5).unwrap();
    let td = TrainData::Classification {
        train: &data,
        test: &data,
    };
    let mut cfg = config(0.01, 4);
    cfg.trace_every = 1;
    let report = train::train(&mut model, &td, &cfg).unwrap();
    let losses: Vec<f64> = report.loss_trace.iter().map(|p| p.loss).collect();
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    assert!((loss_trace_std(&report).unwrap() - var.sqrt()).abs() <= 1e-12);
}

#[test]
fn exploding_loss_names_the_iteration() {
    let data = toy_series(8);
    let mut model = Model::build(&classifier(None), 6).unwrap();
    let td = TrainData::Classification {
        train: &data,
        test: &data,
    };
    let mut cfg = config(1e200, 3);
    cfg.optimizer = OptimizerConfig::Sgd { momentum: 0.0 };
    match train::train(&mut model, &td, &cfg) {
        Err(TrainError::NonFiniteLoss { iteration, .. }) => assert!(iteration > 0),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.iterations)),
    }
}

#[test]
fn forecasting_reports_error_metrics() {
    let windows: Vec<ForecastWindow> = (0..10)
        .map(|s| {
            let row = |t: usize| ((s + t) as f64 / 3.0).sin();
            ForecastWindow {
                context: (0..16).map(row).collect(),
                target: (16..20).map(row).collect(),
                start: s,
            }
        })
        .collect();
    let cfg = ModelConfig {
        task: Task::Forecasting { horizon: 4 },
        backbone: Backbone::Linear,
        ..classifier(Some(S3StackConfig::new(2, 1, 1.0, 1).unwrap()))
    };
    let mut model = Model::build(&cfg, 0).unwrap();
    let td = TrainData::Forecasting {
        train: &windows,
        test: &windows,
    };
    let mut tc = config(0.01, 2);
    tc.loss = LossKind::Mse;
    let report = train::train(&mut model, &td, &tc).unwrap();
    let m = report.final_metrics;
    assert!(m.accuracy.is_none());
    let (mse, mae) = (m.mse.unwrap(), m.mae.unwrap());
    assert!(mse.is_finite() && mae.is_finite() && mae * mae <= mse + 1e-12);

    // Mismatched loss and task is a configuration error.
    tc.loss = LossKind::CrossEntropy;
    assert!(matches!(train::train(&mut model, &td, &tc), Err(TrainError::Config(_))));
}

#[test]
fn relative_difference_is_linear() {
    for (a, x) in [(0.5, 0.1), (0.8, -0.25), (2.0, 0.03)] {
        let d = eval::diff_classification(a, a * (1.0 + x)).unwrap();
        assert!((d - 100.0 * x).abs() <= 1e-9, "{d}");
        let f = eval::diff_forecasting(a, a * (1.0 - x)).unwrap();
        assert!((f - 100.0 * x).abs() <= 1e-9, "{f}");
    }
}
