use iabn_bench::data::{two_gaussians, Dataset};
use iabn_bench::train::{cmd_train, DataSource, TrainConfig};
use inplace_abn::strategies::Strategy;
use inplace_abn::DType;

/// Full-batch gradient descent on logistic regression over raw pixels.
fn logistic_regression(train: &Dataset, epochs: usize, lr: f64) -> (Vec<f64>, f64) {
    let p = train.pixels();
    let (mut w, mut b) = (vec![0.0; p], 0.0);
    let n = train.len() as f64;
    for _ in 0..epochs {
        let (mut gw, mut gb) = (vec![0.0; p], 0.0);
        for i in 0..train.len() {
            let x = train.image(i);
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - train.labels[i] as f64;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += err * v / n);
            gb += err / n;
        }
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= lr * g);
        b -= lr * gb;
    }
    (w, b)
}

fn accuracy(model: &(Vec<f64>, f64), set: &Dataset) -> f64 {
    let correct = (0..set.len())
        .filter(|&i| {
            let z: f64 = model.1
                + set
                    .image(i)
                    .iter()
                    .zip(&model.0)
                    .map(|(a, c)| a * c)
                    .sum::<f64>();
            usize::from(z > 0.0) == set.labels[i]
        })
        .count();
    correct as f64 / set.len() as f64
}

#[test]
fn synthetic_data_is_linearly_separable_enough() {
    let train = two_gaussians(1024, 0);
    let test = two_gaussians(512, 0x7e57);
    let model = logistic_regression(&train, 200, 0.5);
    let acc = accuracy(&model, &test);
    assert!(acc >= 0.97, "logistic regression reaches only {acc}");
}

#[test]
fn default_run_learns_and_loss_decreases_early() {
    let cfg = TrainConfig {
        strategy: Strategy::InPlaceAbnII,
        ..TrainConfig::default()
    };
    let r = cmd_train(&cfg, DType::Double).unwrap();
    assert_eq!(r.epochs.len(), cfg.epochs + 1);
    let losses: Vec<f64> = r.epochs.iter().map(|e| e.mean_loss).collect();
    assert!(losses[..4].windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    assert!(r.final_test_accuracy() >= 0.95, "{:?}", r.epochs);
}

#[test]
fn same_seed_is_reproducible() {
    let cfg = TrainConfig {
        data: DataSource::Synthetic {
            train: 256,
            test: 64,
        },
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = cmd_train(&cfg, DType::Double).unwrap();
    let b = cmd_train(&cfg, DType::Double).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpointing_strategies_also_match() {
    let run = |strategy| {
        let cfg = TrainConfig {
            data: DataSource::Synthetic {
                train: 256,
                test: 64,
            },
            epochs: 2,
            strategy,
            ..TrainConfig::default()
        };
        cmd_train(&cfg, DType::Double).unwrap().step_losses
    };
    let reference = run(Strategy::Standard);
    for s in [Strategy::Checkpointing, Strategy::CheckpointingProposed] {
        for (a, b) in run(s).iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{s}: {a} vs {b}");
        }
    }
}
