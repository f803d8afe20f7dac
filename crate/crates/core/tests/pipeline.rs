use pullnet::augmentation::DeformationConfig;
use pullnet::datasets::{Dataset, Sample, Split};
use pullnet::network::{NetworkOptions, NetworkState};
use pullnet::trainer::{evaluate, train_epoch, EpochRecord, ExperimentSummary, RunRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NET: &str = "input 1x10x10; conv 4M k3x3 s0x0; maxpool 2x2; fc 6N; output 2";

fn data(n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let samples = (0..n)
        .map(|i| Sample {
            channels: vec![(0..100).map(|_| rng.gen()).collect()],
            label: i % 2,
        })
        .collect();
    Dataset::new(samples, Split::Train, 2, 10, 10).unwrap()
}

#[test]
fn evaluation_never_deforms() {
    let train = data(20);
    let mut net = NetworkState::<f64>::from_architecture(NET, 1, NetworkOptions::default()).unwrap();
    let heavy = TrainConfig {
        deformation: DeformationConfig {
            translate_pct: 40.0,
            rotate_deg: 90.0,
            translate: true,
            rotate: true,
            ..DeformationConfig::default()
        },
        ..TrainConfig::default()
    };
    train_epoch(&mut net, &train, &heavy, 0).unwrap();

    // The reported error must match predictions on the raw maps.
    let mut manual = 0;
    for (i, s) in train.samples().iter().enumerate() {
        if net.predict(&train.maps::<f64>(i, 32).unwrap()).unwrap() != s.label {
            manual += 1;
        }
    }
    let reported = evaluate(&mut net, &train).unwrap();
    assert_eq!(reported, 100.0 * manual as f64 / 20.0);
    // Same data object in both roles gives the same number.
    assert_eq!(evaluate(&mut net, &train).unwrap(), reported);
}

#[test]
fn deformation_changes_training_only() {
    let train = data(20);
    let plain = TrainConfig::default();
    let deformed = TrainConfig {
        deformation: DeformationConfig::translation(20.0),
        ..TrainConfig::default()
    };
    let mut a = NetworkState::<f64>::from_architecture(NET, 2, NetworkOptions::default()).unwrap();
    let mut b = a.clone();
    train_epoch(&mut a, &train, &plain, 0).unwrap();
    train_epoch(&mut b, &train, &deformed, 0).unwrap();
    assert_ne!(a.parameters(), b.parameters());
}

#[test]
fn metrics_lines_are_stable() {
    let record = EpochRecord {
        epoch: 3,
        lr: 0.000_986_071_7,
        train_err: 1.25,
        test_err: Some(2.5),
        secs: Some(12.3456),
    };
    assert_eq!(record.to_string(), "epoch=3 lr=9.860717e-4 train_err=1.2500 test_err=2.5000 secs=12.346");
    let untested = EpochRecord {
        test_err: None,
        secs: None,
        ..record
    };
    assert_eq!(untested.to_string(), "epoch=3 lr=9.860717e-4 train_err=1.2500 test_err=NA secs=NA");

    let run = RunRecord::from_epochs(7, vec![record]).unwrap();
    assert_eq!(run.to_string(), "run seed=7 tfbv=2.5000 bt=2.5000 best_epoch=3");
    let summary = ExperimentSummary::from_runs(vec![run]).unwrap();
    assert_eq!(
        summary.to_string(),
        "summary runs=1 tfbv_mean=2.5000 tfbv_std=NA bt_mean=2.5000 secs_per_epoch=12.346"
    );
}
