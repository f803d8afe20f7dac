//! Online gradient descent over a dataset, the learning-rate schedule, and
//! the multi-run experiment harness.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{deform_channels, sample_params, DeformationConfig};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::network::{NetworkOptions, NetworkState};
use crate::tensor::Real;
use crate::topology::NetworkSpec;

/// Decay reaching `3e-5` from `1e-3` after 500 epochs.
pub fn mnist_decay() -> f64 {
    0.03f64.powf(1.0 / 500.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub eta0: f64,
    pub eta_decay: f64,
    pub eta_floor: f64,
    pub seed: u64,
    pub deformation: DeformationConfig,
    pub shuffle: bool,
    /// Evaluate the test set every this many epochs (the last epoch always).
    pub test_every: usize,
    /// Record wall time per epoch; when off the log shows `secs=NA`.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            eta0: 1e-3,
            eta_decay: mnist_decay(),
            eta_floor: 3e-5,
            seed: 1,
            deformation: DeformationConfig::default(),
            shuffle: true,
            test_every: 1,
            timing: true,
        }
    }
}

impl TrainConfig {
    /// 1e-3 multiplied by 0.95 each epoch.
    pub fn norb() -> Self {
        TrainConfig {
            eta_decay: 0.95,
            eta_floor: 0.0,
            ..Self::default()
        }
    }

    /// 1e-3 multiplied by 0.993 each epoch.
    pub fn cifar10() -> Self {
        TrainConfig {
            eta_decay: 0.993,
            eta_floor: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return Err(Error::Config(format!("eta decay {} outside (0, 1]", self.eta_decay)));
        }
        if !(self.eta0 >= 0.0) || !(self.eta_floor >= 0.0) || self.eta_floor > self.eta0 {
            return Err(Error::Config(format!(
                "learning rates need 0 <= floor <= eta0, got floor {} and eta0 {}",
                self.eta_floor, self.eta0
            )));
        }
        if self.test_every == 0 {
            return Err(Error::Config("test interval must be at least 1".into()));
        }
        self.deformation.validate()
    }
}

/// `max(eta0 * decay^epoch, floor)` with epochs counted from 0.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let exp = i32::try_from(epoch).unwrap_or(i32::MAX);
    (config.eta0 * config.eta_decay.powi(exp)).max(config.eta_floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub lr: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

fn check_geometry<T: Real>(net: &NetworkState<T>, data: &Dataset) -> Result<()> {
    let input = net.spec().input();
    if (data.channels(), data.width(), data.height()) != (input.maps, input.width, input.height) {
        return Err(Error::Dimension(format!(
            "network takes {} maps of {}x{}, dataset has {} of {}x{}",
            input.maps,
            input.width,
            input.height,
            data.channels(),
            data.width(),
            data.height()
        )));
    }
    if data.classes() > net.spec().classes() {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, network outputs {}",
            data.classes(),
            net.spec().classes()
        )));
    }
    Ok(())
}

/// Order in which epoch `epoch` visits the samples.
pub fn epoch_order(config: &TrainConfig, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if config.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2 * epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// One pass of online gradient descent: a weight update after every sample.
/// Only this function deforms images.
pub fn train_epoch<T: Real>(net: &mut NetworkState<T>, data: &Dataset, config: &TrainConfig, epoch: usize) -> Result<EpochStats> {
    check_geometry(net, data)?;
    let lr = lr_at_epoch(config, epoch);
    let eta = T::of(lr);
    let quantum = net.options().pitch_quantum;
    let mut deform_rng = ChaCha8Rng::seed_from_u64(config.seed);
    deform_rng.set_stream(2 * epoch as u64 + 1);
    let mut total = 0.0;
    let order = epoch_order(config, epoch, data.len());
    for &i in &order {
        let mut maps = data.maps::<T>(i, quantum)?;
        if config.deformation.enabled() {
            let params = sample_params(&config.deformation, deform_rng.gen());
            maps = deform_channels(&maps, &params, data.background())?;
        }
        let label = data.samples()[i].label;
        net.forward(&maps)?;
        total += net.loss(label)?.as_f64();
        net.backward(label)?;
        if lr > 0.0 {
            net.apply_gradients(eta)?;
        }
    }
    Ok(EpochStats {
        lr,
        mean_loss: total / order.len() as f64,
        samples: order.len(),
    })
}

/// Classification error in percent; never deforms.
pub fn evaluate<T: Real>(net: &mut NetworkState<T>, data: &Dataset) -> Result<f64> {
    check_geometry(net, data)?;
    let quantum = net.options().pitch_quantum;
    let mut wrong = 0usize;
    for (i, sample) in data.samples().iter().enumerate() {
        if net.predict(&data.maps::<T>(i, quantum)?)? != sample.label {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub lr: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub secs: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:.6e} train_err={:.4}", self.epoch, self.lr, self.train_err)?;
        match self.test_err {
            Some(t) => write!(f, " test_err={t:.4}")?,
            None => write!(f, " test_err=NA")?,
        }
        match self.secs {
            Some(s) => write!(f, " secs={s:.3}"),
            None => write!(f, " secs=NA"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Test error at the epoch with the lowest training-set error.
    pub tfbv: f64,
    /// Lowest test error over all epochs.
    pub bt: f64,
    pub best_epoch: usize,
}

impl RunRecord {
    /// Summarizes epochs; only epochs with a test measurement compete.
    /// Ties go to the earlier epoch.
    pub fn from_epochs(seed: u64, epochs: Vec<EpochRecord>) -> Result<Self> {
        let tested: Vec<&EpochRecord> = epochs.iter().filter(|e| e.test_err.is_some()).collect();
        let best = tested
            .iter()
            .copied()
            .reduce(|a, b| if b.train_err < a.train_err { b } else { a })
            .ok_or_else(|| Error::State("run has no tested epoch".into()))?;
        let bt = tested.iter().filter_map(|e| e.test_err).fold(f64::INFINITY, f64::min);
        Ok(RunRecord {
            seed,
            tfbv: best.test_err.expect("tested epoch"),
            bt,
            best_epoch: best.epoch,
            epochs,
        })
    }

    pub fn mean_secs(&self) -> Option<f64> {
        let secs: Option<Vec<f64>> = self.epochs.iter().map(|e| e.secs).collect();
        secs.filter(|s| !s.is_empty()).map(|s| s.iter().sum::<f64>() / s.len() as f64)
    }
}

impl fmt::Display for RunRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run seed={} tfbv={:.4} bt={:.4} best_epoch={}",
            self.seed, self.tfbv, self.bt, self.best_epoch
        )
    }
}

/// Sample mean and unbiased standard deviation (absent for fewer than two
/// values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub runs: Vec<RunRecord>,
    pub tfbv_mean: f64,
    pub tfbv_std: Option<f64>,
    pub bt_mean: f64,
    pub secs_per_epoch: Option<f64>,
}

impl ExperimentSummary {
    pub fn from_runs(runs: Vec<RunRecord>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("an experiment needs at least one run".into()));
        }
        let tfbv: Vec<f64> = runs.iter().map(|r| r.tfbv).collect();
        let bt: Vec<f64> = runs.iter().map(|r| r.bt).collect();
        let (tfbv_mean, tfbv_std) = mean_std(&tfbv);
        let secs: Option<Vec<f64>> = runs.iter().map(RunRecord::mean_secs).collect();
        Ok(ExperimentSummary {
            tfbv_mean,
            tfbv_std,
            bt_mean: mean_std(&bt).0,
            secs_per_epoch: secs.map(|s| mean_std(&s).0),
            runs,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }
}

impl fmt::Display for ExperimentSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "summary runs={} tfbv_mean={:.4}", self.runs.len(), self.tfbv_mean)?;
        match self.tfbv_std {
            Some(s) => write!(f, " tfbv_std={s:.4}")?,
            None => write!(f, " tfbv_std=NA")?,
        }
        write!(f, " bt_mean={:.4}", self.bt_mean)?;
        match self.secs_per_epoch {
            Some(s) => write!(f, " secs_per_epoch={s:.3}"),
            None => write!(f, " secs_per_epoch=NA"),
        }
    }
}

/// Network with weights drawn from `U[-0.05, 0.05]`.
pub fn init_weights<T: Real>(spec: &NetworkSpec, seed: u64, options: NetworkOptions) -> Result<NetworkState<T>> {
    NetworkState::new(spec.clone(), seed, options)
}

/// Trains `net` for `config.epochs` epochs, writing one metrics line per
/// epoch to `log`. The training set doubles as the validation set.
pub fn train_run<T: Real>(
    net: &mut NetworkState<T>,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<RunRecord> {
    config.validate()?;
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let stats = train_epoch(net, train, config, epoch)?;
        let train_err = evaluate(net, train)?;
        let last = epoch + 1 == config.epochs;
        let test_err = if last || (epoch + 1) % config.test_every == 0 {
            Some(evaluate(net, test)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: stats.lr,
            train_err,
            test_err,
            secs: config.timing.then(|| start.elapsed().as_secs_f64()),
        };
        writeln!(log, "{record}").map_err(|e| Error::io("metrics log", e))?;
        epochs.push(record);
    }
    RunRecord::from_epochs(seed, epochs)
}

/// Trains one fresh network per seed; runs differ only in weight
/// initialization.
pub fn run_experiment<T: Real>(
    spec: &NetworkSpec,
    config: &TrainConfig,
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    options: NetworkOptions,
    log: &mut dyn Write,
) -> Result<ExperimentSummary> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut net = init_weights::<T>(spec, seed, options)?;
        let run = train_run(&mut net, seed, train, test, config, log)?;
        writeln!(log, "{run}").map_err(|e| Error::io("metrics log", e))?;
        runs.push(run);
    }
    let summary = ExperimentSummary::from_runs(runs)?;
    writeln!(log, "{summary}").map_err(|e| Error::io("metrics log", e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Sample, Split};
    use crate::topology::parse_architecture;

    const NET: &str = "input 1x8x8; conv 4M k3x3 s0x0; maxpool 2x2; fc 8N; output 3";

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let label = i % 3;
                // Bright band in a class-specific row block.
                let pixels = (0..64)
                    .map(|p| {
                        let row = p / 8;
                        let base = if row / 3 == label { 220 } else { 30 };
                        (base + rng.gen_range(0..30)) as u8
                    })
                    .collect();
                Sample {
                    channels: vec![pixels],
                    label,
                }
            })
            .collect();
        Dataset::new(samples, Split::Train, 3, 8, 8).unwrap()
    }

    fn net(seed: u64) -> NetworkState<f64> {
        NetworkState::new(parse_architecture(NET).unwrap(), seed, NetworkOptions::default()).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let norb = TrainConfig::norb();
        assert_eq!(lr_at_epoch(&norb, 0), 1e-3);
        assert!((lr_at_epoch(&norb, 1) - 0.00095).abs() < 1e-15);
        let decay = mnist_decay();
        assert!((decay - 0.993012).abs() < 1e-6);
        assert!((1e-3 * decay.powi(500) - 3e-5).abs() < 1e-15);
        let mnist = TrainConfig::default();
        assert!((lr_at_epoch(&mnist, 500) - 3e-5).abs() < 1e-12);
        assert_eq!(lr_at_epoch(&mnist, 900), 3e-5);
        for e in 0..600 {
            assert!(lr_at_epoch(&mnist, e + 1) <= lr_at_epoch(&mnist, e));
        }
    }

    #[test]
    fn config_validation() {
        let bad_decay = TrainConfig { eta_decay: 1.5, ..TrainConfig::default() };
        assert!(matches!(bad_decay.validate(), Err(Error::Config(_))));
        let bad_floor = TrainConfig { eta_floor: 1.0, ..TrainConfig::default() };
        assert!(matches!(bad_floor.validate(), Err(Error::Config(_))));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let data = toy_data(12, 0);
        let mut n = net(1);
        let before = n.parameters();
        let config = TrainConfig { eta0: 0.0, eta_floor: 0.0, ..TrainConfig::default() };
        train_epoch(&mut n, &data, &config, 0).unwrap();
        assert_eq!(n.parameters(), before);
    }

    #[test]
    fn single_sample_loss_does_not_increase() {
        let data = toy_data(1, 1);
        let mut n = net(2);
        let config = TrainConfig { eta0: 1e-3, eta_floor: 0.0, eta_decay: 1.0, ..TrainConfig::default() };
        let mut losses = Vec::new();
        for epoch in 0..10 {
            train_epoch(&mut n, &data, &config, epoch).unwrap();
            losses.push(n.sample_loss(&data.maps::<f64>(0, 32).unwrap(), data.samples()[0].label).unwrap());
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(30, 2);
        let config = TrainConfig {
            deformation: DeformationConfig::translation(10.0),
            ..TrainConfig::default()
        };
        let run = || {
            let mut n = net(3);
            for e in 0..2 {
                train_epoch(&mut n, &data, &config, e).unwrap();
            }
            n.parameters()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_classifier_error() {
        // Zero weights give identical outputs, so argmax picks class 0.
        let data = toy_data(30, 3);
        let mut n = NetworkState::<f64>::zeroed(parse_architecture(NET).unwrap(), NetworkOptions::default()).unwrap();
        let zeros = data.samples().iter().filter(|s| s.label == 0).count() as f64;
        let expected = 100.0 * (1.0 - zeros / 30.0);
        assert!((evaluate(&mut n, &data).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let data = toy_data(3, 0);
        let mut n = NetworkState::<f64>::from_architecture("input 1x9x9; output 3", 1, NetworkOptions::default()).unwrap();
        assert!(matches!(evaluate(&mut n, &data), Err(Error::Dimension(_))));
        assert!(matches!(train_epoch(&mut n, &data, &TrainConfig::default(), 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn toy_problem_is_learned() {
        let train = toy_data(60, 4);
        let test = toy_data(30, 5);
        let config = TrainConfig { epochs: 5, eta0: 0.01, eta_floor: 0.0, timing: false, ..TrainConfig::default() };
        let mut log = Vec::new();
        let mut n = net(4);
        let run = train_run(&mut n, 4, &train, &test, &config, &mut log).unwrap();
        assert!(run.tfbv < 10.0, "{run}");
        assert!(run.bt <= run.tfbv);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.starts_with("epoch=") && l.ends_with("secs=NA")));
    }

    #[test]
    fn run_record_selection() {
        let e = |epoch, train_err, test_err| EpochRecord { epoch, lr: 0.1, train_err, test_err, secs: None };
        let r = RunRecord::from_epochs(0, vec![e(1, 5.0, Some(6.0)), e(2, 2.0, Some(4.0)), e(3, 2.0, Some(3.0)), e(4, 1.0, None)])
            .unwrap();
        assert_eq!((r.tfbv, r.bt, r.best_epoch), (4.0, 3.0, 2));
    }

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, None));
        assert_eq!(mean_std(&[2.0, 2.0]).1, Some(0.0));
    }

    #[test]
    fn equal_seeds_give_zero_spread() {
        let train = toy_data(12, 6);
        let spec = parse_architecture(NET).unwrap();
        let config = TrainConfig { epochs: 1, timing: false, ..TrainConfig::default() };
        let mut log = Vec::new();
        let s = run_experiment::<f64>(&spec, &config, &[9, 9], &train, &train, NetworkOptions::default(), &mut log).unwrap();
        assert_eq!(s.tfbv_std, Some(0.0));
        let one = run_experiment::<f64>(&spec, &config, &[9], &train, &train, NetworkOptions::default(), &mut log).unwrap();
        assert_eq!(one.tfbv_std, None);
    }

    #[test]
    fn init_mean_is_near_zero() {
        let spec = parse_architecture("input 1x32x32; conv 20M k5x5 s0x0; maxpool 2x2; conv 40M k5x5 s0x0 rand10; fc 100N; output 10").unwrap();
        let n = init_weights::<f64>(&spec, 5, NetworkOptions::default()).unwrap();
        let p = n.parameters();
        assert!(p.len() >= 100_000, "{}", p.len());
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!(p.iter().all(|v| v.abs() <= 0.05));
    }
}
