//! Single- versus multi-worker throughput.

use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::gradcheck::probe_sample;
use crate::network::{NetworkOptions, NetworkState};
use crate::tensor::{FeatureMap, Real};
use crate::topology::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub workers: usize,
    /// Samples per second, forward pass only.
    pub forward: f64,
    /// Samples per second, forward + backward + update.
    pub train: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub single: Throughput,
    pub multi: Throughput,
}

impl BenchReport {
    pub fn forward_speedup(&self) -> f64 {
        self.multi.forward / self.single.forward
    }

    pub fn train_speedup(&self) -> f64 {
        self.multi.train / self.single.train
    }
}

impl fmt::Display for Throughput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "workers={} forward_sps={:.2} train_sps={:.2}",
            self.workers, self.forward, self.train
        )
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.single)?;
        writeln!(f, "{}", self.multi)?;
        write!(
            f,
            "speedup forward={:.3} train={:.3}",
            self.forward_speedup(),
            self.train_speedup()
        )
    }
}

/// Random inputs for benchmarking without a dataset.
pub fn synthetic_inputs<T: Real>(spec: &NetworkSpec, count: usize, seed: u64) -> Result<Vec<(Vec<FeatureMap<T>>, usize)>> {
    (0..count as u64).map(|i| probe_sample(spec, seed.wrapping_add(i))).collect()
}

fn rate(samples: usize, elapsed: Duration) -> f64 {
    samples as f64 / elapsed.as_secs_f64().max(1e-9)
}

/// Passes over `inputs` until at least `min_time` has elapsed.
fn measure<T: Real>(
    net: &mut NetworkState<T>,
    inputs: &[(Vec<FeatureMap<T>>, usize)],
    min_time: Duration,
    train: bool,
) -> Result<f64> {
    let start = Instant::now();
    let mut done = 0;
    loop {
        for (maps, label) in inputs {
            if train {
                net.train_sample(maps, *label, T::of(1e-4))?;
            } else {
                net.forward(maps)?;
            }
            done += 1;
        }
        if start.elapsed() >= min_time {
            return Ok(rate(done, start.elapsed()));
        }
    }
}

fn throughput<T: Real>(
    spec: &NetworkSpec,
    inputs: &[(Vec<FeatureMap<T>>, usize)],
    workers: usize,
    seed: u64,
    min_time: Duration,
) -> Result<Throughput> {
    let options = NetworkOptions {
        workers,
        ..NetworkOptions::default()
    };
    let mut net = NetworkState::<T>::new(spec.clone(), seed, options)?;
    // Warm up caches and the worker pool.
    if let Some((maps, _)) = inputs.first() {
        net.forward(maps)?;
    }
    let forward = measure(&mut net, inputs, min_time, false)?;
    let train = measure(&mut net, inputs, min_time, true)?;
    Ok(Throughput { workers, forward, train })
}

/// Samples per second at one worker and at `workers` workers.
pub fn bench<T: Real>(
    spec: &NetworkSpec,
    inputs: &[(Vec<FeatureMap<T>>, usize)],
    workers: usize,
    seed: u64,
    min_time: Duration,
) -> Result<BenchReport> {
    if inputs.is_empty() {
        return Err(Error::Config("benchmark needs at least one sample".into()));
    }
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let single = throughput(spec, inputs, 1, seed, min_time)?;
    let multi = if workers == 1 {
        single
    } else {
        throughput(spec, inputs, workers, seed, min_time)?
    };
    Ok(BenchReport { single, multi })
}
