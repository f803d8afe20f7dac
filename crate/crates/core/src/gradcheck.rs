//! Finite-difference verification of the analytic gradient.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{NetworkOptions, NetworkState};
use crate::tensor::{FeatureMap, Precision, Real};
use crate::topology::NetworkSpec;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
const EPSILON: f64 = 1e-12;

/// `|a - n| / max(|a| + |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(EPSILON)
}

fn require_double<T: Real>() -> Result<()> {
    if T::PRECISION != Precision::Double {
        return Err(Error::Precision(
            "gradient checks need double precision; single precision rounding swamps the finite difference".into(),
        ));
    }
    Ok(())
}

/// Central difference `(E(w + h) - E(w - h)) / 2h` of the sample loss with
/// respect to parameter `index`. The parameter is restored bit-exactly.
pub fn finite_diff<T: Real>(
    net: &mut NetworkState<T>,
    channels: &[FeatureMap<T>],
    label: usize,
    index: usize,
    h: f64,
) -> Result<f64> {
    require_double::<T>()?;
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let w = net
        .parameter(index)
        .ok_or_else(|| Error::Dimension(format!("parameter {index} out of range")))?;
    let targets = net.targets(label)?;
    let mut outputs_at = |v: T| -> Result<Vec<f64>> {
        net.set_parameter(index, v)?;
        net.forward(channels)?;
        Ok(net.outputs().iter().map(|y| y.as_f64()).collect())
    };
    let up = outputs_at(w + T::of(h));
    let down = outputs_at(w - T::of(h));
    net.set_parameter(index, w)?;
    let (up, down) = (up?, down?);
    // E(w+h) - E(w-h) = sum 1/2 (y+ - y-)(y+ + y- - 2t), which avoids
    // subtracting two nearly equal losses.
    let diff: f64 = up
        .iter()
        .zip(&down)
        .zip(&targets)
        .map(|((&p, &m), t)| 0.5 * (p - m) * (p + m - 2.0 * t.as_f64()))
        .sum();
    Ok(diff / (2.0 * h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradEntry {
    pub index: usize,
    /// Spec layer owning the parameter.
    pub layer: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn mean_relative_error(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.relative_error).sum::<f64>() / self.entries.len() as f64
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }

    /// Per layer: (layer, parameter count, max relative error), in layer order.
    pub fn layers(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<(usize, usize, f64)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == e.layer => {
                    last.1 += 1;
                    last.2 = last.2.max(e.relative_error);
                }
                _ => out.push((e.layer, 1, e.relative_error)),
            }
        }
        out
    }

    /// Lowest layer containing a parameter over tolerance. Errors propagate
    /// downward through backprop, so the lowest failing layer is where a
    /// fault that corrupts deltas first shows up.
    pub fn failing_layers(&self) -> Vec<usize> {
        self.layers()
            .into_iter()
            .filter(|&(_, _, err)| err >= self.tolerance)
            .map(|(layer, _, _)| layer)
            .collect()
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (layer, count, err) in self.layers() {
            writeln!(f, "layer={layer} params={count} max_relerr={err:.3e}")?;
        }
        if let Some(w) = self.worst() {
            writeln!(
                f,
                "worst param={} layer={} analytic={:.9e} numeric={:.9e} relerr={:.3e}",
                w.index, w.layer, w.analytic, w.numeric, w.relative_error
            )?;
        }
        write!(
            f,
            "gradcheck params={} max_relerr={:.3e} mean_relerr={:.3e} tol={:.1e} result={}",
            self.entries.len(),
            self.max_relative_error(),
            self.mean_relative_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// Compares every analytic gradient of `net` on one sample with its
/// finite-difference estimate.
pub fn check_state<T: Real>(
    net: &mut NetworkState<T>,
    channels: &[FeatureMap<T>],
    label: usize,
    step: f64,
    tolerance: f64,
) -> Result<GradReport> {
    require_double::<T>()?;
    net.forward(channels)?;
    net.backward(label)?;
    let analytic: Vec<f64> = (0..net.parameter_count())
        .map(|i| net.gradient(i).expect("index in range").as_f64())
        .collect();
    let mut entries = Vec::with_capacity(analytic.len());
    for (index, &a) in analytic.iter().enumerate() {
        let numeric = finite_diff(net, channels, label, index, step)?;
        entries.push(GradEntry {
            index,
            layer: net.parameter_layer(index).expect("index in range"),
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
        });
    }
    Ok(GradReport { entries, tolerance })
}

/// Random input in `[-1, 1]` and label for a gradient check.
pub fn probe_sample<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<(Vec<FeatureMap<T>>, usize)> {
    let input = spec.input();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let maps = (0..input.maps)
        .map(|_| {
            let v: Vec<T> = (0..input.width * input.height)
                .map(|_| T::of(rng.gen_range(-1.0..=1.0)))
                .collect();
            FeatureMap::from_rows(input.width, input.height, 1, &v)
        })
        .collect::<Result<_>>()?;
    Ok((maps, rng.gen_range(0..spec.classes())))
}

/// Initializes `spec` with `seed` and checks every parameter on a random
/// sample.
pub fn check_network(spec: &NetworkSpec, seed: u64, tolerance: f64) -> Result<GradReport> {
    let mut net = NetworkState::<f64>::new(spec.clone(), seed, NetworkOptions::default())?;
    let (maps, label) = probe_sample(spec, seed)?;
    check_state(&mut net, &maps, label, DEFAULT_STEP, tolerance)
}
