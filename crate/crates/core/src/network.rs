//! A complete network: parameters, per-sample buffers and the forward and
//! backward passes over the whole layer stack.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::backprop::{
    adjust_dense, adjust_weights, check_eta, dense_backward, output_deltas, pair_gradient, pool_backward_into,
    pull_range, pull_source_map, squared_error, PullRangeFn, SourceDerivative,
};
use crate::error::{Error, Result};
use crate::layers::{activation, activation_deriv, conv_forward_into, dot, maxpool_forward_into, apply_image_processing};
use crate::layers::{ConvShape, DenseBank, FixedFilterBank, KernelBank, PoolIndex};
use crate::tensor::{FeatureMap, Real, DEFAULT_PITCH_QUANTUM};
use crate::topology::{build_full_table, build_random_table, parse_architecture, ConnectionTable, Connectivity, LayerSpec, NetworkSpec};

/// Half-width of the uniform weight initialization interval.
pub const INIT_RANGE: f64 = 0.05;

/// Storage and threading options of a [`NetworkState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkOptions {
    pub pitch_quantum: usize,
    pub workers: usize,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            pitch_quantum: DEFAULT_PITCH_QUANTUM,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Stage<T> {
    Conv {
        table: ConnectionTable,
        shape: ConvShape,
        bank: KernelBank<T>,
        grad: KernelBank<T>,
    },
    Pool {
        region: (usize, usize),
        index: Vec<PoolIndex>,
    },
    Dense {
        bank: DenseBank<T>,
        grad: DenseBank<T>,
    },
}

impl<T: Real> Stage<T> {
    fn params(&self) -> &[T] {
        match self {
            Stage::Conv { bank, .. } => bank.arena(),
            Stage::Dense { bank, .. } => bank.arena(),
            Stage::Pool { .. } => &[],
        }
    }

    fn params_mut(&mut self) -> &mut [T] {
        match self {
            Stage::Conv { bank, .. } => bank.arena_mut(),
            Stage::Dense { bank, .. } => bank.arena_mut(),
            Stage::Pool { .. } => &mut [],
        }
    }

    fn grads(&self) -> &[T] {
        match self {
            Stage::Conv { grad, .. } => grad.arena(),
            Stage::Dense { grad, .. } => grad.arena(),
            Stage::Pool { .. } => &[],
        }
    }

    fn has_activation(&self) -> bool {
        !matches!(self, Stage::Pool { .. })
    }
}

/// Weights, biases and every per-sample buffer (outputs, pre-activations,
/// deltas, pooling winners) of one network.
#[derive(Clone)]
pub struct NetworkState<T> {
    spec: NetworkSpec,
    filters: FixedFilterBank,
    first: usize,
    stages: Vec<Stage<T>>,
    /// `outputs[0]` holds the input maps (after image processing);
    /// `outputs[k + 1]` the outputs of stage `k`.
    outputs: Vec<Vec<FeatureMap<T>>>,
    pre: Vec<Vec<FeatureMap<T>>>,
    deltas: Vec<Vec<FeatureMap<T>>>,
    options: NetworkOptions,
    pool: Option<Arc<ThreadPool>>,
    pull_range: PullRangeFn,
}

impl<T: Real> NetworkState<T> {
    /// Builds a network with every weight and bias drawn i.i.d. from
    /// `U[-0.05, 0.05]` by a ChaCha8 stream seeded with `seed`.
    pub fn new(spec: NetworkSpec, seed: u64, options: NetworkOptions) -> Result<Self> {
        let mut net = Self::zeroed(spec, options)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        for stage in &mut net.stages {
            for p in stage.params_mut() {
                *p = T::of(dist.sample(&mut rng));
            }
        }
        Ok(net)
    }

    /// Builds a network with all parameters zero.
    pub fn zeroed(spec: NetworkSpec, options: NetworkOptions) -> Result<Self> {
        if options.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        let q = options.pitch_quantum;
        let filters = FixedFilterBank::from_names(spec.filters())?;
        let first = match spec.layers().get(1) {
            Some(LayerSpec::ImageProcessing { .. }) => 2,
            _ => 1,
        };

        let maps_of = |index: usize| -> Result<Vec<FeatureMap<T>>> {
            let g = spec.geometry(index);
            (0..g.maps).map(|_| FeatureMap::new(g.width, g.height, q)).collect()
        };

        let mut stages = Vec::new();
        let mut outputs = vec![maps_of(first - 1)?];
        let mut pre = Vec::new();
        let mut deltas = Vec::new();
        for index in first..spec.layers().len() {
            let prev = spec.geometry(index - 1);
            let here = spec.geometry(index);
            let stage = match &spec.layers()[index] {
                LayerSpec::Convolutional { kernel, skip, connectivity, .. } => {
                    let table = match *connectivity {
                        Connectivity::Full => build_full_table(prev.maps, here.maps, *kernel)?,
                        Connectivity::Random { in_degree, seed } => {
                            build_random_table(prev.maps, here.maps, in_degree, seed, *kernel)?
                        }
                    };
                    Stage::Conv {
                        shape: ConvShape { kernel: *kernel, skip: *skip },
                        bank: KernelBank::zeros(&table),
                        grad: KernelBank::zeros(&table),
                        table,
                    }
                }
                LayerSpec::MaxPooling { region } => Stage::Pool {
                    region: *region,
                    index: vec![PoolIndex::new(here.width, here.height, *region); here.maps],
                },
                LayerSpec::FullyConnected { .. } | LayerSpec::Output { .. } => {
                    let inputs = prev.maps * prev.width * prev.height;
                    Stage::Dense {
                        bank: DenseBank::zeros(inputs, here.maps),
                        grad: DenseBank::zeros(inputs, here.maps),
                    }
                }
                other => {
                    return Err(Error::geometry(Some(index), format!("unexpected `{}` layer", other.kind())));
                }
            };
            pre.push(if stage.has_activation() { maps_of(index)? } else { Vec::new() });
            outputs.push(maps_of(index)?);
            deltas.push(maps_of(index)?);
            stages.push(stage);
        }

        let pool = if options.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(options.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", options.workers)))?;
            Some(Arc::new(pool))
        } else {
            None
        };

        Ok(NetworkState {
            spec,
            filters,
            first,
            stages,
            outputs,
            pre,
            deltas,
            options,
            pool,
            pull_range,
        })
    }

    /// Parses an architecture and initializes it.
    pub fn from_architecture(text: &str, seed: u64, options: NetworkOptions) -> Result<Self> {
        Self::new(parse_architecture(text)?, seed, options)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn options(&self) -> NetworkOptions {
        self.options
    }

    /// Replaces the routine used to find the destination rectangle when
    /// pulling deltas. Only useful for exercising the gradient checker.
    #[doc(hidden)]
    pub fn set_pull_range(&mut self, range: PullRangeFn) {
        self.pull_range = range;
    }

    /// Runs the forward pass on one sample's channels.
    pub fn forward(&mut self, channels: &[FeatureMap<T>]) -> Result<()> {
        let input = self.spec.input();
        if channels.len() != input.maps || channels.iter().any(|c| c.width() != input.width || c.height() != input.height) {
            return Err(Error::Dimension(format!(
                "network expects {} channels of {}x{}",
                input.maps, input.width, input.height
            )));
        }
        if self.filters.is_empty() {
            for (dst, src) in self.outputs[0].iter_mut().zip(channels) {
                copy_map(src, dst);
            }
        } else {
            let processed = apply_image_processing(channels, &self.filters)?;
            for (dst, src) in self.outputs[0].iter_mut().zip(&processed) {
                copy_map(src, dst);
            }
        }

        let pool = self.pool.clone();
        for k in 0..self.stages.len() {
            let (below, above) = self.outputs.split_at_mut(k + 1);
            let inputs = &below[k];
            let outs = &mut above[0];
            match &mut self.stages[k] {
                Stage::Conv { table, shape, bank, .. } => {
                    let (table, shape, bank) = (&*table, *shape, &*bank);
                    let work: Vec<_> = self.pre[k].iter_mut().zip(outs.iter_mut()).collect();
                    run(pool.as_deref(), work, |dest, (pre, out)| {
                        conv_forward_into(inputs, bank, table, shape, dest, pre, out)
                    })?;
                }
                Stage::Pool { region, index } => {
                    let region = *region;
                    let work: Vec<_> = outs.iter_mut().zip(index.iter_mut()).collect();
                    run(pool.as_deref(), work, |m, (out, idx)| maxpool_forward_into(&inputs[m], region, out, idx))?;
                }
                Stage::Dense { bank, .. } => {
                    let flat = flatten(inputs);
                    let bank = &*bank;
                    let work: Vec<_> = self.pre[k].iter_mut().zip(outs.iter_mut()).collect();
                    run(pool.as_deref(), work, |n, (pre, out)| {
                        let a = dot(bank.weights(n), &flat) + bank.bias(n);
                        pre.set(0, 0, a);
                        out.set(0, 0, activation(a));
                        Ok(())
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Values of the output units after the last forward pass.
    pub fn outputs(&self) -> Vec<T> {
        flatten(self.outputs.last().expect("network has stages"))
    }

    /// Maps produced by the input stage (raw channels plus any fixed filter
    /// responses) during the last forward pass.
    pub fn input_maps(&self) -> &[FeatureMap<T>] {
        &self.outputs[0]
    }

    /// Output maps of spec layer `layer` after the last forward pass.
    pub fn layer_outputs(&self, layer: usize) -> Option<&[FeatureMap<T>]> {
        let k = layer.checked_sub(self.first)?;
        self.outputs.get(k + 1).map(Vec::as_slice)
    }

    /// Target vector for `label`: +1 on the labelled unit, -1 elsewhere.
    pub fn targets(&self, label: usize) -> Result<Vec<T>> {
        let classes = self.spec.classes();
        if label >= classes {
            return Err(Error::LabelRange { label, classes });
        }
        Ok((0..classes).map(|c| if c == label { T::one() } else { -T::one() }).collect())
    }

    /// Squared-error loss of the last forward pass against `label`.
    pub fn loss(&self, label: usize) -> Result<T> {
        Ok(squared_error(&self.outputs(), &self.targets(label)?))
    }

    /// Forward pass followed by the loss.
    pub fn sample_loss(&mut self, channels: &[FeatureMap<T>], label: usize) -> Result<T> {
        self.forward(channels)?;
        self.loss(label)
    }

    /// Index of the largest output unit; ties go to the lower index.
    pub fn predict(&mut self, channels: &[FeatureMap<T>]) -> Result<usize> {
        self.forward(channels)?;
        Ok(argmax(&self.outputs()))
    }

    /// Backpropagates the loss of the last forward pass against `label` and
    /// stores the gradient of every parameter.
    pub fn backward(&mut self, label: usize) -> Result<()> {
        let targets = self.targets(label)?;
        let last = self.stages.len() - 1;
        {
            let outputs = flatten(&self.outputs[last + 1]);
            let pre = flatten(&self.pre[last]);
            let delta = output_deltas(&outputs, &targets, &pre)?;
            unflatten(&delta, &mut self.deltas[last]);
        }

        let pool = self.pool.clone();
        let range = self.pull_range;
        for k in (0..self.stages.len()).rev() {
            let inputs = &self.outputs[k];
            let (lower_deltas, upper_deltas) = self.deltas.split_at_mut(k);
            let delta = &upper_deltas[0];

            // Gradient of this stage's parameters.
            match &mut self.stages[k] {
                Stage::Conv { table, shape, grad, .. } => {
                    let (table, shape) = (&*table, *shape);
                    let mut blocks: Vec<((usize, usize), &mut [T])> = Vec::with_capacity(table.pairs().len());
                    let mut rest = grad.arena_mut();
                    for dest in 0..table.dest_maps() {
                        let (bias, tail) = rest.split_first_mut().expect("arena holds a bias per map");
                        *bias = delta[dest].sum();
                        rest = tail;
                        for &src in table.sources(dest) {
                            let (block, tail) = rest.split_at_mut(table.kernel_len());
                            blocks.push(((dest, src), block));
                            rest = tail;
                        }
                    }
                    run(pool.as_deref(), blocks, |_, ((dest, src), block)| {
                        pair_gradient(&delta[dest], &inputs[src], shape, block);
                        Ok(())
                    })?;
                }
                Stage::Dense { grad, .. } => {
                    let flat = flatten(inputs);
                    let stride = flat.len() + 1;
                    let rows: Vec<&mut [T]> = grad.arena_mut().chunks_mut(stride).collect();
                    run(pool.as_deref(), rows, |n, row| {
                        let d = delta[n].get(0, 0);
                        row[0] = d;
                        for (g, &x) in row[1..].iter_mut().zip(&flat) {
                            *g = d * x;
                        }
                        Ok(())
                    })?;
                }
                Stage::Pool { .. } => {}
            }

            // Deltas of the stage below, unless it is the input.
            if k == 0 {
                break;
            }
            let below = &mut lower_deltas[k - 1];
            let derivative = if self.stages[k - 1].has_activation() {
                SourceDerivative::Tanh(&self.pre[k - 1])
            } else {
                SourceDerivative::Identity
            };
            match &self.stages[k] {
                Stage::Conv { table, shape, bank, .. } => {
                    let work: Vec<_> = below.iter_mut().collect();
                    run(pool.as_deref(), work, |src, out| {
                        pull_source_map(delta, bank, table, *shape, src, derivative, range, out)
                    })?;
                }
                Stage::Pool { index, .. } => {
                    let pre = match derivative {
                        SourceDerivative::Tanh(maps) => Some(maps),
                        SourceDerivative::Identity => None,
                    };
                    let work: Vec<_> = below.iter_mut().collect();
                    run(pool.as_deref(), work, |m, out| {
                        pool_backward_into(&delta[m], &index[m], pre.map(|p| &p[m]), out)
                    })?;
                }
                Stage::Dense { bank, .. } => {
                    let flat_delta: Vec<T> = delta.iter().map(|d| d.get(0, 0)).collect();
                    let mut pulled = dense_backward(&flat_delta, bank)?;
                    if let SourceDerivative::Tanh(pre) = derivative {
                        for (p, a) in pulled.iter_mut().zip(flatten(pre)) {
                            *p = *p * activation_deriv(a);
                        }
                    }
                    unflatten(&pulled, below);
                }
            }
        }
        Ok(())
    }

    /// Applies `w <- w - eta * dE/dw` with the gradients of the last
    /// [`backward`](Self::backward) call.
    pub fn apply_gradients(&mut self, eta: T) -> Result<()> {
        check_eta(eta)?;
        for stage in &mut self.stages {
            match stage {
                Stage::Conv { table, bank, grad, .. } => adjust_weights(grad, bank, table, eta)?,
                Stage::Dense { bank, grad } => adjust_dense(grad, bank, eta)?,
                Stage::Pool { .. } => {}
            }
        }
        Ok(())
    }

    /// One online gradient-descent step on a single sample; returns the
    /// loss measured before the update.
    pub fn train_sample(&mut self, channels: &[FeatureMap<T>], label: usize, eta: T) -> Result<T> {
        self.forward(channels)?;
        let loss = self.loss(label)?;
        self.backward(label)?;
        self.apply_gradients(eta)?;
        Ok(loss)
    }

    pub fn parameter_count(&self) -> usize {
        self.stages.iter().map(|s| s.params().len()).sum()
    }

    fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (k, stage) in self.stages.iter().enumerate() {
            let n = stage.params().len();
            if index < n {
                return Some((k, index));
            }
            index -= n;
        }
        None
    }

    pub fn parameter(&self, index: usize) -> Option<T> {
        self.locate(index).map(|(k, i)| self.stages[k].params()[i])
    }

    pub fn set_parameter(&mut self, index: usize, value: T) -> Result<()> {
        let (k, i) = self
            .locate(index)
            .ok_or_else(|| Error::Dimension(format!("parameter {index} out of range")))?;
        self.stages[k].params_mut()[i] = value;
        Ok(())
    }

    /// Gradient of parameter `index` from the last backward pass.
    pub fn gradient(&self, index: usize) -> Option<T> {
        self.locate(index).map(|(k, i)| self.stages[k].grads()[i])
    }

    /// Spec layer index owning parameter `index`.
    pub fn parameter_layer(&self, index: usize) -> Option<usize> {
        self.locate(index).map(|(k, _)| k + self.first)
    }

    /// All parameters, stage by stage in arena order.
    pub fn parameters(&self) -> Vec<T> {
        self.stages.iter().flat_map(|s| s.params().iter().copied()).collect()
    }

    pub fn set_parameters(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut rest = values;
        for stage in &mut self.stages {
            let params = stage.params_mut();
            let (head, tail) = rest.split_at(params.len());
            params.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Plain-text weight file: the architecture on one line, then every
    /// parameter in shortest round-trip decimal form.
    pub fn to_weights_text(&self) -> String {
        let mut text = String::new();
        let _ = writeln!(text, "pullnet-weights 1 {}", T::PRECISION);
        let _ = writeln!(text, "arch {}", self.spec);
        let _ = writeln!(text, "count {}", self.parameter_count());
        for p in self.parameters() {
            let _ = writeln!(text, "{p}");
        }
        text
    }

    pub fn from_weights_text(text: &str, options: NetworkOptions) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |what: &str| Error::Format(format!("weight file: {what}"));
        match lines.next() {
            Some(h) if h.starts_with("pullnet-weights 1") => {}
            _ => return Err(bad("missing header")),
        }
        let arch = lines
            .next()
            .and_then(|l| l.strip_prefix("arch "))
            .ok_or_else(|| bad("missing architecture"))?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad("missing parameter count"))?;
        let values: Vec<T> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map(T::of).map_err(|_| bad("unparsable value")))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(bad("parameter count mismatch"));
        }
        let mut net = Self::zeroed(parse_architecture(arch)?, options)?;
        net.set_parameters(&values)?;
        Ok(net)
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn copy_map<T: Real>(src: &FeatureMap<T>, dst: &mut FeatureMap<T>) {
    for y in 0..src.height() {
        dst.row_mut(y).copy_from_slice(src.row(y));
    }
}

fn flatten<T: Real>(maps: &[FeatureMap<T>]) -> Vec<T> {
    maps.iter().flat_map(|m| m.values()).collect()
}

fn unflatten<T: Real>(values: &[T], maps: &mut [FeatureMap<T>]) {
    let mut rest = values;
    for map in maps {
        let w = map.width();
        for y in 0..map.height() {
            map.row_mut(y).copy_from_slice(&rest[..w]);
            rest = &rest[w..];
        }
    }
}

/// Runs `f` over `items`, on the pool when one is configured. Each item is
/// owned by exactly one call, so results do not depend on the worker count.
fn run<I, F>(pool: Option<&ThreadPool>, items: Vec<I>, f: F) -> Result<()>
where
    I: Send,
    F: Fn(usize, I) -> Result<()> + Sync + Send,
{
    match pool {
        Some(pool) => pool.install(|| items.into_par_iter().enumerate().try_for_each(|(i, item)| f(i, item))),
        None => items.into_iter().enumerate().try_for_each(|(i, item)| f(i, item)),
    }
}
