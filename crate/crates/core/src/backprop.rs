//! Backward pass.
//!
//! Deltas of a convolutional layer are propagated to the layer below by
//! *pulling*: every source neuron gathers the deltas of the rectangle of
//! destination neurons whose kernels cover it. Each source map is therefore
//! written by exactly one worker. A scatter-based *pushing* implementation is
//! kept alongside as a test oracle.

use crate::error::{Error, Result};
use crate::layers::{activation_deriv, ConvShape, DenseBank, KernelBank, PoolIndex};
use crate::tensor::{FeatureMap, Real};
use crate::topology::ConnectionTable;

/// Gradient storage with the same layout as a [`KernelBank`].
pub type GradientArena<T> = KernelBank<T>;

/// How the deltas gathered for a layer are turned into that layer's deltas.
#[derive(Clone, Copy)]
pub enum SourceDerivative<'a, T> {
    /// The layer applied the scaled tanh; multiply by its derivative at the
    /// stored pre-activations.
    Tanh(&'a [FeatureMap<T>]),
    /// The layer passes values through (max-pooling, or the raw input).
    Identity,
}

impl<'a, T: Real> SourceDerivative<'a, T> {
    fn map(&self, src: usize) -> Result<Option<&'a FeatureMap<T>>> {
        match self {
            SourceDerivative::Identity => Ok(None),
            SourceDerivative::Tanh(maps) => maps
                .get(src)
                .map(Some)
                .ok_or_else(|| Error::State(format!("no pre-activations stored for source map {src}"))),
        }
    }
}

/// Inclusive range of destination coordinates whose kernel covers source
/// coordinate `i`; signature of [`pull_range`].
pub type PullRangeFn = fn(usize, usize, usize, usize) -> (usize, usize);

/// Deltas of the output layer under the squared-error loss
/// `E = 1/2 * sum (y_k - t_k)^2`.
pub fn output_deltas<T: Real>(outputs: &[T], targets: &[T], pre_activations: &[T]) -> Result<Vec<T>> {
    if outputs.len() != targets.len() || outputs.len() != pre_activations.len() {
        return Err(Error::Dimension(format!(
            "{} outputs, {} targets, {} pre-activations",
            outputs.len(),
            targets.len(),
            pre_activations.len()
        )));
    }
    Ok(outputs
        .iter()
        .zip(targets)
        .zip(pre_activations)
        .map(|((&y, &t), &a)| (y - t) * activation_deriv(a))
        .collect())
}

/// Squared-error loss of one sample.
pub fn squared_error<T: Real>(outputs: &[T], targets: &[T]) -> T {
    let half = T::of(0.5);
    outputs
        .iter()
        .zip(targets)
        .map(|(&y, &t)| half * (y - t) * (y - t))
        .sum()
}

/// Destination coordinates `x` with `x*(skip+1) <= i <= x*(skip+1) + kernel - 1`
/// and `0 <= x < dest_size`, as `(lo, hi)`; empty when `lo > hi`.
pub fn pull_range(i: usize, kernel: usize, skip: usize, dest_size: usize) -> (usize, usize) {
    let stride = skip + 1;
    // ceil((i - kernel + 1) / stride), clamped at zero
    let lo = (i + 1).saturating_sub(kernel).div_ceil(stride);
    let hi = (i / stride).min(dest_size.saturating_sub(1));
    (lo, hi)
}

/// Pulls the deltas of one source map from every destination map it feeds.
#[allow(clippy::too_many_arguments)]
pub fn pull_source_map<T: Real>(
    delta_next: &[FeatureMap<T>],
    bank: &KernelBank<T>,
    table: &ConnectionTable,
    shape: ConvShape,
    src: usize,
    derivative: SourceDerivative<'_, T>,
    range: PullRangeFn,
    out: &mut FeatureMap<T>,
) -> Result<()> {
    check_delta_maps(delta_next, table)?;
    check_conv_geometry(delta_next, shape, out)?;
    let (kx, ky) = shape.kernel;
    let (sx, sy) = shape.stride();
    let (dw, dh) = (delta_next[0].width(), delta_next[0].height());
    let deriv = derivative.map(src)?;
    if let Some(a) = deriv {
        if !a.same_shape(out) {
            return Err(Error::State(format!("pre-activations of source map {src} have the wrong shape")));
        }
    }

    let x_ranges: Vec<(usize, usize)> = (0..out.width()).map(|i| range(i, kx, shape.skip.0, dw)).collect();
    for j in 0..out.height() {
        let (ylo, yhi) = range(j, ky, shape.skip.1, dh);
        for (i, &(xlo, xhi)) in x_ranges.iter().enumerate() {
            let mut sum = T::zero();
            for &dest in table.destinations(src) {
                let kernel = bank.kernel(table, dest, src);
                let delta = &delta_next[dest];
                for y in ylo..=yhi {
                    let Some(v) = j.checked_sub(y * sy).filter(|&v| v < ky) else { continue };
                    let row = delta.row(y);
                    let krow = &kernel[v * kx..(v + 1) * kx];
                    for x in xlo..=xhi {
                        let Some(u) = i.checked_sub(x * sx).filter(|&u| u < kx) else { continue };
                        sum = sum + row[x] * krow[u];
                    }
                }
            }
            if let Some(a) = deriv {
                sum = sum * activation_deriv(a.get(i, j));
            }
            out.set(i, j, sum);
        }
    }
    Ok(())
}

fn check_conv_geometry<T: Real>(delta_next: &[FeatureMap<T>], shape: ConvShape, source: &FeatureMap<T>) -> Result<()> {
    let (kx, ky) = shape.kernel;
    let (sx, sy) = shape.stride();
    let ok = kx <= source.width()
        && ky <= source.height()
        && delta_next[0].width() == (source.width() - kx) / sx + 1
        && delta_next[0].height() == (source.height() - ky) / sy + 1;
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{}x{} deltas do not come from a {}x{} source under kernel {:?}, skip {:?}",
            delta_next[0].width(),
            delta_next[0].height(),
            source.width(),
            source.height(),
            shape.kernel,
            shape.skip
        )))
    }
}

fn check_delta_maps<T: Real>(delta_next: &[FeatureMap<T>], table: &ConnectionTable) -> Result<()> {
    if delta_next.len() != table.dest_maps() {
        return Err(Error::Dimension(format!(
            "{} delta maps for a table with {} destinations",
            delta_next.len(),
            table.dest_maps()
        )));
    }
    if delta_next.windows(2).any(|w| !w[0].same_shape(&w[1])) {
        return Err(Error::Dimension("delta maps differ in shape".into()));
    }
    Ok(())
}

/// Deltas of every source map, computed by pulling.
///
/// `source_like` gives the shape (and pitch) of the source layer's maps.
pub fn pull_deltas_conv<T: Real>(
    delta_next: &[FeatureMap<T>],
    bank: &KernelBank<T>,
    table: &ConnectionTable,
    shape: ConvShape,
    source_like: &FeatureMap<T>,
    derivative: SourceDerivative<'_, T>,
) -> Result<Vec<FeatureMap<T>>> {
    (0..table.src_maps())
        .map(|src| {
            let mut out = source_like.zeros_like();
            pull_source_map(delta_next, bank, table, shape, src, derivative, pull_range, &mut out)?;
            Ok(out)
        })
        .collect()
}

/// Deltas of every source map, computed by scattering each destination delta
/// over the `kx * ky` source cells it covers.
///
/// Every connected pair scatters into its own partial buffer; the buffers
/// are summed afterwards. This is the sequential reference for
/// [`pull_deltas_conv`].
pub fn push_deltas_conv<T: Real>(
    delta_next: &[FeatureMap<T>],
    bank: &KernelBank<T>,
    table: &ConnectionTable,
    shape: ConvShape,
    source_like: &FeatureMap<T>,
    derivative: SourceDerivative<'_, T>,
) -> Result<Vec<FeatureMap<T>>> {
    check_delta_maps(delta_next, table)?;
    check_conv_geometry(delta_next, shape, source_like)?;
    let (kx, ky) = shape.kernel;
    let (sx, sy) = shape.stride();

    let partials: Vec<((usize, usize), FeatureMap<T>)> = table
        .pairs()
        .iter()
        .map(|&(dest, src)| {
            let mut partial = source_like.zeros_like();
            let kernel = bank.kernel(table, dest, src);
            let delta = &delta_next[dest];
            for y in 0..delta.height() {
                for x in 0..delta.width() {
                    let d = delta.get(x, y);
                    for v in 0..ky {
                        for u in 0..kx {
                            let (i, j) = (x * sx + u, y * sy + v);
                            let cell = partial.get(i, j) + d * kernel[v * kx + u];
                            partial.set(i, j, cell);
                        }
                    }
                }
            }
            ((dest, src), partial)
        })
        .collect();

    let mut result = Vec::with_capacity(table.src_maps());
    for src in 0..table.src_maps() {
        let mut total = source_like.zeros_like();
        for (_, partial) in partials.iter().filter(|((_, s), _)| *s == src) {
            for j in 0..total.height() {
                for (t, &p) in total.row_mut(j).iter_mut().zip(partial.row(j)) {
                    *t = *t + p;
                }
            }
        }
        if let Some(a) = derivative.map(src)? {
            if !a.same_shape(&total) {
                return Err(Error::State(format!("pre-activations of source map {src} have the wrong shape")));
            }
            for j in 0..total.height() {
                for i in 0..total.width() {
                    total.set(i, j, total.get(i, j) * activation_deriv(a.get(i, j)));
                }
            }
        }
        result.push(total);
    }
    Ok(result)
}

/// Routes each pooled delta to the input cell that won its region.
///
/// Cells that did not win (including cells outside every complete region)
/// receive zero. With `pre_activation` the routed deltas are multiplied by
/// the activation derivative of the layer below.
pub fn pool_backward_into<T: Real>(
    delta_next: &FeatureMap<T>,
    index: &PoolIndex,
    pre_activation: Option<&FeatureMap<T>>,
    out: &mut FeatureMap<T>,
) -> Result<()> {
    if delta_next.width() != index.width() || delta_next.height() != index.height() {
        return Err(Error::State(format!(
            "pool index is {}x{} but the deltas are {}x{}",
            index.width(),
            index.height(),
            delta_next.width(),
            delta_next.height()
        )));
    }
    let (kx, ky) = index.region();
    if out.width() < index.width() * kx || out.height() < index.height() * ky {
        return Err(Error::State("pool index does not match the source map".into()));
    }
    if let Some(a) = pre_activation {
        if !a.same_shape(out) {
            return Err(Error::State("pre-activations do not match the source map".into()));
        }
    }
    out.fill(T::zero());
    for y in 0..index.height() {
        for x in 0..index.width() {
            let (wx, wy) = index.winner(x, y);
            let mut d = delta_next.get(x, y);
            if let Some(a) = pre_activation {
                d = d * activation_deriv(a.get(wx, wy));
            }
            out.set(wx, wy, d);
        }
    }
    Ok(())
}

/// Allocating form of [`pool_backward_into`].
pub fn pool_backward<T: Real>(
    delta_next: &FeatureMap<T>,
    index: &PoolIndex,
    source_like: &FeatureMap<T>,
    pre_activation: Option<&FeatureMap<T>>,
) -> Result<FeatureMap<T>> {
    let mut out = source_like.zeros_like();
    pool_backward_into(delta_next, index, pre_activation, &mut out)?;
    Ok(out)
}

/// Gradient of the kernel of one connected pair, written into `grad`.
pub fn pair_gradient<T: Real>(delta: &FeatureMap<T>, input: &FeatureMap<T>, shape: ConvShape, grad: &mut [T]) {
    let (kx, ky) = shape.kernel;
    let (sx, sy) = shape.stride();
    let width = delta.width();
    for v in 0..ky {
        for u in 0..kx {
            let mut g = T::zero();
            for y in 0..delta.height() {
                let drow = delta.row(y);
                let irow = input.row(y * sy + v);
                if sx == 1 {
                    g = g + crate::layers::dot(drow, &irow[u..u + width]);
                } else {
                    for (x, &d) in drow.iter().enumerate() {
                        g = g + d * irow[x * sx + u];
                    }
                }
            }
            grad[v * kx + u] = g;
        }
    }
}

/// Computes the full gradient arena of a convolutional layer for one sample.
pub fn conv_gradients<T: Real>(
    delta: &[FeatureMap<T>],
    inputs: &[FeatureMap<T>],
    table: &ConnectionTable,
    shape: ConvShape,
    grad: &mut GradientArena<T>,
) -> Result<()> {
    check_delta_maps(delta, table)?;
    if inputs.len() != table.src_maps() || grad.arena().len() != table.arena_len() {
        return Err(Error::Dimension("gradient buffers do not match the connection table".into()));
    }
    for input in inputs {
        check_conv_geometry(delta, shape, input)?;
    }
    for &(dest, src) in table.pairs() {
        pair_gradient(&delta[dest], &inputs[src], shape, grad.kernel_mut(table, dest, src));
    }
    for (dest, d) in delta.iter().enumerate() {
        *grad.bias_mut(table, dest) = d.sum();
    }
    Ok(())
}

/// One gradient-descent step on a convolutional layer, visiting every
/// connected pair and every bias once.
pub fn adjust_weights<T: Real>(
    gradients: &GradientArena<T>,
    weights: &mut KernelBank<T>,
    table: &ConnectionTable,
    eta: T,
) -> Result<()> {
    check_eta(eta)?;
    if gradients.arena().len() != table.arena_len() || weights.arena().len() != table.arena_len() {
        return Err(Error::Dimension("weight and gradient arenas do not match the table".into()));
    }
    for &(dest, src) in table.pairs() {
        let g = gradients.kernel(table, dest, src);
        for (w, &g) in weights.kernel_mut(table, dest, src).iter_mut().zip(g) {
            *w = *w - eta * g;
        }
    }
    for dest in 0..table.dest_maps() {
        let g = gradients.bias(table, dest);
        let b = weights.bias_mut(table, dest);
        *b = *b - eta * g;
    }
    Ok(())
}

pub(crate) fn check_eta<T: Real>(eta: T) -> Result<()> {
    if eta > T::zero() && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("learning rate must be positive, got {eta}")))
    }
}

/// Gradient of a fully connected layer: `delta` per neuron times the
/// flattened input, and `delta` itself for the biases.
pub fn dense_gradients<T: Real>(delta: &[T], input: &[T], grad: &mut DenseBank<T>) -> Result<()> {
    if delta.len() != grad.neurons() || input.len() != grad.inputs() {
        return Err(Error::Dimension("dense gradient buffers do not match".into()));
    }
    let stride = grad.inputs() + 1;
    for (n, &d) in delta.iter().enumerate() {
        let row = &mut grad.arena_mut()[n * stride..(n + 1) * stride];
        row[0] = d;
        for (g, &x) in row[1..].iter_mut().zip(input) {
            *g = d * x;
        }
    }
    Ok(())
}

/// Deltas of the flattened inputs of a fully connected layer (before any
/// activation derivative of the layer below is applied).
pub fn dense_backward<T: Real>(delta: &[T], bank: &DenseBank<T>) -> Result<Vec<T>> {
    if delta.len() != bank.neurons() {
        return Err(Error::Dimension("dense deltas do not match the layer".into()));
    }
    let mut out = vec![T::zero(); bank.inputs()];
    for (n, &d) in delta.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(bank.weights(n)) {
            *o = *o + d * w;
        }
    }
    Ok(out)
}

/// One gradient-descent step on a fully connected layer.
pub fn adjust_dense<T: Real>(gradients: &DenseBank<T>, weights: &mut DenseBank<T>, eta: T) -> Result<()> {
    check_eta(eta)?;
    if gradients.arena().len() != weights.arena().len() {
        return Err(Error::Dimension("dense weight and gradient sizes differ".into()));
    }
    for (w, &g) in weights.arena_mut().iter_mut().zip(gradients.arena()) {
        *w = *w - eta * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{activation, conv_forward, maxpool_forward};
    use crate::topology::{build_full_table, build_random_table};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FeatureMap<f64> {
        let values: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_rows(w, h, 32, &values).unwrap()
    }

    fn enumerate_range(i: usize, k: usize, s: usize, m: usize) -> Vec<usize> {
        (0..m).filter(|x| x * (s + 1) <= i && i < x * (s + 1) + k).collect()
    }

    #[test]
    fn output_delta_examples() {
        assert_eq!(output_deltas(&[0.5, -1.0], &[0.5, -1.0], &[0.3, 2.0]).unwrap(), vec![0.0, 0.0]);
        let d = output_deltas(&[0.0], &[1.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(d[0], -1.7159 * 0.6666, epsilon = 1e-15);
        let base = output_deltas(&[0.2, 0.7], &[1.0, -1.0], &[0.1, 0.4]).unwrap();
        // residuals scaled by 3 around the same targets
        let scaled = output_deltas(&[1.0 + 3.0 * (0.2 - 1.0), -1.0 + 3.0 * 1.7], &[1.0, -1.0], &[0.1, 0.4]).unwrap();
        for (b, s) in base.iter().zip(&scaled) {
            assert_abs_diff_eq!(3.0 * b, *s, epsilon = 1e-12);
        }
        assert!(matches!(output_deltas(&[0.0], &[1.0, 1.0], &[0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn pull_range_examples() {
        assert_eq!(pull_range(0, 5, 1, 13), (0, 0));
        assert_eq!(pull_range(7, 5, 1, 13), (2, 3));
        assert_eq!(pull_range(28, 5, 1, 13), (12, 12));
        for (i, k, s, m) in [(0, 5, 1, 13), (7, 5, 1, 13), (28, 5, 1, 13)] {
            let (lo, hi) = pull_range(i, k, s, m);
            assert_eq!((lo..=hi).collect::<Vec<_>>(), enumerate_range(i, k, s, m));
        }
    }

    #[test]
    fn pull_range_matches_enumeration() {
        for k in 1..=8 {
            for s in 0..=4 {
                for m in 1..=32 {
                    for i in 0..(m - 1) * (s + 1) + k + 3 {
                        let (lo, hi) = pull_range(i, k, s, m);
                        let expected = enumerate_range(i, k, s, m);
                        assert_eq!((lo..=hi).collect::<Vec<_>>(), expected, "i={i} k={k} s={s} m={m}");
                    }
                }
            }
        }
    }

    #[test]
    fn pulled_deltas_vanish_for_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = build_full_table(2, 3, (3, 3)).unwrap();
        let arena = (0..table.arena_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bank = KernelBank::from_arena(&table, arena).unwrap();
        let deltas = vec![FeatureMap::<f64>::new(3, 3, 32).unwrap(); 3];
        let source = FeatureMap::new(7, 7, 32).unwrap();
        let shape = ConvShape { kernel: (3, 3), skip: (1, 1) };
        let pulled = pull_deltas_conv(&deltas, &bank, &table, shape, &source, SourceDerivative::Identity).unwrap();
        assert!(pulled.iter().all(|m| m.values().all(|v| v == 0.0)));
    }

    #[test]
    fn one_by_one_kernel_maps_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = build_full_table(1, 1, (1, 1)).unwrap();
        let mut bank = KernelBank::zeros(&table);
        bank.kernel_mut(&table, 0, 0)[0] = 0.8;
        let delta = vec![random_map(&mut rng, 5, 5)];
        let pre = vec![random_map(&mut rng, 5, 5)];
        let shape = ConvShape { kernel: (1, 1), skip: (0, 0) };
        let pulled = pull_deltas_conv(&delta, &bank, &table, shape, &pre[0], SourceDerivative::Tanh(&pre)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_abs_diff_eq!(
                    pulled[0].get(x, y),
                    delta[0].get(x, y) * 0.8 * activation_deriv(pre[0].get(x, y)),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn push_touches_exactly_one_kernel_footprint() {
        let table = build_full_table(2, 1, (3, 2)).unwrap();
        let bank = KernelBank::from_arena(&table, vec![1.0; table.arena_len()]).unwrap();
        let mut delta = FeatureMap::<f64>::new(2, 4, 32).unwrap();
        delta.set(1, 2, 1.0);
        let source = FeatureMap::new(8, 8, 32).unwrap();
        let shape = ConvShape { kernel: (3, 2), skip: (2, 1) };
        let pushed = push_deltas_conv(&[delta], &bank, &table, shape, &source, SourceDerivative::Identity).unwrap();
        for map in &pushed {
            let nonzero: Vec<(usize, usize)> = (0..8)
                .flat_map(|j| (0..8).map(move |i| (i, j)))
                .filter(|&(i, j)| map.get(i, j) != 0.0)
                .collect();
            assert_eq!(nonzero.len(), 6);
            assert!(nonzero.iter().all(|&(i, j)| (3..6).contains(&i) && (4..6).contains(&j)));
        }
    }

    #[test]
    fn pull_equals_push_on_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200u64 {
            let kx = rng.gen_range(1..=5);
            let ky = rng.gen_range(1..=5);
            let shape = ConvShape {
                kernel: (kx, ky),
                skip: (rng.gen_range(0..=2), rng.gen_range(0..=2)),
            };
            let w = rng.gen_range(kx..=16);
            let h = rng.gen_range(ky..=16);
            let src = rng.gen_range(1..=4);
            let dest = rng.gen_range(1..=4);
            let degree = rng.gen_range(1..=src);
            let Ok(table) = build_random_table(src, dest, degree, trial, (kx, ky)) else { continue };
            let arena = (0..table.arena_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bank = KernelBank::from_arena(&table, arena).unwrap();
            let (dw, dh) = ((w - kx) / shape.stride().0 + 1, (h - ky) / shape.stride().1 + 1);
            let deltas: Vec<_> = (0..dest).map(|_| random_map(&mut rng, dw, dh)).collect();
            let pre: Vec<_> = (0..src).map(|_| random_map(&mut rng, w, h)).collect();
            for derivative in [SourceDerivative::Identity, SourceDerivative::Tanh(&pre)] {
                let pulled = pull_deltas_conv(&deltas, &bank, &table, shape, &pre[0], derivative).unwrap();
                let pushed = push_deltas_conv(&deltas, &bank, &table, shape, &pre[0], derivative).unwrap();
                for (a, b) in pulled.iter().zip(&pushed) {
                    assert!(crate::tensor::map_equal(a, b, 1e-12).unwrap());
                }
            }
        }
    }

    #[test]
    fn missing_pre_activations_is_a_state_error() {
        let table = build_full_table(2, 1, (1, 1)).unwrap();
        let bank = KernelBank::zeros(&table);
        let delta = vec![FeatureMap::<f64>::new(3, 3, 32).unwrap()];
        let only_one = vec![FeatureMap::new(3, 3, 32).unwrap()];
        let shape = ConvShape { kernel: (1, 1), skip: (0, 0) };
        assert!(matches!(
            pull_deltas_conv(&delta, &bank, &table, shape, &only_one[0], SourceDerivative::Tanh(&only_one)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn pool_backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_map(&mut rng, 6, 4);
        let (_, index) = maxpool_forward(&input, (2, 2)).unwrap();
        let mut ones = FeatureMap::new(3, 2, 32).unwrap();
        ones.fill(1.0);
        let routed = pool_backward(&ones, &index, &input, None).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let count = (0..2)
                    .flat_map(|v| (0..2).map(move |u| (u, v)))
                    .filter(|&(u, v)| routed.get(2 * x + u, 2 * y + v) == 1.0)
                    .count();
                assert_eq!(count, 1);
            }
        }
        assert_eq!(routed.sum(), ones.sum());

        let stale = PoolIndex::new(2, 2, (2, 2));
        assert!(matches!(pool_backward(&ones, &stale, &input, None), Err(Error::State(_))));
    }

    #[test]
    fn pool_backward_applies_derivative_at_winner() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pre = random_map(&mut rng, 4, 4);
        let y: Vec<f64> = pre.values().map(activation).collect();
        let y = FeatureMap::from_rows(4, 4, 32, &y).unwrap();
        let (_, index) = maxpool_forward(&y, (2, 2)).unwrap();
        let delta = random_map(&mut rng, 2, 2);
        let routed = pool_backward(&delta, &index, &y, Some(&pre)).unwrap();
        let (wx, wy) = index.winner(1, 0);
        assert_eq!(routed.get(wx, wy), delta.get(1, 0) * activation_deriv(pre.get(wx, wy)));
    }

    #[test]
    fn adjust_weights_examples() {
        let table = build_full_table(2, 2, (2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let arena: Vec<f64> = (0..table.arena_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bank = KernelBank::from_arena(&table, arena).unwrap();
        let before = bank.clone();
        adjust_weights(&KernelBank::zeros(&table), &mut bank, &table, 0.1).unwrap();
        assert_eq!(bank, before);
        assert!(matches!(adjust_weights(&KernelBank::zeros(&table), &mut bank, &table, 0.0), Err(Error::Config(_))));
        assert!(matches!(adjust_weights(&KernelBank::zeros(&table), &mut bank, &table, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn single_weight_step_follows_chain_rule() {
        // One 1x1 map, one 1x1 kernel: y = act(w x + b), E = 1/2 (y - t)^2.
        let table = build_full_table(1, 1, (1, 1)).unwrap();
        let mut bank = KernelBank::zeros(&table);
        bank.kernel_mut(&table, 0, 0)[0] = 0.4;
        let x = 0.9;
        let t = 1.0;
        let input = vec![FeatureMap::from_rows(1, 1, 1, &[x]).unwrap()];
        let shape = ConvShape { kernel: (1, 1), skip: (0, 0) };
        let (pre, out) = conv_forward(&input, &bank, &table, shape, 0).unwrap();
        let (a, y) = (pre.get(0, 0), out.get(0, 0));
        let delta = output_deltas(&[y], &[t], &[a]).unwrap();
        let delta = vec![FeatureMap::from_rows(1, 1, 1, &delta).unwrap()];
        let mut grad = KernelBank::zeros(&table);
        conv_gradients(&delta, &input, &table, shape, &mut grad).unwrap();
        adjust_weights(&grad, &mut bank, &table, 0.1).unwrap();
        let expected = 0.4 - 0.1 * (y - t) * activation_deriv(a) * x;
        assert_abs_diff_eq!(bank.kernel(&table, 0, 0)[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn dense_backward_is_transpose_product() {
        let bank = DenseBank::from_parts(3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0, 0.0]).unwrap();
        assert_eq!(dense_backward(&[1.0, -1.0], &bank).unwrap(), vec![-3.0, -3.0, -3.0]);
        let mut grad = DenseBank::zeros(3, 2);
        dense_gradients(&[2.0, 0.5], &[1.0, 0.0, -1.0], &mut grad).unwrap();
        assert_eq!(grad.arena(), &[2.0, 2.0, 0.0, -2.0, 0.5, 0.5, 0.0, -0.5]);
    }
}
