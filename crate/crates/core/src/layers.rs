//! Forward semantics of each layer kind.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};
use crate::topology::{ConnectionTable, FilterName};

const TANH_SCALE: f64 = 1.7159;
const TANH_SLOPE: f64 = 0.6666;

/// Scaled hyperbolic tangent, `1.7159 * tanh(0.6666 * a)`.
#[inline]
pub fn activation<T: Real>(a: T) -> T {
    T::of(TANH_SCALE) * (T::of(TANH_SLOPE) * a).tanh()
}

/// Derivative of [`activation`] with respect to its input.
#[inline]
pub fn activation_deriv<T: Real>(a: T) -> T {
    let t = (T::of(TANH_SLOPE) * a).tanh();
    T::of(TANH_SCALE * TANH_SLOPE) * (T::one() - t * t)
}

/// Shared kernels and biases of one convolutional layer, laid out as
/// described by the layer's [`ConnectionTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    arena: Vec<T>,
}

impl<T: Real> KernelBank<T> {
    pub fn zeros(table: &ConnectionTable) -> Self {
        KernelBank {
            arena: vec![T::zero(); table.arena_len()],
        }
    }

    pub fn from_arena(table: &ConnectionTable, arena: Vec<T>) -> Result<Self> {
        if arena.len() != table.arena_len() {
            return Err(Error::Dimension(format!(
                "{} parameters for a table needing {}",
                arena.len(),
                table.arena_len()
            )));
        }
        Ok(KernelBank { arena })
    }

    /// Row-major `kx * ky` kernel of a connected pair; `kernel[v * kx + u]`.
    #[inline]
    pub fn kernel<'a>(&'a self, table: &ConnectionTable, dest: usize, src: usize) -> &'a [T] {
        let start = table.weight_index(dest, src).expect("pair is connected");
        &self.arena[start..start + table.kernel_len()]
    }

    pub fn kernel_mut<'a>(&'a mut self, table: &ConnectionTable, dest: usize, src: usize) -> &'a mut [T] {
        let start = table.weight_index(dest, src).expect("pair is connected");
        &mut self.arena[start..start + table.kernel_len()]
    }

    #[inline]
    pub fn bias(&self, table: &ConnectionTable, dest: usize) -> T {
        self.arena[table.bias_index(dest)]
    }

    pub fn bias_mut(&mut self, table: &ConnectionTable, dest: usize) -> &mut T {
        &mut self.arena[table.bias_index(dest)]
    }

    pub fn arena(&self) -> &[T] {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut [T] {
        &mut self.arena
    }
}

/// Geometry of a convolution step shared by forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: (usize, usize),
    pub skip: (usize, usize),
}

impl ConvShape {
    pub fn stride(&self) -> (usize, usize) {
        (self.skip.0 + 1, self.skip.1 + 1)
    }

    fn check(&self, input: &FeatureMap<impl Real>, output: &FeatureMap<impl Real>) -> Result<()> {
        let (sx, sy) = self.stride();
        let fits = |prev: usize, k: usize, s: usize, out: usize| k <= prev && (prev - k) / s + 1 == out;
        if fits(input.width(), self.kernel.0, sx, output.width()) && fits(input.height(), self.kernel.1, sy, output.height()) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{} input, kernel {:?}, skip {:?} cannot produce a {}x{} map",
                input.width(),
                input.height(),
                self.kernel,
                self.skip,
                output.width(),
                output.height()
            )))
        }
    }
}

/// Computes one destination map of a convolutional layer into caller-owned
/// buffers: the pre-activation sums and the activated outputs.
pub fn conv_forward_into<T: Real>(
    inputs: &[FeatureMap<T>],
    bank: &KernelBank<T>,
    table: &ConnectionTable,
    shape: ConvShape,
    dest: usize,
    pre: &mut FeatureMap<T>,
    out: &mut FeatureMap<T>,
) -> Result<()> {
    if inputs.len() != table.src_maps() || table.kernel() != shape.kernel || dest >= table.dest_maps() {
        return Err(Error::Dimension(format!(
            "{} input maps for a table with {} sources, destination {dest}",
            inputs.len(),
            table.src_maps()
        )));
    }
    for &src in table.sources(dest) {
        shape.check(&inputs[src], pre)?;
    }
    if !pre.same_shape(out) {
        return Err(Error::Dimension("pre-activation and output maps differ in shape".into()));
    }

    let (kx, ky) = shape.kernel;
    let (sx, sy) = shape.stride();
    let width = pre.width();
    let bias = bank.bias(table, dest);
    for y in 0..pre.height() {
        let acc = pre.row_mut(y);
        acc.fill(bias);
        for &src in table.sources(dest) {
            let kernel = bank.kernel(table, dest, src);
            let input = &inputs[src];
            for v in 0..ky {
                let in_row = input.row(y * sy + v);
                for u in 0..kx {
                    let w = kernel[v * kx + u];
                    if sx == 1 {
                        for (a, &i) in acc.iter_mut().zip(&in_row[u..u + width]) {
                            *a = *a + w * i;
                        }
                    } else {
                        for (x, a) in acc.iter_mut().enumerate() {
                            *a = *a + w * in_row[x * sx + u];
                        }
                    }
                }
            }
        }
        let acc = pre.row(y);
        for (o, &a) in out.row_mut(y).iter_mut().zip(acc) {
            *o = activation(a);
        }
    }
    Ok(())
}

/// Computes destination map `dest` of a convolutional layer, returning the
/// pre-activation and activated maps.
pub fn conv_forward<T: Real>(
    inputs: &[FeatureMap<T>],
    bank: &KernelBank<T>,
    table: &ConnectionTable,
    shape: ConvShape,
    dest: usize,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Dimension("no input maps".into()))?;
    let (sx, sy) = shape.stride();
    if shape.kernel.0 > first.width() || shape.kernel.1 > first.height() {
        return Err(Error::Dimension("kernel larger than the input map".into()));
    }
    let width = (first.width() - shape.kernel.0) / sx + 1;
    let height = (first.height() - shape.kernel.1) / sy + 1;
    let mut pre = FeatureMap::new(width, height, pitch_quantum_of(first))?;
    let mut out = pre.clone();
    conv_forward_into(inputs, bank, table, shape, dest, &mut pre, &mut out)?;
    Ok((pre, out))
}

/// Location of the winning input cell for every pooled output cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndex {
    width: usize,
    height: usize,
    region: (usize, usize),
    winners: Vec<(usize, usize)>,
}

impl PoolIndex {
    pub fn new(width: usize, height: usize, region: (usize, usize)) -> Self {
        PoolIndex {
            width,
            height,
            region,
            winners: vec![(0, 0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn region(&self) -> (usize, usize) {
        self.region
    }

    /// Input coordinate that produced output cell `(x, y)`.
    #[inline]
    pub fn winner(&self, x: usize, y: usize) -> (usize, usize) {
        self.winners[y * self.width + x]
    }
}

/// Max-pools `input` over non-overlapping regions into caller-owned buffers.
///
/// Output cell `(x, y)` covers inputs `x*kx .. x*kx+kx` by `y*ky .. y*ky+ky`.
/// Ties go to the first cell in row-major scan order. Input rows or columns
/// beyond the last complete region are ignored.
pub fn maxpool_forward_into<T: Real>(
    input: &FeatureMap<T>,
    region: (usize, usize),
    out: &mut FeatureMap<T>,
    index: &mut PoolIndex,
) -> Result<()> {
    let (kx, ky) = region;
    if kx == 0 || ky == 0 || kx > input.width() || ky > input.height() {
        return Err(Error::geometry(
            None,
            format!("pooling region {kx}x{ky} does not fit a {}x{} map", input.width(), input.height()),
        ));
    }
    let (w, h) = (input.width() / kx, input.height() / ky);
    if out.width() != w || out.height() != h || index.width != w || index.height != h || index.region != region {
        return Err(Error::Dimension(format!("pooled buffers must be {w}x{h}")));
    }
    for y in 0..h {
        for x in 0..w {
            let mut best = (x * kx, y * ky);
            let mut best_value = input.get(best.0, best.1);
            for iy in y * ky..(y + 1) * ky {
                let row = input.row(iy);
                for ix in x * kx..(x + 1) * kx {
                    if row[ix] > best_value {
                        best_value = row[ix];
                        best = (ix, iy);
                    }
                }
            }
            out.set(x, y, best_value);
            index.winners[y * w + x] = best;
        }
    }
    Ok(())
}

/// Max-pools `input`, returning the pooled map and the argmax index.
pub fn maxpool_forward<T: Real>(input: &FeatureMap<T>, region: (usize, usize)) -> Result<(FeatureMap<T>, PoolIndex)> {
    let (kx, ky) = region;
    if kx == 0 || ky == 0 || kx > input.width() || ky > input.height() {
        return Err(Error::geometry(
            None,
            format!("pooling region {kx}x{ky} does not fit a {}x{} map", input.width(), input.height()),
        ));
    }
    let (w, h) = (input.width() / kx, input.height() / ky);
    let mut out = FeatureMap::new(w, h, pitch_quantum_of(input))?;
    let mut index = PoolIndex::new(w, h, region);
    maxpool_forward_into(input, region, &mut out, &mut index)?;
    Ok((out, index))
}

fn pitch_quantum_of<T: Real>(map: &FeatureMap<T>) -> usize {
    if map.pitch() == map.width() {
        1
    } else {
        crate::tensor::DEFAULT_PITCH_QUANTUM
    }
}

/// Weights of a fully connected layer: one row per neuron holding the bias
/// followed by one weight per input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBank<T> {
    inputs: usize,
    neurons: usize,
    arena: Vec<T>,
}

impl<T: Real> DenseBank<T> {
    pub fn zeros(inputs: usize, neurons: usize) -> Self {
        DenseBank {
            inputs,
            neurons,
            arena: vec![T::zero(); neurons * (inputs + 1)],
        }
    }

    /// Builds a bank from a `neurons x inputs` row-major weight matrix and biases.
    pub fn from_parts(inputs: usize, weights: &[T], bias: &[T]) -> Result<Self> {
        if inputs == 0 || weights.len() != inputs * bias.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} inputs and {} neurons",
                weights.len(),
                inputs,
                bias.len()
            )));
        }
        let mut bank = Self::zeros(inputs, bias.len());
        for (n, (&b, row)) in bias.iter().zip(weights.chunks_exact(inputs)).enumerate() {
            bank.arena[n * (inputs + 1)] = b;
            bank.weights_mut(n).copy_from_slice(row);
        }
        Ok(bank)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    #[inline]
    pub fn bias(&self, neuron: usize) -> T {
        self.arena[neuron * (self.inputs + 1)]
    }

    #[inline]
    pub fn weights(&self, neuron: usize) -> &[T] {
        let start = neuron * (self.inputs + 1) + 1;
        &self.arena[start..start + self.inputs]
    }

    pub fn weights_mut(&mut self, neuron: usize) -> &mut [T] {
        let start = neuron * (self.inputs + 1) + 1;
        &mut self.arena[start..start + self.inputs]
    }

    pub fn arena(&self) -> &[T] {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut [T] {
        &mut self.arena
    }
}

/// Dense affine map followed by the activation.
pub fn fc_forward<T: Real>(input: &[T], bank: &DenseBank<T>) -> Result<(Vec<T>, Vec<T>)> {
    if input.len() != bank.inputs {
        return Err(Error::Dimension(format!(
            "{} inputs for a layer expecting {}",
            input.len(),
            bank.inputs
        )));
    }
    let pre: Vec<T> = (0..bank.neurons)
        .map(|n| dot(bank.weights(n), input) + bank.bias(n))
        .collect();
    let out = pre.iter().map(|&a| activation(a)).collect();
    Ok((pre, out))
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + p * q)
}

/// A fixed, non-trainable square filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedFilter {
    pub name: String,
    pub size: usize,
    /// Row-major, `size * size` entries.
    pub coefficients: Vec<f64>,
}

impl FixedFilter {
    pub fn new(name: impl Into<String>, size: usize, coefficients: Vec<f64>) -> Result<Self> {
        if size == 0 || coefficients.len() != size * size {
            return Err(Error::Config(format!(
                "filter of size {size} needs {} coefficients, got {}",
                size * size,
                coefficients.len()
            )));
        }
        Ok(FixedFilter {
            name: name.into(),
            size,
            coefficients,
        })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.coefficients[v * self.size + u]
    }
}

/// The kernels of an image processing layer, applied in order to every channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixedFilterBank {
    filters: Vec<FixedFilter>,
}

impl FixedFilterBank {
    pub fn new(filters: Vec<FixedFilter>) -> Self {
        FixedFilterBank { filters }
    }

    /// Expands filter family names into their kernel pairs.
    pub fn from_names(names: &[FilterName]) -> Result<Self> {
        let mut filters = Vec::new();
        for &name in names {
            match name {
                FilterName::Sobel => {
                    let x = vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
                    filters.push(FixedFilter::new("sobel_x", 3, x.clone())?);
                    filters.push(FixedFilter::new("sobel_y", 3, transpose(&x, 3))?);
                }
                FilterName::Scharr => {
                    let x = vec![-3.0, 0.0, 3.0, -10.0, 0.0, 10.0, -3.0, 0.0, 3.0];
                    filters.push(FixedFilter::new("scharr_x", 3, x.clone())?);
                    filters.push(FixedFilter::new("scharr_y", 3, transpose(&x, 3))?);
                }
                FilterName::Hat(size) => {
                    let s = size as f64;
                    let (on, off) = make_contrast_filters(size, s / 8.0, s / 4.0)?;
                    filters.push(on);
                    filters.push(off);
                }
            }
        }
        Ok(FixedFilterBank { filters })
    }

    pub fn filters(&self) -> &[FixedFilter] {
        &self.filters
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    /// Plain-text form: a `<name> <size>` header per filter followed by
    /// `size` lines of space-separated coefficients.
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        for filter in &self.filters {
            let _ = writeln!(text, "{} {}", filter.name, filter.size);
            for row in filter.coefficients.chunks_exact(filter.size) {
                let line: Vec<String> = row.iter().map(|c| format!("{c:e}")).collect();
                let _ = writeln!(text, "{}", line.join(" "));
            }
        }
        text
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut filters = Vec::new();
        while let Some(header) = lines.next() {
            let (name, size) = header
                .split_once(' ')
                .and_then(|(n, s)| Some((n, s.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Format(format!("bad filter header `{header}`")))?;
            let mut coefficients = Vec::with_capacity(size * size);
            for _ in 0..size {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Format(format!("filter `{name}` is truncated")))?;
                for tok in line.split_whitespace() {
                    coefficients.push(
                        tok.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad coefficient `{tok}`")))?,
                    );
                }
            }
            filters.push(FixedFilter::new(name, size, coefficients).map_err(|e| Error::Format(e.to_string()))?);
        }
        Ok(FixedFilterBank { filters })
    }
}

fn transpose(values: &[f64], size: usize) -> Vec<f64> {
    (0..size * size).map(|i| values[(i % size) * size + i / size]).collect()
}

/// On- and off-center Mexican-hat filters.
///
/// The on-center filter is a difference of normalized Gaussians (center
/// minus surround), shifted to sum to zero and scaled to unit L2 norm. The
/// off-center filter is its negation.
pub fn make_contrast_filters(size: usize, sigma_center: f64, sigma_surround: f64) -> Result<(FixedFilter, FixedFilter)> {
    if size.is_multiple_of(2) {
        return Err(Error::Config(format!("contrast filter size {size} must be odd")));
    }
    if !(sigma_center > 0.0 && sigma_center < sigma_surround) {
        return Err(Error::Config(format!(
            "need 0 < sigma_center < sigma_surround, got {sigma_center} and {sigma_surround}"
        )));
    }
    let r = (size / 2) as f64;
    let gaussian = |sigma: f64| -> Vec<f64> {
        let g: Vec<f64> = (0..size * size)
            .map(|i| {
                let dx = (i % size) as f64 - r;
                let dy = (i / size) as f64 - r;
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = g.iter().sum();
        g.into_iter().map(|v| v / total).collect()
    };
    let center = gaussian(sigma_center);
    let surround = gaussian(sigma_surround);
    let mut on: Vec<f64> = center.iter().zip(&surround).map(|(c, s)| c - s).collect();
    let mean = on.iter().sum::<f64>() / on.len() as f64;
    on.iter_mut().for_each(|v| *v -= mean);
    let norm = on.iter().map(|v| v * v).sum::<f64>().sqrt();
    on.iter_mut().for_each(|v| *v /= norm);
    let off = on.iter().map(|v| -v).collect();
    Ok((
        FixedFilter::new(format!("hat{size}_on"), size, on)?,
        FixedFilter::new(format!("hat{size}_off"), size, off)?,
    ))
}

/// Correlates one map with a fixed filter centered on each cell; samples
/// outside the map repeat the nearest border cell.
pub fn apply_filter<T: Real>(image: &FeatureMap<T>, filter: &FixedFilter) -> Result<FeatureMap<T>> {
    if filter.size > image.width() || filter.size > image.height() {
        return Err(Error::geometry(
            None,
            format!(
                "{} ({}x{}) is larger than the {}x{} image",
                filter.name,
                filter.size,
                filter.size,
                image.width(),
                image.height()
            ),
        ));
    }
    let r = (filter.size / 2) as isize;
    let (w, h) = (image.width() as isize, image.height() as isize);
    let mut out = image.zeros_like();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for v in 0..filter.size {
                let iy = (y + v as isize - r).clamp(0, h - 1) as usize;
                let row = image.row(iy);
                for u in 0..filter.size {
                    let ix = (x + u as isize - r).clamp(0, w - 1) as usize;
                    acc += filter.at(u, v) * row[ix].as_f64();
                }
            }
            out.set(x as usize, y as usize, T::of(acc));
        }
    }
    Ok(out)
}

/// Returns the original channels followed, channel by channel, by the
/// response of every filter in the bank.
pub fn apply_image_processing<T: Real>(image: &[FeatureMap<T>], bank: &FixedFilterBank) -> Result<Vec<FeatureMap<T>>> {
    let mut maps = image.to_vec();
    for channel in image {
        for filter in &bank.filters {
            maps.push(apply_filter(channel, filter)?);
        }
    }
    Ok(maps)
}
