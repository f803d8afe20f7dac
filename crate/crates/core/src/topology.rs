//! Network geometry, inter-map connection tables and the architecture parser.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Side length of a convolution output along one axis.
///
/// The kernel must lie completely inside the input and advances by
/// `skip + 1` pixels between placements, so the result is
/// `floor((prev - kernel) / (skip + 1)) + 1`.
pub fn output_map_size(prev: usize, kernel: usize, skip: usize) -> Result<usize> {
    if kernel == 0 || kernel > prev {
        return Err(Error::geometry(
            None,
            format!("kernel {kernel} does not fit inside a map of size {prev}"),
        ));
    }
    Ok((prev - kernel) / (skip + 1) + 1)
}

/// Whether the last kernel placement ends exactly on the map border.
pub fn placement_is_exact(prev: usize, kernel: usize, skip: usize) -> bool {
    kernel <= prev && (prev - kernel).is_multiple_of(skip + 1)
}

/// Connectivity between the maps of two consecutive convolutional layers.
///
/// Besides the forward rows (sources of each destination map) the table
/// keeps their transpose, the position of each connected kernel in the
/// layer's weight arena, and a flat list of connected pairs. The arena holds,
/// per destination map, one bias slot followed by one `kx * ky` kernel per
/// source map, in forward-row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionTable {
    src_maps: usize,
    dest_maps: usize,
    kernel: (usize, usize),
    forward: Vec<Vec<usize>>,
    backward: Vec<Vec<usize>>,
    weight_index: Vec<Option<usize>>,
    bias_index: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    arena_len: usize,
}

impl ConnectionTable {
    /// Builds all derived indices from forward rows. Rows are sorted and
    /// must contain distinct, in-range source indices.
    pub fn from_forward(src_maps: usize, kernel: (usize, usize), mut forward: Vec<Vec<usize>>) -> Result<Self> {
        if src_maps == 0 || forward.is_empty() {
            return Err(Error::Config("connection table needs at least one map on each side".into()));
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Config("kernel dimensions must be positive".into()));
        }
        for (dest, row) in forward.iter_mut().enumerate() {
            row.sort_unstable();
            if row.is_empty() {
                return Err(Error::Config(format!("destination map {dest} has no sources")));
            }
            if row.windows(2).any(|w| w[0] == w[1]) || row.iter().any(|&s| s >= src_maps) {
                return Err(Error::Config(format!(
                    "destination map {dest} has duplicate or out-of-range sources"
                )));
            }
        }
        let dest_maps = forward.len();
        let kernel_len = kernel.0 * kernel.1;
        let backward = invert_table(&forward, src_maps);

        let mut weight_index = vec![None; dest_maps * src_maps];
        let mut bias_index = Vec::with_capacity(dest_maps);
        let mut pairs = Vec::new();
        let mut offset = 0;
        for (dest, row) in forward.iter().enumerate() {
            bias_index.push(offset);
            offset += 1;
            for &src in row {
                weight_index[dest * src_maps + src] = Some(offset);
                pairs.push((dest, src));
                offset += kernel_len;
            }
        }

        Ok(ConnectionTable {
            src_maps,
            dest_maps,
            kernel,
            forward,
            backward,
            weight_index,
            bias_index,
            pairs,
            arena_len: offset,
        })
    }

    pub fn src_maps(&self) -> usize {
        self.src_maps
    }

    pub fn dest_maps(&self) -> usize {
        self.dest_maps
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Source maps feeding `dest`, ascending.
    pub fn sources(&self, dest: usize) -> &[usize] {
        &self.forward[dest]
    }

    /// Destination maps fed by `src`, ascending.
    pub fn destinations(&self, src: usize) -> &[usize] {
        &self.backward[src]
    }

    pub fn forward(&self) -> &[Vec<usize>] {
        &self.forward
    }

    pub fn backward(&self) -> &[Vec<usize>] {
        &self.backward
    }

    /// Arena offset of the first weight of the `(dest, src)` kernel.
    pub fn weight_index(&self, dest: usize, src: usize) -> Option<usize> {
        self.weight_index[dest * self.src_maps + src]
    }

    pub fn bias_index(&self, dest: usize) -> usize {
        self.bias_index[dest]
    }

    /// Every connected `(dest, src)` pair, once.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_connected(&self, dest: usize, src: usize) -> bool {
        self.weight_index(dest, src).is_some()
    }

    /// Number of arena slots (weights plus biases).
    pub fn arena_len(&self) -> usize {
        self.arena_len
    }
}

/// Connects every destination map to every source map.
pub fn build_full_table(src_maps: usize, dest_maps: usize, kernel: (usize, usize)) -> Result<ConnectionTable> {
    if dest_maps == 0 {
        return Err(Error::Config("connection table needs at least one destination map".into()));
    }
    ConnectionTable::from_forward(src_maps, kernel, vec![(0..src_maps).collect(); dest_maps])
}

/// Connects each destination map to `in_degree` distinct random sources.
///
/// Sampling is driven by a ChaCha8 stream seeded with `seed`, so tables are
/// reproducible across platforms. Any source map left without an outgoing
/// connection is swapped into a destination row in place of a source that is
/// used more than once, which always succeeds when
/// `in_degree * dest_maps >= src_maps`.
pub fn build_random_table(
    src_maps: usize,
    dest_maps: usize,
    in_degree: usize,
    seed: u64,
    kernel: (usize, usize),
) -> Result<ConnectionTable> {
    if src_maps == 0 || dest_maps == 0 {
        return Err(Error::Config("connection table needs at least one map on each side".into()));
    }
    if in_degree == 0 || in_degree > src_maps {
        return Err(Error::Config(format!(
            "in-degree {in_degree} outside [1, {src_maps}]"
        )));
    }
    if in_degree * dest_maps < src_maps {
        return Err(Error::Config(format!(
            "{dest_maps} maps with in-degree {in_degree} cannot cover {src_maps} source maps"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward: Vec<Vec<usize>> = (0..dest_maps)
        .map(|_| {
            let mut row = sample(&mut rng, src_maps, in_degree).into_vec();
            row.sort_unstable();
            row
        })
        .collect();

    let mut use_count = vec![0usize; src_maps];
    for &s in forward.iter().flatten() {
        use_count[s] += 1;
    }
    for orphan in 0..src_maps {
        if use_count[orphan] > 0 {
            continue;
        }
        // Start the search at a random row so repairs do not pile up on row 0.
        let start = rng.gen_range(0..dest_maps);
        let (dest, slot) = (0..dest_maps)
            .map(|k| (start + k) % dest_maps)
            .find_map(|d| {
                forward[d]
                    .iter()
                    .position(|&s| use_count[s] > 1)
                    .map(|slot| (d, slot))
            })
            .expect("coverage is feasible, so some source is shared");
        let replaced = forward[dest][slot];
        use_count[replaced] -= 1;
        use_count[orphan] += 1;
        forward[dest][slot] = orphan;
        forward[dest].sort_unstable();
    }

    ConnectionTable::from_forward(src_maps, kernel, forward)
}

/// Transposes per-destination source lists into per-source destination lists.
pub fn invert_table(forward: &[Vec<usize>], src_maps: usize) -> Vec<Vec<usize>> {
    let mut backward = vec![Vec::new(); src_maps];
    for (dest, row) in forward.iter().enumerate() {
        for &src in row {
            backward[src].push(dest);
        }
    }
    backward
}

/// A fixed filter family available to the image processing layer.
///
/// Each family contributes two kernels per input channel: the x and y
/// gradients for the edge filters, the on- and off-center responses for the
/// hat filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterName {
    Sobel,
    Scharr,
    Hat(usize),
}

impl FilterName {
    pub fn size(self) -> usize {
        match self {
            FilterName::Sobel | FilterName::Scharr => 3,
            FilterName::Hat(n) => n,
        }
    }

    /// Kernels produced by this family.
    pub const KERNELS: usize = 2;
}

impl fmt::Display for FilterName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterName::Sobel => f.write_str("sobel"),
            FilterName::Scharr => f.write_str("scharr"),
            FilterName::Hat(n) => write!(f, "hat{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Full,
    Random { in_degree: usize, seed: u64 },
}

/// One stanza of an architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Input {
        channels: usize,
        width: usize,
        height: usize,
    },
    ImageProcessing {
        filters: Vec<FilterName>,
    },
    Convolutional {
        maps: usize,
        kernel: (usize, usize),
        skip: (usize, usize),
        connectivity: Connectivity,
    },
    MaxPooling {
        region: (usize, usize),
    },
    FullyConnected {
        neurons: usize,
    },
    Output {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::ImageProcessing { .. } => "imgproc",
            LayerSpec::Convolutional { .. } => "conv",
            LayerSpec::MaxPooling { .. } => "maxpool",
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Output { .. } => "output",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Input { channels, width, height } => write!(f, "input {channels}x{width}x{height}"),
            LayerSpec::ImageProcessing { filters } => {
                f.write_str("imgproc ")?;
                for (i, filter) in filters.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{filter}")?;
                }
                Ok(())
            }
            LayerSpec::Convolutional { maps, kernel, skip, connectivity } => {
                write!(f, "conv {maps}M k{}x{} s{}x{}", kernel.0, kernel.1, skip.0, skip.1)?;
                if let Connectivity::Random { in_degree, seed } = connectivity {
                    write!(f, " rand{in_degree}@{seed}")?;
                }
                Ok(())
            }
            LayerSpec::MaxPooling { region } => write!(f, "maxpool {}x{}", region.0, region.1),
            LayerSpec::FullyConnected { neurons } => write!(f, "fc {neurons}N"),
            LayerSpec::Output { classes } => write!(f, "output {classes}"),
        }
    }
}

/// Number of maps and their size at the output of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub maps: usize,
    pub width: usize,
    pub height: usize,
}

/// A validated layer stack with every map size resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    geometry: Vec<LayerGeometry>,
    warnings: Vec<String>,
}

impl NetworkSpec {
    /// Validates a layer list and resolves its geometry.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut geometry: Vec<LayerGeometry> = Vec::with_capacity(layers.len());
        let mut warnings = Vec::new();
        let mut seen_fc = false;

        for (index, layer) in layers.iter().enumerate() {
            let prev = geometry.last().copied();
            let here = |message: String| Error::geometry(Some(index), message);
            let position_error = |message: &str| Error::Config(format!("layer {index} ({}): {message}", layer.kind()));

            let g = match (layer, prev) {
                (LayerSpec::Input { channels, width, height }, None) => {
                    if *channels == 0 || *width == 0 || *height == 0 {
                        return Err(here("input dimensions must be positive".into()));
                    }
                    LayerGeometry { maps: *channels, width: *width, height: *height }
                }
                (LayerSpec::Input { .. }, Some(_)) => return Err(position_error("input must be the first layer")),
                (_, None) => return Err(position_error("the first layer must be `input`")),
                (LayerSpec::ImageProcessing { filters }, Some(p)) => {
                    if index != 1 {
                        return Err(position_error("imgproc must directly follow input"));
                    }
                    for filter in filters {
                        if let FilterName::Hat(n) = filter {
                            if n % 2 == 0 {
                                return Err(Error::Config(format!("hat filter size {n} must be odd")));
                            }
                        }
                        if filter.size() > p.width || filter.size() > p.height {
                            return Err(here(format!(
                                "filter {filter} larger than the {}x{} input",
                                p.width, p.height
                            )));
                        }
                    }
                    LayerGeometry {
                        maps: p.maps * (1 + FilterName::KERNELS * filters.len()),
                        ..p
                    }
                }
                (LayerSpec::Convolutional { maps, kernel, skip, connectivity }, Some(p)) => {
                    if seen_fc {
                        return Err(here("convolution after a fully connected layer".into()));
                    }
                    if *maps == 0 {
                        return Err(here("map count must be positive".into()));
                    }
                    let width = output_map_size(p.width, kernel.0, skip.0).map_err(|e| here(e.to_string()))?;
                    let height = output_map_size(p.height, kernel.1, skip.1).map_err(|e| here(e.to_string()))?;
                    if !placement_is_exact(p.width, kernel.0, skip.0) || !placement_is_exact(p.height, kernel.1, skip.1) {
                        warnings.push(format!(
                            "layer {index}: kernel placements do not end on the map border; trailing pixels are unused"
                        ));
                    }
                    if let Connectivity::Random { in_degree, .. } = connectivity {
                        if *in_degree == 0 || *in_degree > p.maps {
                            return Err(Error::Config(format!(
                                "layer {index}: in-degree {in_degree} outside [1, {}]",
                                p.maps
                            )));
                        }
                        if in_degree * maps < p.maps {
                            return Err(Error::Config(format!(
                                "layer {index}: {maps} maps with in-degree {in_degree} cannot cover {} source maps",
                                p.maps
                            )));
                        }
                    }
                    LayerGeometry { maps: *maps, width, height }
                }
                (LayerSpec::MaxPooling { region }, Some(p)) => {
                    if seen_fc {
                        return Err(here("max-pooling after a fully connected layer".into()));
                    }
                    if region.0 == 0 || region.1 == 0 {
                        return Err(here("pooling region must be positive".into()));
                    }
                    if region.0 > p.width || region.1 > p.height {
                        return Err(here(format!(
                            "{}x{} pooling region exceeds the {}x{} map",
                            region.0, region.1, p.width, p.height
                        )));
                    }
                    if p.width % region.0 != 0 || p.height % region.1 != 0 {
                        warnings.push(format!(
                            "layer {index}: {}x{} map is not divisible by the {}x{} pooling region; trailing cells are dropped",
                            p.width, p.height, region.0, region.1
                        ));
                    }
                    LayerGeometry {
                        maps: p.maps,
                        width: p.width / region.0,
                        height: p.height / region.1,
                    }
                }
                (LayerSpec::FullyConnected { neurons }, Some(_)) => {
                    if *neurons == 0 {
                        return Err(here("neuron count must be positive".into()));
                    }
                    seen_fc = true;
                    LayerGeometry { maps: *neurons, width: 1, height: 1 }
                }
                (LayerSpec::Output { classes }, Some(_)) => {
                    if index + 1 != layers.len() {
                        return Err(position_error("output must be the last layer"));
                    }
                    if *classes == 0 {
                        return Err(here("class count must be positive".into()));
                    }
                    LayerGeometry { maps: *classes, width: 1, height: 1 }
                }
            };
            geometry.push(g);
        }

        match layers.last() {
            Some(LayerSpec::Output { .. }) => {}
            _ => return Err(Error::Config("the last layer must be `output`".into())),
        }

        Ok(NetworkSpec { layers, geometry, warnings })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output geometry of layer `index`.
    pub fn geometry(&self, index: usize) -> LayerGeometry {
        self.geometry[index]
    }

    pub fn geometries(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    /// Non-fatal observations made during validation.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn input(&self) -> LayerGeometry {
        self.geometry[0]
    }

    pub fn classes(&self) -> usize {
        self.geometry.last().expect("validated spec is non-empty").maps
    }

    pub fn filters(&self) -> &[FilterName] {
        match self.layers.get(1) {
            Some(LayerSpec::ImageProcessing { filters }) => filters,
            _ => &[],
        }
    }

    /// Index of the first layer with trainable parameters.
    pub fn first_trainable(&self) -> usize {
        if self.filters().is_empty() && !matches!(self.layers.get(1), Some(LayerSpec::ImageProcessing { .. })) {
            1
        } else {
            2
        }
    }

    /// Number of trainable weights and biases.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        for (index, layer) in self.layers.iter().enumerate().skip(1) {
            let prev = self.geometry[index - 1];
            let here = self.geometry[index];
            total += match layer {
                LayerSpec::Convolutional { kernel, connectivity, .. } => {
                    let degree = match connectivity {
                        Connectivity::Full => prev.maps,
                        Connectivity::Random { in_degree, .. } => *in_degree,
                    };
                    here.maps * (1 + degree * kernel.0 * kernel.1)
                }
                LayerSpec::FullyConnected { .. } | LayerSpec::Output { .. } => {
                    here.maps * (1 + prev.maps * prev.width * prev.height)
                }
                _ => 0,
            };
        }
        total
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{layer}")?;
        }
        Ok(())
    }
}

/// Parses an architecture description.
///
/// Stanzas are separated by `;` or newlines; `#` starts a comment running to
/// the end of the line.
///
/// ```text
/// input <channels>x<W>x<H>
/// imgproc <filter>[,<filter>...]        filter: sobel | scharr | hat<N>
/// conv <M>M k<Kx>x<Ky> [s<Sx>x<Sy>] [rand<in_degree>[@<seed>]]
/// maxpool <Kx>x<Ky>
/// fc <N>N
/// output <classes>
/// ```
///
/// A random connection table without an explicit seed uses the layer index.
pub fn parse_architecture(text: &str) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    for (position, stanza) in stanzas(text) {
        let layer = parse_stanza(position, stanza, layers.len())?;
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(Error::Syntax {
            position: 0,
            message: "empty architecture".into(),
        });
    }
    if !matches!(layers[0], LayerSpec::Input { .. }) {
        return Err(Error::Syntax {
            position: 0,
            message: "architecture must start with an `input` stanza".into(),
        });
    }
    NetworkSpec::new(layers)
}

/// Non-empty stanzas with the byte offset of their first character.
fn stanzas(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let code = line.split('#').next().unwrap_or("");
        let mut offset = line_start;
        for piece in code.split(';') {
            let trimmed = piece.trim();
            if !trimmed.is_empty() {
                let lead = piece.len() - piece.trim_start().len();
                out.push((offset + lead, trimmed.trim_end_matches('\n')));
            }
            offset += piece.len() + 1;
        }
        line_start += line.len();
    }
    out
}

fn parse_stanza(position: usize, stanza: &str, index: usize) -> Result<LayerSpec> {
    let syntax = |offset: usize, message: String| Error::Syntax {
        position: position + offset,
        message,
    };
    let mut tokens = Vec::new();
    let mut rest = stanza;
    let mut consumed = 0;
    while let Some(start) = rest.find(|c: char| !c.is_whitespace()) {
        let tail = &rest[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        tokens.push((consumed + start, &tail[..len]));
        consumed += start + len;
        rest = &tail[len..];
    }
    let (_, keyword) = tokens[0];
    let args = &tokens[1..];

    let expect_args = |n: usize| -> Result<()> {
        if args.len() != n {
            Err(syntax(0, format!("`{keyword}` takes {n} argument(s), found {}", args.len())))
        } else {
            Ok(())
        }
    };

    match keyword {
        "input" => {
            expect_args(1)?;
            let (off, tok) = args[0];
            let dims = parse_dims(tok).ok_or_else(|| syntax(off, format!("expected <channels>x<W>x<H>, found `{tok}`")))?;
            if dims.len() != 3 {
                return Err(syntax(off, format!("expected <channels>x<W>x<H>, found `{tok}`")));
            }
            Ok(LayerSpec::Input {
                channels: dims[0],
                width: dims[1],
                height: dims[2],
            })
        }
        "imgproc" => {
            if args.is_empty() {
                return Err(syntax(0, "`imgproc` needs at least one filter".into()));
            }
            let mut filters = Vec::new();
            for &(off, tok) in args {
                for name in tok.split(',').filter(|n| !n.is_empty()) {
                    let filter = match name {
                        "sobel" => FilterName::Sobel,
                        "scharr" => FilterName::Scharr,
                        _ => match name.strip_prefix("hat").and_then(|n| n.parse().ok()) {
                            Some(n) => FilterName::Hat(n),
                            None => return Err(syntax(off, format!("unknown filter `{name}`"))),
                        },
                    };
                    filters.push(filter);
                }
            }
            Ok(LayerSpec::ImageProcessing { filters })
        }
        "conv" => {
            if args.is_empty() {
                return Err(syntax(0, "`conv` needs a map count".into()));
            }
            let (off, tok) = args[0];
            let maps = tok
                .strip_suffix('M')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| syntax(off, format!("expected <M>M, found `{tok}`")))?;
            let mut kernel = None;
            let mut skip = (0, 0);
            let mut connectivity = Connectivity::Full;
            for &(off, tok) in &args[1..] {
                if let Some(k) = tok.strip_prefix('k') {
                    kernel = Some(parse_pair(k).ok_or_else(|| syntax(off, format!("expected k<Kx>x<Ky>, found `{tok}`")))?);
                } else if let Some(s) = tok.strip_prefix('s') {
                    skip = parse_pair(s).ok_or_else(|| syntax(off, format!("expected s<Sx>x<Sy>, found `{tok}`")))?;
                } else if let Some(r) = tok.strip_prefix("rand") {
                    let (degree, seed) = match r.split_once('@') {
                        Some((d, s)) => (d.parse().ok(), s.parse().ok()),
                        None => (r.parse().ok(), Some(index as u64)),
                    };
                    match (degree, seed) {
                        (Some(in_degree), Some(seed)) => connectivity = Connectivity::Random { in_degree, seed },
                        _ => return Err(syntax(off, format!("expected rand<in_degree>[@<seed>], found `{tok}`"))),
                    }
                } else {
                    return Err(syntax(off, format!("unexpected token `{tok}`")));
                }
            }
            let kernel = kernel.ok_or_else(|| syntax(0, "`conv` needs a kernel k<Kx>x<Ky>".into()))?;
            Ok(LayerSpec::Convolutional {
                maps,
                kernel,
                skip,
                connectivity,
            })
        }
        "maxpool" => {
            expect_args(1)?;
            let (off, tok) = args[0];
            let region = parse_pair(tok).ok_or_else(|| syntax(off, format!("expected <Kx>x<Ky>, found `{tok}`")))?;
            Ok(LayerSpec::MaxPooling { region })
        }
        "fc" => {
            expect_args(1)?;
            let (off, tok) = args[0];
            let neurons = tok
                .strip_suffix('N')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| syntax(off, format!("expected <N>N, found `{tok}`")))?;
            Ok(LayerSpec::FullyConnected { neurons })
        }
        "output" => {
            expect_args(1)?;
            let (off, tok) = args[0];
            let classes = tok.parse().map_err(|_| syntax(off, format!("expected a class count, found `{tok}`")))?;
            Ok(LayerSpec::Output { classes })
        }
        other => Err(syntax(0, format!("unknown layer kind `{other}`"))),
    }
}

fn parse_dims(tok: &str) -> Option<Vec<usize>> {
    tok.split('x').map(|d| d.parse().ok()).collect()
}

fn parse_pair(tok: &str) -> Option<(usize, usize)> {
    match parse_dims(tok)?.as_slice() {
        [a, b] => Some((*a, *b)),
        _ => None,
    }
}
