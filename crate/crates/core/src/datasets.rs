//! Loaders for MNIST (IDX), CIFAR-10 (binary batches) and small-NORB
//! (binary matrices), plus the byte encoders used to build test fixtures.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const NORB_BYTE_MAGIC: u32 = 0x1E3D_4C55;
pub const NORB_INT_MAGIC: u32 = 0x1E3D_4C54;

/// Maps a raw byte to `[-1, 1]`.
pub fn normalize(byte: u8) -> f64 {
    byte as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding to the nearest byte.
pub fn denormalize(value: f64) -> u8 {
    ((value + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Norb,
}

impl DatasetKind {
    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Mnist => 1,
            DatasetKind::Norb => 2,
            DatasetKind::Cifar10 => 3,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::Cifar10 => 10,
            DatasetKind::Norb => 5,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Norb => "norb",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar" => Ok(DatasetKind::Cifar10),
            "norb" => Ok(DatasetKind::Norb),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// One labelled image; each channel holds `width * height` raw bytes in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub channels: Vec<Vec<u8>>,
    pub label: usize,
}

impl Sample {
    /// Normalized input maps.
    pub fn maps<T: Real>(&self, width: usize, height: usize, pitch_quantum: usize) -> Result<Vec<FeatureMap<T>>> {
        self.channels
            .iter()
            .map(|c| {
                let values: Vec<T> = c.iter().map(|&b| T::of(normalize(b))).collect();
                FeatureMap::from_rows(width, height, pitch_quantum, &values)
            })
            .collect()
    }
}

/// An ordered, homogeneous set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    split: Split,
    classes: usize,
    channels: usize,
    width: usize,
    height: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split: Split, classes: usize, width: usize, height: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Format("dataset has no samples".into()))?;
        let channels = first.channels.len();
        for s in &samples {
            if s.label >= classes {
                return Err(Error::LabelRange { label: s.label, classes });
            }
            if s.channels.len() != channels || s.channels.iter().any(|c| c.len() != width * height) {
                return Err(Error::Format("samples differ in geometry".into()));
            }
        }
        Ok(Dataset {
            samples,
            split,
            classes,
            channels,
            width,
            height,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Keeps the first `n` samples.
    pub fn limit(mut self, n: usize) -> Self {
        if n > 0 {
            self.samples.truncate(n);
        }
        self
    }

    /// Normalized input maps of sample `i`.
    pub fn maps<T: Real>(&self, i: usize, pitch_quantum: usize) -> Result<Vec<FeatureMap<T>>> {
        self.samples[i].maps(self.width, self.height, pitch_quantum)
    }

    /// Value used for cells a deformation pulls in from outside the image.
    pub fn background(&self) -> f64 {
        normalize(0)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("{what}: truncated file"))
}

fn take<'a>(cursor: &mut Cursor<&'a [u8]>, n: usize, what: &str) -> Result<&'a [u8]> {
    let data: &'a [u8] = cursor.get_ref();
    let start = cursor.position() as usize;
    let end = start.checked_add(n).filter(|&e| e <= data.len()).ok_or_else(|| truncated(what))?;
    cursor.set_position(end as u64);
    Ok(&data[start..end])
}

fn expect_end(cursor: &Cursor<&[u8]>, what: &str) -> Result<()> {
    let extra = cursor.get_ref().len() - cursor.position() as usize;
    if extra != 0 {
        return Err(Error::Format(format!("{what}: {extra} unexpected trailing bytes")));
    }
    Ok(())
}

/// Parses an IDX image file and label file held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let mut img = Cursor::new(images);
    let magic = img.read_u32::<BigEndian>().map_err(|_| truncated("images"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = img.read_u32::<BigEndian>().map_err(|_| truncated("images"))? as usize;
    }
    let [count, rows, cols] = dims;
    if rows == 0 || cols == 0 {
        return Err(Error::Format("images: zero image size".into()));
    }

    let mut lab = Cursor::new(labels);
    let magic = lab.read_u32::<BigEndian>().map_err(|_| truncated("labels"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let label_count = lab.read_u32::<BigEndian>().map_err(|_| truncated("labels"))? as usize;
    if label_count != count {
        return Err(Error::Format(format!("{count} images but {label_count} labels")));
    }

    let size = rows.checked_mul(cols).ok_or_else(|| Error::Format("images: size overflow".into()))?;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let pixels = take(&mut img, size, "images")?.to_vec();
        let label = take(&mut lab, 1, "labels")?[0] as usize;
        samples.push(Sample {
            channels: vec![pixels],
            label,
        });
    }
    expect_end(&img, "images")?;
    expect_end(&lab, "labels")?;
    Dataset::new(samples, split, DatasetKind::Mnist.classes(), cols, rows)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    parse_idx(&read_file(images_path)?, &read_file(labels_path)?, split)
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(batches: &[Vec<u8>], split: Split) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (i, batch) in batches.iter().enumerate() {
        if batch.is_empty() || batch.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "cifar batch {i}: length {} is not a positive multiple of {CIFAR_RECORD}",
                batch.len()
            )));
        }
        for record in batch.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= DatasetKind::Cifar10.classes() {
                return Err(Error::LabelRange { label, classes: 10 });
            }
            let channels = record[1..].chunks_exact(32 * 32).map(<[u8]>::to_vec).collect();
            samples.push(Sample { channels, label });
        }
    }
    Dataset::new(samples, split, DatasetKind::Cifar10.classes(), 32, 32)
}

pub fn load_cifar10(batch_paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let batches = batch_paths.iter().map(|p| read_file(p)).collect::<Result<Vec<_>>>()?;
    parse_cifar10(&batches, split)
}

struct NorbMatrix<'a> {
    magic: u32,
    dims: Vec<usize>,
    body: &'a [u8],
}

fn parse_norb_matrix<'a>(bytes: &'a [u8], what: &str) -> Result<NorbMatrix<'a>> {
    let mut c = Cursor::new(bytes);
    let magic = c.read_u32::<LittleEndian>().map_err(|_| truncated(what))?;
    if magic != NORB_BYTE_MAGIC && magic != NORB_INT_MAGIC {
        return Err(Error::Format(format!("{what}: unknown magic {magic:#010x}")));
    }
    let ndim = c.read_i32::<LittleEndian>().map_err(|_| truncated(what))?;
    if !(1..=16).contains(&ndim) {
        return Err(Error::Format(format!("{what}: bad dimension count {ndim}")));
    }
    let slots = (ndim as usize).max(3);
    let mut dims = Vec::with_capacity(slots);
    for _ in 0..slots {
        let d = c.read_i32::<LittleEndian>().map_err(|_| truncated(what))?;
        if d < 0 {
            return Err(Error::Format(format!("{what}: negative dimension")));
        }
        dims.push(d as usize);
    }
    dims.truncate(ndim as usize);
    let start = c.position() as usize;
    Ok(NorbMatrix {
        magic,
        dims,
        body: &bytes[start..],
    })
}

/// Parses a small-NORB image matrix (`N x 2 x H x W` bytes) and category
/// matrix (`N` little-endian integers).
pub fn parse_norb(dat: &[u8], cat: &[u8], split: Split) -> Result<Dataset> {
    let images = parse_norb_matrix(dat, "norb images")?;
    if images.magic != NORB_BYTE_MAGIC {
        return Err(Error::Format(format!("norb images: expected byte matrix, found magic {:#010x}", images.magic)));
    }
    let labels = parse_norb_matrix(cat, "norb categories")?;
    if labels.magic != NORB_INT_MAGIC {
        return Err(Error::Format(format!(
            "norb categories: expected integer matrix, found magic {:#010x}",
            labels.magic
        )));
    }
    let [count, stereo, height, width] = images.dims[..] else {
        return Err(Error::Format(format!("norb images: expected 4 dimensions, found {}", images.dims.len())));
    };
    if stereo != 2 || width == 0 || height == 0 {
        return Err(Error::Format(format!("norb images: bad shape {:?}", images.dims)));
    }
    if labels.dims.len() != 1 || labels.dims[0] != count {
        return Err(Error::Format(format!(
            "norb: {count} image pairs but category shape {:?}",
            labels.dims
        )));
    }
    let plane = width * height;
    let expected = count * 2 * plane;
    if images.body.len() != expected {
        return Err(Error::Format(format!("norb images: {} body bytes, expected {expected}", images.body.len())));
    }
    if labels.body.len() != count * 4 {
        return Err(Error::Format(format!("norb categories: {} body bytes, expected {}", labels.body.len(), count * 4)));
    }
    let mut cats = Cursor::new(labels.body);
    let mut samples = Vec::with_capacity(count);
    for pair in images.body.chunks_exact(2 * plane) {
        let label = cats.read_i32::<LittleEndian>().map_err(|_| truncated("norb categories"))?;
        if !(0..5).contains(&label) {
            return Err(Error::LabelRange {
                label: label.max(0) as usize,
                classes: 5,
            });
        }
        samples.push(Sample {
            channels: vec![pair[..plane].to_vec(), pair[plane..].to_vec()],
            label: label as usize,
        });
    }
    Dataset::new(samples, split, DatasetKind::Norb.classes(), width, height)
}

pub fn load_norb(dat_path: &Path, cat_path: &Path, split: Split) -> Result<Dataset> {
    parse_norb(&read_file(dat_path)?, &read_file(cat_path)?, split)
}

/// Loads a split from a directory holding the files under their usual
/// distribution names.
pub fn load_dir(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    let data = match (kind, split) {
        (DatasetKind::Mnist, _) => {
            let prefix = if split == Split::Train { "train" } else { "t10k" };
            load_idx(
                &dir.join(format!("{prefix}-images-idx3-ubyte")),
                &dir.join(format!("{prefix}-labels-idx1-ubyte")),
                split,
            )?
        }
        (DatasetKind::Cifar10, Split::Train) => {
            let paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            load_cifar10(&paths, split)?
        }
        (DatasetKind::Cifar10, Split::Test) => load_cifar10(&[dir.join("test_batch.bin")], split)?,
        (DatasetKind::Norb, _) => {
            let stem = if split == Split::Train {
                "smallnorb-5x46789x9x18x6x2x96x96-training"
            } else {
                "smallnorb-5x01235x9x18x6x2x96x96-testing"
            };
            load_norb(&dir.join(format!("{stem}-dat.mat")), &dir.join(format!("{stem}-cat.mat")), split)?
        }
    };
    if data.channels() != kind.channels() {
        return Err(Error::Format(format!(
            "{kind} expects {} channels, found {}",
            kind.channels(),
            data.channels()
        )));
    }
    Ok(data)
}

/// Byte encoders for the three container formats.
pub mod encode {
    use super::*;

    pub fn idx_images(width: usize, height: usize, images: &[Vec<u8>]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, images.len() as u32, height as u32, width as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for img in images {
            out.extend_from_slice(img);
        }
        out
    }

    pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    /// One record: label byte, then the R, G and B planes.
    pub fn cifar_record(label: u8, planes: [&[u8]; 3]) -> Vec<u8> {
        let mut out = vec![label];
        for p in planes {
            out.extend_from_slice(p);
        }
        out
    }

    fn norb_header(magic: u32, dims: &[usize]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic.to_le_bytes());
        out.extend_from_slice(&(dims.len() as i32).to_le_bytes());
        for i in 0..dims.len().max(3) {
            out.extend_from_slice(&(*dims.get(i).unwrap_or(&1) as i32).to_le_bytes());
        }
        out
    }

    /// Image matrix of stereo pairs `(left, right)`.
    pub fn norb_dat(width: usize, height: usize, pairs: &[(Vec<u8>, Vec<u8>)]) -> Vec<u8> {
        let mut out = norb_header(NORB_BYTE_MAGIC, &[pairs.len(), 2, height, width]);
        for (l, r) in pairs {
            out.extend_from_slice(l);
            out.extend_from_slice(r);
        }
        out
    }

    pub fn norb_cat(categories: &[i32]) -> Vec<u8> {
        let mut out = norb_header(NORB_INT_MAGIC, &[categories.len()]);
        for c in categories {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }
}
