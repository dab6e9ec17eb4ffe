//! Datasets: MNIST IDX files, a seeded synthetic task, and mini-batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Samples stored one per column of a `[features x samples]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if labels.len() != inputs.cols() {
            return Err(Error::Data(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        if !inputs.is_finite() {
            return Err(Error::Data("non-finite input values".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.inputs.rows()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.inputs.select_cols(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let (inputs, labels) = self.gather(indices);
        Dataset {
            inputs,
            labels,
            classes: self.classes,
            split,
        }
    }

    /// Splits off the last `held_out` samples as a validation set.
    pub fn split_tail(&self, held_out: usize) -> Result<(Dataset, Dataset)> {
        if held_out >= self.len() {
            return Err(Error::Data(format!(
                "cannot hold out {held_out} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - held_out;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head, self.split), self.subset(&tail, Split::Validation)))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parses an IDX image file; returns (count, rows * cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "image payload has {} of {need} bytes",
            payload.len()
        )));
    }
    Ok((count, rows * cols, &payload[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "label")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Truncated(format!(
            "label payload has {} of {count} bytes",
            payload.len()
        )));
    }
    Ok(&payload[..count])
}

/// Loads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to `[0, 1]`; each image becomes one column.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let image_bytes = read_maybe_gz(images.as_ref())?;
    let label_bytes = read_maybe_gz(labels.as_ref())?;
    let (count, dim, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(Error::Data(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let mut inputs = Tensor::zeros(dim, count);
    for (s, img) in pixels.chunks_exact(dim).enumerate() {
        for (f, &px) in img.iter().enumerate() {
            inputs.set(f, s, px as f64 / 255.0);
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, classes, split)
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows * cols;
    if dim == 0 || !pixels.len().is_multiple_of(dim) {
        return Err(Error::Data("pixel buffer is not a whole number of images".into()));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [pixels.len() / dim, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Loads the canonical 60k/10k MNIST split from a directory holding the
/// four standard files (plain or `.gz`).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let train = load_idx(
        find_file(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
        find_file(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
        Split::Train,
    )?;
    let test = load_idx(
        find_file(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
        find_file(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Binary classification by a random hyperplane through the origin over
/// the first `informative` of `width` coordinates. Inputs are uniform on
/// `[-1, 1]`; the remaining coordinates are noise the label ignores.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    width: usize,
    weights: Vec<f64>,
}

impl SyntheticTask {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, informative: usize) -> Result<Self> {
        if informative == 0 || informative > width {
            return Err(Error::InvalidConfig(format!(
                "informative coordinates {informative} not in [1, {width}]"
            )));
        }
        let weights = (0..informative).map(|_| rng.sample(StandardNormal)).collect();
        Ok(SyntheticTask { width, weights })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn informative(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let s: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum();
        usize::from(s > 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize, split: Split) -> Dataset {
        let mut inputs = Tensor::zeros(self.width, count);
        let mut labels = Vec::with_capacity(count);
        let mut x = vec![0.0; self.width];
        for s in 0..count {
            for (f, v) in x.iter_mut().enumerate() {
                *v = rng.random_range(-1.0..1.0);
                inputs.set(f, s, *v);
            }
            labels.push(self.label(&x));
        }
        Dataset::new(inputs, labels, 2, split).expect("well-formed by construction")
    }
}

/// One-shot convenience: a fresh rule and `count` samples from it.
pub fn synth_ordered<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    width: usize,
    informative: usize,
) -> Result<Dataset> {
    let task = SyntheticTask::new(rng, width, informative)?;
    Ok(task.sample(rng, count, Split::Train))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches covering every sample exactly once. The final batch may be
/// short.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    pub fn new<R: Rng + ?Sized>(data: &'a Dataset, size: usize, shuffle: bool, rng: &mut R) -> Result<Self> {
        if size == 0 || size > data.len() {
            return Err(Error::InvalidConfig(format!(
                "batch size {size} not in [1, {}]",
                data.len()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        if shuffle {
            order.shuffle(rng);
        }
        Ok(Batches {
            data,
            order,
            size,
            pos: 0,
        })
    }

    pub fn count(data_len: usize, size: usize) -> usize {
        data_len.div_ceil(size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (inputs, labels) = self.data.gather(&indices);
        Some(Batch {
            inputs,
            labels,
            indices,
        })
    }
}
