//! IDX image/label files, normalized datasets, batching and a synthetic toy set.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{file_err, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unnormalized `N × H × W` pixels as stored in an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.rows * self.cols;
        &self.pixels[i * p..(i + 1) * p]
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxLength {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn payload<'b>(bytes: &'b [u8], header: usize, len: usize, path: &Path) -> Result<&'b [u8]> {
    if bytes.len() != header + len {
        return Err(Error::IdxLength {
            path: path.to_path_buf(),
            expected: header + len,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..])
}

/// Parses an in-memory IDX image file; `path` is only used in error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<RawImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols, path)?.to_vec();
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, count, path)?.to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    parse_idx_images(&bytes, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    parse_idx_labels(&bytes, path)
}

pub fn idx_images_bytes(raw: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + raw.pixels.len());
    for v in [IDX_IMAGES_MAGIC, raw.count as u32, raw.rows as u32, raw.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&raw.pixels);
    out
}

pub fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// `[N, H·W]` intensities, each pixel divided by 255.
pub fn normalize(raw: &RawImages) -> Result<Tensor> {
    let data = raw.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::matrix(raw.count, raw.rows * raw.cols, data)
}

/// Labeled images with intensities in `[0, 1]`, one image per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    image_shape: (usize, usize),
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, image_shape: (usize, usize)) -> Result<Self> {
        let (n, p) = images.dims2()?;
        if n != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("{n} images but {} labels", labels.len()),
            });
        }
        if p != image_shape.0 * image_shape.1 {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("rows of width {p} for image shape {image_shape:?}"),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        crate::distributions::check_unit_interval(images.data())?;
        Ok(Dataset {
            images,
            labels,
            num_classes,
            image_shape,
        })
    }

    pub fn from_raw(raw: &RawImages, labels: &[u8], num_classes: usize) -> Result<Self> {
        Dataset::new(
            normalize(raw)?,
            labels.iter().map(|&l| l as usize).collect(),
            num_classes,
            (raw.rows, raw.cols),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn input_dim(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let p = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape {
                    op: "gather",
                    detail: format!("index {i} out of range for {} samples", self.len()),
                });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), p, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Dataset::new(images, labels, self.num_classes, self.image_shape)
    }

    /// Samples `start..end` (clamped to the dataset size).
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        let end = end.min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        self.subset(&idx)
    }
}

/// Class-templated images: the image is cut into a `g × g` grid of cells
/// (`g = ⌈√C⌉`), class `c` lights up cell `c`, and every pixel receives
/// independent `N(0, 0.05²)` noise before clipping to `[0, 1]`.
///
/// Samples cycle through the classes, so any prefix is close to balanced.
pub fn synth_toy_dataset(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    image_shape: (usize, usize),
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Empty("toy dataset needs at least one sample per class"));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least two classes, got {num_classes}")));
    }
    let (h, w) = image_shape;
    let g = (num_classes as f64).sqrt().ceil() as usize;
    if h < g || w < g {
        return Err(Error::Config(format!("image {h}x{w} too small for a {g}x{g} class grid")));
    }
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let (cr, cc) = (c / g, c % g);
            let mut t = vec![TOY_BACKGROUND; h * w];
            for r in cr * h / g..(cr + 1) * h / g {
                for col in cc * w / g..(cc + 1) * w / g {
                    t[r * w + col] = TOY_FOREGROUND;
                }
            }
            t
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE).expect("valid std");
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        data.extend(templates[c].iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        labels.push(c);
    }
    Dataset::new(Tensor::matrix(n, h * w, data)?, labels, num_classes, image_shape)
}

const TOY_FOREGROUND: f64 = 0.9;
const TOY_BACKGROUND: f64 = 0.1;
const TOY_NOISE: f64 = 0.05;

/// Index batches for one epoch: a permutation of `0..len` seeded by
/// `(seed, epoch)`, cut into chunks of `batch_size` (the last may be short).
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Training, validation and test portions of an IDX dataset directory.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// How much of the training file to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 10_000,
            valid: 1_000,
        }
    }
}

fn load_pair(dir: &Path, images: &str, labels: &str, num_classes: usize) -> Result<Dataset> {
    let raw = load_idx_images(dir.join(images))?;
    let lab_path: PathBuf = dir.join(labels);
    let lab = load_idx_labels(&lab_path)?;
    if lab.len() != raw.count {
        return Err(Error::IdxLength {
            path: lab_path,
            expected: raw.count,
            found: lab.len(),
        });
    }
    Dataset::from_raw(&raw, &lab, num_classes)
}

/// Loads the standard four MNIST files from `dir`. Training uses the first
/// `sizes.train` images of the training file, validation the following
/// `sizes.valid`, and the test set is the full test file.
pub fn load_mnist(dir: impl AsRef<Path>, sizes: SplitSizes) -> Result<Splits> {
    let dir = dir.as_ref();
    let full = load_pair(dir, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, 10)?;
    let test = load_pair(dir, MNIST_TEST_IMAGES, MNIST_TEST_LABELS, 10)?;
    let train = full.slice(0, sizes.train)?;
    let valid = full.slice(sizes.train, sizes.train + sizes.valid)?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok(Splits { train, valid, test })
}

/// Only the test portion of an MNIST directory.
pub fn load_mnist_test(dir: impl AsRef<Path>) -> Result<Dataset> {
    load_pair(dir.as_ref(), MNIST_TEST_IMAGES, MNIST_TEST_LABELS, 10)
}
