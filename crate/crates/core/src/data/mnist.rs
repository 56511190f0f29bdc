//! MNIST in the IDX container format, and the four-quadrant node split.

use std::fs;
use std::path::{Path, PathBuf};

use super::{SplitData, SplitDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Default training subset size.
pub const DEFAULT_TRAIN_LIMIT: usize = 10_000;

/// Decoded images and labels; pixels stay as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn format_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { what: "IDX", path: path.to_path_buf(), detail: detail.into() }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file: magic, count, rows, cols, then pixels.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(format_error(path, format!("header needs 16 bytes, file has {}", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(format_error(path, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let (count, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(format_error(
            path,
            format!("header declares {count} images of {rows}x{cols} ({need} bytes), payload has {}", payload.len()),
        ));
    }
    Ok((rows, cols, payload.to_vec()))
}

/// Parses an IDX label file: magic, count, then one byte per label.
pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(format_error(path, format!("header needs 8 bytes, file has {}", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(format_error(path, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(format_error(path, format!("header declares {count} labels, payload has {}", payload.len())));
    }
    if let Some(pos) = payload.iter().position(|&y| y > 9) {
        return Err(format_error(path, format!("label {} at index {pos} is not a digit", payload[pos])));
    }
    Ok(payload.to_vec())
}

/// Loads a matching pair of image and label files.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<MnistSet> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (rows, cols, pixels) = parse_images(&ib, images)?;
    let labels_v = parse_labels(&lb, labels)?;
    let count = pixels.len().checked_div(rows * cols).unwrap_or(0);
    if count != labels_v.len() {
        return Err(format_error(
            labels,
            format!("{} labels for {count} images in {}", labels_v.len(), images.display()),
        ));
    }
    Ok(MnistSet { rows, cols, pixels, labels: labels_v })
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as `[rows, cols]`, scaled to `[0, 1]`.
    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = self.image_bytes(i).iter().map(|&p| scale(p)).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("image shape")
    }

    pub fn truncate(&mut self, limit: usize) {
        let n = limit.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.rows * self.cols);
    }

    /// Four quadrant nodes, each `[n, rows/2, cols/2, 1]`.
    pub fn quadrant_dataset<T: Scalar>(&self) -> Result<SplitDataset<T>> {
        if !self.rows.is_multiple_of(2) || !self.cols.is_multiple_of(2) {
            return Err(Error::Shape(format!("{}x{} images cannot be split into quadrants", self.rows, self.cols)));
        }
        let (h, w) = (self.rows / 2, self.cols / 2);
        let mut parts: Vec<Vec<T>> = (0..4).map(|_| Vec::with_capacity(self.len() * h * w)).collect();
        for i in 0..self.len() {
            let img = self.image_bytes(i);
            for (q, part) in parts.iter_mut().enumerate() {
                let (r0, c0) = quadrant_origin(q, h, w);
                for r in r0..r0 + h {
                    part.extend(img[r * self.cols + c0..r * self.cols + c0 + w].iter().map(|&p| scale::<T>(p)));
                }
            }
        }
        let inputs = parts
            .into_iter()
            .map(|p| Tensor::new(vec![self.len(), h, w, 1], p).expect("quadrant shape"))
            .collect();
        SplitDataset::new(inputs, self.labels.iter().map(|&y| y as usize).collect())
    }

    /// One node holding whole images, `[n, rows, cols, 1]`.
    pub fn whole_dataset<T: Scalar>(&self) -> Result<SplitDataset<T>> {
        let data = self.pixels.iter().map(|&p| scale(p)).collect();
        let x = Tensor::new(vec![self.len(), self.rows, self.cols, 1], data)?;
        SplitDataset::new(vec![x], self.labels.iter().map(|&y| y as usize).collect())
    }
}

fn scale<T: Scalar>(p: u8) -> T {
    T::lit(p as f64 / 255.0)
}

/// Top-left corner of quadrant `q`: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
fn quadrant_origin(q: usize, h: usize, w: usize) -> (usize, usize) {
    ((q / 2) * h, (q % 2) * w)
}

/// Splits an `[H, W]` (or `[H, W, 1]`) image into four `[H/2, W/2, 1]`
/// quadrants in the order top-left, top-right, bottom-left, bottom-right.
pub fn partition_quadrants<T: Scalar>(image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let s = image.shape();
    let ok = (s.len() == 2 || (s.len() == 3 && s[2] == 1)) && s[0].is_multiple_of(2) && s[1].is_multiple_of(2) && s[0] > 0 && s[1] > 0;
    if !ok {
        return Err(Error::Shape(format!("expected an even-sized [H, W] image, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let (h, w) = (rows / 2, cols / 2);
    Ok((0..4)
        .map(|q| {
            let (r0, c0) = quadrant_origin(q, h, w);
            let data = (r0..r0 + h)
                .flat_map(|r| image.data()[r * cols + c0..r * cols + c0 + w].iter().copied())
                .collect();
            Tensor::new(vec![h, w, 1], data).expect("quadrant shape")
        })
        .collect())
}

/// Inverse of [`partition_quadrants`]: reassembles an `[H, W]` image.
pub fn stitch_quadrants<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.len() != 4 {
        return Err(Error::Shape(format!("need 4 quadrants, got {}", parts.len())));
    }
    let s = parts[0].shape();
    if s.len() != 3 || s[2] != 1 || parts.iter().any(|p| p.shape() != s) {
        return Err(Error::Shape("quadrants must share one [h, w, 1] shape".into()));
    }
    let (h, w) = (s[0], s[1]);
    let cols = 2 * w;
    let mut data = vec![T::zero(); 4 * h * w];
    for (q, part) in parts.iter().enumerate() {
        let (r0, c0) = quadrant_origin(q, h, w);
        for r in 0..h {
            data[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + w].copy_from_slice(&part.data()[r * w..(r + 1) * w]);
        }
    }
    Tensor::new(vec![2 * h, cols], data)
}

/// Which layout to build from the MNIST files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistLayout {
    /// Four quadrant nodes.
    Quadrants,
    /// One node with whole images.
    Whole,
}

/// Paths of the four official files inside `dir`.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join(TRAIN_IMAGES),
            train_labels: dir.join(TRAIN_LABELS),
            test_images: dir.join(TEST_IMAGES),
            test_labels: dir.join(TEST_LABELS),
        }
    }

    /// Fails with the first missing path.
    pub fn check(&self) -> Result<()> {
        for p in [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels] {
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found")));
            }
        }
        Ok(())
    }
}

/// Raw train and test sets, each optionally truncated to its first samples.
pub fn load_mnist_dir(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<(MnistSet, MnistSet)> {
    let files = MnistFiles::in_dir(dir);
    files.check()?;
    let mut train = load_mnist_idx(&files.train_images, &files.train_labels)?;
    let mut test = load_mnist_idx(&files.test_images, &files.test_labels)?;
    if let Some(n) = train_limit {
        train.truncate(n);
    }
    if let Some(n) = test_limit {
        test.truncate(n);
    }
    Ok((train, test))
}

/// Train on the official training set (first `train_limit` images),
/// evaluate on the official test set.
pub fn mnist_split_data<T: Scalar>(train: &MnistSet, test: &MnistSet, layout: MnistLayout) -> Result<SplitData<T>> {
    let build = |s: &MnistSet| match layout {
        MnistLayout::Quadrants => s.quadrant_dataset(),
        MnistLayout::Whole => s.whole_dataset(),
    };
    Ok(SplitData { train: build(train)?, eval: build(test)? })
}
