//! MNIST ingestion: IDX file parsing and deterministic minibatching.
//!
//! Images are kept as one `[n, 1, h, w]` `f32` tensor with pixels scaled to
//! `[0, 1]` (raw byte / 255); no mean/std normalization is applied anywhere.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// IDX magic for rank-3 unsigned-byte files (images).
const IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic for rank-1 unsigned-byte files (labels).
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Which split a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Canonical IDX file names for this split.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// A labelled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, 1, h, w]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
}

/// Big-endian u32 at `offset`, with truncation reporting.
fn read_be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: offset + 4 - bytes.len(),
            available: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_be_u32(path, bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

impl Dataset {
    /// Parse a raw IDX image/label file pair.
    pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
        let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
        let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

        check_magic(images_path, &img_bytes, IMAGES_MAGIC)?;
        let n = read_be_u32(images_path, &img_bytes, 4)? as usize;
        let h = read_be_u32(images_path, &img_bytes, 8)? as usize;
        let w = read_be_u32(images_path, &img_bytes, 12)? as usize;
        let pixel_count = n * h * w;
        if img_bytes.len() < 16 + pixel_count {
            return Err(Error::Truncated {
                path: images_path.to_path_buf(),
                needed: 16 + pixel_count - img_bytes.len(),
                available: img_bytes.len(),
            });
        }

        check_magic(labels_path, &lbl_bytes, LABELS_MAGIC)?;
        let n_labels = read_be_u32(labels_path, &lbl_bytes, 4)? as usize;
        if lbl_bytes.len() < 8 + n_labels {
            return Err(Error::Truncated {
                path: labels_path.to_path_buf(),
                needed: 8 + n_labels - lbl_bytes.len(),
                available: lbl_bytes.len(),
            });
        }
        if n_labels != n {
            return Err(Error::CountMismatch {
                path: labels_path.to_path_buf(),
                images: n,
                labels: n_labels,
            });
        }

        let data: Vec<f32> = img_bytes[16..16 + pixel_count]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        let images = Tensor::new(vec![n, 1, h, w], data)?;
        let labels = lbl_bytes[8..8 + n_labels].to_vec();
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    /// Load a split from a directory containing the canonical file names.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Dataset> {
        let (images, labels) = split.file_names();
        Dataset::load_idx(&dir.join(images), &dir.join(labels), split)
    }

    /// Build a dataset directly from tensors (synthetic data in tests).
    pub fn from_parts(images: Tensor<f32>, labels: Vec<u8>, split: Split) -> Result<Dataset> {
        if images.shape().len() != 4 {
            return Err(Error::invalid(
                "Dataset::from_parts",
                format!("images must be rank 4, got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                path: "<memory>".into(),
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image extent `(h, w)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Copy of image `i` as a `[1, 1, h, w]` tensor.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let (h, w) = self.image_size();
        let plane = h * w;
        Tensor::new(
            vec![1, 1, h, w],
            self.images.data()[i * plane..(i + 1) * plane].to_vec(),
        )
        .expect("image slice")
    }

    /// Gather `indices` into a `[len, 1, h, w]` batch plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (h, w) = self.image_size();
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i] as usize);
        }
        (
            Tensor::new(vec![indices.len(), 1, h, w], data).expect("gather"),
            labels,
        )
    }

    /// Deterministic shuffled minibatch stream. See [`BatchStream`].
    pub fn batches(&self, batch: usize, seed: u64) -> Result<BatchStream<'_>> {
        BatchStream::new(self, batch, seed)
    }
}

/// One minibatch: images `[m, 1, h, w]` and labels as class indices.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset indices the batch was gathered from.
    pub indices: Vec<usize>,
}

/// Endless stream of shuffled, fixed-size minibatches.
///
/// Each epoch is a fresh Fisher–Yates shuffle of all indices drawn from a
/// ChaCha8 stream seeded by `(seed, "batches")`; the stream then yields
/// consecutive chunks of `batch` indices. A trailing chunk smaller than
/// `batch` is dropped, so batch shapes are constant and every epoch visits
/// `len / batch * batch` examples, each at most once.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<u32>,
    cursor: usize,
    epoch: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > data.len() {
            return Err(Error::invalid(
                "BatchStream",
                format!("batch size {batch} invalid for dataset of {}", data.len()),
            ));
        }
        let mut stream = BatchStream {
            data,
            batch,
            rng: rng::stream(seed, "batches"),
            order: (0..data.len() as u32).collect(),
            cursor: 0,
            epoch: 0,
        };
        stream.order.shuffle(&mut stream.rng);
        Ok(stream)
    }

    /// Batches per epoch (last partial chunk dropped).
    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch
    }

    /// Zero-based epoch of the *next* batch to be yielded.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next minibatch, reshuffling at epoch boundaries.
    pub fn next_batch(&mut self) -> Batch {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let indices: Vec<usize> = self.order[self.cursor..self.cursor + self.batch]
            .iter()
            .map(|&i| i as usize)
            .collect();
        self.cursor += self.batch;
        let (images, labels) = self.data.gather(&indices);
        Batch {
            images,
            labels,
            indices,
        }
    }
}
