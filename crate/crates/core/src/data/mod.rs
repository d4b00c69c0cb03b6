//! Datasets: IDX and image-directory ingestion, normalization, batching,
//! two-class composites and a procedural glyph corpus.

mod batch;
mod compose;
mod idx;
mod imagedir;
mod pnm;
mod synth;

use std::io;

use thiserror::Error;

use crate::engine::{EngineError, Real, Tensor};
use crate::model::Normalization;

pub use batch::{batch_iterator, BatchIter};
pub use compose::{build_composite_dataset, Composite, CompositeSplit};
pub use idx::{
    dataset_from_idx, encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx,
    IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use imagedir::{load_image, load_image_dir, ImageDirOptions, ImageDirReport};
pub use pnm::{decode_pnm, PnmImage};
pub use synth::{glyph_dataset, GLYPH_NAMES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic 0x{got:08X}, expected 0x{expected:08X}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("class directory `{0}` has no decodable images")]
    EmptyClass(String),
    #[error("image decode: {0}")]
    Image(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Images `[N, C, H, W]` with optional labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, classes: usize) -> Result<Self, DataError> {
        if images.ndim() != 4 {
            return Err(DataError::Invalid(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if !images.all_finite() {
            return Err(DataError::Invalid("images contain non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(DataError::CountMismatch { images: images.shape()[0], labels: l.len() });
            }
            if let Some(bad) = l.iter().find(|&&v| v >= classes) {
                return Err(DataError::Invalid(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(Self { images, labels, classes })
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.images.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn len(&self) -> usize {
        self.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Label of sample `i`; errors when the dataset is unlabeled.
    pub fn label(&self, i: usize) -> Result<usize, DataError> {
        self.labels
            .as_ref()
            .map(|l| l[i])
            .ok_or_else(|| DataError::Invalid("dataset has no labels".into()))
    }

    /// Per-channel mean and standard deviation over all samples.
    pub fn normalization_stats(&self) -> Normalization {
        let [n, c, h, w] = self.dims();
        let area = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * area;
                for &v in &self.images.data()[off..off + area] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (n * area).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Normalization { mean, std }
    }

    /// Applies frozen per-channel statistics.
    pub fn normalized(&self, stats: &Normalization) -> Result<Self, DataError> {
        let [_, c, h, w] = self.dims();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(DataError::Invalid(format!(
                "normalization has {} channels, images have {c}",
                stats.mean.len()
            )));
        }
        let area = h * w;
        let mut images = self.images.clone();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / area) % c;
            *v = ((*v as f64 - stats.mean[ch]) / stats.std[ch]) as f32;
        }
        Ok(Self { images, labels: self.labels.clone(), classes: self.classes })
    }

    /// Samples at `ids`, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Self {
        let images = self.images.select_outer(ids);
        let labels = self.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect());
        Self { images, labels, classes: self.classes }
    }

    /// `(images, labels)` for `ids`, converted to `T`.
    pub fn batch<T: Real>(&self, ids: &[usize]) -> (Tensor<T>, Option<Vec<usize>>) {
        let sub = self.subset(ids);
        (sub.images.cast(), sub.labels)
    }

    /// Sample ids of class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        match &self.labels {
            Some(l) => l.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect(),
            None => Vec::new(),
        }
    }

    /// Splits off the first `n` samples.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Order-sensitive fingerprint of shape, pixels and labels (FNV-1a).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for d in self.dims() {
            eat(&(d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            eat(&v.to_le_bytes());
        }
        for l in self.labels.iter().flatten() {
            eat(&(*l as u64).to_le_bytes());
        }
        h
    }
}
