//! Dataset ingestion, augmentation, image IO and the synthetic benchmark.

pub mod augment;
pub mod image;
pub mod market;
pub mod synth;

pub use augment::{augment, AugConfig};
pub use image::{load_image, resize, write_image};
pub use market::{
    format_market_name, load_dataset, parse_market_name, DatasetSplits, MarketName,
    SampleRecord, Split,
};
pub use synth::{generate_synthetic, Corruption, SynthDataset, SynthSpec};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory images with identity labels, ready for training or retrieval.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    /// Person id as recorded in the source.
    pub pids: Vec<i64>,
    pub camids: Vec<u32>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Tensor, pid: i64, camid: u32) {
        self.images.push(image);
        self.pids.push(pid);
        self.camids.push(camid);
    }

    /// Dense class labels `0..C` assigned in ascending pid order.
    pub fn class_labels(&self) -> (Vec<usize>, usize) {
        let mut map = BTreeMap::new();
        for &p in &self.pids {
            map.entry(p).or_insert(0usize);
        }
        for (i, v) in map.values_mut().enumerate() {
            *v = i;
        }
        (self.pids.iter().map(|p| map[p]).collect(), map.len())
    }

    pub fn from_synth(ds: &SynthDataset, split: Split) -> Self {
        let mut set = ImageSet::default();
        for s in ds.split(split) {
            set.push(s.image.clone(), s.pid as i64, s.camid);
        }
        set
    }

    /// Loads and resizes every record to `h x w`.
    pub fn from_records(records: &[SampleRecord], h: usize, w: usize) -> Result<Self> {
        let mut set = ImageSet::default();
        for r in records {
            let img = load_image(&r.image_path)?;
            let img = if img.shape()[1..] == [h, w] {
                img
            } else {
                resize(&img, h, w)?
            };
            set.push(img, r.pid, r.camid);
        }
        Ok(set)
    }

    /// Per-channel pixel mean, used as the random-erasing fill.
    pub fn channel_mean(&self) -> Result<[f64; 3]> {
        if self.images.is_empty() {
            return Err(Error::Usage("channel mean of an empty set".into()));
        }
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for img in &self.images {
            let plane = img.numel() / 3;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            count += plane;
        }
        Ok(acc.map(|a| a / count as f64))
    }
}
