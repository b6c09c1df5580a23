//! Image datasets: directory-tree ingestion, a synthetic grating dataset,
//! and deterministic batching.

mod directory;
mod synthetic;

pub use directory::{decode_image, load_directory_dataset, read_image, save_image, DatasetIndex, IMAGE_EXTENSIONS};
pub use synthetic::{make_synthetic_dataset, synthetic_image, synthetic_set, SyntheticClass, SyntheticConfig};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derived_rng, TAG_SHUFFLE};
use crate::vone_block::ImageBatch;

/// Decoded images `[3, H, W]` in `[0, 1]` with dense labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSet {
    pub images: Vec<Array3<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", self.images.len(), self.labels.len())));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::LabelOutOfRange { label: l, num_classes: self.num_classes() });
        }
        if let Some(first) = self.images.first() {
            if let Some(i) = self.images.iter().position(|im| im.dim() != first.dim()) {
                return Err(Error::Shape(format!("image {i} is {:?}, expected {:?}", self.images[i].dim(), first.dim())));
            }
        }
        Ok(())
    }

    /// Stacks the selected images into a raw (unnormalized) batch.
    pub fn batch(&self, idx: &[usize]) -> Result<ImageBatch> {
        let refs: Vec<&Array3<f32>> = idx.iter().map(|&i| &self.images[i]).collect();
        ImageBatch::stack(&refs, false)
    }
}

/// Index order for one epoch, split into batches; the last batch may be
/// short. The permutation depends only on `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut derived_rng(seed, TAG_SHUFFLE, epoch, 0));
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Normalized batches with their labels, covering the set once.
pub fn batch_iterator(
    set: &ImageSet,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> impl Iterator<Item = (ImageBatch, Vec<usize>)> + '_ {
    batch_indices(set.len(), batch_size, shuffle_seed, epoch, true).into_iter().map(move |idx| {
        let (c, h, w) = set.images[idx[0]].dim();
        let mut data = Array4::<f32>::zeros((idx.len(), c, h, w));
        for (k, &i) in idx.iter().enumerate() {
            data.index_axis_mut(Axis(0), k).assign(&set.images[i]);
        }
        let labels = idx.iter().map(|&i| set.labels[i]).collect();
        (ImageBatch::raw(data).normalize(), labels)
    })
}
