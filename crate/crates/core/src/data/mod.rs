//! Datasets, file formats, augmentation and batching.

mod augment;
mod formats;

pub use augment::{
    augment_and_normalize, crop_with_offsets, denormalize, hflip, normalize, AugmentConfig, CIFAR_MEAN, CIFAR_STD,
    MNIST_MEAN, MNIST_STD,
};
pub use formats::{
    encode_cifar_records, encode_idx_dataset, encode_idx_images, encode_idx_labels, load_cifar10_bin,
    load_cifar10_dir, load_mnist_dir, load_mnist_idx, parse_cifar_records, parse_idx_images, parse_idx_labels,
    CIFAR_RECORD_BYTES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copies the listed samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }
}

/// Partitions `0..n` into batches, shuffled when requested; the last partial
/// batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over `(images, labels)` batches of one epoch.
pub struct Batches<'a> {
    ds: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        Some(self.ds.gather(&idx).expect("indices come from the dataset range"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

pub fn batch_iterator<'a>(ds: &'a Dataset, batch_size: usize, shuffle: bool, rng: &mut impl Rng) -> Result<Batches<'a>> {
    Ok(Batches {
        ds,
        batches: batch_indices(ds.len(), batch_size, shuffle, rng)?.into_iter(),
    })
}
