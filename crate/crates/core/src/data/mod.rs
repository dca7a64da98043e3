//! Dataset ingestion, splitting, the synthetic face generator and batching.

pub mod image;
pub mod manifest;
pub mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use manifest::{split_counts, split_dataset, Entry, Manifest, Split};

/// One split held in memory, preprocessed to `[3, side, side]` per image.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub side: usize,
    data: Vec<f64>,
}

/// A batch of images in `[−1, 1]` with their ids.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub ids: Vec<String>,
    pub images: Tensor,
}

impl ImageBatch {
    pub fn new(ids: Vec<String>, images: Tensor) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != ids.len() {
            return Err(Error::shape("ImageBatch", format!("{} ids for {n} images", ids.len())));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { ids, images })
    }
}

impl ImageSet {
    pub fn from_images(ids: Vec<String>, labels: Vec<usize>, images: &Tensor) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 || h != w || ids.len() != n || labels.len() != n {
            return Err(Error::shape(
                "ImageSet",
                format!("need [N, 3, S, S] with N ids/labels, got {:?}", images.shape()),
            ));
        }
        Ok(Self { ids, labels, side: h, data: images.data().to_vec() })
    }

    /// Loads every image of `split` listed in the manifest under `root`.
    pub fn load(root: &Path, manifest: &Manifest, split: Split, side: usize) -> Result<Self> {
        let mut set = Self { ids: Vec::new(), labels: Vec::new(), side, data: Vec::new() };
        for e in manifest.ids(split) {
            let t = image::load_and_preprocess(&root.join(&e.path), side)?;
            set.ids.push(e.id.clone());
            set.labels.push(e.label);
            set.data.extend_from_slice(t.data());
        }
        if set.ids.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset at {} has no {split} images", root.display())));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn image_len(&self) -> usize {
        3 * self.side * self.side
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        let images = Tensor::new(vec![indices.len(), 3, self.side, self.side], data)?;
        ImageBatch::new(indices.iter().map(|&i| self.ids[i].clone()).collect(), images)
    }

    pub fn all(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), 3, self.side, self.side], self.data.clone())
    }

    /// Deterministic batches for one epoch (see [`epoch_batches`]).
    pub fn batch_iter(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        drop_last: bool,
    ) -> impl Iterator<Item = Result<ImageBatch>> + '_ {
        epoch_batches(self.len(), batch_size, seed, epoch, drop_last).into_iter().map(move |idx| self.batch(&idx))
    }
}

/// The permutation of `0..n` used for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, "epoch", epoch).shuffle(&mut order);
    order
}

/// Splits the epoch permutation into batches. Training drops the final
/// partial batch; evaluation keeps it.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64, drop_last: bool) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch)
        .chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Indices of the training batch consumed at global `step`, so a resumed
/// run sees exactly the batches an uninterrupted one would.
pub fn step_batch(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} must lie in 1..={n} (training split size)"
        )));
    }
    let per_epoch = (n / batch_size) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let order = epoch_order(n, seed, epoch);
    Ok(order[k * batch_size..(k + 1) * batch_size].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_equal_to_split_gives_one_batch() {
        let b = epoch_batches(16, 16, 0, 0, true);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 16);
    }

    #[test]
    fn partial_batch_policy() {
        assert_eq!(epoch_batches(10, 4, 1, 0, true).len(), 2);
        let eval = epoch_batches(10, 4, 1, 0, false);
        assert_eq!(eval.len(), 3);
        let mut all: Vec<usize> = eval.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn order_depends_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(50, 3, 2), epoch_order(50, 3, 2));
        assert_ne!(epoch_order(50, 3, 2), epoch_order(50, 3, 3));
        assert_ne!(epoch_order(50, 3, 2), epoch_order(50, 4, 2));
    }

    #[test]
    fn step_batches_walk_epochs() {
        let per_epoch = epoch_batches(10, 3, 7, 1, true);
        for (k, b) in per_epoch.iter().enumerate() {
            assert_eq!(&step_batch(10, 3, 7, 3 + k as u64).unwrap(), b);
        }
        assert!(step_batch(10, 11, 7, 0).is_err());
        assert!(step_batch(10, 0, 7, 0).is_err());
    }

    #[test]
    fn image_batch_enforces_range() {
        assert!(ImageBatch::new(vec!["a".into()], Tensor::full(vec![1, 3, 2, 2], 1.0)).is_ok());
        assert!(ImageBatch::new(vec!["a".into()], Tensor::full(vec![1, 3, 2, 2], 1.5)).is_err());
        assert!(ImageBatch::new(vec![], Tensor::zeros(vec![1, 3, 2, 2])).is_err());
    }
}
