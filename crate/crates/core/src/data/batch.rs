use rayon::prelude::*;

use super::augment::augment;
use super::{AugmentConfig, Dataset, Image};
use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor4};

/// Full batches per epoch; the short remainder is dropped.
pub fn batch_count(len: usize, batch: usize) -> usize {
    len.checked_div(batch).unwrap_or(0)
}

/// Stacks images into `(N, C, H, W)` with pixels scaled by `1/255`.
pub fn to_tensor<T: Real>(images: &[Image]) -> Result<Tensor4<T>> {
    let first = images.first().ok_or_else(|| Error::arg("no images to stack"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let inv = T::cast(1.0 / 255.0);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape("images in a batch must share dimensions"));
        }
        data.extend(img.data.iter().map(|&b| T::cast(b as f64) * inv));
    }
    Tensor4::from_vec([images.len(), c, h, w], data)
}

/// One epoch of shuffled, augmented minibatches.
///
/// Sample `j` of the epoch is augmented with `rng.derive(j)`, so the stream
/// depends only on the epoch generator, not on thread count.
pub struct MiniBatches<'a, T> {
    ds: &'a Dataset,
    batch: usize,
    order: Vec<usize>,
    rng: Rng,
    augment: Option<AugmentConfig>,
    next: usize,
    _real: std::marker::PhantomData<T>,
}

pub fn make_minibatches<'a, T: Real>(
    ds: &'a Dataset,
    batch: usize,
    rng: &Rng,
    augment: Option<&AugmentConfig>,
) -> Result<MiniBatches<'a, T>> {
    if ds.is_empty() {
        return Err(Error::arg("cannot batch an empty dataset"));
    }
    if batch == 0 || batch > ds.len() {
        return Err(Error::arg(format!("batch size {batch} must be in [1, {}]", ds.len())));
    }
    let augment = augment.filter(|a| !a.is_identity()).cloned();
    if let Some(cfg) = &augment {
        let [_, h, w] = ds.image_dims();
        let (ch, cw) = cfg.crop.unwrap_or((h, w));
        if ch == 0 || cw == 0 || ch > h + 2 * cfg.pad || cw > w + 2 * cfg.pad {
            return Err(Error::arg(format!("crop {:?} does not fit padded images", (ch, cw))));
        }
    }
    let mut order_rng = rng.derive(u64::MAX);
    Ok(MiniBatches {
        ds,
        batch,
        order: order_rng.permutation(ds.len()),
        rng: rng.clone(),
        augment,
        next: 0,
        _real: std::marker::PhantomData,
    })
}

impl<T: Real> MiniBatches<'_, T> {
    /// Batches in the whole epoch, including those already yielded.
    pub fn total(&self) -> usize {
        batch_count(self.ds.len(), self.batch)
    }

    /// Dataset indices of batch `b`.
    pub fn batch_indices(&self, b: usize) -> &[usize] {
        &self.order[b * self.batch..(b + 1) * self.batch]
    }

    pub fn permutation(&self) -> &[usize] {
        &self.order
    }

    fn build(&self, b: usize) -> (Tensor4<T>, Vec<usize>) {
        let base = b * self.batch;
        let idx = self.batch_indices(b);
        let images: Vec<Image> = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let img = self.ds.image(i);
                match &self.augment {
                    Some(cfg) => augment(&img, cfg, &mut self.rng.derive((base + j) as u64))
                        .expect("augmentation validated at construction"),
                    None => img,
                }
            })
            .collect();
        let labels = idx.iter().map(|&i| self.ds.label(i)).collect();
        (to_tensor(&images).expect("batch is non-empty"), labels)
    }
}

impl<T: Real> Iterator for MiniBatches<'_, T> {
    type Item = (Tensor4<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total() {
            return None;
        }
        let out = self.build(self.next);
        self.next += 1;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total() - self.next;
        (left, Some(left))
    }
}

impl<T: Real> ExactSizeIterator for MiniBatches<'_, T> {}

/// Dataset order, no augmentation, final short batch kept.
pub fn eval_batches<T: Real>(ds: &Dataset, batch: usize) -> impl Iterator<Item = (Tensor4<T>, Vec<usize>)> + '_ {
    let batch = batch.max(1);
    (0..ds.len().div_ceil(batch)).map(move |b| {
        let range = b * batch..((b + 1) * batch).min(ds.len());
        let images: Vec<Image> = range.clone().map(|i| ds.image(i)).collect();
        let labels = ds.labels()[range].to_vec();
        (to_tensor(&images).expect("batch is non-empty"), labels)
    })
}
