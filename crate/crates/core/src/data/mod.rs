//! Dataset ingestion, augmentation and minibatching.

mod augment;
mod batch;
mod formats;
mod synthetic;

pub use augment::{
    augment, cutout, cutout_at, cutout_box, cutout_center_range, hflip, pad_crop_at, random_pad_crop, AugmentConfig,
    FLIP_PROBABILITY,
};
pub use batch::{batch_count, eval_batches, make_minibatches, to_tensor, MiniBatches};
pub use formats::{
    load_cifar, load_cifar_with, load_mnist, load_mnist_with, parse_cifar_records, parse_idx_images, parse_idx_labels,
    CifarFiles, CifarVariant, MnistFiles,
};
pub use synthetic::template_dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One `C×H×W` image of raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image buffer of {} bytes does not match {channels}×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: u8) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> u8 {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: u8) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }
}

/// Images stored contiguously as `(count, C, H, W)` bytes.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<u8>,
    image_dims: [usize; 3],
    labels: Vec<usize>,
    split: Split,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        image_dims: [usize; 3],
        labels: Vec<usize>,
        split: Split,
        class_count: usize,
    ) -> Result<Self> {
        let per = image_dims.iter().product::<usize>();
        if per == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} image bytes do not hold {} images of {:?}",
                images.len(),
                labels.len(),
                image_dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Range(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self {
            images,
            image_dims,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = self.image_dims.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn image(&self, i: usize) -> Image {
        let [c, h, w] = self.image_dims;
        Image {
            channels: c,
            height: h,
            width: w,
            data: self.image_bytes(i).to_vec(),
        }
    }

    /// The first `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.image_dims.iter().product::<usize>();
        Dataset {
            images: self.images[..n * per].to_vec(),
            image_dims: self.image_dims,
            labels: self.labels[..n].to_vec(),
            split: self.split,
            class_count: self.class_count,
        }
    }
}
