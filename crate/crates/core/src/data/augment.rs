//! Flip, random-value pad-and-crop, and cutout on raw byte images.
//!
//! Padding and cutout fill use i.i.d. uniform integers in `[0, 255]`.

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const FLIP_PROBABILITY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub pad: usize,
    /// Output `(H, W)`; `None` keeps the input size.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
    /// Side of the square cutout patch; 0 disables cutout.
    #[serde(default)]
    pub cutout_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentConfig {
    /// The light CIFAR augmentation, optionally with 18×18 cutout.
    pub fn cifar(cutout: bool, seed: u64) -> Self {
        Self {
            hflip: true,
            pad: 4,
            crop: None,
            cutout_size: if cutout { 18 } else { 0 },
            seed,
        }
    }

    /// No augmentation (MNIST).
    pub fn none() -> Self {
        Self {
            hflip: false,
            pad: 0,
            crop: None,
            cutout_size: 0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.pad == 0 && self.crop.is_none() && self.cutout_size == 0
    }
}

/// Mirrors columns with probability `p`.
pub fn hflip(img: &Image, p: f64, rng: &mut Rng) -> Image {
    if !rng.bernoulli(p) {
        return img.clone();
    }
    let mut out = img.clone();
    for row in out.data.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

/// Pads every side by `pad` random bytes and crops `crop` at a uniform
/// offset in `[0, 2·pad + H − crop_h] × [0, 2·pad + W − crop_w]`.
pub fn random_pad_crop(img: &Image, pad: usize, crop: (usize, usize), rng: &mut Rng) -> Result<Image> {
    let (ph, pw) = (img.height + 2 * pad, img.width + 2 * pad);
    if crop.0 == 0 || crop.1 == 0 || crop.0 > ph || crop.1 > pw {
        return Err(Error::arg(format!("crop {crop:?} does not fit padded {ph}×{pw}")));
    }
    let dy = rng.below(ph - crop.0 + 1);
    let dx = rng.below(pw - crop.1 + 1);
    pad_crop_at(img, pad, crop, (dy, dx), rng)
}

/// [`random_pad_crop`] with an explicit top-left offset into the padded image.
pub fn pad_crop_at(
    img: &Image,
    pad: usize,
    crop: (usize, usize),
    offset: (usize, usize),
    rng: &mut Rng,
) -> Result<Image> {
    let (ph, pw) = (img.height + 2 * pad, img.width + 2 * pad);
    if offset.0 + crop.0 > ph || offset.1 + crop.1 > pw {
        return Err(Error::arg(format!(
            "crop {crop:?} at {offset:?} exceeds padded {ph}×{pw}"
        )));
    }
    let mut out = Image::filled(img.channels, crop.0, crop.1, 0);
    rng.fill_bytes_uniform(&mut out.data);
    for c in 0..img.channels {
        for oh in 0..crop.0 {
            let sh = (oh + offset.0) as isize - pad as isize;
            if sh < 0 || sh as usize >= img.height {
                continue;
            }
            for ow in 0..crop.1 {
                let sw = (ow + offset.1) as isize - pad as isize;
                if sw >= 0 && (sw as usize) < img.width {
                    out.set(c, oh, ow, img.at(c, sh as usize, sw as usize));
                }
            }
        }
    }
    Ok(out)
}

/// Inclusive range of patch centers along an axis of length `len` for which
/// a `size` patch overlaps the image. Drawing centers uniformly from this
/// range covers every pixel equally often.
pub fn cutout_center_range(len: usize, size: usize) -> (isize, isize) {
    let half = (size / 2) as isize;
    (half - size as isize + 1, len as isize - 1 + half)
}

/// The in-image part `(row0, row1, col0, col1)` (half-open) of a `size`
/// patch centered at `center`, whose box spans `[c − size/2, c − size/2 + size)`.
pub fn cutout_box(
    height: usize,
    width: usize,
    size: usize,
    center: (isize, isize),
) -> Option<(usize, usize, usize, usize)> {
    let clip = |c: isize, len: usize| {
        let lo = c - (size / 2) as isize;
        let a = lo.clamp(0, len as isize) as usize;
        let b = (lo + size as isize).clamp(0, len as isize) as usize;
        (a, b)
    };
    let (r0, r1) = clip(center.0, height);
    let (c0, c1) = clip(center.1, width);
    (r0 < r1 && c0 < c1).then_some((r0, r1, c0, c1))
}

/// Replaces a randomly placed `size×size` patch (clipped to the image) with
/// random bytes in every channel.
pub fn cutout(img: &Image, size: usize, rng: &mut Rng) -> Image {
    if size == 0 {
        return img.clone();
    }
    let (rlo, rhi) = cutout_center_range(img.height, size);
    let (clo, chi) = cutout_center_range(img.width, size);
    let cy = rlo + rng.below((rhi - rlo + 1) as usize) as isize;
    let cx = clo + rng.below((chi - clo + 1) as usize) as isize;
    cutout_at(img, size, (cy, cx), rng)
}

/// [`cutout`] at an explicit patch center.
pub fn cutout_at(img: &Image, size: usize, center: (isize, isize), rng: &mut Rng) -> Image {
    let mut out = img.clone();
    if size == 0 {
        return out;
    }
    if let Some((r0, r1, c0, c1)) = cutout_box(img.height, img.width, size, center) {
        let mut fill = vec![0u8; c1 - c0];
        for c in 0..img.channels {
            for h in r0..r1 {
                rng.fill_bytes_uniform(&mut fill);
                let start = (c * img.height + h) * img.width;
                out.data[start + c0..start + c1].copy_from_slice(&fill);
            }
        }
    }
    out
}

/// flip → pad-crop → cutout, each stage skipped when disabled.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    let mut out = if cfg.hflip {
        hflip(img, FLIP_PROBABILITY, rng)
    } else {
        img.clone()
    };
    let crop = cfg.crop.unwrap_or((img.height, img.width));
    if cfg.pad > 0 || crop != (img.height, img.width) {
        out = random_pad_crop(&out, cfg.pad, crop, rng)?;
    }
    if cfg.cutout_size > 0 {
        out = cutout(&out, cfg.cutout_size, rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(c: usize, h: usize, w: usize) -> Image {
        let data = (0..c * h * w).map(|i| (i % 251) as u8).collect();
        Image::new(c, h, w, data).unwrap()
    }

    fn changed(a: &Image, b: &Image) -> usize {
        (0..a.height)
            .flat_map(|h| (0..a.width).map(move |w| (h, w)))
            .filter(|&(h, w)| a.at(0, h, w) != b.at(0, h, w))
            .count()
    }

    #[test]
    fn pad_crop_offsets() {
        let img = labeled(3, 32, 32);
        let mut rng = Rng::new(1);
        assert_eq!(random_pad_crop(&img, 0, (32, 32), &mut rng).unwrap(), img);
        assert_eq!(pad_crop_at(&img, 4, (32, 32), (4, 4), &mut rng).unwrap(), img);

        let out = pad_crop_at(&img, 4, (32, 32), (0, 0), &mut rng).unwrap();
        for c in 0..3 {
            for h in 4..32 {
                for w in 4..32 {
                    assert_eq!(out.at(c, h, w), img.at(c, h - 4, w - 4));
                }
            }
        }
        assert!(pad_crop_at(&img, 4, (32, 32), (9, 0), &mut rng).is_err());
    }

    #[test]
    fn cutout_counts() {
        let img = Image::filled(1, 32, 32, 0);
        let mut rng = Rng::new(2);
        assert_eq!(cutout(&img, 0, &mut rng), img);
        assert_eq!(cutout_box(32, 32, 18, (16, 16)), Some((7, 25, 7, 25)));
        assert_eq!(cutout_box(32, 32, 18, (0, 0)), Some((0, 9, 0, 9)));
        assert_eq!(cutout_box(32, 32, 18, (-9, 5)), None);
        // fill values can coincide with the original, so count via the box
        let (r0, r1, c0, c1) = cutout_box(32, 32, 18, (16, 16)).unwrap();
        assert_eq!((r1 - r0) * (c1 - c0), 324);
        let out = cutout_at(&img, 18, (16, 16), &mut rng);
        assert!(changed(&img, &out) <= 324);
        assert!(changed(&img, &out) > 300);
    }

    #[test]
    fn center_range_gives_equal_coverage() {
        for (len, size) in [(32, 18), (10, 5), (7, 1), (4, 6)] {
            let (lo, hi) = cutout_center_range(len, size);
            let mut hits = vec![0usize; len];
            for c in lo..=hi {
                if let Some((a, b, _, _)) = cutout_box(len, 1, size, (c, 0)) {
                    hits[a..b].iter_mut().for_each(|h| *h += 1);
                }
            }
            assert!(hits.iter().all(|&h| h == size), "{len} {size}: {hits:?}");
            assert!(cutout_box(len, 1, size, (lo - 1, 0)).is_none());
            assert!(cutout_box(len, 1, size, (hi + 1, 0)).is_none());
        }
    }

    #[test]
    fn flip_probabilities() {
        let img = labeled(2, 5, 7);
        let mut rng = Rng::new(3);
        assert_eq!(hflip(&img, 0.0, &mut rng), img);
        let twice = hflip(&hflip(&img, 1.0, &mut rng), 1.0, &mut rng);
        assert_eq!(twice, img);
        let once = hflip(&img, 1.0, &mut rng);
        assert_eq!(once.at(1, 2, 0), img.at(1, 2, 6));
    }

    #[test]
    fn augmentation_keeps_dims_and_is_reproducible() {
        let img = labeled(3, 32, 32);
        let cfg = AugmentConfig::cifar(true, 0);
        let a = augment(&img, &cfg, &mut Rng::new(9)).unwrap();
        let b = augment(&img, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.channels, a.height, a.width), (3, 32, 32));
        assert_eq!(augment(&img, &AugmentConfig::none(), &mut Rng::new(9)).unwrap(), img);
    }
}
