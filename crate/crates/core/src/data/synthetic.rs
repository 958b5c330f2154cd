use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Noisy copies of one random template per class.
///
/// Every class gets a uniform random byte image; a sample is its class
/// template plus Gaussian noise of `noise` grey levels, clamped to
/// `[0, 255]`. With moderate noise the classes are linearly separable with
/// a wide margin.
pub fn template_dataset(
    count: usize,
    classes: usize,
    dims: [usize; 3],
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::arg("need at least two classes"));
    }
    let per = dims.iter().product::<usize>();
    let root = Rng::new(seed);
    let mut trng = root.derive(0);
    let templates: Vec<Vec<u8>> = (0..classes)
        .map(|_| {
            let mut t = vec![0u8; per];
            trng.fill_bytes_uniform(&mut t);
            t
        })
        .collect();
    let mut rng = root.derive(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let mut images = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let y = rng.below(classes);
        let eps = if noise > 0.0 {
            rng.gaussian::<f64>(noise, [1, 1, 1, per])?.into_vec()
        } else {
            vec![0.0; per]
        };
        images.extend(
            templates[y]
                .iter()
                .zip(eps)
                .map(|(&t, e)| (t as f64 + e).round().clamp(0.0, 255.0) as u8),
        );
        labels.push(y);
    }
    Dataset::new(images, dims, labels, split, classes)
}
