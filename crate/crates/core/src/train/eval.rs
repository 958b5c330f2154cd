use crate::data::{eval_batches, make_minibatches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::BnMode;
use crate::tensor::{Real, Rng, Tensor4};

/// Position of `label` when classes are sorted by descending logit, ties
/// broken by lower index.
pub fn label_rank<T: Real>(logits: &[T], label: usize) -> usize {
    let y = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

/// Miss counts `(top1, top5)` for a batch of `(N, classes, 1, 1)` logits.
pub fn topk_misses<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.n() != labels.len() {
        return Err(Error::shape(format!(
            "{} logits rows for {} labels",
            logits.n(),
            labels.len()
        )));
    }
    let classes = logits.sample_len();
    let mut miss = (0, 0);
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::Range(format!("label {y} outside [0, {classes})")));
        }
        let r = label_rank(row, y);
        miss.0 += usize::from(r >= 1);
        miss.1 += usize::from(r >= 5);
    }
    Ok(miss)
}

/// Top-1 and top-5 error of inference-mode predictions on single center views.
pub fn evaluate<T: Real>(net: &mut Network<T>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let mut miss = (0, 0);
    for (x, y) in eval_batches::<T>(ds, batch) {
        let logits = net.forward(&x, BnMode::Infer)?;
        let m = topk_misses(&logits, &y)?;
        miss.0 += m.0;
        miss.1 += m.1;
    }
    let n = ds.len() as f64;
    Ok((miss.0 as f64 / n, miss.1 as f64 / n))
}

/// Sets every batch-norm layer's inference moments to the mean, over one
/// pass of full training batches with training augmentation, of its
/// per-batch mean and biased variance. Weights are not touched.
pub fn recompute_bn_moments<T: Real>(
    net: &mut Network<T>,
    ds: &Dataset,
    augment: Option<&AugmentConfig>,
    batch: usize,
    rng: &Rng,
) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::arg("cannot recompute moments on an empty dataset"));
    }
    let batches = make_minibatches::<T>(ds, batch, rng, augment)?;
    for bn in net.bn_layers_mut() {
        bn.begin_calibration();
    }
    for (x, _) in batches {
        net.forward(&x, BnMode::Calibrate)?;
    }
    for bn in net.bn_layers_mut() {
        bn.finish_calibration()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_break_ties_by_index() {
        assert_eq!(label_rank(&[1.0f32, 3.0, 2.0], 1), 0);
        assert_eq!(label_rank(&[1.0f32, 3.0, 2.0], 0), 2);
        assert_eq!(label_rank(&[2.0f32, 2.0, 2.0], 0), 0);
        assert_eq!(label_rank(&[2.0f32, 2.0, 2.0], 2), 2);
    }

    #[test]
    fn topk_counts() {
        let logits = Tensor4::<f64>::from_fn([2, 6, 1, 1], |n, c, _, _| if n == 0 { c as f64 } else { -(c as f64) });
        // row 0 ranks class 5 first, row 1 ranks class 0 first
        assert_eq!(topk_misses(&logits, &[5, 0]).unwrap(), (0, 0));
        assert_eq!(topk_misses(&logits, &[0, 5]).unwrap(), (2, 2));
        assert_eq!(topk_misses(&logits, &[1, 3]).unwrap(), (2, 0));
        assert!(topk_misses(&logits, &[6, 0]).is_err());
    }
}
