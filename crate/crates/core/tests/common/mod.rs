#![allow(dead_code)]

use std::path::PathBuf;

use bitweight_core::data::{cutout, Image};
use bitweight_core::nn::{relu, relu_backward, softmax_cross_entropy, BatchNorm, BnMode};
use bitweight_core::tensor::{
    avg_pool, avg_pool_backward, conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, Rng,
    Tensor4,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const FD_STEP: f64 = 1e-6;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        d / den
    }
}

/// Central differences of `Σ r·f(x)` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor4<f64>, r: &Tensor4<f64>, mut f: impl FnMut(&Tensor4<f64>) -> Tensor4<f64>) -> Vec<f64> {
    let dot = |y: &Tensor4<f64>| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let mut xp = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.data()[i];
            xp.data_mut()[i] = v + FD_STEP;
            let up = dot(&f(&xp));
            xp.data_mut()[i] = v - FD_STEP;
            let down = dot(&f(&xp));
            xp.data_mut()[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn small_dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Worst relative error over `trials` random conv instances (input and weight gradients).
pub fn conv_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng::new(seed).derive(t as u64);
        let n = small_dim(&mut rng, 1, 2);
        let cin = small_dim(&mut rng, 1, 3);
        let cout = small_dim(&mut rng, 1, 3);
        let h = small_dim(&mut rng, 3, 6);
        let w = small_dim(&mut rng, 3, 6);
        let k = if rng.bernoulli(0.5) { 3 } else { 1 };
        let stride = 1 + rng.below(2);
        let pad = (k - 1) / 2;
        let x: Tensor4<f64> = rng.gaussian(1.0, [n, cin, h, w]).unwrap();
        let wt: Tensor4<f64> = rng.gaussian(0.5, [cout, cin, k, k]).unwrap();
        let y = conv2d_forward(&x, &wt, stride, pad).unwrap();
        let r: Tensor4<f64> = rng.gaussian(1.0, y.dims()).unwrap();
        let (dx, dw) = conv2d_backward(&x, &wt, &r, stride, pad).unwrap();
        let ndx = numeric_grad(&x, &r, |xp| conv2d_forward(xp, &wt, stride, pad).unwrap());
        let ndw = numeric_grad(&wt, &r, |wp| conv2d_forward(&x, wp, stride, pad).unwrap());
        worst = worst.max(rel_err(dx.data(), &ndx)).max(rel_err(dw.data(), &ndw));
    }
    worst
}

/// Train-mode batch-norm, learned and frozen affine, input and affine gradients.
pub fn batchnorm_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng::new(seed).derive(t as u64);
        let n = small_dim(&mut rng, 2, 3);
        let c = small_dim(&mut rng, 1, 3);
        let h = small_dim(&mut rng, 1, 4);
        let w = small_dim(&mut rng, 2, 4);
        let learn = t % 2 == 0;
        let x: Tensor4<f64> = rng.gaussian(2.0, [n, c, h, w]).unwrap();
        let gamma: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform01()).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.uniform01() - 0.5).collect();
        let make = |g: &[f64], b: &[f64]| {
            let mut bn = BatchNorm::<f64>::new(c, learn);
            if learn {
                bn.set_affine(g.to_vec(), b.to_vec()).unwrap();
            }
            bn
        };
        let mut bn = make(&gamma, &beta);
        let y = bn.forward(&x, BnMode::Train).unwrap();
        let r: Tensor4<f64> = rng.gaussian(1.0, y.dims()).unwrap();
        let dx = bn.backward(&r).unwrap();
        let ndx = numeric_grad(&x, &r, |xp| make(&gamma, &beta).forward(xp, BnMode::Train).unwrap());
        worst = worst.max(rel_err(dx.data(), &ndx));
        if learn {
            let (dg, db) = bn.affine_grads().unwrap();
            let g_t = Tensor4::from_vec([1, 1, 1, c], gamma.clone()).unwrap();
            let b_t = Tensor4::from_vec([1, 1, 1, c], beta.clone()).unwrap();
            let ndg = numeric_grad(&g_t, &r, |gp| {
                make(gp.data(), &beta).forward(&x, BnMode::Train).unwrap()
            });
            let ndb = numeric_grad(&b_t, &r, |bp| {
                make(&gamma, bp.data()).forward(&x, BnMode::Train).unwrap()
            });
            worst = worst.max(rel_err(dg, &ndg)).max(rel_err(db, &ndb));
        } else {
            assert!(bn.affine_grads().is_none());
        }
    }
    worst
}

/// ReLU away from the kink, where the derivative is defined.
pub fn relu_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng::new(seed).derive(t as u64);
        let dims = [
            small_dim(&mut rng, 1, 2),
            small_dim(&mut rng, 1, 3),
            small_dim(&mut rng, 2, 5),
            small_dim(&mut rng, 2, 5),
        ];
        let x: Tensor4<f64> = rng
            .gaussian::<f64>(1.0, dims)
            .unwrap()
            .map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v });
        let r: Tensor4<f64> = rng.gaussian(1.0, dims).unwrap();
        let dx = relu_backward(&x, &r).unwrap();
        let ndx = numeric_grad(&x, &r, relu);
        worst = worst.max(rel_err(dx.data(), &ndx));
    }
    worst
}

/// Average pooling over several window geometries, including the residual
/// downsampling window.
pub fn avg_pool_gradient_error(trials: usize, seed: u64) -> f64 {
    const WINDOWS: [(usize, usize, usize); 4] = [(3, 2, 1), (2, 2, 0), (3, 1, 1), (3, 2, 0)];
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng::new(seed).derive(t as u64);
        let (k, s, p) = WINDOWS[t % WINDOWS.len()];
        let dims = [
            small_dim(&mut rng, 1, 2),
            small_dim(&mut rng, 1, 3),
            small_dim(&mut rng, 3, 7),
            small_dim(&mut rng, 3, 7),
        ];
        let x: Tensor4<f64> = rng.gaussian(1.0, dims).unwrap();
        let y = avg_pool(&x, k, s, p).unwrap();
        let r: Tensor4<f64> = rng.gaussian(1.0, y.dims()).unwrap();
        let dx = avg_pool_backward(dims, &r, k, s, p).unwrap();
        let ndx = numeric_grad(&x, &r, |xp| avg_pool(xp, k, s, p).unwrap());
        worst = worst.max(rel_err(dx.data(), &ndx));
    }
    worst
}

pub fn gap_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng::new(seed).derive(t as u64);
        let dims = [
            small_dim(&mut rng, 1, 3),
            small_dim(&mut rng, 1, 4),
            small_dim(&mut rng, 1, 6),
            small_dim(&mut rng, 1, 6),
        ];
        let x: Tensor4<f64> = rng.gaussian(1.0, dims).unwrap();
        let r: Tensor4<f64> = rng.gaussian(1.0, [dims[0], dims[1], 1, 1]).unwrap();
        let dx = global_avg_pool_backward(dims, &r).unwrap();
        let ndx = numeric_grad(&x, &r, global_avg_pool);
        worst = worst.max(rel_err(dx.data(), &ndx));
    }
    worst
}

/// Mean softmax cross-entropy against its analytic logit gradient.
pub fn softmax_ce_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng::new(seed).derive(t as u64);
        let n = small_dim(&mut rng, 1, 4);
        let k = small_dim(&mut rng, 2, 10);
        let logits: Tensor4<f64> = rng.gaussian(3.0, [n, k, 1, 1]).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let out = softmax_cross_entropy(&logits, &labels).unwrap();
        let one = Tensor4::full([1, 1, 1, 1], 1.0);
        let nd = numeric_grad(&logits, &one, |lp| {
            Tensor4::full([1, 1, 1, 1], softmax_cross_entropy(lp, &labels).unwrap().loss)
        });
        worst = worst.max(rel_err(out.dlogits.data(), &nd));
    }
    worst
}

/// Conv weights plus learned affines of a wide ResNet, by closed form.
pub fn wide_resnet_params(b: usize, k: usize, classes: usize, in_c: usize) -> usize {
    let w = [16 * k, 32 * k, 64 * k];
    let mut total = 9 * in_c * w[0];
    let mut prev = w[0];
    for &width in &w {
        total += 9 * prev * width + 9 * width * width;
        total += (b - 1) * 2 * 9 * width * width;
        prev = width;
    }
    total + w[2] * classes
}

/// MNIST location from `BITWEIGHT_DATA_DIR` or the usual local path.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = std::env::var_os("BITWEIGHT_DATA_DIR")
        .map(|d| vec![PathBuf::from(&d), PathBuf::from(d).join("mnist")])
        .unwrap_or_default()
        .into_iter()
        .chain([PathBuf::from("/root/data/mnist")]);
    candidates
        .into_iter()
        .find(|d| d.join("train-images-idx3-ubyte").exists())
}

/// CIFAR-10 binary batches from `BITWEIGHT_DATA_DIR` or the usual local path.
pub fn cifar10_dir() -> Option<PathBuf> {
    let candidates = std::env::var_os("BITWEIGHT_DATA_DIR")
        .map(|d| vec![PathBuf::from(d)])
        .unwrap_or_default()
        .into_iter()
        .chain([PathBuf::from("/root/data"), PathBuf::from("/root/data/cifar")]);
    candidates
        .into_iter()
        .find(|d| d.join("cifar-10-batches-bin").join("data_batch_1.bin").exists())
}

/// Box `(r0, r1, c0, c1)` that [`cutout`] replaced, recovered by running the
/// same stream over an all-0 and an all-255 image.
pub fn observed_cutout_box(h: usize, w: usize, size: usize, rng: &Rng) -> Option<(usize, usize, usize, usize)> {
    let lo = cutout(&Image::filled(1, h, w, 0), size, &mut rng.clone());
    let hi = cutout(&Image::filled(1, h, w, 255), size, &mut rng.clone());
    let hit = |i: usize| lo.data[i] != 0 || hi.data[i] != 255;
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for i in (0..h * w).filter(|&i| hit(i)) {
        let (r, c) = (i / w, i % w);
        r0 = r0.min(r);
        r1 = r1.max(r + 1);
        c0 = c0.min(c);
        c1 = c1.max(c + 1);
    }
    (r0 < r1).then_some((r0, r1, c0, c1))
}

/// Pearson statistic for equal per-pixel replacement frequency and its
/// critical value at level `alpha`.
///
/// Replaced pixels within one patch are not independent, so each draw
/// contributes at most one observation: the patch is kept with probability
/// `area / size²` and a uniform pixel inside it is recorded. The recorded
/// pixel is then distributed in proportion to replacement frequency, and the
/// counts are multinomial.
pub fn cutout_coverage_chi2(draws: usize, h: usize, w: usize, size: usize, alpha: f64, seed: u64) -> (f64, f64) {
    let root = Rng::new(seed);
    let mut thin = root.derive(u64::MAX);
    let mut counts = vec![0u64; h * w];
    for d in 0..draws {
        let Some((r0, r1, c0, c1)) = observed_cutout_box(h, w, size, &root.derive(d as u64)) else {
            continue;
        };
        let area = (r1 - r0) * (c1 - c0);
        if thin.uniform01() * (size * size) as f64 >= area as f64 {
            continue;
        }
        let j = thin.below(area);
        let (r, c) = (r0 + j / (c1 - c0), c0 + j % (c1 - c0));
        counts[r * w + c] += 1;
    }
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, dist.inverse_cdf(1.0 - alpha))
}
