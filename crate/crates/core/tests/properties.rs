use bitweight_core::binarize::sign_bit;
use bitweight_core::data::{augment, cutout_box, hflip, template_dataset, AugmentConfig, Image, Split};
use bitweight_core::deploy::{bit_at, pack_signs, PackedModel};
use bitweight_core::model::{Network, NetworkConfig};
use bitweight_core::nn::{softmax, BnMode};
use bitweight_core::tensor::{Rng, Tensor4};
use bitweight_core::train::{
    decode_checkpoint, encode_checkpoint, sgd_update, topk_misses, train, warm_restart_lr, OptimizerState, Schedule,
    TrainConfig,
};
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize, seed: u64) -> Image {
    let mut data = vec![0u8; c * h * w];
    Rng::new(seed).fill_bytes_uniform(&mut data);
    Image::new(c, h, w, data).unwrap()
}

proptest! {
    #[test]
    fn augmentation_keeps_dims(c in 1usize..4, h in 4usize..20, w in 4usize..20, pad in 0usize..5,
                               cut in 0usize..12, flip: bool, seed: u64) {
        let img = image(c, h, w, seed);
        let cfg = AugmentConfig { hflip: flip, pad, crop: None, cutout_size: cut, seed: 0 };
        let out = augment(&img, &cfg, &mut Rng::new(seed ^ 1)).unwrap();
        prop_assert_eq!((out.channels, out.height, out.width), (c, h, w));
        prop_assert_eq!(out.data.len(), img.data.len());
    }

    #[test]
    fn unpadded_augmentation_only_moves_or_replaces_pixels(h in 4usize..16, w in 4usize..16, cut in 1usize..8, seed: u64) {
        let img = image(1, h, w, seed);
        let cfg = AugmentConfig { hflip: true, pad: 0, crop: None, cutout_size: cut, seed: 0 };
        let out = augment(&img, &cfg, &mut Rng::new(seed)).unwrap();
        let plain = hflip(&img, 0.0, &mut Rng::new(0));
        let mirrored = hflip(&img, 1.0, &mut Rng::new(0));
        let kept = |src: &Image| out.data.iter().zip(&src.data).filter(|(a, b)| a == b).count();
        // cutout replaces at most cut² pixels
        prop_assert!(kept(&plain).max(kept(&mirrored)) + cut * cut >= h * w);
    }

    #[test]
    fn double_flip_is_identity(c in 1usize..4, h in 1usize..10, w in 1usize..10, seed: u64) {
        let img = image(c, h, w, seed);
        let once = hflip(&img, 1.0, &mut Rng::new(0));
        prop_assert_eq!(hflip(&once, 1.0, &mut Rng::new(0)), img);
    }

    #[test]
    fn cutout_box_stays_inside(h in 1usize..40, w in 1usize..40, size in 1usize..20, cy in -30isize..70, cx in -30isize..70) {
        if let Some((r0, r1, c0, c1)) = cutout_box(h, w, size, (cy, cx)) {
            prop_assert!(r0 < r1 && r1 <= h && c0 < c1 && c1 <= w);
            prop_assert!((r1 - r0) * (c1 - c0) <= size * size);
        }
    }

    #[test]
    fn learning_rate_stays_in_bounds(ipe in 1usize..50, frac in 0.0f64..=1.0) {
        let s = Schedule::standard(ipe);
        let it = (frac * s.total_iterations() as f64) as usize;
        let lr = warm_restart_lr(it, &s).unwrap();
        prop_assert!((s.lr_min..=s.lr_max).contains(&lr));
        prop_assert!(warm_restart_lr(s.total_iterations() + 1, &s).is_err());
    }

    #[test]
    fn sign_packing_is_a_bijection(w in prop::collection::vec(-1.0f32..1.0, 1..300)) {
        let bits = pack_signs(&w);
        prop_assert_eq!(bits.len(), w.len().div_ceil(8));
        for (j, &v) in w.iter().enumerate() {
            prop_assert_eq!(bit_at(&bits, j), sign_bit(v));
        }
        let back: Vec<f32> = (0..w.len()).map(|j| if bit_at(&bits, j) { 1.0 } else { -1.0 }).collect();
        prop_assert_eq!(pack_signs(&back), bits);
    }

    #[test]
    fn top5_misses_never_exceed_top1(n in 1usize..30, k in 1usize..15, seed: u64) {
        let mut rng = Rng::new(seed);
        let logits: Tensor4<f32> = rng.gaussian(1.0, [n, k, 1, 1]).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let (m1, m5) = topk_misses(&logits, &labels).unwrap();
        prop_assert!(m5 <= m1 && m1 <= n);
        if k <= 5 {
            prop_assert_eq!(m5, 0);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..5, k in 1usize..12, seed: u64) {
        let logits: Tensor4<f64> = Rng::new(seed).gaussian(20.0, [n, k, 1, 1]).unwrap();
        for row in softmax(&logits) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn missing_gradient_equals_zero_gradient(w0 in prop::collection::vec(-1.0f64..1.0, 1..20),
                                             lr in 0.0f64..0.2, decay in 0.0f64..0.01) {
        let (mut a, mut b) = (w0.clone(), w0.clone());
        let (mut va, mut vb) = (vec![0.3; w0.len()], vec![0.3; w0.len()]);
        let zeros = vec![0.0; w0.len()];
        sgd_update(&mut a, None, &mut va, lr, 0.9, decay);
        sgd_update(&mut b, Some(&zeros), &mut vb, lr, 0.9, decay);
        prop_assert_eq!(a, b);
        prop_assert_eq!(va, vb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binarized_and_full_registries_match(b in 1usize..3, k in 1usize..3, classes in 2usize..12, in_c in 1usize..4, relu: bool) {
        let mut cfg = NetworkConfig::new(b, k, classes, in_c);
        cfg.input_relu = relu;
        let mut full = Network::<f32>::build(&cfg.clone().binarized(false)).unwrap();
        let mut bin = Network::<f32>::build(&cfg.binarized(true)).unwrap();
        let shape = |net: &mut Network<f32>| {
            net.parameters().into_iter().map(|p| (p.name, p.value.len())).collect::<Vec<_>>()
        };
        prop_assert_eq!(shape(&mut full), shape(&mut bin));
    }

    #[test]
    fn packed_model_round_trips(seed in 0u64..1000, classes in 2usize..6, bin_head: bool) {
        let mut cfg = NetworkConfig::new(1, 1, classes, 1).binarized(true).with_seed(seed);
        if !bin_head {
            cfg.full_precision_layers = vec![cfg.conv_layer_count() - 1];
        }
        let mut net = Network::<f32>::new_initialized(&cfg).unwrap();
        let x: Tensor4<f32> = Rng::new(seed).gaussian(1.0, [4, 1, 8, 8]).unwrap();
        net.forward(&x, BnMode::Train).unwrap();
        net.clear_cache();
        let packed = PackedModel::from_network(&net).unwrap();
        let bytes = packed.encode();
        let back = PackedModel::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &packed);
        prop_assert_eq!(back.encode(), bytes);
        for (i, conv) in net.conv_layers().iter().enumerate() {
            let w = back.layer_weights(i);
            for (&a, &s) in w.data().iter().zip(conv.shadow_weights().data()) {
                if cfg.layer_binarized(i) {
                    prop_assert_eq!(a > 0.0, sign_bit(s));
                } else {
                    prop_assert_eq!(a, s);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000) {
        let cfg = NetworkConfig::new(1, 1, 3, 2).with_seed(seed);
        let net = Network::<f64>::new_initialized(&cfg).unwrap();
        let mut opt = OptimizerState::<f64>::new(0.9, 5e-4);
        opt.lr = 0.05;
        opt.buffers = vec![vec![seed as f64; 3]];
        let bytes = encode_checkpoint(&net, &opt, 4, 99).unwrap();
        let ck = decode_checkpoint::<f64>(&bytes).unwrap();
        prop_assert_eq!((ck.epoch, ck.step), (4, 99));
        prop_assert_eq!(&ck.optimizer, &opt);
        prop_assert_eq!(encode_checkpoint(&ck.network, &ck.optimizer, 4, 99).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn frozen_batchnorm_stays_identity(seed in 0u64..1000, bin: bool) {
        let ds = template_dataset(40, 2, [1, 6, 6], 40.0, seed, Split::Train).unwrap();
        let mut cfg = NetworkConfig::new(1, 1, 2, 1).binarized(bin).with_seed(seed);
        cfg.input_relu = true;
        let mut net = Network::<f32>::new_initialized(&cfg).unwrap();
        let tc = TrainConfig { batch_size: 10, seed, ..TrainConfig::default() };
        train(&mut net, &ds, None, &tc).unwrap();
        let names = net.bn_layer_names();
        for (name, bn) in names.iter().zip(net.bn_layers()) {
            if bn.learn_affine() {
                prop_assert_eq!(name.as_str(), "input_bn");
                continue;
            }
            prop_assert!(bn.gamma().iter().all(|&g| g == 1.0), "{} gamma moved", name);
            prop_assert!(bn.beta().iter().all(|&b| b == 0.0), "{} beta moved", name);
        }
    }
}
