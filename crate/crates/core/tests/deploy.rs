use bitweight_core::binarize::{binarize_weights, ConvLayer, RESNET_GAIN};
use bitweight_core::deploy::*;
use bitweight_core::nn::BnMode;
use bitweight_core::tensor::conv2d_forward;
use bitweight_core::{Error, Network, NetworkConfig, Rng, Tensor4};

fn trained_like(cfg: &NetworkConfig) -> Network<f32> {
    let mut net = Network::<f32>::new_initialized(cfg).unwrap();
    // give the batch-norm layers non-trivial moments
    let x = Rng::new(99)
        .gaussian::<f32>(1.0, [8, cfg.input_channels, 12, 12])
        .unwrap();
    for bn in net.bn_layers_mut() {
        bn.begin_calibration();
    }
    net.forward(&x, BnMode::Calibrate).unwrap();
    for bn in net.bn_layers_mut() {
        bn.finish_calibration().unwrap();
    }
    net
}

#[test]
fn single_layer_payload_is_54_bytes() {
    let layer = ConvLayer::<f32>::new(3, 16, 3, 1, RESNET_GAIN, true).unwrap();
    assert_eq!(layer.weight_count().div_ceil(8), 54);
    let mut w = layer.shadow_weights().clone();
    w.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = if i % 3 == 0 { -1.0 } else { 1.0 });
    assert_eq!(pack_signs(w.data()).len(), 54);
}

#[test]
fn export_import_roundtrip_preserves_signs_and_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.b1w");
    let mut cfg = NetworkConfig::new(1, 1, 5, 3).binarized(true).with_seed(4);
    cfg.input_relu = true;
    let mut net = trained_like(&cfg);
    let model = export_packed(&net, &path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len() as u64, packed_file_size(&cfg).unwrap());
    assert_eq!(model.header.payload_bytes, packed_payload_bytes(&cfg).unwrap());
    let back = PackedModel::decode(&bytes).unwrap();
    assert_eq!(back, model);

    for (i, conv) in net.conv_layers().iter().enumerate() {
        let w = back.layer_weights(i);
        let s = conv.scale() as f32;
        for (a, &b) in w.data().iter().zip(conv.shadow_weights().data()) {
            assert_eq!(*a, if b >= 0.0 { s } else { -s });
        }
    }

    let inf = import_packed(&path).unwrap();
    let x = Rng::new(5).gaussian::<f32>(1.0, [100, 3, 12, 12]).unwrap();
    let packed = inf.forward(&x).unwrap();
    let reference = net.forward(&x, BnMode::Infer).unwrap();
    let scale = reference.max_abs().max(1e-3);
    for (a, b) in packed.data().iter().zip(reference.data()) {
        assert!(((a - b).abs() as f64) <= 1e-4 * scale, "{a} vs {b}");
    }
    let probs = infer(&inf, &x).unwrap();
    for p in &probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(infer(&inf, &x).unwrap(), probs);
}

#[test]
fn flipping_one_bit_flips_one_weight() {
    let cfg = NetworkConfig::new(1, 1, 3, 1).binarized(true).with_seed(2);
    let net = Network::<f32>::new_initialized(&cfg).unwrap();
    let model = PackedModel::from_network(&net).unwrap();
    let mut flipped = model.clone();
    flipped.layer_payload_mut(3)[5] ^= 0b0001_0000;
    for i in 0..model.convs.len() {
        let a = model.layer_weights(i);
        let b = flipped.layer_weights(i);
        let diff: Vec<usize> = (0..a.len()).filter(|&j| a.data()[j] != b.data()[j]).collect();
        if i == 3 {
            assert_eq!(diff, vec![5 * 8 + 4]);
            assert_eq!(a.data()[44], -b.data()[44]);
        } else {
            assert!(diff.is_empty());
        }
    }
}

#[test]
fn corrupt_files_are_rejected_with_the_right_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.b1w");
    let cfg = NetworkConfig::new(1, 1, 3, 1).binarized(true).with_seed(2);
    let net = Network::<f32>::new_initialized(&cfg).unwrap();
    export_packed(&net, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        PackedModel::decode(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(
        PackedModel::decode(&bad),
        Err(Error::Format { offset: 4, .. })
    ));
    assert!(matches!(
        PackedModel::decode(&good[..good.len() - 1]),
        Err(Error::Format { .. })
    ));
    assert!(matches!(PackedModel::decode(&good[..30]), Err(Error::Format { .. })));

    // scale of the first conv record sits at 24 + 22
    let mut bad = good.clone();
    let s = f32::from_le_bytes(bad[46..50].try_into().unwrap()) * 1.001;
    bad[46..50].copy_from_slice(&s.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(import_packed(&path), Err(Error::Integrity(_))));
}

#[test]
fn export_rejects_full_precision_layers() {
    let cfg = NetworkConfig::new(1, 1, 3, 1).with_seed(2);
    let net = Network::<f32>::new_initialized(&cfg).unwrap();
    assert!(matches!(PackedModel::from_network(&net), Err(Error::Export(_))));
}

#[test]
fn excluded_layers_are_stored_as_floats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.b1w");
    let mut cfg = NetworkConfig::new(1, 1, 4, 2).binarized(true).with_seed(8);
    cfg.full_precision_layers = vec![0, 7];
    let mut net = trained_like(&cfg);
    let model = export_packed(&net, &path).unwrap();
    assert_eq!(model.convs[0].encoding, WeightEncoding::Float32);
    assert_eq!(model.convs[1].encoding, WeightEncoding::Signs);
    assert_eq!(
        std::fs::read(&path).unwrap().len() as u64,
        packed_file_size(&cfg).unwrap()
    );
    let inf = import_packed(&path).unwrap();
    let x = Rng::new(1).gaussian::<f32>(1.0, [4, 2, 12, 12]).unwrap();
    let a = inf.forward(&x).unwrap();
    let b = net.forward(&x, BnMode::Infer).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-4 * b.max_abs().max(1e-3));
}

#[test]
fn signconv_matches_reference_convolution() {
    let mut rng = Rng::new(12);
    for trial in 0..30 {
        let cin = 1 + rng.below(6);
        let cout = 1 + rng.below(6);
        let k = [1, 3, 5][rng.below(3)];
        let stride = 1 + rng.below(2);
        let hw = k + rng.below(8);
        let w: Tensor4<f32> = rng.gaussian(1.0, [cout, cin, k, k]).unwrap();
        let scale = 0.1 + rng.uniform01() as f32;
        let layer = PackedConvLayer::from_signs(k, cin, cout, stride, scale, pack_signs(w.data())).unwrap();
        let x: Tensor4<f32> = rng.gaussian(1.0, [2, cin, hw, hw + 1]).unwrap();
        let got = signconv_infer(&x, &layer).unwrap();
        let want = conv2d_forward(&x, &binarize_weights(&w, scale), stride, (k - 1) / 2).unwrap();
        let tol = 1e-4 * want.max_abs().max(1e-3);
        assert!(got.max_abs_diff(&want) <= tol, "trial {trial}");
    }
}

#[test]
fn import_checks_input_dims() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.b1w");
    let cfg = NetworkConfig::new(1, 1, 3, 1).binarized(true);
    let net = Network::<f32>::new_initialized(&cfg).unwrap();
    let opts = ExportOptions {
        input_size: Some((8, 8)),
        dataset: Some("toy".into()),
    };
    export_packed_with(&net, &path, &opts).unwrap();
    let inf = import_packed(&path).unwrap();
    assert!(inf.forward(&Tensor4::zeros([1, 1, 8, 8])).is_ok());
    assert!(matches!(
        inf.forward(&Tensor4::zeros([1, 1, 9, 8])),
        Err(Error::Argument(_))
    ));
    assert!(matches!(
        inf.forward(&Tensor4::zeros([1, 2, 8, 8])),
        Err(Error::Argument(_))
    ));
}
