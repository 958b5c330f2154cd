//! Wide ResNet and plain all-convolutional topologies.
//!
//! ```text
//! input → BN [→ ReLU] → conv3×3 (16k)
//!       → 3 scales × B pre-activation blocks (16k, 32k, 64k channels)
//!       → BN → ReLU → conv1×1 (classes) → BN (frozen) → GAP → softmax
//! ```
//!
//! A block is `BN → ReLU → conv3×3 → BN → ReLU → conv3×3` plus an identity
//! skip. The first block of scales 2 and 3 halves the spatial size with a
//! stride-2 first conv; its skip path is a 3×3/2 average pool followed by
//! zero channel padding. The plain variant drops the skips and uses gain 2
//! instead of √2 for initialization and the binarization scale.

use serde::{Deserialize, Serialize};

use crate::binarize::{ConvLayer, PLAIN_GAIN, RESNET_GAIN};
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, zero_pad_channels, zero_pad_channels_backward, BatchNorm, BnMode};
use crate::tensor::{avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, Real, Rng, Tensor4};

const SKIP_POOL: (usize, usize, usize) = (3, 2, 1);

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Residual blocks per spatial scale; the network has `6B + 2` conv layers.
    pub blocks_per_scale: usize,
    /// Widening factor `k`: scales have `16k, 32k, 64k` channels.
    pub width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub binarized: bool,
    /// ReLU after the input batch-norm; that batch-norm then learns its affine.
    #[serde(default)]
    pub input_relu: bool,
    #[serde(default = "default_true")]
    pub skip_connections: bool,
    /// Conv layer indices kept full precision in binarized mode.
    #[serde(default)]
    pub full_precision_layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(blocks_per_scale: usize, width: usize, num_classes: usize, input_channels: usize) -> Self {
        Self {
            blocks_per_scale,
            width,
            num_classes,
            input_channels,
            binarized: false,
            input_relu: false,
            skip_connections: true,
            full_precision_layers: Vec::new(),
            seed: 0,
        }
    }

    pub fn binarized(mut self, on: bool) -> Self {
        self.binarized = on;
        self
    }

    pub fn plain(mut self) -> Self {
        self.skip_connections = false;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn gain(&self) -> f64 {
        if self.skip_connections {
            RESNET_GAIN
        } else {
            PLAIN_GAIN
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        6 * self.blocks_per_scale + 2
    }

    pub fn scale_widths(&self) -> [usize; 3] {
        [16 * self.width, 32 * self.width, 64 * self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_scale == 0 {
            return Err(Error::arg("blocks_per_scale must be at least 1"));
        }
        if self.width == 0 {
            return Err(Error::arg("width must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::arg("num_classes must be at least 2"));
        }
        if self.input_channels == 0 {
            return Err(Error::arg("input_channels must be at least 1"));
        }
        if let Some(&bad) = self
            .full_precision_layers
            .iter()
            .find(|&&i| i >= self.conv_layer_count())
        {
            return Err(Error::arg(format!(
                "full-precision layer index {bad} out of range for {} conv layers",
                self.conv_layer_count()
            )));
        }
        Ok(())
    }

    /// Whether conv layer `index` propagates binarized weights.
    pub fn layer_binarized(&self, index: usize) -> bool {
        self.binarized && !self.full_precision_layers.contains(&index)
    }
}

/// One pre-activation residual (or plain) block.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub bn1: BatchNorm<T>,
    pub conv1: ConvLayer<T>,
    pub bn2: BatchNorm<T>,
    pub conv2: ConvLayer<T>,
    skip: bool,
    cache: Option<BlockCache<T>>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input_dims: [usize; 4],
    pre_relu1: Tensor4<T>,
    pre_relu2: Tensor4<T>,
}

impl<T: Real> Block<T> {
    fn new(in_c: usize, out_c: usize, stride: usize, skip: bool, gain: f64, bin: [bool; 2]) -> Result<Self> {
        Ok(Self {
            bn1: BatchNorm::new(in_c, false),
            conv1: ConvLayer::new(in_c, out_c, 3, stride, gain, bin[0])?,
            bn2: BatchNorm::new(out_c, false),
            conv2: ConvLayer::new(out_c, out_c, 3, 1, gain, bin[1])?,
            skip,
            cache: None,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }

    pub fn downsamples(&self) -> bool {
        self.conv1.stride() > 1
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: BnMode, probe: &mut Probe<'_, T>, name: &str) -> Result<Tensor4<T>> {
        let train = mode == BnMode::Train;
        let a = self.bn1.forward(x, mode)?;
        probe.see(&format!("{name}.bn1"), &a)?;
        let c1 = self.conv1.forward(&relu(&a), train)?;
        probe.see(&format!("{name}.conv1"), &c1)?;
        let b = self.bn2.forward(&c1, mode)?;
        probe.see(&format!("{name}.bn2"), &b)?;
        let mut out = self.conv2.forward(&relu(&b), train)?;
        probe.see(&format!("{name}.conv2"), &out)?;
        if self.skip {
            let mut s = if self.downsamples() {
                avg_pool(x, SKIP_POOL.0, SKIP_POOL.1, SKIP_POOL.2)?
            } else {
                x.clone()
            };
            if s.c() != out.c() {
                s = zero_pad_channels(&s, out.c())?;
            }
            out.add_assign(&s)?;
            probe.see(&format!("{name}.sum"), &out)?;
        }
        self.cache = train.then(|| BlockCache {
            input_dims: x.dims(),
            pre_relu1: a,
            pre_relu2: b,
        });
        Ok(out)
    }

    fn backward(&mut self, dout: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("block backward needs a train-mode forward".into()))?;
        let d = self.conv2.backward(dout)?;
        let d = relu_backward(&cache.pre_relu2, &d)?;
        let d = self.bn2.backward(&d)?;
        let d = self.conv1.backward(&d)?;
        let d = relu_backward(&cache.pre_relu1, &d)?;
        let mut dx = self.bn1.backward(&d)?;
        if self.skip {
            let mut ds = if dout.c() != cache.input_dims[1] {
                zero_pad_channels_backward(dout, cache.input_dims[1])?
            } else {
                dout.clone()
            };
            if self.downsamples() {
                ds = avg_pool_backward(cache.input_dims, &ds, SKIP_POOL.0, SKIP_POOL.1, SKIP_POOL.2)?;
            }
            dx.add_assign(&ds)?;
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        self.bn1.clear_cache();
        self.bn2.clear_cache();
        self.conv1.clear_cache();
        self.conv2.clear_cache();
    }
}

/// A learnable tensor and its latest gradient, in registry order.
pub struct Param<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: Option<&'a [T]>,
}

/// Optional per-layer hook used for non-finite diagnostics.
struct Probe<'a, T> {
    check_finite: bool,
    record: Option<&'a mut Vec<(String, Tensor4<T>)>>,
}

impl<T: Real> Probe<'_, T> {
    fn see(&mut self, name: &str, t: &Tensor4<T>) -> Result<()> {
        if self.check_finite && !t.all_finite() {
            return Err(Error::NonFinite {
                layer: name.to_string(),
            });
        }
        if let Some(rec) = self.record.as_deref_mut() {
            rec.push((name.to_string(), t.clone()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct NetCache<T> {
    input_pre_relu: Option<Tensor4<T>>,
    final_pre_relu: Tensor4<T>,
    pool_input_dims: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    pub input_bn: BatchNorm<T>,
    pub first_conv: ConvLayer<T>,
    pub blocks: Vec<Block<T>>,
    pub final_bn: BatchNorm<T>,
    pub head: ConvLayer<T>,
    pub head_bn: BatchNorm<T>,
    cache: Option<NetCache<T>>,
}

/// Residual build; `cfg.skip_connections` must be set.
pub fn build_wide_resnet<T: Real>(cfg: &NetworkConfig) -> Result<Network<T>> {
    if !cfg.skip_connections {
        return Err(Error::arg("wide resnet build requires skip_connections"));
    }
    Network::build(cfg)
}

/// Skip-free build; `cfg.skip_connections` must be cleared.
pub fn build_plain_cnn<T: Real>(cfg: &NetworkConfig) -> Result<Network<T>> {
    if cfg.skip_connections {
        return Err(Error::arg("plain build requires skip_connections = false"));
    }
    Network::build(cfg)
}

/// He initialization of every conv layer from `seed`; learned affines reset to (1, 0).
pub fn he_init<T: Real>(net: &mut Network<T>, seed: u64) -> Result<()> {
    let root = Rng::new(seed);
    for (i, conv) in net.conv_layers_mut().into_iter().enumerate() {
        conv.init(&mut root.derive(i as u64))?;
    }
    for bn in net.bn_layers_mut() {
        let c = bn.channels();
        if bn.learn_affine() {
            bn.set_affine(vec![T::one(); c], vec![T::zero(); c])?;
        }
    }
    Ok(())
}

/// Learnable scalars: shadow conv weights plus learned batch-norm affines.
pub fn param_count<T: Real>(net: &Network<T>) -> usize {
    let convs: usize = net.conv_layers().iter().map(|c| c.weight_count()).sum();
    let affines: usize = net
        .bn_layers()
        .iter()
        .filter(|b| b.learn_affine())
        .map(|b| 2 * b.channels())
        .sum();
    convs + affines
}

impl<T: Real> Network<T> {
    /// Builds the topology with zeroed weights; see [`he_init`].
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let gain = cfg.gain();
        let widths = cfg.scale_widths();
        let mut conv_index = 0;
        let mut next_bin = || {
            let b = cfg.layer_binarized(conv_index);
            conv_index += 1;
            b
        };

        let input_bn = BatchNorm::new(cfg.input_channels, cfg.input_relu);
        let first_conv = ConvLayer::new(cfg.input_channels, widths[0], 3, 1, gain, next_bin())?;
        let mut blocks = Vec::with_capacity(3 * cfg.blocks_per_scale);
        let mut in_c = widths[0];
        for (scale, &out_c) in widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_scale {
                let stride = if scale > 0 && b == 0 { 2 } else { 1 };
                let bin = [next_bin(), next_bin()];
                blocks.push(Block::new(in_c, out_c, stride, cfg.skip_connections, gain, bin)?);
                in_c = out_c;
            }
        }
        let final_bn = BatchNorm::new(in_c, false);
        let head = ConvLayer::new(in_c, cfg.num_classes, 1, 1, gain, next_bin())?;
        let head_bn = BatchNorm::new(cfg.num_classes, false);
        Ok(Self {
            config: cfg.clone(),
            input_bn,
            first_conv,
            blocks,
            final_bn,
            head,
            head_bn,
            cache: None,
        })
    }

    /// Build plus He initialization from `cfg.seed`.
    pub fn new_initialized(cfg: &NetworkConfig) -> Result<Self> {
        let mut net = Self::build(cfg)?;
        he_init(&mut net, cfg.seed)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Switches every conv layer not on the exclusion list between binarized
    /// and full-precision propagation. Parameters are untouched.
    pub fn set_binarized(&mut self, on: bool) {
        self.config.binarized = on;
        let cfg = self.config.clone();
        for (i, conv) in self.conv_layers_mut().into_iter().enumerate() {
            conv.set_binarized(cfg.layer_binarized(i));
        }
    }

    /// Conv layers in canonical order: first conv, block convs, head.
    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        let mut v = vec![&self.first_conv];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
        }
        v.push(&self.head);
        v
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut v = vec![&mut self.first_conv];
        for b in &mut self.blocks {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
        }
        v.push(&mut self.head);
        v
    }

    /// Batch-norm layers in canonical order: input, block BNs, pre-head, head.
    pub fn bn_layers(&self) -> Vec<&BatchNorm<T>> {
        let mut v = vec![&self.input_bn];
        for b in &self.blocks {
            v.push(&b.bn1);
            v.push(&b.bn2);
        }
        v.push(&self.final_bn);
        v.push(&self.head_bn);
        v
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.input_bn];
        for b in &mut self.blocks {
            v.push(&mut b.bn1);
            v.push(&mut b.bn2);
        }
        v.push(&mut self.final_bn);
        v.push(&mut self.head_bn);
        v
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        let mut v = vec!["conv0".to_string()];
        for i in 0..self.blocks.len() {
            v.push(format!("block{i}.conv1"));
            v.push(format!("block{i}.conv2"));
        }
        v.push("head".to_string());
        v
    }

    /// Optimizer view: every learnable tensor with its latest gradient.
    /// Frozen batch-norm layers contribute nothing.
    pub fn parameters(&mut self) -> Vec<Param<'_, T>> {
        let names = self.conv_layer_names();
        let mut out = Vec::new();
        let bn_names = self.bn_layer_names();
        let Network {
            input_bn,
            first_conv,
            blocks,
            final_bn,
            head,
            head_bn,
            ..
        } = self;
        let mut bns: Vec<&mut BatchNorm<T>> = vec![input_bn];
        let mut convs: Vec<&mut ConvLayer<T>> = vec![first_conv];
        for b in blocks.iter_mut() {
            bns.push(&mut b.bn1);
            bns.push(&mut b.bn2);
            convs.push(&mut b.conv1);
            convs.push(&mut b.conv2);
        }
        bns.push(final_bn);
        bns.push(head_bn);
        convs.push(head);
        for (bn, name) in bns.into_iter().zip(&bn_names) {
            if let Some((g, b, dg, db)) = bn.affine_params_mut() {
                out.push(Param {
                    name: format!("{name}.gamma"),
                    value: g,
                    grad: dg,
                });
                out.push(Param {
                    name: format!("{name}.beta"),
                    value: b,
                    grad: db,
                });
            }
        }
        for (conv, name) in convs.into_iter().zip(names) {
            let (value, grad) = conv.param_mut();
            out.push(Param { name, value, grad });
        }
        out
    }

    pub fn bn_layer_names(&self) -> Vec<String> {
        let mut v = vec!["input_bn".to_string()];
        for i in 0..self.blocks.len() {
            v.push(format!("block{i}.bn1"));
            v.push(format!("block{i}.bn2"));
        }
        v.push("final_bn".to_string());
        v.push("head_bn".to_string());
        v
    }

    /// Logits `(N, classes, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: BnMode) -> Result<Tensor4<T>> {
        let mut probe = Probe {
            check_finite: false,
            record: None,
        };
        Ok(self.forward_impl(x, mode, &mut probe)?.0)
    }

    /// Logits together with the head batch-norm output that feeds global
    /// average pooling.
    pub fn forward_with_head(&mut self, x: &Tensor4<T>, mode: BnMode) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let mut probe = Probe {
            check_finite: false,
            record: None,
        };
        self.forward_impl(x, mode, &mut probe)
    }

    /// Every intermediate activation by layer name, for inspection and tests.
    pub fn trace(&mut self, x: &Tensor4<T>, mode: BnMode) -> Result<Vec<(String, Tensor4<T>)>> {
        let mut rec = Vec::new();
        let mut probe = Probe {
            check_finite: false,
            record: Some(&mut rec),
        };
        self.forward_impl(x, mode, &mut probe)?;
        Ok(rec)
    }

    /// Name of the first layer whose output is non-finite on `x`, using batch
    /// statistics and no state changes.
    pub fn first_nonfinite_layer(&mut self, x: &Tensor4<T>) -> Option<String> {
        if !x.all_finite() {
            return Some("input".into());
        }
        let mut probe = Probe {
            check_finite: true,
            record: None,
        };
        let res = self.forward_impl(x, BnMode::Calibrate, &mut probe);
        self.clear_cache();
        match res {
            Err(Error::NonFinite { layer }) => Some(layer),
            _ => None,
        }
    }

    fn forward_impl(
        &mut self,
        x: &Tensor4<T>,
        mode: BnMode,
        probe: &mut Probe<'_, T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        if x.c() != self.config.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels,
                x.c()
            )));
        }
        let train = mode == BnMode::Train;
        let mut h = self.input_bn.forward(x, mode)?;
        probe.see("input_bn", &h)?;
        let input_pre_relu = if self.config.input_relu {
            let r = relu(&h);
            Some(std::mem::replace(&mut h, r))
        } else {
            None
        };
        h = self.first_conv.forward(&h, train)?;
        probe.see("conv0", &h)?;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h, mode, probe, &format!("block{i}"))?;
        }
        let a = self.final_bn.forward(&h, mode)?;
        probe.see("final_bn", &a)?;
        let c = self.head.forward(&relu(&a), train)?;
        probe.see("head", &c)?;
        let b = self.head_bn.forward(&c, mode)?;
        probe.see("head_bn", &b)?;
        let logits = global_avg_pool(&b);
        probe.see("gap", &logits)?;
        self.cache = train.then(|| NetCache {
            input_pre_relu: input_pre_relu.filter(|_| train),
            final_pre_relu: a,
            pool_input_dims: b.dims(),
        });
        Ok((logits, b))
    }

    /// Backpropagates `dlogits` through the last train-mode forward, leaving
    /// parameter gradients on the layers. Returns the input gradient.
    pub fn backward(&mut self, dlogits: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("network backward needs a train-mode forward".into()))?;
        let d = global_avg_pool_backward(cache.pool_input_dims, dlogits)?;
        let d = self.head_bn.backward(&d)?;
        let d = self.head.backward(&d)?;
        let d = relu_backward(&cache.final_pre_relu, &d)?;
        let mut d = self.final_bn.backward(&d)?;
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d)?;
        }
        d = self.first_conv.backward(&d)?;
        if let Some(pre) = &cache.input_pre_relu {
            d = relu_backward(pre, &d)?;
        }
        self.input_bn.backward(&d)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.input_bn.clear_cache();
        self.first_conv.clear_cache();
        for b in &mut self.blocks {
            b.clear_cache();
        }
        self.final_bn.clear_cache();
        self.head.clear_cache();
        self.head_bn.clear_cache();
    }

    /// Snapshot of every batch-norm layer's inference moments.
    pub fn bn_moments(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.bn_layers()
            .iter()
            .map(|b| (b.running_mean.clone(), b.running_var.clone()))
            .collect()
    }

    pub fn set_bn_moments(&mut self, moments: &[(Vec<T>, Vec<T>)]) -> Result<()> {
        let mut layers = self.bn_layers_mut();
        if layers.len() != moments.len() {
            return Err(Error::shape("moment snapshot does not match network"));
        }
        for (bn, (m, v)) in layers.iter_mut().zip(moments) {
            bn.set_moments(m.clone(), v.clone())?;
        }
        Ok(())
    }
}
