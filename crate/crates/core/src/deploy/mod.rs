//! One-bit-per-weight deployment: file format, import checks and inference.
//!
//! Imported batch-norm layers are folded into a per-channel affine
//! `a·x + b` with `a = γ/√(var + ε)` and `b = β − mean·a`, applied after
//! the layer scale.

mod format;
mod signconv;

pub use format::{
    bit_at, pack_signs, packed_file_size, packed_payload_bytes, BnRecord, ConvRecord, PackedHeader, PackedModel,
    WeightEncoding, CONV_RECORD_BYTES, HEADER_BYTES, PACKED_MAGIC, PACKED_VERSION,
};
pub use signconv::{signconv_infer, LayerWeights, PackedConvLayer};

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::layer_scale;
use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::nn::{softmax, zero_pad_channels};
use crate::tensor::{avg_pool, global_avg_pool, Real, Tensor4};

/// Sidecar stored next to a packed file as `<file>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedMeta {
    pub format_version: u16,
    pub config: NetworkConfig,
    /// Expected `(H, W)` of inputs, when known.
    #[serde(default)]
    pub input_size: Option<(usize, usize)>,
    /// Factor applied to raw pixel bytes before the network.
    pub pixel_scale: f64,
    #[serde(default)]
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ExportOptions {
    pub input_size: Option<(usize, usize)>,
    pub dataset: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn export_packed<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<PackedModel> {
    export_packed_with(net, path, &ExportOptions::default())
}

/// Writes the packed file and its sidecar; returns what was written.
pub fn export_packed_with<T: Real>(
    net: &Network<T>,
    path: impl AsRef<Path>,
    opts: &ExportOptions,
) -> Result<PackedModel> {
    let path = path.as_ref();
    let model = PackedModel::from_network(net)?;
    let meta = PackedMeta {
        format_version: PACKED_VERSION,
        config: net.config().clone(),
        input_size: opts.input_size,
        pixel_scale: 1.0 / 255.0,
        dataset: opts.dataset.clone(),
    };
    fs::write(path, model.encode())?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(model)
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<PackedModel> {
    PackedModel::decode(&fs::read(path)?)
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<PackedMeta> {
    let side = sidecar_path(path.as_ref());
    let bytes =
        fs::read(&side).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", side.display()))))?;
    let meta: PackedMeta = serde_json::from_slice(&bytes)?;
    meta.config.validate()?;
    Ok(meta)
}

/// Loads a packed file plus sidecar into an inference network.
pub fn import_packed(path: impl AsRef<Path>) -> Result<InferenceNet> {
    let path = path.as_ref();
    InferenceNet::from_packed(&read_packed(path)?, read_meta(path)?)
}

/// Per-channel `a·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl ChannelAffine {
    fn fold(r: &BnRecord) -> Self {
        let c = r.channels as usize;
        let (gamma, beta) = match &r.affine {
            Some((g, b)) => (g.clone(), b.clone()),
            None => (vec![1.0; c], vec![0.0; c]),
        };
        let mut a = Vec::with_capacity(c);
        let mut b = Vec::with_capacity(c);
        for ch in 0..c {
            let inv = 1.0 / (r.var[ch] as f64 + r.epsilon as f64).sqrt();
            let ac = gamma[ch] as f64 * inv;
            a.push(ac as f32);
            b.push((beta[ch] as f64 - r.mean[ch] as f64 * ac) as f32);
        }
        Self { a, b }
    }

    fn apply(&self, x: &Tensor4<f32>, relu: bool) -> Tensor4<f32> {
        let mut y = x.clone();
        let (c, hw) = (x.c(), x.plane_len());
        y.data_mut().par_chunks_mut(c * hw).for_each(|sample| {
            for (ch, plane) in sample.chunks_mut(hw).enumerate() {
                let (a, b) = (self.a[ch], self.b[ch]);
                for v in plane {
                    let t = a * *v + b;
                    *v = if relu && t < 0.0 { 0.0 } else { t };
                }
            }
        });
        y
    }
}

/// Immutable inference graph built from a packed file.
#[derive(Clone, Debug)]
pub struct InferenceNet {
    meta: PackedMeta,
    convs: Vec<PackedConvLayer>,
    affines: Vec<ChannelAffine>,
}

impl InferenceNet {
    /// Validates the packed records against the config and recomputed
    /// scales, then folds batch-norm layers.
    pub fn from_packed(model: &PackedModel, meta: PackedMeta) -> Result<Self> {
        let cfg = &meta.config;
        let reference = Network::<f32>::build(&NetworkConfig {
            binarized: true,
            ..cfg.clone()
        })?;
        let ref_convs = reference.conv_layers();
        let ref_bns = reference.bn_layers();
        if model.convs.len() != ref_convs.len() || model.bns.len() != ref_bns.len() {
            return Err(Error::Integrity(format!(
                "file has {} conv / {} bn layers, config implies {} / {}",
                model.convs.len(),
                model.bns.len(),
                ref_convs.len(),
                ref_bns.len()
            )));
        }
        let mut convs = Vec::with_capacity(model.convs.len());
        for (i, (rec, want)) in model.convs.iter().zip(&ref_convs).enumerate() {
            let geometry = (
                rec.kernel as usize,
                rec.in_channels as usize,
                rec.out_channels as usize,
                rec.stride as usize,
            );
            if geometry != (want.kernel(), want.in_channels(), want.out_channels(), want.stride()) {
                return Err(Error::Integrity(format!(
                    "conv layer {i} geometry {geometry:?} disagrees with config"
                )));
            }
            let excluded = cfg.full_precision_layers.contains(&i);
            if excluded != (rec.encoding == WeightEncoding::Float32) {
                return Err(Error::Integrity(format!(
                    "conv layer {i} encoding disagrees with the exclusion list"
                )));
            }
            let expect = layer_scale(want.kernel(), want.in_channels(), cfg.gain())?;
            let tol = f32::EPSILON as f64 * expect;
            if !((rec.scale as f64 - expect).abs() <= tol) {
                return Err(Error::Integrity(format!(
                    "conv layer {i} scale {} differs from recomputed {expect}",
                    rec.scale
                )));
            }
            let weights = match rec.encoding {
                WeightEncoding::Signs => LayerWeights::Signs(model.layer_payload(i).to_vec()),
                WeightEncoding::Float32 => LayerWeights::Float(model.layer_weights(i)),
            };
            convs.push(PackedConvLayer {
                kernel: want.kernel(),
                in_channels: want.in_channels(),
                out_channels: want.out_channels(),
                stride: want.stride(),
                pad: want.pad(),
                scale: rec.scale,
                weights,
            });
        }
        let mut affines = Vec::with_capacity(model.bns.len());
        for (i, (rec, want)) in model.bns.iter().zip(&ref_bns).enumerate() {
            if rec.channels as usize != want.channels() || rec.affine.is_some() != want.learn_affine() {
                return Err(Error::Integrity(format!("batch-norm layer {i} disagrees with config")));
            }
            let moments_ok = rec.mean.iter().all(|v| v.is_finite())
                && rec.var.iter().all(|v| v.is_finite() && *v >= 0.0)
                && rec.epsilon > 0.0;
            if !moments_ok {
                return Err(Error::Integrity(format!("batch-norm layer {i} has invalid moments")));
            }
            affines.push(ChannelAffine::fold(rec));
        }
        Ok(Self { meta, convs, affines })
    }

    pub fn meta(&self) -> &PackedMeta {
        &self.meta
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.meta.config
    }

    pub fn conv_layers(&self) -> &[PackedConvLayer] {
        &self.convs
    }

    pub fn affines(&self) -> &[ChannelAffine] {
        &self.affines
    }

    fn check_input(&self, x: &Tensor4<f32>) -> Result<()> {
        let cfg = &self.meta.config;
        if x.c() != cfg.input_channels || x.is_empty() {
            return Err(Error::arg(format!(
                "input has {} channels, model expects {}",
                x.c(),
                cfg.input_channels
            )));
        }
        if let Some((h, w)) = self.meta.input_size {
            if (x.h(), x.w()) != (h, w) {
                return Err(Error::arg(format!(
                    "input is {}×{}, model expects {h}×{w}",
                    x.h(),
                    x.w()
                )));
            }
        }
        Ok(())
    }

    /// Logits `(N, classes, 1, 1)`.
    pub fn forward(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.check_input(x)?;
        let cfg = &self.meta.config;
        let last_bn = self.affines.len() - 1;
        let mut h = self.affines[0].apply(x, cfg.input_relu);
        h = signconv_infer(&h, &self.convs[0])?;
        for blk in 0..3 * cfg.blocks_per_scale {
            let (c1, c2) = (&self.convs[1 + 2 * blk], &self.convs[2 + 2 * blk]);
            let a = self.affines[1 + 2 * blk].apply(&h, true);
            let t = signconv_infer(&a, c1)?;
            let b = self.affines[2 + 2 * blk].apply(&t, true);
            let mut out = signconv_infer(&b, c2)?;
            if cfg.skip_connections {
                let mut s = if c1.stride > 1 { avg_pool(&h, 3, 2, 1)? } else { h };
                if s.c() != out.c() {
                    s = zero_pad_channels(&s, out.c())?;
                }
                out.add_assign(&s)?;
            }
            h = out;
        }
        let a = self.affines[last_bn - 1].apply(&h, true);
        let c = signconv_infer(&a, self.convs.last().expect("head layer"))?;
        let b = self.affines[last_bn].apply(&c, false);
        Ok(global_avg_pool(&b))
    }

    /// Top-1 class per sample (lowest index wins ties).
    pub fn predict(&self, x: &Tensor4<f32>) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits
            .data()
            .chunks(logits.sample_len())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0
            })
            .collect())
    }
}

/// Class probabilities for each image in `x`.
pub fn infer(net: &InferenceNet, x: &Tensor4<f32>) -> Result<Vec<Vec<f64>>> {
    Ok(softmax(&net.forward(x)?))
}
