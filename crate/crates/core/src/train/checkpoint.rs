//! Full-precision training checkpoint.
//!
//! ```text
//! "B1WC" | version u16 | precision u8 (32|64) | config JSON (u32 len + bytes)
//! epoch u64 | step u64
//! conv count u32 | per conv: shadow weights
//! bn count u32   | per bn: learn u8, mean, var, gamma, beta
//! momentum f64 | weight decay f64 | lr f64 | buffer count u32 | buffers
//! ```
//!
//! Real arrays are a u64 length followed by values at the model precision;
//! everything is little-endian.

use std::fs;
use std::path::Path;

use super::OptimizerState;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::tensor::{Real, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"B1WC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub optimizer: OptimizerState<T>,
    pub epoch: u64,
    pub step: u64,
}

fn precision_tag<T: Real>() -> u8 {
    if T::NAME == "f32" {
        32
    } else {
        64
    }
}

pub fn encode_checkpoint<T: Real>(net: &Network<T>, opt: &OptimizerState<T>, epoch: u64, step: u64) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u8(precision_tag::<T>());
    let cfg = serde_json::to_vec(net.config())?;
    w.u32(cfg.len() as u32);
    w.bytes(&cfg);
    w.u64(epoch);
    w.u64(step);
    let convs = net.conv_layers();
    w.u32(convs.len() as u32);
    for c in convs {
        w.reals(c.shadow_weights().data());
    }
    let bns = net.bn_layers();
    w.u32(bns.len() as u32);
    for b in bns {
        w.u8(b.learn_affine() as u8);
        w.reals(&b.running_mean);
        w.reals(&b.running_var);
        w.reals(b.gamma());
        w.reals(b.beta());
    }
    w.f64(opt.momentum);
    w.f64(opt.weight_decay);
    w.f64(opt.lr);
    w.u32(opt.buffers.len() as u32);
    for b in &opt.buffers {
        w.reals(b);
    }
    Ok(w.buf)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u8("precision")?;
    if tag != precision_tag::<T>() {
        return Err(Error::format(
            6,
            format!("checkpoint holds {tag}-bit reals, reader wants {}", T::NAME),
        ));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos() as u64;
    let cfg: NetworkConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::format(cfg_at, format!("bad config JSON: {e}")))?;
    let epoch = r.u64("epoch")?;
    let step = r.u64("step")?;
    let mut net = Network::<T>::build(&cfg)?;

    let at = r.pos() as u64;
    let n_conv = r.u32("conv count")? as usize;
    if n_conv != cfg.conv_layer_count() {
        return Err(Error::format(
            at,
            format!("{n_conv} conv records for {} layers", cfg.conv_layer_count()),
        ));
    }
    for conv in net.conv_layers_mut() {
        let at = r.pos() as u64;
        let dims = conv.shadow_weights().dims();
        let w = Tensor4::from_vec(dims, r.reals("conv weights")?).map_err(|e| Error::format(at, e.to_string()))?;
        conv.set_shadow_weights(w)?;
    }
    let at = r.pos() as u64;
    let n_bn = r.u32("bn count")? as usize;
    if n_bn != net.bn_layers().len() {
        return Err(Error::format(
            at,
            format!("{n_bn} batch-norm records for {} layers", net.bn_layers().len()),
        ));
    }
    for bn in net.bn_layers_mut() {
        let at = r.pos() as u64;
        let learn = r.u8("affine flag")? != 0;
        if learn != bn.learn_affine() {
            return Err(Error::format(at, "batch-norm affine flag disagrees with config"));
        }
        let mean = r.reals("mean")?;
        let var = r.reals("var")?;
        let gamma = r.reals("gamma")?;
        let beta = r.reals("beta")?;
        bn.set_moments(mean, var)
            .map_err(|e| Error::format(at, e.to_string()))?;
        bn.set_affine(gamma, beta)
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    let mut opt = OptimizerState::new(r.f64("momentum")?, r.f64("weight decay")?);
    opt.lr = r.f64("lr")?;
    let n_buf = r.u32("buffer count")? as usize;
    for _ in 0..n_buf {
        opt.buffers.push(r.reals("momentum buffer")?);
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos() as u64, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        network: net,
        optimizer: opt,
        epoch,
        step,
    })
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    net: &Network<T>,
    opt: &OptimizerState<T>,
    epoch: u64,
    step: u64,
) -> Result<()> {
    fs::write(path, encode_checkpoint(net, opt, epoch, step)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}
