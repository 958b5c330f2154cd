//! The packed model file.
//!
//! ```text
//! header (24 bytes)
//!   magic "B1W1" | version u16 | flags u16 (0) | conv count u32 | bn count u32 | payload bytes u64
//! conv records (34 bytes each, canonical layer order)
//!   index u32 | F u32 | Cin u32 | Cout u32 | stride u32 | encoding u8 | reserved u8
//!   | scale f32 | bit offset u64
//! bn records (canonical order)
//!   channels u32 | affine u8 | epsilon f32 | mean f32×C | var f32×C | [gamma f32×C | beta f32×C]
//! payload
//! ```
//!
//! Encoding 0 stores one bit per weight: bit `j` of a layer lives in byte
//! `offset/8 + j/8` at position `j % 8` (least significant first), 1 meaning
//! `+1`. Weights are ordered `(Cout, Cin, kh, kw)` row-major and each layer
//! starts on a byte boundary. Encoding 1 stores `f32` weights in the same
//! order and is only used for layers on the full-precision exclusion list.
//! All multi-byte fields are little-endian.

use crate::binarize::sign_bit;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::tensor::{Real, Tensor4};

pub const PACKED_MAGIC: &[u8; 4] = b"B1W1";
pub const PACKED_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 24;
pub const CONV_RECORD_BYTES: usize = 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightEncoding {
    Signs = 0,
    Float32 = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedHeader {
    pub version: u16,
    pub flags: u16,
    pub conv_count: u32,
    pub bn_count: u32,
    pub payload_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRecord {
    pub index: u32,
    pub kernel: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    pub stride: u32,
    pub encoding: WeightEncoding,
    pub scale: f32,
    pub bit_offset: u64,
}

impl ConvRecord {
    pub fn weight_count(&self) -> usize {
        (self.kernel * self.kernel * self.in_channels * self.out_channels) as usize
    }

    pub fn payload_bytes(&self) -> usize {
        match self.encoding {
            WeightEncoding::Signs => self.weight_count().div_ceil(8),
            WeightEncoding::Float32 => 4 * self.weight_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnRecord {
    pub channels: u32,
    pub epsilon: f32,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// `(gamma, beta)`, stored only for layers that learn them.
    pub affine: Option<(Vec<f32>, Vec<f32>)>,
}

impl BnRecord {
    pub fn encoded_bytes(&self) -> usize {
        let arrays = if self.affine.is_some() { 4 } else { 2 };
        9 + 4 * arrays * self.channels as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub header: PackedHeader,
    pub convs: Vec<ConvRecord>,
    pub bns: Vec<BnRecord>,
    pub payload: Vec<u8>,
}

/// Sign bits of `w` in `(Cout, Cin, kh, kw)` order, LSB first, padded to a byte.
pub fn pack_signs<T: Real>(w: &[T]) -> Vec<u8> {
    let mut out = vec![0u8; w.len().div_ceil(8)];
    for (j, &v) in w.iter().enumerate() {
        if sign_bit(v) {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

#[inline]
pub fn bit_at(bits: &[u8], j: usize) -> bool {
    bits[j / 8] >> (j % 8) & 1 == 1
}

/// Closed-form payload size: `Σ ⌈F²·Cin·Cout/8⌉` over sign-encoded layers
/// plus 4 bytes per weight of full-precision layers.
pub fn packed_payload_bytes(cfg: &NetworkConfig) -> Result<u64> {
    let net = Network::<f32>::build(&NetworkConfig {
        binarized: true,
        ..cfg.clone()
    })?;
    Ok(net
        .conv_layers()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if cfg.full_precision_layers.contains(&i) {
                4 * c.weight_count() as u64
            } else {
                c.weight_count().div_ceil(8) as u64
            }
        })
        .sum())
}

/// Exact packed file size for a config.
pub fn packed_file_size(cfg: &NetworkConfig) -> Result<u64> {
    let net = Network::<f32>::build(cfg)?;
    let bn: usize = net
        .bn_layers()
        .iter()
        .map(|b| 9 + 4 * b.channels() * if b.learn_affine() { 4 } else { 2 })
        .sum();
    Ok((HEADER_BYTES + CONV_RECORD_BYTES * net.conv_layers().len() + bn) as u64 + packed_payload_bytes(cfg)?)
}

impl PackedModel {
    /// Packs a binarized network. Every conv layer must be binarized unless
    /// it is on the config's exclusion list.
    pub fn from_network<T: Real>(net: &Network<T>) -> Result<Self> {
        let cfg = net.config();
        let mut convs = Vec::new();
        let mut payload = Vec::new();
        for (i, c) in net.conv_layers().into_iter().enumerate() {
            let excluded = cfg.full_precision_layers.contains(&i);
            if !c.is_binarized() && !excluded {
                return Err(Error::Export(format!(
                    "conv layer {i} is not binarized and not on the full-precision list"
                )));
            }
            let encoding = if c.is_binarized() {
                WeightEncoding::Signs
            } else {
                WeightEncoding::Float32
            };
            convs.push(ConvRecord {
                index: i as u32,
                kernel: c.kernel() as u32,
                in_channels: c.in_channels() as u32,
                out_channels: c.out_channels() as u32,
                stride: c.stride() as u32,
                encoding,
                scale: c.scale() as f32,
                bit_offset: 8 * payload.len() as u64,
            });
            match encoding {
                WeightEncoding::Signs => payload.extend(pack_signs(c.shadow_weights().data())),
                WeightEncoding::Float32 => {
                    for &v in c.shadow_weights().data() {
                        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                    }
                }
            }
        }
        let bns = net
            .bn_layers()
            .into_iter()
            .map(|b| {
                let f = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
                BnRecord {
                    channels: b.channels() as u32,
                    epsilon: b.epsilon() as f32,
                    mean: f(&b.running_mean),
                    var: f(&b.running_var),
                    affine: b.learn_affine().then(|| (f(b.gamma()), f(b.beta()))),
                }
            })
            .collect::<Vec<_>>();
        Ok(Self {
            header: PackedHeader {
                version: PACKED_VERSION,
                flags: 0,
                conv_count: convs.len() as u32,
                bn_count: bns.len() as u32,
                payload_bytes: payload.len() as u64,
            },
            convs,
            bns,
            payload,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(PACKED_MAGIC);
        w.u16(self.header.version);
        w.u16(self.header.flags);
        w.u32(self.header.conv_count);
        w.u32(self.header.bn_count);
        w.u64(self.header.payload_bytes);
        for c in &self.convs {
            for v in [c.index, c.kernel, c.in_channels, c.out_channels, c.stride] {
                w.u32(v);
            }
            w.u8(c.encoding as u8);
            w.u8(0);
            w.f32(c.scale);
            w.u64(c.bit_offset);
        }
        for b in &self.bns {
            w.u32(b.channels);
            w.u8(b.affine.is_some() as u8);
            w.f32(b.epsilon);
            let arrays: Vec<&Vec<f32>> = match &b.affine {
                Some((g, be)) => vec![&b.mean, &b.var, g, be],
                None => vec![&b.mean, &b.var],
            };
            for a in arrays {
                a.iter().for_each(|&v| w.f32(v));
            }
        }
        w.bytes(&self.payload);
        w.buf
    }

    /// Parses and structurally validates a packed file.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != PACKED_MAGIC {
            return Err(Error::format(0, "bad magic, not a packed model"));
        }
        let version = r.u16("version")?;
        if version != PACKED_VERSION {
            return Err(Error::format(4, format!("unsupported format version {version}")));
        }
        let header = PackedHeader {
            version,
            flags: r.u16("flags")?,
            conv_count: r.u32("conv count")?,
            bn_count: r.u32("bn count")?,
            payload_bytes: r.u64("payload length")?,
        };
        if header.flags != 0 {
            return Err(Error::format(6, format!("unknown flags {:#06x}", header.flags)));
        }
        let mut convs = Vec::new();
        let mut expect_offset = 0u64;
        for _ in 0..header.conv_count {
            let at = r.pos() as u64;
            let index = r.u32("layer index")?;
            let kernel = r.u32("kernel")?;
            let in_channels = r.u32("input channels")?;
            let out_channels = r.u32("output channels")?;
            let stride = r.u32("stride")?;
            let encoding = match r.u8("encoding")? {
                0 => WeightEncoding::Signs,
                1 => WeightEncoding::Float32,
                e => return Err(Error::format(at + 20, format!("unknown weight encoding {e}"))),
            };
            r.u8("reserved")?;
            let rec = ConvRecord {
                index,
                kernel,
                in_channels,
                out_channels,
                stride,
                encoding,
                scale: r.f32("scale")?,
                bit_offset: r.u64("bit offset")?,
            };
            if rec.index as usize != convs.len() || rec.bit_offset != expect_offset {
                return Err(Error::format(
                    at,
                    format!("conv record {} is out of sequence", rec.index),
                ));
            }
            if rec.kernel == 0 || rec.in_channels == 0 || rec.out_channels == 0 || rec.stride == 0 {
                return Err(Error::format(at, "conv record has a zero dimension"));
            }
            expect_offset += 8 * rec.payload_bytes() as u64;
            convs.push(rec);
        }
        if expect_offset != 8 * header.payload_bytes {
            return Err(Error::format(
                16,
                format!(
                    "payload length {} disagrees with layer records ({} bytes)",
                    header.payload_bytes,
                    expect_offset / 8
                ),
            ));
        }
        let mut bns = Vec::new();
        for _ in 0..header.bn_count {
            let at = r.pos() as u64;
            let channels = r.u32("bn channels")?;
            let affine = r.u8("bn affine flag")?;
            if affine > 1 {
                return Err(Error::format(at + 4, format!("bad affine flag {affine}")));
            }
            let epsilon = r.f32("epsilon")?;
            let arrays = if affine == 1 { 4 } else { 2 };
            if r.remaining() < 4 * arrays * channels as usize {
                return Err(Error::format(r.pos() as u64, "truncated batch-norm record"));
            }
            let mut read = |what: &str| -> Result<Vec<f32>> { (0..channels).map(|_| r.f32(what)).collect() };
            let mean = read("bn mean")?;
            let var = read("bn variance")?;
            let affine = if affine == 1 {
                Some((read("bn gamma")?, read("bn beta")?))
            } else {
                None
            };
            bns.push(BnRecord {
                channels,
                epsilon,
                mean,
                var,
                affine,
            });
        }
        let at = r.pos() as u64;
        if r.remaining() as u64 != header.payload_bytes {
            return Err(Error::format(
                at,
                format!(
                    "expected {} payload bytes, found {}",
                    header.payload_bytes,
                    r.remaining()
                ),
            ));
        }
        let payload = r.take(header.payload_bytes as usize, "payload")?.to_vec();
        Ok(Self {
            header,
            convs,
            bns,
            payload,
        })
    }

    /// Payload bytes of conv layer `i`.
    pub fn layer_payload(&self, i: usize) -> &[u8] {
        let c = &self.convs[i];
        let start = (c.bit_offset / 8) as usize;
        &self.payload[start..start + c.payload_bytes()]
    }

    /// Mutable payload bytes of conv layer `i`.
    pub fn layer_payload_mut(&mut self, i: usize) -> &mut [u8] {
        let c = &self.convs[i];
        let start = (c.bit_offset / 8) as usize;
        let len = c.payload_bytes();
        &mut self.payload[start..start + len]
    }

    /// Bytes a 32-bit float copy of the same conv weights would need.
    pub fn float_weight_bytes(&self) -> u64 {
        self.convs.iter().map(|c| 4 * c.weight_count() as u64).sum()
    }

    /// Weights of layer `i` as `±scale` (or stored floats), shaped `(Cout, Cin, F, F)`.
    pub fn layer_weights(&self, i: usize) -> Tensor4<f32> {
        let c = &self.convs[i];
        let dims = [
            c.out_channels as usize,
            c.in_channels as usize,
            c.kernel as usize,
            c.kernel as usize,
        ];
        let bytes = self.layer_payload(i);
        let data = match c.encoding {
            WeightEncoding::Signs => (0..c.weight_count())
                .map(|j| if bit_at(bytes, j) { c.scale } else { -c.scale })
                .collect(),
            WeightEncoding::Float32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        };
        Tensor4::from_vec(dims, data).expect("record dims match payload")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_packing_is_lsb_first() {
        let w = [1.0f32, -1.0, 0.0, -0.5, 2.0, 2.0, 2.0, -2.0, 3.0];
        assert_eq!(pack_signs(&w), vec![0b0111_0101, 0b1]);
        assert!(bit_at(&[0b100], 2));
        assert!(!bit_at(&[0b100], 1));
    }
}
