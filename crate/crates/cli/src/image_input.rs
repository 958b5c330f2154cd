//! Single-image input for `infer`: PGM/PPM or a raw dataset record.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bitweight_core::data::Image;

/// Reads `path` as a `C×H×W` byte image.
///
/// Netpbm files are converted to grey or RGB to match `channels`. Any other
/// file must be a raw record of exactly `C·H·W` pixel bytes, optionally
/// preceded by one (CIFAR-10) or two (CIFAR-100) label bytes; the returned
/// label is the last of those.
pub fn read_image(path: &Path, dims: [usize; 3]) -> Result<(Image, Option<usize>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let [c, h, w] = dims;
    if bytes.len() >= 2 && bytes[0] == b'P' && matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .with_context(|| format!("decoding {}", path.display()))?;
        if (img.height() as usize, img.width() as usize) != (h, w) {
            bail!("image is {}×{}, model expects {h}×{w}", img.height(), img.width());
        }
        let data = match c {
            1 => img.to_luma8().into_raw(),
            3 => {
                // interleaved RGB to channel planes
                let rgb = img.to_rgb8().into_raw();
                (0..3)
                    .flat_map(|ch| rgb.iter().skip(ch).step_by(3).copied().collect::<Vec<_>>())
                    .collect()
            }
            _ => bail!("netpbm input supports 1 or 3 channels, model has {c}"),
        };
        return Ok((Image::new(c, h, w, data)?, None));
    }
    let pixels = c * h * w;
    let label_bytes = bytes.len().checked_sub(pixels).filter(|&n| n <= 2);
    match label_bytes {
        Some(n) => {
            let label = (n > 0).then(|| bytes[n - 1] as usize);
            Ok((Image::new(c, h, w, bytes[n..].to_vec())?, label))
        }
        None => bail!(
            "{} is {} bytes; expected a PGM/PPM file or a raw record of {pixels} pixel bytes",
            path.display(),
            bytes.len()
        ),
    }
}
