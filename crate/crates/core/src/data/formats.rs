//! MNIST IDX and CIFAR binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "file truncated inside header"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("expected {need} pixel bytes after the header, found {}", body.len()),
        ));
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            bytes.len() as u64,
            format!("expected {count} labels after the header, found {}", body.len()),
        ));
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    load_mnist_with(dir, split, &MnistFiles::default())
}

/// MNIST as `(count, 1, 28, 28)` with ten classes.
pub fn load_mnist_with(dir: impl AsRef<Path>, split: Split, files: &MnistFiles) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (img, lab) = match split {
        Split::Train => (&files.train_images, &files.train_labels),
        Split::Test => (&files.test_images, &files.test_labels),
    };
    let (count, rows, cols, pixels) = parse_idx_images(&read(&dir.join(img))?)?;
    let labels = parse_idx_labels(&read(&dir.join(lab))?)?;
    if labels.len() != count {
        return Err(Error::format(4, format!("{count} images but {} labels", labels.len())));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(
            8 + pos as u64,
            format!("label {} is not a digit", labels[pos]),
        ));
    }
    Dataset::new(pixels, [1, rows, cols], labels, split, 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::C10 => "cifar-10-batches-bin",
            CifarVariant::C100 => "cifar-100-binary",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CifarFiles {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl CifarFiles {
    pub fn standard(variant: CifarVariant) -> Self {
        match variant {
            CifarVariant::C10 => Self {
                train: (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                test: vec!["test_batch.bin".into()],
            },
            CifarVariant::C100 => Self {
                train: vec!["train.bin".into()],
                test: vec!["test.bin".into()],
            },
        }
    }
}

/// Parses concatenated CIFAR records, keeping the fine label for CIFAR-100.
pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<u8>, Vec<usize>)> {
    let lb = variant.label_bytes();
    let rec = lb + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(rec) {
        let start = bytes.len() - bytes.len() % rec;
        return Err(Error::format(
            start as u64,
            format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - start
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[lb - 1] as usize;
        if label >= variant.class_count() {
            return Err(Error::format(
                (i * rec + lb - 1) as u64,
                format!("label {label} outside [0, {})", variant.class_count()),
            ));
        }
        labels.push(label);
        pixels.extend_from_slice(&r[lb..]);
    }
    Ok((pixels, labels))
}

fn cifar_root(dir: &Path, variant: CifarVariant, probe: &str) -> PathBuf {
    let nested = dir.join(variant.subdir());
    if !dir.join(probe).exists() && nested.join(probe).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load_cifar(dir: impl AsRef<Path>, variant: CifarVariant, split: Split) -> Result<Dataset> {
    load_cifar_with(dir, variant, split, &CifarFiles::standard(variant))
}

/// CIFAR as `(count, 3, 32, 32)`. Files are looked up in `dir` or in the
/// standard extracted subdirectory.
pub fn load_cifar_with(
    dir: impl AsRef<Path>,
    variant: CifarVariant,
    split: Split,
    files: &CifarFiles,
) -> Result<Dataset> {
    let names = match split {
        Split::Train => &files.train,
        Split::Test => &files.test,
    };
    if names.is_empty() {
        return Err(Error::arg("no CIFAR files configured"));
    }
    let root = cifar_root(dir.as_ref(), variant, &names[0]);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let (p, l) = parse_cifar_records(&read(&root.join(name))?, variant)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(
        pixels,
        [3, CIFAR_SIDE, CIFAR_SIDE],
        labels,
        split,
        variant.class_count(),
    )
}
