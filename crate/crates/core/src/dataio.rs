//! IDX (ubyte) datasets: parsing, writing and minibatch order.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CignError, Result};
use crate::scalar::Scalar;
use crate::substrate::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;

/// Environment variable naming the directory that holds the dataset folders.
pub const DATA_ROOT_ENV: &str = "CIGN_DATA_ROOT";

pub const FASHION_CLASS_NAMES: [&str; CLASSES] =
    ["T-shirt/top", "Trouser", "Pullover", "Dress", "Coat", "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot"];

pub const MNIST_CLASS_NAMES: [&str; CLASSES] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Fashion,
}

impl DatasetKind {
    pub fn class_names(self) -> &'static [&'static str; CLASSES] {
        match self {
            DatasetKind::Mnist => &MNIST_CLASS_NAMES,
            DatasetKind::Fashion => &FASHION_CLASS_NAMES,
        }
    }

    /// Folder name under the data root.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion-mnist",
        }
    }
}

/// Grayscale 28x28 images with class labels, stored as raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub split: Split,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> CignError {
    CignError::Format { field, detail: detail.into() }
}

fn maybe_gunzip(bytes: &[u8], field: &'static str) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| fmt_err(field, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an image/label IDX pair; either file may be gzip-compressed.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<LabeledDataset> {
    let img = maybe_gunzip(image_bytes, "image file")?;
    let lab = maybe_gunzip(label_bytes, "label file")?;

    if img.len() < 4 {
        return Err(fmt_err("image magic", format!("{} bytes, need 4", img.len())));
    }
    match be_u32(&img, 0) {
        IMAGE_MAGIC => {}
        LABEL_MAGIC => return Err(fmt_err("image magic", "label file passed as images")),
        m => return Err(fmt_err("image magic", format!("{m:#010x}, expected {IMAGE_MAGIC:#010x}"))),
    }
    if img.len() < 16 {
        return Err(fmt_err("image header", format!("{} bytes, need 16", img.len())));
    }
    let n = be_u32(&img, 4) as usize;
    let (rows, cols) = (be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    if rows != SIDE {
        return Err(fmt_err("image rows", format!("{rows}, expected {SIDE}")));
    }
    if cols != SIDE {
        return Err(fmt_err("image cols", format!("{cols}, expected {SIDE}")));
    }
    let want = 16 + n * SIDE * SIDE;
    if img.len() != want {
        return Err(fmt_err("image payload", format!("{} bytes for {n} images, expected {want}", img.len())));
    }

    if lab.len() < 4 {
        return Err(fmt_err("label magic", format!("{} bytes, need 4", lab.len())));
    }
    match be_u32(&lab, 0) {
        LABEL_MAGIC => {}
        IMAGE_MAGIC => return Err(fmt_err("label magic", "image file passed as labels")),
        m => return Err(fmt_err("label magic", format!("{m:#010x}, expected {LABEL_MAGIC:#010x}"))),
    }
    if lab.len() < 8 {
        return Err(fmt_err("label header", format!("{} bytes, need 8", lab.len())));
    }
    let nl = be_u32(&lab, 4) as usize;
    if nl != n {
        return Err(fmt_err("label count", format!("{nl} labels for {n} images")));
    }
    if lab.len() != 8 + n {
        return Err(fmt_err("label payload", format!("{} bytes for {n} labels, expected {}", lab.len(), 8 + n)));
    }
    let labels = lab[8..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l as usize >= CLASSES) {
        return Err(fmt_err("label value", format!("label {} at index {i} outside [0, {CLASSES})", labels[i])));
    }
    Ok(LabeledDataset { split, pixels: img[16..].to_vec(), labels })
}

impl LabeledDataset {
    pub fn from_raw(split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * SIDE * SIDE {
            return Err(fmt_err("image payload", format!("{} bytes for {} labels", pixels.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(fmt_err("label value", format!("label {l} outside [0, {CLASSES})")));
        }
        Ok(LabeledDataset { split, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// First `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            split: self.split,
            pixels: self.pixels[..n * SIDE * SIDE].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Images at `indices` as an `n x 1 x 28 x 28` tensor scaled to `[0, 1]`.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let scale = T::of(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * SIDE * SIDE);
        for &i in indices {
            data.extend(self.raw_image(i).iter().map(|&p| T::of(p as f64) * scale));
        }
        Tensor::new(vec![indices.len(), 1, SIDE, SIDE], data).expect("sizes agree")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    /// Uncompressed IDX image and label files.
    pub fn to_idx(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.len() as u32;
        let mut img = Vec::with_capacity(16 + self.pixels.len());
        for w in [IMAGE_MAGIC, n, SIDE as u32, SIDE as u32] {
            img.extend_from_slice(&w.to_be_bytes());
        }
        img.extend_from_slice(&self.pixels);
        let mut lab = Vec::with_capacity(8 + self.labels.len());
        for w in [LABEL_MAGIC, n] {
            lab.extend_from_slice(&w.to_be_bytes());
        }
        lab.extend_from_slice(&self.labels);
        (img, lab)
    }
}

/// Shuffled minibatches of `0..n` for one epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(CignError::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CignError::io(path, e))
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string(), stem.replacen("-idx", ".idx", 1)] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(CignError::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("neither {stem} nor {stem}.gz found")),
    ))
}

/// Loads one split from a directory holding the standard IDX file names.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let images = find_file(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
    let labels = find_file(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
    log::info!("loading {} and {}", images.display(), labels.display());
    parse_idx(&read_file(&images)?, &read_file(&labels)?, split)
}

/// Dataset directory: `explicit` if given, else `$CIGN_DATA_ROOT/<dataset folder>`.
pub fn dataset_dir(kind: DatasetKind, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(kind.dir_name())),
        None => Err(CignError::Config(format!("no dataset path configured and {DATA_ROOT_ENV} is not set"))),
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use flate2::write::GzEncoder;
    use flate2::Compression;

    use super::*;

    fn sample(n: usize) -> LabeledDataset {
        let pixels = (0..n * SIDE * SIDE).map(|i| (i * 7 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % CLASSES) as u8).collect();
        LabeledDataset::from_raw(Split::Train, pixels, labels).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let d = sample(13);
        let (img, lab) = d.to_idx();
        let back = parse_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_idx(), (img, lab));
    }

    #[test]
    fn gzip_is_detected() {
        let (img, lab) = sample(3).to_idx();
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&img).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&gz, &lab, Split::Test).unwrap().len(), 3);
    }

    fn field(e: CignError) -> &'static str {
        match e {
            CignError::Format { field, .. } => field,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_file_as_images_is_named() {
        let (_, lab) = sample(2).to_idx();
        let e = parse_idx(&lab, &lab, Split::Train).unwrap_err();
        assert!(e.to_string().contains("label file passed as images"));
        assert_eq!(field(e), "image magic");
    }

    #[test]
    fn bad_fields_are_named() {
        let (img, lab) = sample(2).to_idx();
        assert_eq!(field(parse_idx(&img[..img.len() - 1], &lab, Split::Train).unwrap_err()), "image payload");
        let mut wide = img.clone();
        wide[15] = 27;
        assert_eq!(field(parse_idx(&wide, &lab, Split::Train).unwrap_err()), "image cols");
        let mut short = lab.clone();
        short[7] = 1;
        assert_eq!(field(parse_idx(&img, &short, Split::Train).unwrap_err()), "label count");
        let mut bad = lab.clone();
        bad[8] = 10;
        assert_eq!(field(parse_idx(&img, &bad, Split::Train).unwrap_err()), "label value");
    }

    #[test]
    fn zero_image_scales_to_zero() {
        let d = LabeledDataset::from_raw(Split::Test, vec![0; SIDE * SIDE], vec![3]).unwrap();
        let t = d.images::<f32>(&[0]);
        assert_eq!(t.shape(), &[1, 1, SIDE, SIDE]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let full = LabeledDataset::from_raw(Split::Test, vec![255; SIDE * SIDE], vec![3]).unwrap();
        assert!(full.images::<f64>(&[0]).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batch_counts_and_order() {
        let b = batches(60_000, 125, 1, 0).unwrap();
        assert_eq!(b.len(), 480);
        let short = batches(1000, 125 * 3, 1, 0).unwrap();
        assert_eq!(short.last().unwrap().len(), 1000 - 750);
        assert_eq!(batches(500, 50, 9, 3).unwrap(), batches(500, 50, 9, 3).unwrap());
        assert_ne!(batches(500, 50, 9, 3).unwrap(), batches(500, 50, 9, 4).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..60_000).collect::<Vec<_>>());
    }
}
