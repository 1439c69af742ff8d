//! Dataset ingestion and class-balanced subsetting.
//!
//! Every set produced here holds pixels in `[0, 1]` laid out as
//! `(count, channels, height, width)` in row-major order.

mod cifar;
mod idx;
pub mod mat;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

pub const DATA_ROOT_ENV: &str = "TLDR_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Svhn,
    Cifar10,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::Mnist,
        DatasetId::FashionMnist,
        DatasetId::Svhn,
        DatasetId::Cifar10,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashionmnist",
            DatasetId::Svhn => "svhn",
            DatasetId::Cifar10 => "cifar10",
        }
    }

    /// `(channels, height, width)` of every image in the dataset.
    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist | DatasetId::FashionMnist => (1, 28, 28),
            DatasetId::Svhn | DatasetId::Cifar10 => (3, 32, 32),
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fashionmnist" => Ok(DatasetId::FashionMnist),
            "svhn" => Ok(DatasetId::Svhn),
            "cifar10" => Ok(DatasetId::Cifar10),
            _ => Err(Error::Config(format!(
                "unknown dataset `{s}` (expected one of mnist, fashionmnist, svhn, cifar10)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Images in `[0, 1]` with integer class labels.
#[derive(Clone, PartialEq)]
pub struct LabeledImageSet {
    name: String,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<i64>,
}

impl fmt::Debug for LabeledImageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LabeledImageSet")
            .field("name", &self.name)
            .field("count", &self.len())
            .field("shape", &(self.channels, self.height, self.width))
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

impl LabeledImageSet {
    /// Builds a set after checking the pixel, label and shape contracts.
    pub fn new(
        name: impl Into<String>,
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<i64>,
    ) -> Result<Self> {
        let name = name.into();
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "{name}: channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::Argument(format!("{name}: empty image geometry or class count")));
        }
        let per_image = channels * height * width;
        if images.len() != labels.len() * per_image {
            return Err(Error::Argument(format!(
                "{name}: {} pixel values do not match {} labels of shape {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("{name}: pixel value {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l < 0 || l as usize >= num_classes) {
            return Err(Error::Argument(format!(
                "{name}: label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            name,
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    /// Number of samples per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// New set holding the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            name: self.name.clone(),
            images,
            labels,
            ..*self
        })
    }

    /// Images `indices` as a `(len, c, h, w)` float tensor.
    pub fn images_tensor(&self, indices: &[usize], device: Device) -> Tensor {
        let n = self.image_len();
        let mut buf = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            buf.extend_from_slice(self.image(i));
        }
        Tensor::from_slice(&buf)
            .view([
                indices.len() as i64,
                self.channels as i64,
                self.height as i64,
                self.width as i64,
            ])
            .to_device(device)
    }

    pub fn labels_tensor(&self, indices: &[usize], device: Device) -> Tensor {
        let labels: Vec<i64> = indices.iter().map(|&i| self.labels[i]).collect();
        Tensor::from_slice(&labels).to_kind(Kind::Int64).to_device(device)
    }

    /// The whole set as an image tensor and a label tensor.
    pub fn to_tensors(&self, device: Device) -> (Tensor, Tensor) {
        let all: Vec<usize> = (0..self.len()).collect();
        (self.images_tensor(&all, device), self.labels_tensor(&all, device))
    }
}

/// Resolves the dataset root: explicit value, then `TLDR_DATA_ROOT`, then `./data`.
pub fn data_root(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads a full split from `<root>/<dataset>/`.
///
/// Expected layouts:
/// - mnist / fashionmnist: the four IDX files (optionally `.gz`)
/// - cifar10: `data_batch_{1..5}.bin` and `test_batch.bin`, directly or under `cifar-10-batches-bin/`
/// - svhn: `train_32x32.mat` and `test_32x32.mat` (cropped digits)
pub fn load_dataset(root: &Path, id: DatasetId, split: Split) -> Result<LabeledImageSet> {
    let dir = root.join(id.as_str());
    let (images, labels) = match id {
        DatasetId::Mnist | DatasetId::FashionMnist => idx::load(&dir, split)?,
        DatasetId::Cifar10 => cifar::load(&dir, split)?,
        DatasetId::Svhn => load_svhn(&dir, split)?,
    };
    LabeledImageSet::new(id.as_str(), id.image_shape(), id.num_classes(), images, labels)
        .map_err(|e| Error::Ingestion {
            path: dir,
            reason: e.to_string(),
        })
}

fn load_svhn(dir: &Path, split: Split) -> Result<(Vec<f32>, Vec<i64>)> {
    let path = dir.join(match split {
        Split::Train => "train_32x32.mat",
        Split::Test => "test_32x32.mat",
    });
    let bytes = std::fs::read(&path).map_err(|e| Error::Ingestion {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::Ingestion {
        path: path.clone(),
        reason,
    };
    let vars = mat::parse(&bytes).map_err(bad)?;
    let x = vars.get("X").ok_or_else(|| bad("variable X missing".into()))?;
    let y = vars.get("y").ok_or_else(|| bad("variable y missing".into()))?;
    if x.dims.len() != 4 || x.dims[0] != 32 || x.dims[1] != 32 || x.dims[2] != 3 {
        return Err(bad(format!("X has dims {:?}, expected 32x32x3xN", x.dims)));
    }
    let count = x.dims[3];
    if y.data.len() != count {
        return Err(bad(format!("y has {} entries for {count} images", y.data.len())));
    }
    // MATLAB storage is column-major: X(row, col, ch, n).
    let mut images = vec![0f32; count * 3 * 32 * 32];
    for n in 0..count {
        for c in 0..3 {
            for col in 0..32 {
                for row in 0..32 {
                    let src = row + 32 * (col + 32 * (c + 3 * n));
                    let dst = ((n * 3 + c) * 32 + row) * 32 + col;
                    images[dst] = (x.data.get(src) / 255.0) as f32;
                }
            }
        }
    }
    let labels = y
        .data
        .iter_f64()
        .map(|v| {
            let l = v as i64;
            match l {
                10 => Ok(0),
                0..=9 => Ok(l),
                _ => Err(bad(format!("label {v} outside 1..=10"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((images, labels))
}

/// Indices of a stratified sample without replacement.
///
/// Each class is shuffled with a stream derived from `(seed, class)`, so for a
/// fixed seed smaller subsets are contained in larger ones. Asking for the
/// whole set returns a seeded permutation of it.
pub fn class_balanced_indices(set: &LabeledImageSet, total: usize, seed: u64) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::Argument("subset size must be positive".into()));
    }
    if total > set.len() {
        return Err(Error::Argument(format!(
            "subset of {total} requested from {} samples",
            set.len()
        )));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    if total == set.len() {
        let mut all: Vec<usize> = (0..set.len()).collect();
        all.shuffle(&mut order_rng);
        return Ok(all);
    }

    let n = set.num_classes();
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..n).map(|c| (c, Vec::new())).collect();
    for (i, &l) in set.labels().iter().enumerate() {
        by_class.get_mut(&(l as usize)).unwrap().push(i);
    }
    let base = total / n;
    let extra = total % n;
    let short: Vec<String> = by_class
        .iter()
        .filter(|(&c, idx)| idx.len() < base + usize::from(c < extra))
        .map(|(c, idx)| format!("class {c} has {} samples", idx.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::Dataset(format!(
            "cannot draw {total} balanced samples from {}: {}",
            set.name(),
            short.join(", ")
        )));
    }

    let mut picked = Vec::with_capacity(total);
    for (c, mut idx) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(c as u64 + 1)));
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..base + usize::from(c < extra)]);
    }
    picked.shuffle(&mut order_rng);
    Ok(picked)
}

pub fn class_balanced_subset(set: &LabeledImageSet, total: usize, seed: u64) -> Result<LabeledImageSet> {
    let indices = class_balanced_indices(set, total, seed)?;
    set.select(&indices)
}
