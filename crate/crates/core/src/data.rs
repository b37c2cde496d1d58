//! Datasets: CIFAR-10 binary ingestion, seeded synthetic data, batching and
//! class-indexed sampling. Pixels are always raw `[0, 1]` values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, epoch_order, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A batch of images with labels and stable example ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    /// `[n, channels, h, w]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if pixels.shape().len() != 4 || pixels.batch_len() != labels.len() || labels.len() != ids.len() {
            return Err(Error::shape(format!(
                "batch pixels {:?} with {} labels and {} ids",
                pixels.shape(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { pixels, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks pixel range and label range.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(v) = self.pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(())
    }

    pub fn with_pixels(&self, pixels: Tensor) -> Self {
        Self {
            pixels,
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

/// An in-memory labelled image set with a per-class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub num_classes: usize,
    images: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    /// class id → positions of its examples
    per_class_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_parts(
        split: Split,
        num_classes: usize,
        images: Tensor,
        labels: Vec<usize>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        let batch = ImageBatch::new(images, labels, ids)?;
        batch.validate(num_classes)?;
        let mut per_class_index = vec![Vec::new(); num_classes];
        for (pos, &l) in batch.labels.iter().enumerate() {
            per_class_index[l].push(pos);
        }
        Ok(Self {
            split,
            num_classes,
            images: batch.pixels,
            labels: batch.labels,
            ids: batch.ids,
            per_class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_positions(&self, k: usize) -> &[usize] {
        &self.per_class_index[k]
    }

    pub fn batch(&self, positions: &[usize]) -> ImageBatch {
        ImageBatch {
            pixels: self.images.select_rows(positions),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }

    pub fn all(&self) -> ImageBatch {
        ImageBatch {
            pixels: self.images.clone(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }

    /// First `n` examples in storage order.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let pos: Vec<usize> = (0..n).collect();
        let b = self.batch(&pos);
        Self::from_parts(self.split, self.num_classes, b.pixels, b.labels, b.ids)
    }

    /// A seeded class-stratified subset with `per_class` examples per class.
    pub fn stratified(&self, per_class: usize, seed: u64) -> Result<Self> {
        let mut pos = Vec::new();
        for k in 0..self.num_classes {
            let mut p = self.per_class_index[k].clone();
            if p.len() < per_class {
                return Err(Error::contract(format!(
                    "class {k} has {} examples, {per_class} requested",
                    p.len()
                )));
            }
            p.shuffle(&mut rng(derive_seed(seed, &format!("strat-{k}"))));
            pos.extend_from_slice(&p[..per_class]);
        }
        pos.sort_unstable();
        let b = self.batch(&pos);
        Self::from_parts(self.split, self.num_classes, b.pixels, b.labels, b.ids)
    }

    /// Mini-batches for one epoch; the order is a pure function of
    /// `(dataset, seed, epoch)`.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<ImageBatch> {
        epoch_order(self.len(), seed, epoch)
            .chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }

    /// Sequential mini-batches in storage order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<ImageBatch> {
        let pos: Vec<usize> = (0..self.len()).collect();
        pos.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// `n` distinct class-`k` examples, chosen and ordered by `seed`.
pub fn sample_class_subset(ds: &Dataset, k: usize, n: usize, seed: u64) -> Result<ImageBatch> {
    if k >= ds.num_classes {
        return Err(Error::contract(format!("class {k} out of range 0..{}", ds.num_classes)));
    }
    let mut pos = ds.per_class_index[k].clone();
    if n > pos.len() {
        return Err(Error::contract(format!(
            "class {k} has {} examples, {n} requested",
            pos.len()
        )));
    }
    pos.shuffle(&mut rng(derive_seed(seed, &format!("class-subset-{k}"))));
    pos.truncate(n);
    Ok(ds.batch(&pos))
}

// ---- CIFAR-10 ----

const CIFAR_RECORD: usize = 3073;
const CIFAR_PER_FILE: usize = 10_000;

/// Which CIFAR-10 binary batches to read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarLoad {
    /// Number of `data_batch_*.bin` files to read, 1..=5.
    pub train_files: usize,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

impl Default for CifarLoad {
    fn default() -> Self {
        Self {
            train_files: 5,
            max_train: None,
            max_test: None,
        }
    }
}

fn read_cifar_file(path: &Path, id_offset: u64, limit: usize) -> Result<(Vec<f64>, Vec<usize>, Vec<u64>)> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
        return Err(Error::Ingestion {
            file: path.to_path_buf(),
            detail: format!(
                "expected {} bytes ({} records of {}), found {}",
                CIFAR_RECORD * CIFAR_PER_FILE,
                CIFAR_PER_FILE,
                CIFAR_RECORD,
                bytes.len()
            ),
        });
    }
    let n = limit.min(CIFAR_PER_FILE);
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).take(n).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Ingestion {
                file: path.to_path_buf(),
                detail: format!("record {i} has label {label}"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let ids = (0..n as u64).map(|i| id_offset + i).collect();
    Ok((pixels, labels, ids))
}

/// Reads the standard CIFAR-10 binary batches from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, &CifarLoad::default())
}

pub fn load_cifar10_with(dir: &Path, opts: &CifarLoad) -> Result<(Dataset, Dataset)> {
    if !(1..=5).contains(&opts.train_files) {
        return Err(Error::contract("train_files must be in 1..=5"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut remaining = opts.max_train.unwrap_or(usize::MAX);
    for b in 1..=opts.train_files {
        if remaining == 0 {
            break;
        }
        let path: PathBuf = dir.join(format!("data_batch_{b}.bin"));
        let (p, l, i) = read_cifar_file(&path, ((b - 1) * CIFAR_PER_FILE) as u64, remaining)?;
        remaining -= l.len();
        pixels.extend(p);
        labels.extend(l);
        ids.extend(i);
    }
    let n = labels.len();
    let train = Dataset::from_parts(
        Split::Train,
        10,
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        ids,
    )?;
    let (p, l, i) = read_cifar_file(
        &dir.join("test_batch.bin"),
        50_000,
        opts.max_test.unwrap_or(usize::MAX),
    )?;
    let n = l.len();
    let test = Dataset::from_parts(Split::Test, 10, Tensor::new(vec![n, 3, 32, 32], p)?, l, i)?;
    Ok((train, test))
}

// ---- synthetic ----

/// Seeded synthetic classification data.
///
/// Class `k` images are `s · template_k + a · pattern_k + noise_std · n`,
/// clipped to `[0, 1]`, where `template_k` tiles a random `tile × tile`
/// colour patch (large-amplitude, class-specific colour and texture),
/// `pattern_k` tiles a random ±1 `2 × 2` pattern (small-amplitude,
/// high-frequency) and `n` is standard Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub class_signal_strength: f64,
    pub noise_std: f64,
    /// Amplitude `a` of the high-frequency class pattern.
    #[serde(default)]
    pub pattern_strength: f64,
    #[serde(default = "default_tile")]
    pub tile: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

fn default_tile() -> usize {
    4
}

impl SyntheticSpec {
    /// 10 classes × 200 examples of 3×16×16 images.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            num_classes: 10,
            examples_per_class: 200,
            image_size: 16,
            channels: 3,
            class_signal_strength: 0.5,
            noise_std: 0.2,
            pattern_strength: 0.0,
            tile: 4,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.examples_per_class == 0 || self.image_size == 0 || self.channels == 0 || self.tile == 0 {
            return Err(Error::contract("synthetic spec needs positive sizes and ≥ 2 classes"));
        }
        if self.noise_std < 0.0 || self.class_signal_strength < 0.0 || self.pattern_strength < 0.0 {
            return Err(Error::contract("synthetic strengths must be non-negative"));
        }
        Ok(())
    }

    /// Per-class templates and patterns, `[k, c, h, w]` each.
    pub fn templates(&self) -> (Tensor, Tensor) {
        let mut r = rng(derive_seed(self.seed, "templates"));
        let (c, s, t) = (self.channels, self.image_size, self.tile);
        let mut tmpl = Vec::with_capacity(self.num_classes * c * s * s);
        let mut pat = Vec::with_capacity(self.num_classes * c * s * s);
        for _ in 0..self.num_classes {
            let patch: Vec<f64> = (0..c * t * t).map(|_| r.random::<f64>()).collect();
            let signs: Vec<f64> = (0..c * 4)
                .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        tmpl.push(patch[(ch * t + i % t) * t + j % t]);
                        pat.push(signs[(ch * 2 + i % 2) * 2 + j % 2]);
                    }
                }
            }
        }
        let shape = vec![self.num_classes, c, s, s];
        (
            Tensor::from_parts(shape.clone(), tmpl),
            Tensor::from_parts(shape, pat),
        )
    }
}

/// Generates the training split of a synthetic dataset.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    make_synthetic_split(spec, Split::Train)
}

/// Generates one split. Both splits share templates and differ in noise.
pub fn make_synthetic_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (tmpl, pat) = spec.templates();
    let per_image = spec.channels * spec.image_size * spec.image_size;
    let n = spec.num_classes * spec.examples_per_class;
    let mut r = rng(derive_seed(spec.seed, &format!("noise-{split:?}")));
    let mut pixels = Vec::with_capacity(n * per_image);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so storage-order prefixes stay balanced.
    for i in 0..spec.examples_per_class {
        for k in 0..spec.num_classes {
            let t = tmpl.row(k);
            let p = pat.row(k);
            for j in 0..per_image {
                let noise: f64 = StandardNormal.sample(&mut r);
                let v = spec.class_signal_strength * t[j]
                    + spec.pattern_strength * p[j]
                    + spec.noise_std * noise;
                pixels.push(v.clamp(0.0, 1.0));
            }
            labels.push(k);
            let _ = i;
        }
    }
    let id_base = match split {
        Split::Train => 0,
        Split::Test => 1 << 32,
    };
    let ids = (0..n as u64).map(|i| id_base + i).collect();
    Dataset::from_parts(
        split,
        spec.num_classes,
        Tensor::new(vec![n, spec.channels, spec.image_size, spec.image_size], pixels)?,
        labels,
        ids,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            examples_per_class: 5,
            image_size: 6,
            channels: 3,
            class_signal_strength: 0.6,
            noise_std: 0.1,
            pattern_strength: 0.05,
            tile: 3,
            seed: 11,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = make_synthetic(&small()).unwrap();
        let b = make_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        a.all().validate(3).unwrap();
        assert_eq!(a.len(), 15);
        for k in 0..3 {
            assert_eq!(a.class_positions(k).len(), 5);
        }
    }

    #[test]
    fn zero_noise_makes_classes_constant() {
        let mut s = small();
        s.noise_std = 0.0;
        let d = make_synthetic(&s).unwrap();
        for k in 0..3 {
            let pos = d.class_positions(k);
            for &p in pos {
                assert_eq!(d.images().row(p), d.images().row(pos[0]));
            }
        }
    }

    #[test]
    fn train_and_test_share_templates_not_noise() {
        let s = small();
        let tr = make_synthetic_split(&s, Split::Train).unwrap();
        let te = make_synthetic_split(&s, Split::Test).unwrap();
        assert_ne!(tr.images(), te.images());
        assert!(te.ids().iter().all(|id| !tr.ids().contains(id)));
    }

    #[test]
    fn class_subset_contract() {
        let d = make_synthetic(&small()).unwrap();
        let b = sample_class_subset(&d, 1, 5, 3).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.labels.iter().all(|&l| l == 1));
        let mut ids = b.ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        let c = sample_class_subset(&d, 1, 5, 4).unwrap();
        assert_ne!(b.ids, c.ids);
        assert!(sample_class_subset(&d, 1, 6, 3).is_err());
        assert!(sample_class_subset(&d, 3, 1, 3).is_err());
    }

    #[test]
    fn epoch_batches_cover_dataset() {
        let d = make_synthetic(&small()).unwrap();
        let bs = d.epoch_batches(4, 9, 0);
        assert_eq!(bs.len(), 4);
        let mut ids: Vec<u64> = bs.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, d.ids().to_vec());
        assert_eq!(bs, d.epoch_batches(4, 9, 0));
    }
}
