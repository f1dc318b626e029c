//! Labeled image datasets: CIFAR-10 binary ingestion plus a seeded synthetic
//! generator for hermetic tests on machines without the real data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// In-memory labeled image set. Instance ids are indices into `images`.
#[derive(Clone)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Parameter(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic subset of the first `n` examples after a seeded,
    /// class-stratification-free shuffle.
    pub fn sample(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        if n > self.len() {
            return Err(Error::Capacity(format!(
                "requested {n} examples from a {}-example set",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::derived(seed, &format!("subset:{}", self.name)));
        idx.truncate(n);
        idx.sort_unstable();
        Ok(LabeledDataset {
            name: format!("{}[{n}]", self.name),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Indices of examples whose label differs from `excluded`.
    pub fn indices_excluding(&self, excluded: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] != excluded)
            .collect()
    }
}

fn read_cifar_batch(path: &Path, images: &mut Vec<ImageTensor>, labels: &mut Vec<usize>) -> Result<()> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Parameter(format!(
            "{} is not a CIFAR-10 batch: {} bytes is not a multiple of {RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    for record in bytes.chunks_exact(RECORD) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Parameter(format!(
                "label byte {label} > 9 in {}",
                path.display()
            )));
        }
        let data: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(ImageTensor::from_vec(3, 32, 32, data)?);
        labels.push(label);
    }
    Ok(())
}

/// Load the CIFAR-10 binary distribution (`data_batch_{1..5}.bin`,
/// `test_batch.bin`) from `root` or `root/cifar-10-batches-bin`.
pub fn load_cifar10(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let base = if root.join("data_batch_1.bin").exists() {
        root.to_path_buf()
    } else {
        root.join("cifar-10-batches-bin")
    };
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        read_cifar_batch(&base.join(format!("data_batch_{i}.bin")), &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_batch(&base.join("test_batch.bin"), &mut test_images, &mut test_labels)?;
    Ok((
        LabeledDataset::new("cifar10-train", train_images, train_labels, 10)?,
        LabeledDataset::new("cifar10-test", test_images, test_labels, 10)?,
    ))
}

pub fn cifar10_available(root: &Path) -> bool {
    root.join("data_batch_1.bin").exists()
        || root.join("cifar-10-batches-bin/data_batch_1.bin").exists()
}

/// Parameters of the synthetic stand-in dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_size: usize,
    pub test_size: usize,
    pub num_classes: usize,
    pub hw: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_size: 5000,
            test_size: 1000,
            num_classes: 10,
            hw: 32,
            noise_std: 0.12,
            seed: 0,
        }
    }
}

fn class_prototype(class: usize, num_classes: usize, hw: usize, seed: u64) -> ImageTensor {
    // Smooth, low-frequency class signature: per-channel sinusoids with
    // class-specific phases and frequencies, so a small CNN separates classes
    // after a few epochs.
    let mut rng = rng::derived(seed, &format!("proto:{class}/{num_classes}"));
    let mut proto = ImageTensor::zeros(3, hw, hw);
    for c in 0..3 {
        let fx = rng.gen_range(1.0f32..3.0);
        let fy = rng.gen_range(1.0f32..3.0);
        let px = rng.gen_range(0.0f32..std::f32::consts::TAU);
        let py = rng.gen_range(0.0f32..std::f32::consts::TAU);
        for y in 0..hw {
            for x in 0..hw {
                let u = x as f32 / hw as f32 * std::f32::consts::TAU;
                let v = y as f32 / hw as f32 * std::f32::consts::TAU;
                let val = 0.5 + 0.35 * ((fx * u + px).sin() * (fy * v + py).cos());
                proto.set(c, y, x, val);
            }
        }
    }
    proto
}

/// Seeded synthetic classification dataset: each example is its class
/// prototype plus Gaussian pixel noise, clipped to [0,1].
pub fn synthetic_dataset(spec: &SyntheticSpec, split: &str) -> Result<LabeledDataset> {
    let size = match split {
        "train" => spec.train_size,
        "test" => spec.test_size,
        other => {
            return Err(Error::Parameter(format!(
                "unknown split '{other}' (expected train or test)"
            )))
        }
    };
    if spec.num_classes < 2 {
        return Err(Error::Parameter("synthetic dataset needs >= 2 classes".into()));
    }
    let protos: Vec<ImageTensor> = (0..spec.num_classes)
        .map(|c| class_prototype(c, spec.num_classes, spec.hw, spec.seed))
        .collect();
    let mut rng = rng::derived(spec.seed, &format!("synthetic:{split}"));
    let normal = rand_distr::Normal::new(0.0f32, spec.noise_std)
        .map_err(|e| Error::Parameter(format!("noise std: {e}")))?;
    let mut images = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let class = i % spec.num_classes;
        let proto = &protos[class];
        let data: Vec<f32> = proto
            .data()
            .iter()
            .map(|&p| {
                use rand_distr::Distribution;
                (p + normal.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        images.push(ImageTensor::from_vec(3, spec.hw, spec.hw, data)?);
        labels.push(class);
    }
    LabeledDataset::new(
        format!("synthetic-{split}"),
        images,
        labels,
        spec.num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_reproducible_and_balanced() {
        let spec = SyntheticSpec {
            train_size: 40,
            test_size: 20,
            ..Default::default()
        };
        let a = synthetic_dataset(&spec, "train").unwrap();
        let b = synthetic_dataset(&spec, "train").unwrap();
        assert_eq!(a.len(), 40);
        for i in 0..a.len() {
            assert_eq!(a.images[i].data(), b.images[i].data());
        }
        let dogs = a.labels.iter().filter(|&&l| l == 5).count();
        assert_eq!(dogs, 4);
    }

    #[test]
    fn splits_differ() {
        let spec = SyntheticSpec {
            train_size: 10,
            test_size: 10,
            ..Default::default()
        };
        let tr = synthetic_dataset(&spec, "train").unwrap();
        let te = synthetic_dataset(&spec, "test").unwrap();
        assert_ne!(tr.images[0].data(), te.images[0].data());
    }

    #[test]
    fn sample_is_deterministic() {
        let spec = SyntheticSpec {
            train_size: 50,
            test_size: 0,
            ..Default::default()
        };
        let d = synthetic_dataset(&spec, "train").unwrap();
        let a = d.sample(10, 7).unwrap();
        let b = d.sample(10, 7).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images[3].data(), b.images[3].data());
        assert!(d.sample(51, 7).is_err());
    }

    #[test]
    fn cifar_batch_parser_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        // two records: label 3 with all-128 pixels, label 9 with all-255.
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(128u8).take(3072));
        bytes.push(9);
        bytes.extend(std::iter::repeat(255u8).take(3072));
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &bytes).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 2);
        assert_eq!(test.labels, vec![3, 9]);
        assert!((test.images[0].get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(test.images[1].get(2, 31, 31), 1.0);
    }

    #[test]
    fn truncated_batch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), [1u8, 2, 3]).unwrap();
        for i in 2..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), []).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), []).unwrap();
        assert!(load_cifar10(dir.path()).is_err());
    }

    #[test]
    fn label_exclusion_filter() {
        let spec = SyntheticSpec {
            train_size: 30,
            test_size: 0,
            ..Default::default()
        };
        let d = synthetic_dataset(&spec, "train").unwrap();
        let keep = d.indices_excluding(5);
        assert!(keep.iter().all(|&i| d.labels[i] != 5));
        assert_eq!(keep.len(), 27);
    }
}
